"""File formats: sequence datasets (JSON lines or packed SQFV1 binary),
embedding tables, versioned model containers and loss-curve CSVs.

Every write goes to a temporary file in the target directory and is then
renamed into place.
"""

from __future__ import annotations

import contextlib
import csv
import io as _io
import json
import os
import struct
import tempfile
import warnings
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .evaluation import LinearSvmModel
from .fv import FimDiagonal, GmmModel
from .numeric import CcaModel, PcaModel
from .rnn import EmbeddingTable, FeatureSequence, RnnArchitecture, RnnModel, SymbolSequence

DATASET_FORMAT = "rnnfv-sequences"
CONTAINER_FORMAT = "rnnfv-model"
FORMAT_VERSION = 1
BINARY_MAGIC = b"SQFV1"


@contextlib.contextmanager
def atomic_write(path, mode="w"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8", "newline": "\n"})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class TokenRecord:
    """A symbol sequence before it is bound to an embedding table."""

    id: str
    tokens: tuple
    label: Optional[int] = None
    group: Optional[str] = None

    def __len__(self):
        return len(self.tokens)


@dataclass
class SequenceDataset:
    records: list
    dim: int
    kind: str = "vectors"
    labels: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("vectors", "tokens"):
            raise DataError(f"unknown dataset kind {self.kind!r}")
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DataError(f"duplicate record id {r.id!r}")
            seen.add(r.id)
            if self.kind == "vectors" and r.dim != self.dim:
                raise DataError(f"record {r.id!r}: dimension {r.dim} does not match header dimension {self.dim}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def label_array(self) -> np.ndarray:
        if any(r.label is None for r in self.records):
            raise DataError("dataset has unlabeled records")
        return np.array([r.label for r in self.records], dtype=np.int64)

    def subset(self, indices) -> "SequenceDataset":
        return SequenceDataset([self.records[i] for i in indices], self.dim, self.kind, self.labels, dict(self.meta))


def vector_set(matrix, ids, labels=None, groups=None, meta=None, label_names=None) -> SequenceDataset:
    """Wrap one vector per record (e.g. pooled or Fisher vectors) as a dataset."""
    matrix = np.asarray(matrix, dtype=np.float64)
    records = [
        FeatureSequence(matrix[i:i + 1], None if labels is None else int(labels[i]), ids[i],
                        None if groups is None else groups[i])
        for i in range(matrix.shape[0])
    ]
    return SequenceDataset(records, matrix.shape[1], "vectors", label_names, dict(meta or {}))


def _f32_text(values: np.ndarray) -> str:
    return "[" + ",".join(str(x) for x in values.astype(np.float32)) + "]"


def _record_line(r, kind) -> str:
    head = {"id": r.id}
    if r.label is not None:
        head["label"] = int(r.label)
    if r.group is not None:
        head["group"] = r.group
    text = json.dumps(head)[:-1]
    if kind == "tokens":
        return text + ', "tokens": ' + json.dumps(list(r.tokens)) + "}"
    rows = ",".join(_f32_text(row) for row in r.vectors)
    return text + ', "vectors": [' + rows + "]}"


def save_dataset(dataset: SequenceDataset, path, binary: Optional[bool] = None):
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".sqfv"
    if binary:
        return _save_binary(dataset, path)
    header = {"format": DATASET_FORMAT, "version": FORMAT_VERSION, "kind": dataset.kind,
              "dim": dataset.dim, "count": len(dataset)}
    if dataset.labels is not None:
        header["labels"] = list(dataset.labels)
    if dataset.meta:
        header["meta"] = dataset.meta
    with atomic_write(path) as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in dataset.records:
            fh.write(_record_line(r, dataset.kind) + "\n")


def _save_binary(dataset: SequenceDataset, path: Path):
    if dataset.kind != "vectors":
        raise DataError("the SQFV1 binary format only holds vector sequences")
    if any(r.group is not None for r in dataset.records) or dataset.labels or dataset.meta:
        warnings.warn("SQFV1 has no group, label-name or metadata fields; they are dropped", stacklevel=3)
    with atomic_write(path, "wb") as fh:
        fh.write(BINARY_MAGIC + struct.pack("<IQ", dataset.dim, len(dataset)))
        for r in dataset.records:
            ident = r.id.encode("utf-8")
            label = -1 if r.label is None else int(r.label)
            fh.write(struct.pack("<I", len(ident)) + ident + struct.pack("<iI", label, len(r)))
            fh.write(np.ascontiguousarray(r.vectors, dtype="<f4").tobytes())


def _parse_header(line: str) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed dataset header: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
        raise DataError("malformed dataset header: missing format tag")
    if header.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported dataset version {header.get('version')!r}")
    if not isinstance(header.get("dim"), int) or header["dim"] < 1:
        raise DataError("malformed dataset header: 'dim' must be a positive integer")
    return header


def load_dataset(path) -> SequenceDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such dataset: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(BINARY_MAGIC)) == BINARY_MAGIC:
            return _load_binary(path)
    with open(path, encoding="utf-8") as fh:
        header = _parse_header(fh.readline())
        kind = header.get("kind", "vectors")
        dim = header["dim"]
        records = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rid = str(rec["id"])
            except (json.JSONDecodeError, KeyError, TypeError):
                raise DataError(f"{path}:{lineno}: malformed record") from None
            label = rec.get("label")
            group = rec.get("group")
            if kind == "tokens":
                records.append(TokenRecord(rid, tuple(rec["tokens"]), label, group))
                continue
            vec = np.asarray(rec.get("vectors"), dtype=np.float32).astype(np.float64)
            if vec.ndim != 2 or vec.shape[1] != dim:
                raise DataError(f"record {rid!r}: vectors of shape {vec.shape} do not match header dimension {dim}")
            records.append(FeatureSequence(vec, label, rid, group))
    if "count" in header and header["count"] != len(records):
        raise DataError(f"header announces {header['count']} records, found {len(records)}")
    return SequenceDataset(records, dim, kind, header.get("labels"), header.get("meta", {}))


def _load_binary(path: Path) -> SequenceDataset:
    data = path.read_bytes()
    try:
        dim, count = struct.unpack_from("<IQ", data, len(BINARY_MAGIC))
        pos = len(BINARY_MAGIC) + 12
        records = []
        for _ in range(count):
            (n_id,) = struct.unpack_from("<I", data, pos)
            pos += 4
            rid = data[pos:pos + n_id].decode("utf-8")
            pos += n_id
            label, n = struct.unpack_from("<iI", data, pos)
            pos += 8
            nbytes = 4 * n * dim
            if pos + nbytes > len(data):
                raise DataError(f"record {rid!r}: truncated vector block")
            vec = np.frombuffer(data, dtype="<f4", count=n * dim, offset=pos).reshape(n, dim).astype(np.float64)
            pos += nbytes
            records.append(FeatureSequence(vec, None if label < 0 else label, rid))
    except struct.error as exc:
        raise DataError(f"{path}: truncated binary dataset ({exc})") from None
    if pos != len(data):
        raise DataError(f"{path}: trailing bytes after {count} records")
    return SequenceDataset(records, dim)


def convert_dataset(src, dst):
    save_dataset(load_dataset(src), dst)


def bind_tokens(dataset: SequenceDataset, table: EmbeddingTable, mode: str) -> list:
    """Turn token records into SymbolSequences (classification) or
    FeatureSequences through the table (regression). Unknown tokens raise."""
    if dataset.kind == "vectors":
        return list(dataset.records)
    out = []
    for r in dataset.records:
        ids = table.ids(r.tokens, context=f"record {r.id!r}: ")
        seq = SymbolSequence(ids, table, r.id, r.label, r.group)
        out.append(seq if mode == "classification" else seq.to_features())
    return out


# ---------------------------------------------------------------------------
# embedding tables


def load_embeddings(path) -> EmbeddingTable:
    """Text format: a ``"M D"`` header line, then ``token v_1 ... v_D`` per line."""
    with open(path, encoding="utf-8") as fh:
        try:
            m, d = (int(x) for x in fh.readline().split())
        except ValueError:
            raise DataError(f"{path}: malformed embedding header") from None
        tokens, rows = [], []
        for line in fh:
            parts = line.rstrip("\n").split(" ")
            if not line.strip():
                continue
            if len(parts) != d + 1:
                raise DataError(f"{path}: token {parts[0]!r} has {len(parts) - 1} values, expected {d}")
            tokens.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    if len(tokens) != m:
        raise DataError(f"{path}: header announces {m} symbols, found {len(tokens)}")
    return EmbeddingTable(tokens, np.asarray(rows, dtype=np.float32).astype(np.float64).reshape(m, d))


def save_embeddings(table: EmbeddingTable, path):
    with atomic_write(path) as fh:
        fh.write(f"{table.size} {table.dim}\n")
        for tok, row in zip(table.alphabet, table.vectors):
            fh.write(tok + " " + " ".join(str(x) for x in row.astype(np.float32)) + "\n")


# ---------------------------------------------------------------------------
# model container


def _to_payload(model):
    if isinstance(model, RnnModel):
        arch = model.architecture
        meta = {"architecture": {k: getattr(arch, k) for k in arch.__dataclass_fields__}, "rng_seed": model.rng_seed}
        return "rnn", meta, dict(model.params)
    if isinstance(model, GmmModel):
        return "gmm", {"log_likelihood_history": list(model.log_likelihood_history)}, \
            {"weights": model.weights, "means": model.means, "sigmas": model.sigmas}
    if isinstance(model, PcaModel):
        return "pca", {}, {"mean": model.mean, "components": model.components,
                           "explained_variance": model.explained_variance}
    if isinstance(model, CcaModel):
        return "cca", {"regularization": model.regularization}, {
            "projection_x": model.projection_x, "projection_y": model.projection_y,
            "mean_x": model.mean_x, "mean_y": model.mean_y, "correlations": model.correlations}
    if isinstance(model, LinearSvmModel):
        return "svm", {"classes": list(model.classes), "C": model.C}, {"weights": model.weights, "bias": model.bias}
    if isinstance(model, FimDiagonal):
        return "fim", {"floor": model.floor}, {"values": model.values}
    raise TypeError(f"cannot export {type(model).__name__}")


def _from_payload(kind, meta, arrays):
    if kind == "rnn":
        return RnnModel(RnnArchitecture(**meta["architecture"]), arrays, meta["rng_seed"])
    if kind == "gmm":
        return GmmModel(arrays["weights"], arrays["means"], arrays["sigmas"], meta.get("log_likelihood_history", ()))
    if kind == "pca":
        return PcaModel(**arrays)
    if kind == "cca":
        return CcaModel(regularization=meta["regularization"], **arrays)
    if kind == "svm":
        return LinearSvmModel(tuple(meta["classes"]), arrays["weights"], arrays["bias"], meta["C"])
    if kind == "fim":
        return FimDiagonal(arrays["values"], meta["floor"])
    raise DataError(f"unknown model type {kind!r}")


def export_model(model, path, extra: Optional[dict] = None):
    """Write ``model`` into a versioned npz container (float64 payloads, bitwise)."""
    kind, meta, arrays = _to_payload(model)
    header = {"format": CONTAINER_FORMAT, "version": FORMAT_VERSION, "type": kind, "meta": meta,
              "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = _io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(blob, dtype=np.uint8),
             **{f"a:{k}": np.asarray(v, dtype=np.float64) for k, v in arrays.items()})
    with atomic_write(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_container(path):
    """Return ``(type, meta, extra, arrays)`` after validating the header."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            header = json.loads(npz["__header__"].tobytes().decode("utf-8"))
            arrays = {k[2:]: npz[k] for k in npz.files if k.startswith("a:")}
    except FileNotFoundError:
        raise DataError(f"no such model container: {path}") from None
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt model container ({exc})") from None
    if header.get("format") != CONTAINER_FORMAT:
        raise DataError(f"{path}: not a model container")
    if header.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported container version {header.get('version')!r}")
    return header["type"], header.get("meta", {}), header.get("extra", {}), arrays


def import_model(path, expected_type: Optional[str] = None):
    kind, meta, _, arrays = read_container(path)
    if expected_type is not None and kind != expected_type:
        raise DataError(f"{path}: container holds a {kind!r} model, expected {expected_type!r}")
    return _from_payload(kind, meta, arrays)


def write_loss_curve(curve, path):
    with atomic_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_nll", "valid_nll"])
        for epoch, tr, va in curve:
            writer.writerow([epoch, repr(tr), "" if va is None else repr(va)])
