import json

import numpy as np
import pytest

from rnnfv.errors import DataError
from rnnfv.evaluation import svm_train
from rnnfv.fv import FimDiagonal, gmm_fit
from rnnfv.io import (BINARY_MAGIC, SequenceDataset, TokenRecord, bind_tokens, convert_dataset, export_model, import_model,
                      load_dataset, load_embeddings, read_container, save_dataset, save_embeddings, vector_set,
                      write_loss_curve)
from rnnfv.numeric import cca_fit, pca_fit
from rnnfv.rnn import EmbeddingTable, FeatureSequence, RnnArchitecture, SymbolSequence, rnn_init


def f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@pytest.fixture
def dataset(rng):
    recs = [FeatureSequence(rng.normal(size=(n, 3)), n % 2, f"r{n}", f"g{n // 2}") for n in range(1, 6)]
    return SequenceDataset(recs, 3, labels=["even", "odd"], meta={"source": "unit"})


class TestDatasets:
    def test_jsonl_round_trip(self, dataset, tmp_path):
        p = tmp_path / "d.jsonl"
        save_dataset(dataset, p)
        back = load_dataset(p)
        assert back.dim == 3 and back.labels == ["even", "odd"] and back.meta == {"source": "unit"}
        for a, b in zip(dataset, back):
            assert (a.id, a.label, a.group) == (b.id, b.label, b.group)
            assert f32(a.vectors).tobytes() == b.vectors.tobytes()

    def test_save_is_stable(self, dataset, tmp_path):
        save_dataset(dataset, tmp_path / "a.jsonl")
        save_dataset(load_dataset(tmp_path / "a.jsonl"), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_binary_round_trip(self, dataset, tmp_path):
        p = tmp_path / "d.sqfv"
        with pytest.warns(UserWarning):
            save_dataset(dataset, p)
        assert p.read_bytes().startswith(BINARY_MAGIC)
        back = load_dataset(p)
        for a, b in zip(dataset, back):
            assert (a.id, a.label) == (b.id, b.label) and b.group is None
            assert f32(a.vectors).tobytes() == b.vectors.tobytes()

    def test_convert(self, dataset, tmp_path):
        plain = SequenceDataset(list(dataset.records), 3)
        save_dataset(SequenceDataset([FeatureSequence(r.vectors, r.label, r.id) for r in plain], 3),
                     tmp_path / "a.jsonl")
        convert_dataset(tmp_path / "a.jsonl", tmp_path / "b.sqfv")
        convert_dataset(tmp_path / "b.sqfv", tmp_path / "c.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "c.jsonl").read_bytes()

    def test_dimension_mismatch_names_record(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        header = {"format": "rnnfv-sequences", "version": 1, "kind": "vectors", "dim": 3, "count": 2}
        lines = [json.dumps(header), json.dumps({"id": "ok", "vectors": [[1, 2, 3]]}),
                 json.dumps({"id": "seq-17", "vectors": [[1, 2]]})]
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="seq-17"):
            load_dataset(p)

    def test_empty_dataset(self, tmp_path):
        save_dataset(SequenceDataset([], 4), tmp_path / "e.jsonl")
        back = load_dataset(tmp_path / "e.jsonl")
        assert len(back) == 0 and back.dim == 4

    def test_unknown_version(self, tmp_path):
        p = tmp_path / "v.jsonl"
        p.write_text(json.dumps({"format": "rnnfv-sequences", "version": 9, "dim": 2}) + "\n")
        with pytest.raises(DataError, match="version"):
            load_dataset(p)

    def test_count_mismatch(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text(json.dumps({"format": "rnnfv-sequences", "version": 1, "dim": 1, "count": 2}) + "\n"
                     + json.dumps({"id": "a", "vectors": [[1]]}) + "\n")
        with pytest.raises(DataError):
            load_dataset(p)

    def test_truncated_binary(self, dataset, tmp_path):
        p = tmp_path / "t.sqfv"
        save_dataset(SequenceDataset([FeatureSequence(r.vectors, r.label, r.id) for r in dataset], 3), p)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(DataError):
            load_dataset(p)

    def test_duplicate_ids(self):
        with pytest.raises(DataError):
            SequenceDataset([FeatureSequence([[1.0]], id="x"), FeatureSequence([[2.0]], id="x")], 1)

    def test_vector_set(self):
        ds = vector_set(np.eye(3), ["a", "b", "c"], labels=[0, 1, 0])
        assert ds.label_array.tolist() == [0, 1, 0] and len(ds.records[1]) == 1

    def test_tokens(self, tmp_path):
        table = EmbeddingTable(["a", "b"], np.eye(2))
        ds = SequenceDataset([TokenRecord("s1", ("a", "b", "a"), 1)], 2, kind="tokens")
        save_dataset(ds, tmp_path / "t.jsonl")
        back = load_dataset(tmp_path / "t.jsonl")
        seqs = bind_tokens(back, table, "classification")
        assert isinstance(seqs[0], SymbolSequence) and list(seqs[0].symbols) == [0, 1, 0]
        feats = bind_tokens(back, table, "regression")
        np.testing.assert_array_equal(feats[0].vectors, np.eye(2)[[0, 1, 0]])

    def test_unknown_token(self):
        table = EmbeddingTable(["a"], np.eye(1))
        ds = SequenceDataset([TokenRecord("s9", ("a", "zz"))], 1, kind="tokens")
        with pytest.raises(DataError, match="zz"):
            bind_tokens(ds, table, "classification")


class TestEmbeddings:
    def test_round_trip(self, embeddings, tmp_path):
        save_embeddings(embeddings, tmp_path / "e.txt")
        back = load_embeddings(tmp_path / "e.txt")
        assert back.alphabet == embeddings.alphabet
        assert back.vectors.tobytes() == f32(embeddings.vectors).tobytes()

    def test_bad_row(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("2 2\na 1 2\nb 3\n")
        with pytest.raises(DataError):
            load_embeddings(p)


class TestContainers:
    def _models(self, rng):
        X = rng.normal(size=(40, 4))
        Y = X @ rng.normal(size=(4, 3)) + rng.normal(size=(40, 3))
        return [
            rnn_init(RnnArchitecture(3, 4, 3, fc1_units=5, dropout_rate=0.2), 7),
            gmm_fit(X, 2, seed=0),
            pca_fit(X, 2),
            cca_fit(X, Y, 2, lam=1e-3),
            svm_train(X, (X[:, 0] > 0).astype(int), epochs=2),
            FimDiagonal(np.arange(1.0, 5.0)),
        ]

    def test_bitwise_round_trip(self, rng, tmp_path):
        for i, model in enumerate(self._models(rng)):
            p = tmp_path / f"m{i}.npz"
            export_model(model, p, extra={"note": i})
            back = import_model(p)
            assert type(back) is type(model)
            kind, _, extra, arrays = read_container(p)
            assert extra == {"note": i}
            for name, arr in arrays.items():
                assert arr.dtype == np.float64
            if hasattr(model, "flat"):
                assert back.flat().tobytes() == model.flat().tobytes()
                assert back.architecture == model.architecture
            else:
                for f in model.__dataclass_fields__:
                    a, b = getattr(model, f), getattr(back, f)
                    if isinstance(a, np.ndarray):
                        assert a.tobytes() == b.tobytes(), (kind, f)
                    else:
                        assert a == b, (kind, f)

    def test_type_mismatch(self, rng, tmp_path):
        export_model(FimDiagonal([1.0]), tmp_path / "f.npz")
        with pytest.raises(DataError, match="expected"):
            import_model(tmp_path / "f.npz", expected_type="rnn")

    def test_unknown_version(self, tmp_path):
        blob = json.dumps({"format": "rnnfv-model", "version": 2, "type": "fim", "meta": {}}).encode()
        np.savez(tmp_path / "v.npz", __header__=np.frombuffer(blob, dtype=np.uint8))
        with pytest.raises(DataError, match="version"):
            import_model(tmp_path / "v.npz")

    def test_corrupt(self, tmp_path):
        p = tmp_path / "c.npz"
        p.write_bytes(b"not a zip at all")
        with pytest.raises(DataError):
            import_model(p)

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            import_model(tmp_path / "nope.npz")


def test_loss_curve_csv(tmp_path):
    write_loss_curve([(1, 2.5, None), (2, 2.0, 2.25)], tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text() == "epoch,train_nll,valid_nll\n1,2.5,\n2,2.0,2.25\n"
