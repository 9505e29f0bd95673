"""FC -> LSTM -> FC next-element predictor with exact backpropagation through time.

The network reads ``x_0 = 0, x_1, ..., x_{N-1}`` and at step ``i`` predicts
``x_{i+1}`` (regression, Gaussian likelihood with identity covariance) or the
symbol ``w_{i+1}`` (classification, softmax). The same backward pass is used
for training and, at inference time, for extracting Fisher vectors.

Everything runs on padded mini-batches of shape ``(batch, time, features)``
with a boolean step mask; padded steps never feed back into real ones because
the network is causal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DataError, DivergenceError

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
MODES = ("regression", "classification")
OUTPUT_LAYER = ("out.weight", "out.bias")


@dataclass(frozen=True)
class FeatureSequence:
    vectors: np.ndarray
    label: Optional[int] = None
    id: str = ""
    group: Optional[str] = None

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise DataError(f"sequence {self.id!r}: expected a non-empty (N, D) array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError(f"sequence {self.id!r}: non-finite entries")
        v.flags.writeable = False
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class EmbeddingTable:
    alphabet: tuple
    vectors: np.ndarray

    def __post_init__(self):
        alphabet = tuple(self.alphabet)
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != len(alphabet):
            raise DataError(f"embedding table: {len(alphabet)} symbols but vectors of shape {v.shape}")
        if len(set(alphabet)) != len(alphabet):
            raise DataError("embedding table: duplicate symbols")
        if not np.all(np.isfinite(v)):
            raise DataError("embedding table: non-finite entries")
        v.flags.writeable = False
        object.__setattr__(self, "alphabet", alphabet)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(alphabet)})

    @property
    def size(self) -> int:
        return len(self.alphabet)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def ids(self, tokens, context="") -> np.ndarray:
        try:
            return np.array([self._index[t] for t in tokens], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"{context}out-of-vocabulary token {exc.args[0]!r}") from None


@dataclass(frozen=True)
class SymbolSequence:
    symbols: np.ndarray
    embeddings: EmbeddingTable
    id: str = ""
    label: Optional[int] = None
    group: Optional[str] = None

    def __post_init__(self):
        s = np.array(self.symbols, dtype=np.int64).reshape(-1)
        if s.size < 1:
            raise DataError(f"sequence {self.id!r}: empty symbol sequence")
        if s.min() < 0 or s.max() >= self.embeddings.size:
            raise DataError(f"sequence {self.id!r}: symbol id out of range [0, {self.embeddings.size})")
        s.flags.writeable = False
        object.__setattr__(self, "symbols", s)

    def __len__(self):
        return self.symbols.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.dim

    def to_features(self) -> FeatureSequence:
        return FeatureSequence(self.embeddings.vectors[self.symbols], self.label, self.id, self.group)


AnySequence = Union[FeatureSequence, SymbolSequence]


@dataclass(frozen=True)
class RnnArchitecture:
    """Layer sizes. ``fc1_units=None`` feeds the input straight into the LSTM."""

    input_dim: int
    lstm_units: int
    output_dim: int
    fc1_units: Optional[int] = None
    leaky_relu_slope: float = 0.1
    mode: str = "regression"
    dropout_rate: float = 0.0

    def __post_init__(self):
        counts = [self.input_dim, self.lstm_units, self.output_dim]
        if self.fc1_units is not None:
            counts.append(self.fc1_units)
        if any(int(c) != c or c < 1 for c in counts):
            raise ValueError(f"unit counts must be positive integers: {counts}")
        if self.leaky_relu_slope <= 0:
            raise ValueError("leaky_relu_slope must be > 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.mode == "regression" and self.output_dim != self.input_dim:
            raise ValueError("regression mode predicts the next input: output_dim must equal input_dim")

    @property
    def lstm_input_dim(self) -> int:
        return self.input_dim if self.fc1_units is None else self.fc1_units

    def param_shapes(self) -> dict:
        shapes = {}
        if self.fc1_units is not None:
            shapes["fc1.weight"] = (self.fc1_units, self.input_dim)
            shapes["fc1.bias"] = (self.fc1_units,)
        h = self.lstm_units
        # gate blocks stacked as [input, forget, cell, output]
        shapes["lstm.weight_ih"] = (4 * h, self.lstm_input_dim)
        shapes["lstm.weight_hh"] = (4 * h, h)
        shapes["lstm.bias"] = (4 * h,)
        shapes["out.weight"] = (self.output_dim, h)
        shapes["out.bias"] = (self.output_dim,)
        return shapes


@dataclass(frozen=True)
class RnnModel:
    architecture: RnnArchitecture
    params: dict
    rng_seed: int = 0

    def __post_init__(self):
        shapes = self.architecture.param_shapes()
        if set(shapes) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} do not match architecture {sorted(shapes)}")
        frozen = {}
        for name, shape in shapes.items():
            arr = np.array(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite weights")
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "params", frozen)

    @property
    def param_names(self) -> tuple:
        return tuple(self.architecture.param_shapes())

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat(self, names=None) -> np.ndarray:
        names = self.param_names if names is None else names
        return np.concatenate([self.params[n].ravel() for n in names])

    def with_flat(self, vec, names=None) -> "RnnModel":
        names = self.param_names if names is None else names
        params = dict(self.params)
        offset = 0
        for n in names:
            size = params[n].size
            params[n] = np.asarray(vec[offset:offset + size]).reshape(params[n].shape)
            offset += size
        return replace(self, params=params)


@dataclass(frozen=True)
class ForwardTrace:
    """Per-step quantities of one sequence; row ``i`` corresponds to input ``x_i``."""

    outputs: np.ndarray
    hidden: np.ndarray
    cell: np.ndarray
    gates: np.ndarray
    fc1: Optional[np.ndarray]
    probabilities: Optional[np.ndarray] = None

    def __len__(self):
        return self.outputs.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    gradient_clip_norm: float = 5.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0 or self.gradient_clip_norm <= 0:
            raise ValueError("weight_decay must be >= 0 and gradient_clip_norm > 0")


@dataclass(frozen=True)
class Checkpoint:
    epoch: int
    model: RnnModel
    train_nll: float
    valid_nll: Optional[float]


@dataclass
class TrainResult:
    model: RnnModel
    loss_curve: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    initial_train_nll: float = float("nan")


def _glorot(rng, shape):
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def rnn_init(arch: RnnArchitecture, seed: int) -> RnnModel:
    """Glorot-uniform weights, zero biases except the forget gate (set to 1)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if len(shape) == 2:
            if name == "lstm.weight_ih" or name == "lstm.weight_hh":
                h = arch.lstm_units
                params[name] = np.concatenate([_glorot(rng, (h, shape[1])) for _ in range(4)])
            else:
                params[name] = _glorot(rng, shape)
        else:
            params[name] = np.zeros(shape)
    params["lstm.bias"][arch.lstm_units:2 * arch.lstm_units] = 1.0
    return RnnModel(arch, params, rng_seed=seed)


def zero_model(arch: RnnArchitecture) -> RnnModel:
    return RnnModel(arch, {n: np.zeros(s) for n, s in arch.param_shapes().items()})


# ---------------------------------------------------------------------------
# batched core


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_softmax(v):
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_sequence(model: RnnModel, seq: AnySequence):
    arch = model.architecture
    if seq.dim != arch.input_dim:
        raise DataError(f"sequence {seq.id!r}: dimension {seq.dim} does not match model input {arch.input_dim}")
    if arch.mode == "classification":
        if not isinstance(seq, SymbolSequence):
            raise ValueError("classification mode needs SymbolSequence inputs")
        if seq.embeddings.size != arch.output_dim:
            raise DataError(f"alphabet size {seq.embeddings.size} does not match output_dim {arch.output_dim}")


def _batch(model: RnnModel, seqs: Sequence[AnySequence]):
    """Pad sequences into ``(inputs, targets, mask)``; step ``t`` reads x_t and predicts element t+1."""
    for s in seqs:
        _check_sequence(model, s)
    lengths = np.array([len(s) for s in seqs])
    B, T, D = len(seqs), int(lengths.max()), model.architecture.input_dim
    inputs = np.zeros((B, T, D))
    mask = np.arange(T)[None, :] < lengths[:, None]
    if model.architecture.mode == "classification":
        targets = np.zeros((B, T), dtype=np.int64)
        for b, s in enumerate(seqs):
            inputs[b, 1:len(s)] = s.embeddings.vectors[s.symbols[:-1]]
            targets[b, :len(s)] = s.symbols
    else:
        targets = np.zeros((B, T, D))
        for b, s in enumerate(seqs):
            vec = s.to_features().vectors if isinstance(s, SymbolSequence) else s.vectors
            inputs[b, 1:len(s)] = vec[:-1]
            targets[b, :len(s)] = vec
    return inputs, targets, mask


def _forward(model: RnnModel, inputs, drop_mask=None):
    p = model.params
    arch = model.architecture
    cache = {"x": inputs, "drop": drop_mask}
    if arch.fc1_units is not None:
        a1 = inputs @ p["fc1.weight"].T + p["fc1.bias"]
        h1 = np.where(a1 > 0, a1, arch.leaky_relu_slope * a1)
        if drop_mask is not None:
            h1 = h1 * drop_mask
        cache["a1"] = a1
    else:
        h1 = inputs
    cache["h1"] = h1
    B, T, _ = inputs.shape
    H = arch.lstm_units
    zx = h1 @ p["lstm.weight_ih"].T + p["lstm.bias"]
    gates = np.empty((B, T, 4 * H))
    cell = np.empty((B, T, H))
    hidden = np.empty((B, T, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    whh_t = p["lstm.weight_hh"].T
    for t in range(T):
        z = zx[:, t] + h @ whh_t
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t] = np.concatenate([i, f, g, o], axis=1)
        cell[:, t] = c
        hidden[:, t] = h
    cache.update(gates=gates, cell=cell, hidden=hidden)
    cache["v"] = hidden @ p["out.weight"].T + p["out.bias"]
    return cache


def _output_grad(model: RnnModel, cache, targets, mask):
    """Per-sequence NLL and dNLL/dv (zero on padded steps)."""
    v = cache["v"]
    m = mask[..., None].astype(np.float64)
    if model.architecture.mode == "regression":
        resid = (v - targets) * m
        nll = 0.5 * np.sum(resid ** 2, axis=(1, 2)) + 0.5 * mask.sum(axis=1) * v.shape[2] * LOG_2PI
        return nll, resid
    logp = _log_softmax(v)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    nll = -np.sum(np.where(mask, picked, 0.0), axis=1)
    dv = np.exp(logp)
    np.put_along_axis(dv, targets[..., None], np.take_along_axis(dv, targets[..., None], axis=-1) - 1.0, axis=-1)
    return nll, dv * m


def _backward(model: RnnModel, cache, dv, per_sample: bool, output_only: bool = False) -> dict:
    """Gradients of ``sum(dv * v)``; with ``per_sample`` each array gains a leading batch axis."""
    p = model.params
    arch = model.architecture
    ein = (lambda subs, *ops: np.einsum(subs.replace("->", "->b"), *ops)) if per_sample else np.einsum
    hidden = cache["hidden"]
    grads = {
        "out.weight": ein("bto,bth->oh", dv, hidden),
        "out.bias": dv.sum(axis=1) if per_sample else dv.sum(axis=(0, 1)),
    }
    if output_only:
        return grads
    H = arch.lstm_units
    B, T, _ = dv.shape
    gates, cell = cache["gates"], cache["cell"]
    dH = dv @ p["out.weight"]
    dZ = np.empty((B, T, 4 * H))
    dh_rec = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    whh = p["lstm.weight_hh"]
    for t in range(T - 1, -1, -1):
        i, f, g, o = (gates[:, t, k * H:(k + 1) * H] for k in range(4))
        tc = np.tanh(cell[:, t])
        c_prev = cell[:, t - 1] if t > 0 else np.zeros((B, H))
        dh = dH[:, t] + dh_rec
        dc = dh * o * (1.0 - tc ** 2) + dc_next
        dZ[:, t] = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g ** 2),
            dh * tc * o * (1.0 - o),
        ], axis=1)
        dc_next = dc * f
        dh_rec = dZ[:, t] @ whh
    h1 = cache["h1"]
    grads["lstm.weight_ih"] = ein("btz,bti->zi", dZ, h1)
    grads["lstm.weight_hh"] = ein("btz,bth->zh", dZ[:, 1:], hidden[:, :-1])
    grads["lstm.bias"] = dZ.sum(axis=1) if per_sample else dZ.sum(axis=(0, 1))
    if arch.fc1_units is not None:
        dh1 = dZ @ p["lstm.weight_ih"]
        if cache["drop"] is not None:
            dh1 = dh1 * cache["drop"]
        da1 = dh1 * np.where(cache["a1"] > 0, 1.0, arch.leaky_relu_slope)
        grads["fc1.weight"] = ein("bth,btd->hd", da1, cache["x"])
        grads["fc1.bias"] = da1.sum(axis=1) if per_sample else da1.sum(axis=(0, 1))
    return grads


def _chunks(seqs, size):
    for start in range(0, len(seqs), size):
        yield seqs[start:start + size]


# ---------------------------------------------------------------------------
# single-sequence API


def rnn_forward(model: RnnModel, seq: AnySequence, inference_mode: bool = True,
                rng: Optional[np.random.Generator] = None) -> ForwardTrace:
    """Run the network over ``x_0..x_{N-1}``; dropout is applied only when
    ``inference_mode`` is False (an ``rng`` is then required)."""
    inputs, _, _ = _batch(model, [seq])
    drop = None
    arch = model.architecture
    if not inference_mode and arch.dropout_rate > 0 and arch.fc1_units is not None:
        if rng is None:
            raise ValueError("training-mode forward with dropout needs an rng")
        keep = 1.0 - arch.dropout_rate
        drop = (rng.random((1, inputs.shape[1], arch.fc1_units)) < keep) / keep
    cache = _forward(model, inputs, drop)
    probs = None
    if arch.mode == "classification":
        probs = np.exp(_log_softmax(cache["v"][0]))
    return ForwardTrace(
        outputs=cache["v"][0], hidden=cache["hidden"][0], cell=cache["cell"][0],
        gates=cache["gates"][0], fc1=cache["h1"][0] if arch.fc1_units is not None else None,
        probabilities=probs,
    )


def nll_regression(model: RnnModel, seq: AnySequence) -> float:
    """(N*D/2) log(2 pi) + 1/2 sum_i ||x_{i+1} - v_i||^2."""
    if model.architecture.mode != "regression":
        raise ValueError("nll_regression needs a regression-mode model")
    return float(sequence_nll(model, [seq])[0])


def nll_classification(model: RnnModel, seq: SymbolSequence) -> float:
    """-sum_i log p^i_{w_{i+1}}."""
    if model.architecture.mode != "classification":
        raise ValueError("nll_classification needs a classification-mode model")
    return float(sequence_nll(model, [seq])[0])


def rnn_backprop(model: RnnModel, seq: AnySequence, step_mask=None) -> dict:
    """Exact BPTT gradient of the sequence NLL with respect to every parameter.

    ``step_mask`` (length N, optional) weights the per-step losses; masking all
    but one step yields that step's contribution alone.
    """
    inputs, targets, mask = _batch(model, [seq])
    cache = _forward(model, inputs)
    _, dv = _output_grad(model, cache, targets, mask)
    if step_mask is not None:
        w = np.asarray(step_mask, dtype=np.float64)
        if w.shape != (len(seq),):
            raise ValueError(f"step_mask must have length {len(seq)}")
        dv = dv * w[None, :, None]
    return _backward(model, cache, dv, per_sample=False)


# ---------------------------------------------------------------------------
# batched API


def sequence_nll(model: RnnModel, seqs: Sequence[AnySequence], chunk: int = 256) -> np.ndarray:
    out = []
    for part in _chunks(list(seqs), chunk):
        inputs, targets, mask = _batch(model, part)
        nll, _ = _output_grad(model, _forward(model, inputs), targets, mask)
        out.append(nll)
    return np.concatenate(out) if out else np.zeros(0)


def sequence_gradients(model: RnnModel, seqs: Sequence[AnySequence], names=OUTPUT_LAYER,
                       chunk: int = 128) -> np.ndarray:
    """Per-sequence NLL gradients, flattened over ``names`` in order; shape (len(seqs), P)."""
    names = tuple(names)
    output_only = set(names) <= set(OUTPUT_LAYER)
    rows = []
    for part in _chunks(list(seqs), chunk):
        inputs, targets, mask = _batch(model, part)
        cache = _forward(model, inputs)
        _, dv = _output_grad(model, cache, targets, mask)
        g = _backward(model, cache, dv, per_sample=True, output_only=output_only)
        rows.append(np.concatenate([g[n].reshape(len(part), -1) for n in names], axis=1))
    return np.concatenate(rows) if rows else np.zeros((0, sum(model.params[n].size for n in names)))


def _adam_step(params, grads, state, cfg: TrainConfig):
    state["t"] += 1
    t = state["t"]
    for n in params:
        m = state["m"][n] = cfg.beta1 * state["m"][n] + (1 - cfg.beta1) * grads[n]
        v = state["v"][n] = cfg.beta2 * state["v"][n] + (1 - cfg.beta2) * grads[n] ** 2
        mhat = m / (1 - cfg.beta1 ** t)
        vhat = v / (1 - cfg.beta2 ** t)
        params[n] = params[n] - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)


def rnn_train(model: RnnModel, train: Sequence[AnySequence], valid: Optional[Sequence[AnySequence]],
              cfg: TrainConfig, checkpoint_sink: Optional[Callable[[Checkpoint], None]] = None) -> TrainResult:
    """Train with Adam on the mean per-sequence NLL (+ L2 weight decay on weight matrices).

    After every epoch a :class:`Checkpoint` is passed to ``checkpoint_sink``
    (or collected in the result when no sink is given). Model selection is
    left to the caller.
    """
    train = list(train)
    valid = list(valid) if valid else []
    if not train:
        raise DataError("rnn_train: empty training set")
    for s in train + valid:
        _check_sequence(model, s)
    arch = model.architecture
    rng = np.random.default_rng(cfg.seed)
    params = {n: np.array(p) for n, p in model.params.items()}
    state = {"t": 0, "m": {n: np.zeros_like(p) for n, p in params.items()},
             "v": {n: np.zeros_like(p) for n, p in params.items()}}
    decayed = [n for n in params if n.endswith("weight") or n.startswith("lstm.weight")]
    result = TrainResult(model=model)
    with np.errstate(over="ignore", invalid="ignore"):
        result.initial_train_nll = float(sequence_nll(model, train).mean())
    use_dropout = arch.dropout_rate > 0 and arch.fc1_units is not None
    keep = 1.0 - arch.dropout_rate

    # overflow surfaces as a non-finite loss or gradient and is reported as DivergenceError
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train))
            for start in range(0, len(train), cfg.batch_size):
                batch = [train[i] for i in order[start:start + cfg.batch_size]]
                current = RnnModel(arch, params, model.rng_seed)
                inputs, targets, mask = _batch(current, batch)
                drop = None
                if use_dropout:
                    drop = (rng.random((len(batch), inputs.shape[1], arch.fc1_units)) < keep) / keep
                cache = _forward(current, inputs, drop)
                nll, dv = _output_grad(current, cache, targets, mask)
                if not np.all(np.isfinite(nll)):
                    raise DivergenceError(f"epoch {epoch}: non-finite training loss")
                grads = _backward(current, cache, dv / len(batch), per_sample=False)
                for n in decayed:
                    grads[n] = grads[n] + cfg.weight_decay * params[n]
                norm = np.sqrt(sum(np.sum(g ** 2) for g in grads.values()))
                if not np.isfinite(norm):
                    raise DivergenceError(f"epoch {epoch}: non-finite gradient")
                if norm > cfg.gradient_clip_norm:
                    grads = {n: g * (cfg.gradient_clip_norm / norm) for n, g in grads.items()}
                _adam_step(params, grads, state, cfg)
            snapshot = RnnModel(arch, params, model.rng_seed)
            train_nll = float(sequence_nll(snapshot, train).mean())
            valid_nll = float(sequence_nll(snapshot, valid).mean()) if valid else None
            if not np.isfinite(train_nll) or (valid_nll is not None and not np.isfinite(valid_nll)):
                raise DivergenceError(f"epoch {epoch}: non-finite evaluation loss")
            log.info("epoch %d train_nll=%.6f valid_nll=%s", epoch, train_nll, valid_nll)
            ckpt = Checkpoint(epoch, snapshot, train_nll, valid_nll)
            result.loss_curve.append((epoch, train_nll, valid_nll))
            if checkpoint_sink is not None:
                checkpoint_sink(ckpt)
            else:
                result.checkpoints.append(ckpt)
            result.model = snapshot
    return result
