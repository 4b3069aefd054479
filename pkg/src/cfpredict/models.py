"""Recurrent sequence regressors: stacked LSTM, GRU, Bi-LSTM and LSTM with
additive attention, each with a dense ReLU head and a linear output layer.

Every layer implements ``forward`` (returning a cache) and ``backward``
(accumulating into its Params and returning the input gradient). Full
backpropagation through time runs inside the recurrent layers.

Gate conventions (columns of the fused weight matrices):
    LSTM  [input, forget, candidate, output]
    GRU   [update, reset, candidate]; h = (1 - z) * n + z * h_prev,
          n = tanh(x Wn + r * (h_prev Un) + bn)
"""

from __future__ import annotations

import enum
import io
import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import FeatureScaler
from .errors import (
    FormatVersionMismatch,
    InvalidConfig,
    IoFailure,
    PayloadLengthMismatch,
    ShapeMismatch,
    StaleTape,
)
from .nncore import (
    Param,
    Rng,
    dropout_backward,
    dropout_forward,
    relu,
    sigmoid,
    softmax_backward,
    softmax_rows,
)


class ModelKind(str, enum.Enum):
    LSTM = "LSTM"
    GRU = "GRU"
    BILSTM = "BILSTM"
    LSTM_ATTN = "LSTM_ATTN"

    @classmethod
    def parse(cls, raw: "str | ModelKind") -> "ModelKind":
        if isinstance(raw, cls):
            return raw
        key = str(raw).strip().upper().replace("-", "_").replace("+", "_")
        aliases = {
            "LSTM": cls.LSTM,
            "GRU": cls.GRU,
            "BILSTM": cls.BILSTM,
            "BI_LSTM": cls.BILSTM,
            "LSTM_ATTN": cls.LSTM_ATTN,
            "LSTM_ATTENTION": cls.LSTM_ATTN,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown model kind {raw!r}") from None

    @property
    def label(self) -> str:
        return {
            ModelKind.LSTM: "LSTM",
            ModelKind.LSTM_ATTN: "LSTM + Attention",
            ModelKind.GRU: "GRU",
            ModelKind.BILSTM: "Bi-LSTM",
        }[self]


# column order of the result tables
TABLE_ORDER = (ModelKind.LSTM, ModelKind.LSTM_ATTN, ModelKind.GRU, ModelKind.BILSTM)


@dataclass(frozen=True)
class ModelConfig:
    kind: ModelKind
    input_features: int
    output_features: int
    n_layers: int = 4
    hidden: int = 256
    dropout: float = 0.5
    dense_hidden: int = 100
    seq_len: int = 15
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind.parse(self.kind))
        if self.n_layers < 1:
            raise InvalidConfig("n_layers must be >= 1")
        if self.hidden < 1 or self.dense_hidden < 1:
            raise InvalidConfig("layer widths must be >= 1")
        if self.input_features < 1 or self.output_features < 1:
            raise InvalidConfig("feature counts must be >= 1")
        if self.seq_len < 1:
            raise InvalidConfig("seq_len must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must be in [0, 1)")


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars for a config."""
    H = cfg.hidden
    gates = 3 if cfg.kind is ModelKind.GRU else 4
    directions = 2 if cfg.kind is ModelKind.BILSTM else 1
    total = 0
    width = cfg.input_features
    for _ in range(cfg.n_layers):
        total += directions * gates * (H * (width + H) + H)
        width = directions * H
    head_in = width
    if cfg.kind is ModelKind.LSTM_ATTN:
        total += 2 * H * H + H
        head_in = 2 * H
    total += head_in * cfg.dense_hidden + cfg.dense_hidden
    total += cfg.dense_hidden * cfg.output_features + cfg.output_features
    return total


def _glorot(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -limit, limit)


# ---------------------------------------------------------------------------
# layers


class LSTMLayer:
    def __init__(self, n_in: int, hidden: int, rng: Rng, name: str, reverse: bool = False):
        H = hidden
        self.hidden = H
        self.reverse = reverse
        self.Wx = Param(_glorot(rng, n_in, 4 * H), f"{name}.Wx")
        self.Wh = Param(_glorot(rng, H, 4 * H), f"{name}.Wh")
        b = np.zeros(4 * H)
        b[H : 2 * H] = 1.0  # forget gate
        self.b = Param(b, f"{name}.b")

    def params(self) -> list[Param]:
        return [self.Wx, self.Wh, self.b]

    def _order(self, T: int):
        return range(T - 1, -1, -1) if self.reverse else range(T)

    def forward(self, x: np.ndarray):
        B, T, _ = x.shape
        H = self.hidden
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        hs = np.zeros((B, T, H))
        xw = x @ self.Wx.value + self.b.value  # (B, T, 4H)
        steps = []
        for t in self._order(T):
            z = xw[:, t] + h @ self.Wh.value
            i = sigmoid(z[:, :H])
            f = sigmoid(z[:, H : 2 * H])
            g = np.tanh(z[:, 2 * H : 3 * H])
            o = sigmoid(z[:, 3 * H :])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            hs[:, t] = h
            steps.append((t, h_prev, c_prev, i, f, g, o, tc))
        return hs, (x, steps)

    def backward(self, dhs: np.ndarray, cache) -> np.ndarray:
        x, steps = cache
        B, T, _ = x.shape
        H = self.hidden
        dz_all = np.zeros((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        Wh_T = self.Wh.value.T
        for t, h_prev, c_prev, i, f, g, o, tc in reversed(steps):
            dh = dhs[:, t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
            dz[:, 3 * H :] = do * o * (1.0 - o)
            self.Wh.grad += h_prev.T @ dz
            dh_next = dz @ Wh_T
            dc_next = dc * f
        self.Wx.grad += x.reshape(B * T, -1).T @ dz_all.reshape(B * T, -1)
        self.b.grad += dz_all.sum(axis=(0, 1))
        return dz_all @ self.Wx.value.T


class GRULayer:
    def __init__(self, n_in: int, hidden: int, rng: Rng, name: str):
        H = hidden
        self.hidden = H
        self.Wx = Param(_glorot(rng, n_in, 3 * H), f"{name}.Wx")
        self.Wh = Param(_glorot(rng, H, 3 * H), f"{name}.Wh")
        self.b = Param(np.zeros(3 * H), f"{name}.b")

    def params(self) -> list[Param]:
        return [self.Wx, self.Wh, self.b]

    def forward(self, x: np.ndarray):
        B, T, _ = x.shape
        H = self.hidden
        h = np.zeros((B, H))
        hs = np.zeros((B, T, H))
        xw = x @ self.Wx.value + self.b.value
        steps = []
        for t in range(T):
            a = xw[:, t]
            u = h @ self.Wh.value
            z = sigmoid(a[:, :H] + u[:, :H])
            r = sigmoid(a[:, H : 2 * H] + u[:, H : 2 * H])
            un = u[:, 2 * H :]
            n = np.tanh(a[:, 2 * H :] + r * un)
            h_prev = h
            h = (1.0 - z) * n + z * h_prev
            hs[:, t] = h
            steps.append((h_prev, z, r, un, n))
        return hs, (x, steps)

    def backward(self, dhs: np.ndarray, cache) -> np.ndarray:
        x, steps = cache
        B, T, _ = x.shape
        H = self.hidden
        da_all = np.zeros((B, T, 3 * H))
        dh_next = np.zeros((B, H))
        Wh_T = self.Wh.value.T
        for t in range(T - 1, -1, -1):
            h_prev, z, r, un, n = steps[t]
            dh = dhs[:, t] + dh_next
            dn_pre = dh * (1.0 - z) * (1.0 - n * n)
            dz_pre = dh * (h_prev - n) * z * (1.0 - z)
            dr_pre = dn_pre * un * r * (1.0 - r)
            da = da_all[:, t]
            da[:, :H] = dz_pre
            da[:, H : 2 * H] = dr_pre
            da[:, 2 * H :] = dn_pre
            du = np.concatenate([dz_pre, dr_pre, dn_pre * r], axis=1)
            self.Wh.grad += h_prev.T @ du
            dh_next = dh * z + du @ Wh_T
        self.Wx.grad += x.reshape(B * T, -1).T @ da_all.reshape(B * T, -1)
        self.b.grad += da_all.sum(axis=(0, 1))
        return da_all @ self.Wx.value.T


class BiLSTMLayer:
    """Two independent LSTMs; outputs concatenated per timestep as [fwd, bwd]."""

    def __init__(self, n_in: int, hidden: int, rng: Rng, name: str):
        self.hidden = hidden
        self.fwd = LSTMLayer(n_in, hidden, rng, f"{name}.fwd")
        self.bwd = LSTMLayer(n_in, hidden, rng, f"{name}.bwd", reverse=True)

    def params(self) -> list[Param]:
        return self.fwd.params() + self.bwd.params()

    def forward(self, x: np.ndarray):
        hf, cf = self.fwd.forward(x)
        hb, cb = self.bwd.forward(x)
        return np.concatenate([hf, hb], axis=2), (cf, cb)

    def backward(self, dhs: np.ndarray, cache) -> np.ndarray:
        cf, cb = cache
        H = self.hidden
        return self.fwd.backward(dhs[:, :, :H], cf) + self.bwd.backward(dhs[:, :, H:], cb)


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: Rng, name: str, activation: str | None = None):
        self.W = Param(_glorot(rng, n_in, n_out), f"{name}.W")
        self.b = Param(np.zeros(n_out), f"{name}.b")
        self.activation = activation

    def params(self) -> list[Param]:
        return [self.W, self.b]

    def forward(self, x: np.ndarray):
        y = x @ self.W.value + self.b.value
        if self.activation == "relu":
            y = relu(y)
        return y, (x, y)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x, y = cache
        if self.activation == "relu":
            dy = dy * (y > 0)
        self.W.grad += x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.W.value.T


def attention_forward(
    encoder_states: np.ndarray,
    query: np.ndarray,
    W1: np.ndarray,
    W2: np.ndarray,
    v: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Additive attention for one sequence.

    ``score_t = v . tanh(h_t W1 + q W2)``, ``alpha = softmax(score)``, and the
    context is ``sum_t alpha_t h_t``. Returns ``(context, alphas)``.
    """
    hs = np.asarray(encoder_states, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if hs.ndim != 2 or q.shape != (hs.shape[1],):
        raise ShapeMismatch(f"attention states {hs.shape} vs query {q.shape}")
    if W1.shape[0] != hs.shape[1] or W2.shape[0] != q.shape[0] or W1.shape[1] != W2.shape[1] or v.shape != (W1.shape[1],):
        raise ShapeMismatch("attention weight shapes do not conform")
    scores = np.tanh(hs @ W1 + q @ W2) @ v
    alphas = softmax_rows(scores[None, :])[0]
    return alphas @ hs, alphas


class AdditiveAttention:
    """Batched additive attention pooling; emits concat(context, query)."""

    def __init__(self, hidden: int, rng: Rng, name: str):
        self.W1 = Param(_glorot(rng, hidden, hidden), f"{name}.W1")
        self.W2 = Param(_glorot(rng, hidden, hidden), f"{name}.W2")
        self.v = Param(_glorot(rng, hidden, 1)[:, 0], f"{name}.v")

    def params(self) -> list[Param]:
        return [self.W1, self.W2, self.v]

    def forward(self, hs: np.ndarray):
        q = hs[:, -1]
        u = np.tanh(hs @ self.W1.value + (q @ self.W2.value)[:, None, :])  # (B, T, A)
        scores = u @ self.v.value  # (B, T)
        alphas = softmax_rows(scores)
        ctx = np.einsum("bt,bth->bh", alphas, hs)
        return np.concatenate([ctx, q], axis=1), (hs, q, u, alphas)

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        hs, q, u, alphas = cache
        H = hs.shape[2]
        dctx, dq = dout[:, :H], dout[:, H:].copy()
        dhs = alphas[:, :, None] * dctx[:, None, :]
        dalpha = np.einsum("bth,bh->bt", hs, dctx)
        dscores = softmax_backward(alphas, dalpha)
        self.v.grad += np.einsum("bta,bt->a", u, dscores)
        dpre = dscores[:, :, None] * self.v.value[None, None, :] * (1.0 - u * u)
        self.W1.grad += np.einsum("bth,bta->ha", hs, dpre)
        dhs += dpre @ self.W1.value.T
        dqw = dpre.sum(axis=1)
        self.W2.grad += q.T @ dqw
        dq += dqw @ self.W2.value.T
        dhs[:, -1] += dq
        return dhs


# ---------------------------------------------------------------------------
# model


@dataclass(eq=False)
class Tape:
    model_id: int
    training: bool
    records: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    head_cache: tuple | None = None
    consumed: bool = False


class Model:
    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        rng = Rng(cfg.init_seed)
        self.recurrent = []
        width = cfg.input_features
        for k in range(cfg.n_layers):
            name = f"rnn{k}"
            if cfg.kind is ModelKind.GRU:
                layer = GRULayer(width, cfg.hidden, rng, name)
            elif cfg.kind is ModelKind.BILSTM:
                layer = BiLSTMLayer(width, cfg.hidden, rng, name)
            else:
                layer = LSTMLayer(width, cfg.hidden, rng, name)
            self.recurrent.append(layer)
            width = 2 * cfg.hidden if cfg.kind is ModelKind.BILSTM else cfg.hidden
        self.attention = None
        if cfg.kind is ModelKind.LSTM_ATTN:
            self.attention = AdditiveAttention(cfg.hidden, rng, "attn")
            width = 2 * cfg.hidden
        self.dense = Dense(width, cfg.dense_hidden, rng, "dense", activation="relu")
        self.out = Dense(cfg.dense_hidden, cfg.output_features, rng, "out")

    def params(self) -> list[Param]:
        ps = []
        for layer in self.recurrent:
            ps += layer.params()
        if self.attention is not None:
            ps += self.attention.params()
        return ps + self.dense.params() + self.out.params()

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    # -- flat parameter vector in the fixed layer order of params()

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.value.reshape(-1) for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise PayloadLengthMismatch(f"expected {self.n_params} parameters, got {flat.size}")
        pos = 0
        for p in self.params():
            p.value[...] = flat[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    # -- passes

    def _head_input(self, hs: np.ndarray) -> np.ndarray:
        if self.config.kind is ModelKind.BILSTM:
            H = self.config.hidden
            # forward direction ends at T-1, backward direction at 0
            return np.concatenate([hs[:, -1, :H], hs[:, 0, H:]], axis=1)
        return hs[:, -1]

    def forward(self, batch, training: bool = False, rng: Rng | None = None, masks=None):
        """Predict ``(B, output_features)`` from ``(B, seq_len, input_features)``.

        ``masks`` (from an earlier tape) freezes the dropout pattern, which
        is how gradient checks hold dropout fixed.
        """
        x = np.asarray(batch, dtype=np.float64)
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.seq_len or x.shape[2] != cfg.input_features:
            raise ShapeMismatch(f"batch shape {x.shape}, expected (B, {cfg.seq_len}, {cfg.input_features})")
        tape = Tape(model_id=id(self), training=training)
        h = x
        for k, layer in enumerate(self.recurrent):
            h, cache = layer.forward(h)
            tape.records.append(cache)
            if masks is not None:
                mask = masks[k]
                h = dropout_backward(h, mask)
            else:
                h, mask = dropout_forward(h, cfg.dropout, rng, training)
            tape.masks.append(mask)
        if self.attention is not None:
            feat, attn_cache = self.attention.forward(h)
        else:
            feat, attn_cache = self._head_input(h), None
        d, dcache = self.dense.forward(feat)
        y, ocache = self.out.forward(d)
        tape.head_cache = (h.shape, attn_cache, dcache, ocache)
        return y, tape

    def backward(self, tape: Tape, loss_grad) -> None:
        if tape.model_id != id(self):
            raise StaleTape("tape was recorded by a different model")
        if tape.consumed:
            raise StaleTape("tape has already been consumed")
        if not tape.training:
            raise StaleTape("backward needs a training-mode tape")
        tape.consumed = True
        h_shape, attn_cache, dcache, ocache = tape.head_cache
        dy = np.asarray(loss_grad, dtype=np.float64)
        dd = self.out.backward(dy, ocache)
        dfeat = self.dense.backward(dd, dcache)
        if self.attention is not None:
            dh = self.attention.backward(dfeat, attn_cache)
        else:
            dh = np.zeros(h_shape)
            if self.config.kind is ModelKind.BILSTM:
                H = self.config.hidden
                dh[:, -1, :H] = dfeat[:, :H]
                dh[:, 0, H:] = dfeat[:, H:]
            else:
                dh[:, -1] = dfeat
        for k in range(len(self.recurrent) - 1, -1, -1):
            dh = dropout_backward(dh, tape.masks[k])
            dh = self.recurrent[k].backward(dh, tape.records[k])

    def predict(self, batch, batch_size: int = 1024) -> np.ndarray:
        x = np.asarray(batch, dtype=np.float64)
        outs = [self.forward(x[i : i + batch_size])[0] for i in range(0, len(x), batch_size)]
        if not outs:
            return np.zeros((0, self.config.output_features))
        return np.concatenate(outs)


def build_model(config: ModelConfig) -> Model:
    return Model(config)


def describe(model: Model) -> str:
    cfg = model.config
    lines = [
        f"{cfg.kind.label} model: {cfg.n_layers} x {cfg.hidden} recurrent, dropout {cfg.dropout}, "
        f"dense {cfg.dense_hidden} relu, {cfg.input_features} -> {cfg.output_features} features, "
        f"seq_len {cfg.seq_len}"
    ]
    for p in model.params():
        shape = "x".join(str(s) for s in p.shape)
        lines.append(f"  {p.name:<16} {shape:>12} {p.size:>10,d}")
    lines.append(f"  total parameters {model.n_params:,d} (closed form {param_count(cfg):,d})")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# checkpoints
#
#   magic    b"CFCKPT01"
#   version  <B   (1)
#   config   <B kind, <IIdIIIIq  n_layers, hidden, dropout, dense_hidden, input_features,
#            output_features, seq_len, init_seed
#   scaler   <I F, then F min, F max  (<f8)
#   prov.    <IId  epochs_run, best_epoch, best_val_mae; <qq shuffle_seed, split_seed;
#            <Q adam_steps; <B selection (0 val, 1 test, 2 train); <H len + utf-8 dataset hash
#   payload  <Q n, then n <f8 parameters in params() order

CHECKPOINT_MAGIC = b"CFCKPT01"
CHECKPOINT_VERSION = 1
_KINDS = (ModelKind.LSTM, ModelKind.GRU, ModelKind.BILSTM, ModelKind.LSTM_ATTN)
_SELECTIONS = ("val", "test", "train")
_CFG = struct.Struct("<BIIdIIIIq")
_PROV = struct.Struct("<IIdqqQB")


@dataclass(frozen=True)
class Provenance:
    epochs_run: int = 0
    best_epoch: int = 0
    best_val_mae: float = float("nan")
    shuffle_seed: int = 0
    split_seed: int = 0
    adam_steps: int = 0
    selection: str = "val"
    dataset_hash: str = ""


@dataclass(frozen=True, eq=False)
class ModelCheckpoint:
    config: ModelConfig
    scaler: FeatureScaler
    params: np.ndarray
    provenance: Provenance
    version: int = CHECKPOINT_VERSION

    def to_model(self) -> Model:
        model = build_model(self.config)
        model.set_flat(self.params)
        return model

    def to_bytes(self) -> bytes:
        cfg, prov = self.config, self.provenance
        out = io.BytesIO()
        out.write(CHECKPOINT_MAGIC)
        out.write(struct.pack("<B", self.version))
        out.write(
            _CFG.pack(
                _KINDS.index(cfg.kind), cfg.n_layers, cfg.hidden, cfg.dropout, cfg.dense_hidden,
                cfg.input_features, cfg.output_features, cfg.seq_len, cfg.init_seed,
            )
        )
        F = self.scaler.n_features
        out.write(struct.pack("<I", F))
        out.write(np.asarray(self.scaler.min, dtype="<f8").tobytes())
        out.write(np.asarray(self.scaler.max, dtype="<f8").tobytes())
        out.write(
            _PROV.pack(
                prov.epochs_run, prov.best_epoch, prov.best_val_mae, prov.shuffle_seed,
                prov.split_seed, prov.adam_steps, _SELECTIONS.index(prov.selection),
            )
        )
        h = prov.dataset_hash.encode("utf-8")
        out.write(struct.pack("<H", len(h)))
        out.write(h)
        out.write(struct.pack("<Q", self.params.size))
        out.write(np.asarray(self.params, dtype="<f8").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise FormatVersionMismatch("not a CFCKPT01 checkpoint")
        pos = len(CHECKPOINT_MAGIC)

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(data):
                raise FormatVersionMismatch("checkpoint is truncated")
            chunk = data[pos : pos + n]
            pos += n
            return chunk

        (version,) = struct.unpack("<B", take(1))
        if version != CHECKPOINT_VERSION:
            raise FormatVersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        kind, n_layers, hidden, dropout, dense_hidden, fin, fout, seq_len, init_seed = _CFG.unpack(take(_CFG.size))
        if kind >= len(_KINDS):
            raise FormatVersionMismatch(f"unknown model kind code {kind}")
        try:
            config = ModelConfig(
                kind=_KINDS[kind], input_features=fin, output_features=fout, n_layers=n_layers,
                hidden=hidden, dropout=dropout, dense_hidden=dense_hidden, seq_len=seq_len,
                init_seed=init_seed,
            )
        except InvalidConfig as exc:
            raise FormatVersionMismatch(f"invalid config in checkpoint: {exc}") from exc
        (F,) = struct.unpack("<I", take(4))
        lo = np.frombuffer(take(8 * F), dtype="<f8").astype(np.float64)
        hi = np.frombuffer(take(8 * F), dtype="<f8").astype(np.float64)
        epochs_run, best_epoch, best_val, shuf, split, steps, sel = _PROV.unpack(take(_PROV.size))
        if sel >= len(_SELECTIONS):
            raise FormatVersionMismatch(f"unknown selection code {sel}")
        (hlen,) = struct.unpack("<H", take(2))
        dataset_hash = take(hlen).decode("utf-8", errors="strict")
        (n,) = struct.unpack("<Q", take(8))
        expected = param_count(config)
        if n != expected:
            raise PayloadLengthMismatch(f"payload declares {n} parameters, config needs {expected}")
        remaining = len(data) - pos
        if remaining != 8 * n:
            raise PayloadLengthMismatch(f"payload has {remaining} bytes, expected {8 * n}")
        params = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64)
        prov = Provenance(
            epochs_run=epochs_run, best_epoch=best_epoch, best_val_mae=best_val, shuffle_seed=shuf,
            split_seed=split, adam_steps=steps, selection=_SELECTIONS[sel], dataset_hash=dataset_hash,
        )
        return cls(config=config, scaler=FeatureScaler(min=lo, max=hi), params=params, provenance=prov, version=version)


def make_checkpoint(model: Model, scaler: FeatureScaler, provenance: Provenance) -> ModelCheckpoint:
    return ModelCheckpoint(config=model.config, scaler=scaler, params=model.get_flat(), provenance=provenance)


def save_checkpoint(model_or_ckpt, path, scaler: FeatureScaler | None = None, provenance: Provenance | None = None) -> None:
    """Write a checkpoint; accepts a ModelCheckpoint or a model plus scaler and provenance."""
    if isinstance(model_or_ckpt, ModelCheckpoint):
        ckpt = model_or_ckpt
    else:
        if scaler is None:
            raise ValueError("saving a model needs its scaler")
        ckpt = make_checkpoint(model_or_ckpt, scaler, provenance or Provenance())
    data = ckpt.to_bytes()
    try:
        tmp = f"{os.fspath(path)}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> ModelCheckpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return ModelCheckpoint.from_bytes(data)
