"""Model configuration, parameter stores, and the two classifier architectures."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from csihar import autodiff as ad
from csihar.autodiff import Tensor
from csihar.errors import ConfigError, ShapeError
from csihar.models.layers import GruParams, LstmParams, bilstm_layer, gru_sequence, lstm_sequence

KINDS = ("bilstm", "cnn_gru")


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int = 16
    kernel: int = 5
    stride: int = 1
    pool: int = 2


@dataclass(frozen=True)
class BiLstmSpec:
    layers: int = 3
    hidden: int = 128


@dataclass(frozen=True)
class CnnGruSpec:
    blocks: tuple = (ConvBlock(16, 5, 1, 2), ConvBlock(32, 5, 1, 2))
    padding: str = "same"
    gru_hidden: int = 128
    gru_layers: int = 1


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    input_shape: tuple
    n_classes: int
    bilstm: BiLstmSpec = field(default_factory=BiLstmSpec)
    cnn_gru: CnnGruSpec = field(default_factory=CnnGruSpec)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}; choose from {KINDS}", "model.kind")
        if len(self.input_shape) != 2 or min(self.input_shape) < 1:
            raise ConfigError(f"need positive (channels, time), got {self.input_shape}",
                              "model.input_shape")
        if self.n_classes < 1:
            raise ConfigError("must be >= 1", "model.n_classes")
        if self.bilstm.layers < 1 or self.bilstm.hidden < 1:
            raise ConfigError("layers and hidden must be >= 1", "model.bilstm")
        if self.cnn_gru.gru_layers < 1 or self.cnn_gru.gru_hidden < 1:
            raise ConfigError("gru_layers and gru_hidden must be >= 1", "model.cnn_gru")
        if self.cnn_gru.padding not in ("same", "valid"):
            raise ConfigError("must be 'same' or 'valid'", "model.cnn_gru.padding")
        if self.kind == "cnn_gru":
            conv_lengths(self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["cnn_gru"]["blocks"] = [asdict(b) for b in self.cnn_gru.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "bilstm" in d and isinstance(d["bilstm"], dict):
            d["bilstm"] = BiLstmSpec(**d["bilstm"])
        if "cnn_gru" in d and isinstance(d["cnn_gru"], dict):
            cg = dict(d["cnn_gru"])
            if "blocks" in cg:
                cg["blocks"] = tuple(b if isinstance(b, ConvBlock) else ConvBlock(**b)
                                     for b in cg["blocks"])
            d["cnn_gru"] = CnnGruSpec(**cg)
        return cls(**d)


def conv_lengths(config: ModelConfig) -> list:
    """Time length after each conv block; raises if any block empties the axis."""
    t = config.input_shape[1]
    out = []
    for i, blk in enumerate(config.cnn_gru.blocks):
        if min(blk.out_channels, blk.kernel, blk.stride, blk.pool) < 1:
            raise ConfigError("block sizes must be positive", f"model.cnn_gru.blocks[{i}]")
        t = ad.conv_output_length(t, blk.kernel, blk.stride, config.cnn_gru.padding)
        if t >= 1 and blk.pool > 1:
            t //= blk.pool
        if t < 1:
            raise ConfigError(f"time axis reduced below 1 at block {i} ({blk})",
                              f"model.cnn_gru.blocks[{i}]")
        out.append(t)
    return out


def _param_shapes(config: ModelConfig) -> list:
    """Ordered ``(name, shape, fan_in)`` for every parameter."""
    c, _ = config.input_shape
    k = config.n_classes
    shapes = []
    if config.kind == "bilstm":
        h = config.bilstm.hidden
        width = c
        for layer in range(config.bilstm.layers):
            for d in ("fwd", "bwd"):
                shapes += [(f"lstm{layer}.{d}.W", (4 * h, width), width),
                           (f"lstm{layer}.{d}.U", (4 * h, h), h),
                           (f"lstm{layer}.{d}.b", (4 * h,), h)]
            width = 2 * h
    else:
        cin = c
        for i, blk in enumerate(config.cnn_gru.blocks):
            fan = cin * blk.kernel
            shapes += [(f"conv{i}.W", (blk.out_channels, cin, blk.kernel), fan),
                       (f"conv{i}.b", (blk.out_channels,), fan)]
            cin = blk.out_channels
        h = config.cnn_gru.gru_hidden
        width = cin
        for layer in range(config.cnn_gru.gru_layers):
            shapes += [(f"gru{layer}.W", (3 * h, width), width),
                       (f"gru{layer}.U", (3 * h, h), h),
                       (f"gru{layer}.b", (3 * h,), h)]
            width = h
    shapes += [("head.W", (k, width), width), ("head.b", (k,), width)]
    return shapes


def param_count_formula(config: ModelConfig) -> int:
    """Closed-form parameter count, independent of any instantiated store."""
    k = config.n_classes
    c = config.input_shape[0]
    if config.kind == "bilstm":
        h, n = config.bilstm.hidden, config.bilstm.layers
        first = 2 * 4 * (h * c + h * h + h)
        rest = (n - 1) * 2 * 4 * (h * 2 * h + h * h + h)
        return first + rest + 2 * h * k + k
    total, cin = 0, c
    for blk in config.cnn_gru.blocks:
        total += blk.out_channels * cin * blk.kernel + blk.out_channels
        cin = blk.out_channels
    h = config.cnn_gru.gru_hidden
    widths = [cin] + [h] * (config.cnn_gru.gru_layers - 1)
    total += sum(3 * (h * w + h * h + h) for w in widths)
    return total + h * k + k


def activation_elements(config: ModelConfig, batch: int = 1) -> int:
    """Peak number of activation values alive during one forward pass.

    Each stage (recurrent layer, conv block, head) holds its input, its
    intermediates and its output at once; the peak is the largest stage.
    """
    c, t = config.input_shape
    k = config.n_classes
    stages = []
    if config.kind == "bilstm":
        h = config.bilstm.hidden
        width = c
        for _ in range(config.bilstm.layers):
            # input + fwd/bwd gate projections + per-step cell states + output
            stages.append(t * width + 2 * t * 4 * h + 2 * t * h + t * 2 * h)
            width = 2 * h
        stages.append(2 * h + k)
    else:
        cin, length = c, t
        pad = config.cnn_gru.padding
        for blk in config.cnn_gru.blocks:
            lout = ad.conv_output_length(length, blk.kernel, blk.stride, pad)
            pooled = lout // blk.pool if blk.pool > 1 else lout
            stages.append(cin * length + lout * cin * blk.kernel + blk.out_channels * lout
                          + blk.out_channels * pooled)
            cin, length = blk.out_channels, pooled
        h = config.cnn_gru.gru_hidden
        width = cin
        for _ in range(config.cnn_gru.gru_layers):
            stages.append(length * width + length * 3 * h + length * h)
            width = h
        stages.append(h + k)
    return batch * max(stages)


class Model:
    """A configured classifier with an ordered, named parameter store."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    # -- bookkeeping ------------------------------------------------------
    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list:
        return list(self.params.values())

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "Model":
        return Model(self.config, {n: Tensor(p.data.astype(dtype), requires_grad=True)
                                   for n, p in self.params.items()})

    # -- forward ----------------------------------------------------------
    def _lstm(self, layer: int, d: str) -> LstmParams:
        p = self.params
        return LstmParams(p[f"lstm{layer}.{d}.W"], p[f"lstm{layer}.{d}.U"], p[f"lstm{layer}.{d}.b"])

    def _gru(self, layer: int) -> GruParams:
        p = self.params
        return GruParams(p[f"gru{layer}.W"], p[f"gru{layer}.U"], p[f"gru{layer}.b"])

    def _check_batch(self, batch) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if x.ndim != 3 or x.shape[1:] != self.config.input_shape:
            raise ShapeError(f"batch shape {x.shape} does not match "
                             f"[B x {self.config.input_shape[0]} x {self.config.input_shape[1]}]")
        return x

    def logits(self, batch) -> Tensor:
        x = self._check_batch(batch)
        cfg = self.config
        p = self.params
        if cfg.kind == "bilstm":
            seq = ad.transpose(x, (0, 2, 1))
            for layer in range(cfg.bilstm.layers - 1):
                seq = bilstm_layer(seq, self._lstm(layer, "fwd"), self._lstm(layer, "bwd"))
            last = cfg.bilstm.layers - 1
            fwd = lstm_sequence(seq, self._lstm(last, "fwd"))
            bwd = lstm_sequence(seq, self._lstm(last, "bwd"), reverse=True)
            features = ad.concat([fwd[-1], bwd[0]], axis=1)
        else:
            h = x
            for i, blk in enumerate(cfg.cnn_gru.blocks):
                h = ad.conv1d(h, p[f"conv{i}.W"], p[f"conv{i}.b"], stride=blk.stride,
                              padding=cfg.cnn_gru.padding)
                h = ad.relu(h)
                if blk.pool > 1:
                    h = ad.max_pool1d(h, blk.pool)
            seq = ad.transpose(h, (0, 2, 1))
            n = cfg.cnn_gru.gru_layers
            for layer in range(n):
                seq = gru_sequence(seq, self._gru(layer), return_sequence=layer < n - 1)
            features = seq
        return ad.linear(features, p["head.W"], p["head.b"])

    def forward(self, batch) -> Tensor:
        return ad.softmax(self.logits(batch), axis=-1)

    __call__ = forward

    def predict_proba(self, x, batch_size: int = 64) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        out = []
        with ad.no_grad():
            for start in range(0, len(x), batch_size):
                out.append(self.forward(x[start:start + batch_size]).data)
        return np.concatenate(out) if out else np.empty((0, self.config.n_classes))


def init_params(config: ModelConfig, dtype=np.float64) -> dict:
    """Uniform(+-1/sqrt(fan_in)) initialisation from PCG64(seed); LSTM forget bias 1."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    params = {}
    for name, shape, fan_in in _param_shapes(config):
        bound = 1.0 / np.sqrt(fan_in)
        data = rng.uniform(-bound, bound, size=shape)
        if name.startswith("lstm") and name.endswith(".b"):
            h = shape[0] // 4
            data[h:2 * h] = 1.0
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


def build_model(config: ModelConfig, dtype=np.float64) -> Model:
    return Model(config, init_params(config, dtype))


def model_forward(model: Model, batch) -> Tensor:
    """Class probabilities [B x K] for a [B x C x T] batch."""
    return model.forward(batch)
