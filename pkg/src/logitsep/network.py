"""MLP classifiers with a full-logit and a single-logit inference path.

Hidden layers are ``Dense -> BatchNorm -> ReLU``; the output layer is a plain
affine map producing the logits.

Two inference kernels are available:

``"exact"``
    Every affine map accumulates its dot products left to right over
    ascending input-feature index using separate IEEE multiplies and adds.
    Results are therefore independent of batch composition, and the
    single-logit path reproduces entry ``j`` of the full-logit path bit for bit.
``"blas"``
    Plain matrix products.  Much faster for wide layers, but the summation
    order is the BLAS library's, so bit-exact agreement between the two paths
    is not guaranteed.  Used by the timing harness and for training-time
    monitoring.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, DomainError, FormatError, UsageError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
MODES = ("train", "inference")
KERNELS = ("exact", "blas")


@dataclass
class Dense:
    weight: np.ndarray  # fan_in x fan_out
    bias: np.ndarray  # fan_out

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class BatchNorm:
    """Per-feature batch normalisation with an affine rescale.

    ``momentum`` is the weight of the newest batch in the running averages:
    ``running <- (1 - momentum) * running + momentum * batch``.
    """

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, width: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> "BatchNorm":
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width), momentum, eps)

    def normalize(self, a: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
        return (a - mean) / np.sqrt(var + self.eps) * self.scale + self.shift


def batchnorm_update(state: BatchNorm, batch_mean: np.ndarray, batch_var: np.ndarray) -> BatchNorm:
    """Fold one batch's statistics into the running averages (in place)."""
    mom = state.momentum
    state.running_mean = (1.0 - mom) * state.running_mean + mom * np.asarray(batch_mean, dtype=np.float64)
    state.running_var = (1.0 - mom) * state.running_var + mom * np.asarray(batch_var, dtype=np.float64)
    return state


@dataclass
class MlpModel:
    hidden: list[Dense]
    norms: list[BatchNorm]
    out: Dense
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def input_dim(self) -> int:
        return self.hidden[0].fan_in if self.hidden else self.out.fan_in

    @property
    def num_classes(self) -> int:
        return self.out.fan_out

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [layer.fan_out for layer in self.hidden] + [self.num_classes]

    def layers(self) -> list[Dense]:
        return [*self.hidden, self.out]

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays, in a fixed order."""
        params = []
        for layer, bn in zip(self.hidden, self.norms):
            params += [layer.weight, layer.bias, bn.scale, bn.shift]
        params += [self.out.weight, self.out.bias]
        return params

    def validate(self) -> None:
        if len(self.norms) != len(self.hidden):
            raise DimensionError("every hidden layer needs exactly one batch-norm block")
        prev = None
        for layer in self.layers():
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.fan_out,):
                raise DimensionError(
                    f"layer weight {layer.weight.shape} and bias {layer.bias.shape} do not match"
                )
            if prev is not None and layer.fan_in != prev:
                raise DimensionError(f"layer expects {layer.fan_in} inputs but the previous layer emits {prev}")
            prev = layer.fan_out
        for layer, bn in zip(self.hidden, self.norms):
            for arr in (bn.scale, bn.shift, bn.running_mean, bn.running_var):
                if arr.shape != (layer.fan_out,):
                    raise DimensionError("batch-norm parameters must match the layer width")
            if (bn.running_var < 0).any():
                raise DomainError("batch-norm running variance must be non-negative")
        if self.num_classes < 1:
            raise DimensionError("the output layer needs at least one class")


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype, copy=False)


def init_mlp(
    input_dim: int,
    hidden: Sequence[int],
    num_classes: int,
    seed: int = 0,
    dtype=np.float64,
) -> MlpModel:
    """Glorot-uniform weights, zero biases, identity batch norm."""
    if input_dim < 1 or num_classes < 1 or any(h < 1 for h in hidden):
        raise DimensionError("all layer widths must be positive")
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden]
    layers = [Dense(glorot_uniform(a, b, rng, dtype), np.zeros(b, dtype=dtype)) for a, b in zip(dims, dims[1:])]
    norms = [BatchNorm.fresh(h) for h in hidden]
    out = Dense(glorot_uniform(dims[-1], num_classes, rng, dtype), np.zeros(num_classes, dtype=dtype))
    return MlpModel(layers, norms, out)


def mnist_mlp(num_classes: int = 10, seed: int = 0) -> MlpModel:
    return init_mlp(784, (500, 500), num_classes, seed)


# inference


def _ordered_affine(h: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    acc = h[:, 0:1] * weight[0]
    for f in range(1, weight.shape[0]):
        acc += h[:, f : f + 1] * weight[f]
    acc += bias
    return acc


def _affine(h: np.ndarray, layer: Dense, kernel: str) -> np.ndarray:
    if kernel == "exact":
        return _ordered_affine(h, layer.weight, layer.bias)
    return h @ layer.weight + layer.bias


def _check_input(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionError(f"model expects inputs of width {model.input_dim}, got shape {x.shape}")
    return x


def _check_opts(mode: str, kernel: str) -> None:
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}, got {mode!r}")
    if kernel not in KERNELS:
        raise UsageError(f"kernel must be one of {KERNELS}, got {kernel!r}")


def features(model: MlpModel, x: np.ndarray, mode: str = "inference", kernel: str = "exact") -> np.ndarray:
    """Backbone output (the input of the logit layer)."""
    _check_opts(mode, kernel)
    h = _check_input(model, x)
    if kernel == "exact":
        h = h.astype(np.float64, copy=False)
    for layer, bn in zip(model.hidden, model.norms):
        a = _affine(h, layer, kernel)
        if mode == "train":
            h = bn.normalize(a, a.mean(axis=0), a.var(axis=0))
        else:
            h = bn.normalize(a, bn.running_mean, bn.running_var)
        h = np.maximum(h, 0.0)
    return h


def forward_all(model: MlpModel, x: np.ndarray, mode: str = "inference", kernel: str = "exact") -> np.ndarray:
    """Logits of every class, shape (m, k)."""
    h = features(model, x, mode, kernel)
    return _affine(h, model.out, kernel)


def single_logit_column(model: MlpModel, h: np.ndarray, j: int) -> np.ndarray:
    """Logit of class ``j`` for each row of backbone features ``h``.

    Reads only column ``j`` of the output weights, so the cost is linear in
    the feature width and independent of the number of classes.
    """
    _check_class(model, j)
    w = model.out.weight[:, j]
    prods = h * w
    return np.add.accumulate(prods, axis=1)[:, -1] + model.out.bias[j]


def _check_class(model: MlpModel, j: int) -> None:
    if not 0 <= j < model.num_classes:
        raise IndexError(f"class {j} out of range for a model with {model.num_classes} classes")


def forward_single(model: MlpModel, x: np.ndarray, j: int, kernel: str = "exact") -> float:
    """Logit of class ``j`` for a single example, touching one output column."""
    _check_class(model, j)
    x = _check_input(model, x)
    if x.shape[0] != 1:
        raise DimensionError(f"forward_single takes one example, got {x.shape[0]}")
    h = features(model, x, "inference", kernel)
    if kernel == "exact":
        return float(single_logit_column(model, h, j)[0])
    return float(h[0] @ model.out.weight[:, j] + model.out.bias[j])


# training-time forward pass on a tape


@dataclass
class TapedForward:
    logits: ad.Tensor
    params: list[ad.Tensor]
    batch_stats: list[tuple[np.ndarray, np.ndarray]]


def forward_tape(model: MlpModel, x: np.ndarray, tape: ad.Tape) -> TapedForward:
    """Training-mode forward pass recorded on ``tape``.

    ``params`` lines up with :meth:`MlpModel.parameters`.
    """
    x = _check_input(model, x)
    m = x.shape[0]
    h = ad.Tensor(x)
    params: list[ad.Tensor] = []
    stats = []
    for layer, bn in zip(model.hidden, model.norms):
        w, b = tape.variable(layer.weight), tape.variable(layer.bias)
        g, s = tape.variable(bn.scale), tape.variable(bn.shift)
        params += [w, b, g, s]
        a = h @ w + b
        mean = ad.reduce_sum(a, axis=0) * (1.0 / m)
        centered = a - mean
        var = ad.reduce_sum(centered * centered, axis=0) * (1.0 / m)
        h = ad.relu(centered * ad.power(var + bn.eps, -0.5) * g + s)
        stats.append((mean.data[0].copy(), var.data[0].copy()))
    w, b = tape.variable(model.out.weight), tape.variable(model.out.bias)
    params += [w, b]
    return TapedForward(h @ w + b, params, stats)


# checkpoints


def save_model(path: str | Path, model: MlpModel, meta: Optional[dict[str, Any]] = None) -> Path:
    """Write every parameter and running statistic plus JSON metadata to an ``.npz`` file."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for i, (layer, bn) in enumerate(zip(model.hidden, model.norms)):
        arrays[f"hidden{i}.weight"] = layer.weight
        arrays[f"hidden{i}.bias"] = layer.bias
        arrays[f"bn{i}.scale"] = bn.scale
        arrays[f"bn{i}.shift"] = bn.shift
        arrays[f"bn{i}.running_mean"] = bn.running_mean
        arrays[f"bn{i}.running_var"] = bn.running_var
        arrays[f"bn{i}.config"] = np.array([bn.momentum, bn.eps])
    arrays["out.weight"] = model.out.weight
    arrays["out.bias"] = model.out.bias
    header = {"format": "logitsep-mlp/1", "widths": model.widths, "meta": {**model.meta, **(meta or {})}}
    arrays["header"] = np.array(json.dumps(header))
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed entry timestamps keep identical models byte-identical on disk
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    return path


def load_model(path: str | Path) -> MlpModel:
    try:
        with np.load(Path(path), allow_pickle=False) as npz:
            data = {name: npz[name] for name in npz.files}
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: not a readable checkpoint ({exc})") from exc
    try:
        header = json.loads(str(data.pop("header")))
        if header.get("format") != "logitsep-mlp/1":
            raise FormatError(f"{path}: unknown checkpoint format {header.get('format')!r}")
        n_hidden = len(header["widths"]) - 2
        hidden, norms = [], []
        for i in range(n_hidden):
            hidden.append(Dense(data[f"hidden{i}.weight"], data[f"hidden{i}.bias"]))
            momentum, eps = data[f"bn{i}.config"]
            norms.append(
                BatchNorm(
                    data[f"bn{i}.scale"],
                    data[f"bn{i}.shift"],
                    data[f"bn{i}.running_mean"],
                    data[f"bn{i}.running_var"],
                    float(momentum),
                    float(eps),
                )
            )
        out = Dense(data["out.weight"], data["out.bias"])
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint is missing array {exc}") from exc
    return MlpModel(hidden, norms, out, header.get("meta", {}))
