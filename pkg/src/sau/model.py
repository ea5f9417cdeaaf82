"""Desk-scale encoder, linear classifier head and projection head.

Parameters live in a flat ``{name: ndarray}`` dict so the optimizer, the
checkpoint writer and the gradient checker can all treat them uniformly.
Forward functions prefixed with ``_`` take a dict of autodiff Tensors; the
public ``encode``/``classify``/``project`` wrap plain arrays for inference.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .storage import FormatError, read_tensor, write_tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
DEGENERATE_NORM = 1e-12


class DegenerateEmbeddingError(FloatingPointError):
    pass


@dataclass
class ArchConfig:
    input_shape: tuple[int, ...] = (16,)
    n_classes: int = 10
    # MLP widths for flat input, conv channels for (C, H, W) input
    encoder_dims: tuple[int, ...] = (64, 64)
    proj_hidden: tuple[int, ...] = (64, 64)
    d_z: int = 32
    proj_norm: bool = True

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.encoder_dims = tuple(int(d) for d in self.encoder_dims)
        self.proj_hidden = tuple(int(d) for d in self.proj_hidden)
        dims = (*self.input_shape, *self.encoder_dims, *self.proj_hidden, self.d_z, self.n_classes)
        if any(d < 1 for d in dims) or not self.encoder_dims:
            raise ValueError(f"all architecture dims must be >= 1: {self}")

    @property
    def conv(self) -> bool:
        return len(self.input_shape) == 3

    @property
    def d_h(self) -> int:
        return self.encoder_dims[-1]


@dataclass
class OptimConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-3
    total_epochs: int = 200

    def __post_init__(self):
        if self.lr0 <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0 or self.total_epochs < 0:
            raise ValueError(f"invalid optimizer config {self}")


@dataclass
class ModelState:
    arch: ArchConfig
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0

    def copy(self) -> "ModelState":
        return ModelState(self.arch, {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.momentum.items()},
                          {k: v.copy() for k, v in self.buffers.items()}, self.step, self.epoch)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def constants(self) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v) for k, v in self.params.items()}


# -- construction -------------------------------------------------------------

def _layer_shapes(arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if arch.conv:
        c_in = arch.input_shape[0]
        for i, c_out in enumerate(arch.encoder_dims):
            shapes += [(f"enc.{i}.W", (c_out, c_in, 3, 3)), (f"enc.{i}.b", (c_out,))]
            c_in = c_out
    else:
        d_in = int(np.prod(arch.input_shape))
        for i, d_out in enumerate(arch.encoder_dims):
            shapes += [(f"enc.{i}.W", (d_in, d_out)), (f"enc.{i}.b", (d_out,))]
            d_in = d_out
    shapes += [("cls.W", (arch.d_h, arch.n_classes)), ("cls.b", (arch.n_classes,))]
    d_in = arch.d_h
    for i, d_out in enumerate(arch.proj_hidden):
        shapes += [(f"proj.{i}.W", (d_in, d_out)), (f"proj.{i}.b", (d_out,))]
        if arch.proj_norm:
            shapes += [(f"proj.{i}.gamma", (d_out,)), (f"proj.{i}.beta", (d_out,))]
        d_in = d_out
    shapes += [(f"proj.out.W", (d_in, arch.d_z)), (f"proj.out.b", (arch.d_z,))]
    return shapes


def param_count(arch: ArchConfig) -> int:
    return sum(int(np.prod(s)) for _, s in _layer_shapes(arch))


def init_params(arch: ArchConfig, seed: int) -> ModelState:
    """He-scaled weights (variance 2 / fan_in), zero biases, unit BN scales."""
    params: dict[str, np.ndarray] = {}
    for k, (name, shape) in enumerate(_layer_shapes(arch)):
        if name.endswith(".W"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            g = rngmod.stream(seed, "init", k)
            params[name] = g.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    buffers = {}
    if arch.proj_norm:
        for i, d in enumerate(arch.proj_hidden):
            buffers[f"proj.{i}.mean"] = np.zeros(d)
            buffers[f"proj.{i}.var"] = np.ones(d)
    momentum = {k: np.zeros_like(v) for k, v in params.items()}
    return ModelState(arch, params, momentum, buffers)


# -- forward ---------------------------------------------------------------

def _encode(P: Mapping[str, ad.Tensor], x, arch: ArchConfig) -> ad.Tensor:
    h = ad.as_tensor(x)
    if arch.conv:
        if h.ndim != 4 or tuple(h.shape[1:]) != arch.input_shape:
            raise ValueError(f"expected input (B, {arch.input_shape}), got {h.shape}")
        for i in range(len(arch.encoder_dims)):
            h = ad.relu(ad.conv2d(h, P[f"enc.{i}.W"], P[f"enc.{i}.b"], padding=1))
            if h.shape[2] >= 2 and h.shape[3] >= 2:
                h = ad.avg_pool2(h)
        return h.mean(axis=(2, 3))
    d_in = int(np.prod(arch.input_shape))
    if h.ndim < 2 or int(np.prod(h.shape[1:])) != d_in:
        raise ValueError(f"expected input (B, {arch.input_shape}), got {h.shape}")
    h = h.reshape(h.shape[0], d_in)
    for i in range(len(arch.encoder_dims)):
        h = ad.relu(h @ P[f"enc.{i}.W"] + P[f"enc.{i}.b"])
    return h


def _classify(P: Mapping[str, ad.Tensor], h) -> ad.Tensor:
    return ad.as_tensor(h) @ P["cls.W"] + P["cls.b"]


def _batch_norm(a: ad.Tensor, gamma, beta, running: tuple[np.ndarray, np.ndarray] | None,
                stats_out: dict | None, key: str) -> ad.Tensor:
    if running is not None:
        mu, var = running
        a_hat = (a - mu) / np.sqrt(var + BN_EPS)
    else:
        mu = a.mean(axis=0, keepdims=True)
        centred = a - mu
        var = ad.square(centred).mean(axis=0, keepdims=True)
        a_hat = centred / ad.sqrt(var + BN_EPS)
        if stats_out is not None:
            n = a.shape[0]
            stats_out[key] = (mu.data.ravel().copy(), var.data.ravel() * n / max(n - 1, 1))
    return a_hat * gamma + beta


def _project(P: Mapping[str, ad.Tensor], h, arch: ArchConfig, buffers: Mapping[str, np.ndarray] | None = None,
             train: bool = True, stats_out: dict | None = None) -> ad.Tensor:
    """Projection MLP then row-wise L2 normalisation.

    ``train=True`` normalises hidden layers with batch statistics; otherwise
    the running statistics in ``buffers`` are used.
    """
    z = ad.as_tensor(h)
    for i in range(len(arch.proj_hidden)):
        z = z @ P[f"proj.{i}.W"] + P[f"proj.{i}.b"]
        if arch.proj_norm:
            running = None if train else (buffers[f"proj.{i}.mean"], buffers[f"proj.{i}.var"])
            z = _batch_norm(z, P[f"proj.{i}.gamma"], P[f"proj.{i}.beta"], running, stats_out, f"proj.{i}")
        z = ad.relu(z)
    z = z @ P["proj.out.W"] + P["proj.out.b"]
    return l2_normalize(z)


def l2_normalize(z) -> ad.Tensor:
    z = ad.as_tensor(z)
    norms = ad.sqrt(ad.square(z).sum(axis=1, keepdims=True))
    small = norms.data.ravel() < DEGENERATE_NORM
    if small.any():
        raise DegenerateEmbeddingError(f"rows {np.flatnonzero(small).tolist()} have norm < {DEGENERATE_NORM}")
    return z / norms


def encode(state: ModelState, x) -> np.ndarray:
    return _encode(state.constants(), np.asarray(x, dtype=np.float64), state.arch).data


def classify(state: ModelState, h) -> np.ndarray:
    return _classify(state.constants(), np.asarray(h, dtype=np.float64)).data


def project(state: ModelState, h, train: bool = False) -> np.ndarray:
    return _project(state.constants(), np.asarray(h, dtype=np.float64), state.arch, state.buffers, train=train).data


def predict(state: ModelState, x, batch_size: int = 1024) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = [classify(state, encode(state, x[i:i + batch_size])).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def embed(state: ModelState, x, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode embeddings (running normalisation statistics)."""
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([project(state, encode(state, x[i:i + batch_size]))
                           for i in range(0, len(x), batch_size)])


def update_running_stats(state: ModelState, stats: Mapping[str, tuple[np.ndarray, np.ndarray]],
                         momentum: float = BN_MOMENTUM) -> None:
    for key, (mu, var) in stats.items():
        m, v = state.buffers[f"{key}.mean"], state.buffers[f"{key}.var"]
        m *= 1.0 - momentum
        m += momentum * mu
        v *= 1.0 - momentum
        v += momentum * var


# -- gradients and optimisation ----------------------------------------------

def grad(state: ModelState, objective: Callable[..., ad.Tensor], *batch_inputs, **kwargs):
    """Exact gradient of ``objective(params, *batch_inputs)`` w.r.t. every parameter.

    ``objective`` receives the parameters as leaf Tensors. Returns
    (value, {name: gradient}).
    """
    return ad.grad(objective, state.params, *batch_inputs, **kwargs)


def cosine_lr(epoch: float, total_epochs: int, lr0: float) -> float:
    if total_epochs <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def sgd_step(state: ModelState, grads: Mapping[str, np.ndarray], lr: float, optim: OptimConfig) -> ModelState:
    """SGD with momentum; weight decay is folded into the momentum buffer."""
    new = state.copy()
    for k, p in state.params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        buf = optim.momentum * state.momentum[k] + g + optim.weight_decay * p
        upd = p - lr * buf
        if not (np.all(np.isfinite(buf)) and np.all(np.isfinite(upd))):
            raise ad.NonFiniteError(f"sgd_step[{k}]")
        new.momentum[k] = buf
        new.params[k] = upd
    new.step += 1
    return new


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(state: ModelState, path: str | Path) -> Path:
    """Tensor blob at ``path`` (float64 records) plus ``path.json`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    with open(path, "wb") as fh:
        for kind, tensors in (("param", state.params), ("momentum", state.momentum), ("buffer", state.buffers)):
            for name in sorted(tensors):
                off = write_tensor(fh, tensors[name], dtype_code=1)
                entries.append({"kind": kind, "name": name, "shape": list(tensors[name].shape), "offset": off})
    meta = {"arch": asdict(state.arch), "step": state.step, "epoch": state.epoch, "tensors": entries}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))
    return path


def load_checkpoint(path: str | Path, arch: ArchConfig | None = None) -> ModelState:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    saved = ArchConfig(**meta["arch"])
    if arch is not None and arch != saved:
        raise ValueError(f"checkpoint architecture {saved} does not match requested {arch}")
    buf = path.read_bytes()
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "momentum": {}, "buffer": {}}
    for e in meta["tensors"]:
        arr, _ = read_tensor(buf, e["offset"])
        if list(arr.shape) != e["shape"]:
            raise FormatError(f"checkpoint tensor {e['name']} shape mismatch")
        groups[e["kind"]][e["name"]] = arr
    expected = dict(_layer_shapes(saved))
    got = {k: v.shape for k, v in groups["param"].items()}
    if got != expected:
        raise ValueError("checkpoint parameters do not match its architecture")
    return ModelState(saved, groups["param"], groups["momentum"], groups["buffer"], meta["step"], meta["epoch"])

