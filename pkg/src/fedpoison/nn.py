"""Minimal dense-network stack: architectures, flat parameter vectors,
forward/backward, SGD/Adam, and a finite-difference gradient checker.

Everything is float64 numpy. Models are immutable values: forward/backward
never mutate a ParamVector, and every update returns a new one. Batch-norm
running statistics live inside the flat parameter vector as zero-gradient
slots, so federated averaging treats them like any other parameter;
``train_batch`` refreshes them after each optimizer step.
"""
from __future__ import annotations

import functools
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

ACTIVATIONS = ("leaky_relu", "relu", "sigmoid", "tanh", "identity")
HEADS = ("softmax_ce", "sigmoid_bce", "linear")
LOSSES = ("cross_entropy", "bce", "mse")
HEAD_FOR_LOSS = {"cross_entropy": "softmax_ce", "bce": "sigmoid_bce", "mse": "linear"}

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Array shapes inconsistent with the architecture."""


class NumericError(ArithmeticError):
    """Non-finite values encountered during evaluation."""


@dataclass(frozen=True)
class ArchSpec:
    """Shape and wiring of a multilayer perceptron.

    layer_dims lists input, hidden..., output sizes; activations and
    batch_norm have one entry per weight layer. The output head is applied
    after the final layer's activation.
    """

    layer_dims: tuple[int, ...]
    activations: tuple[str, ...]
    batch_norm: tuple[bool, ...]
    output_head: str = "linear"
    leaky_slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        object.__setattr__(self, "activations", tuple(self.activations))
        object.__setattr__(self, "batch_norm", tuple(bool(b) for b in self.batch_norm))
        if len(self.layer_dims) < 2:
            raise ValueError("need at least input and output dims")
        if any(d <= 0 for d in self.layer_dims):
            raise ValueError("layer dims must be positive")
        n = self.n_layers
        if len(self.activations) != n:
            raise ValueError(f"expected {n} activation tags, got {len(self.activations)}")
        if len(self.batch_norm) != n:
            raise ValueError(f"expected {n} batch_norm flags, got {len(self.batch_norm)}")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must be in (0, 1)")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def param_count(self) -> int:
        return _slices(self)[-1]

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "activations": list(self.activations),
            "batch_norm": list(self.batch_norm),
            "output_head": self.output_head,
            "leaky_slope": self.leaky_slope,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        return ArchSpec(
            layer_dims=tuple(d["layer_dims"]),
            activations=tuple(d["activations"]),
            batch_norm=tuple(d["batch_norm"]),
            output_head=d.get("output_head", "linear"),
            leaky_slope=float(d.get("leaky_slope", 0.2)),
        )


def mlp_arch(dims, head: str, *, activation: str = "leaky_relu",
             hidden_bn: bool = False, slope: float = 0.2) -> ArchSpec:
    """Convenience builder: ``activation`` (+ optional BN) on hidden layers,
    identity on the output layer, given head."""
    dims = tuple(int(d) for d in dims)
    n = len(dims) - 1
    acts = tuple(activation if i < n - 1 else "identity" for i in range(n))
    bns = tuple(hidden_bn if i < n - 1 else False for i in range(n))
    return ArchSpec(dims, acts, bns, output_head=head, leaky_slope=slope)


@dataclass(frozen=True)
class _LayerSlices:
    W: slice
    b: Optional[slice]
    gamma: Optional[slice]
    beta: Optional[slice]
    run_mean: Optional[slice]
    run_var: Optional[slice]
    n_in: int
    n_out: int


@functools.lru_cache(maxsize=None)
def _layer_slices(arch: ArchSpec) -> tuple[_LayerSlices, ...]:
    out = []
    pos = 0
    for l in range(arch.n_layers):
        n_in, n_out = arch.layer_dims[l], arch.layer_dims[l + 1]
        w = slice(pos, pos + n_in * n_out); pos = w.stop
        b = gamma = beta = rm = rv = None
        if arch.batch_norm[l]:
            # batch-norm's beta supplies the shift; a linear bias here would
            # be cancelled by the mean subtraction, so it is omitted
            gamma = slice(pos, pos + n_out); pos = gamma.stop
            beta = slice(pos, pos + n_out); pos = beta.stop
            rm = slice(pos, pos + n_out); pos = rm.stop
            rv = slice(pos, pos + n_out); pos = rv.stop
        else:
            b = slice(pos, pos + n_out); pos = b.stop
        out.append(_LayerSlices(w, b, gamma, beta, rm, rv, n_in, n_out))
    return tuple(out)


@functools.lru_cache(maxsize=None)
def _slices(arch: ArchSpec) -> tuple:
    ls = _layer_slices(arch)
    last = ls[-1]
    end = (last.run_var if last.run_var is not None else last.b).stop
    return ls + (end,)


@functools.lru_cache(maxsize=None)
def _buffer_mask(arch: ArchSpec) -> np.ndarray:
    """True for running-statistic slots (state, not differentiable params)."""
    mask = np.zeros(arch.param_count(), dtype=bool)
    for sl in _layer_slices(arch):
        if sl.run_mean is not None:
            mask[sl.run_mean] = True
            mask[sl.run_var] = True
    mask.flags.writeable = False
    return mask


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector bound to an architecture."""

    values: np.ndarray
    arch: ArchSpec

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeError("values must be one-dimensional")
        if v.shape[0] != self.arch.param_count():
            raise ShapeError(
                f"expected {self.arch.param_count()} parameters for this arch, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise NumericError("parameter vector contains non-finite values")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.arch)


def init_params(arch: ArchSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases, identity batch-norm state."""
    v = np.zeros(arch.param_count())
    for sl in _layer_slices(arch):
        limit = np.sqrt(6.0 / (sl.n_in + sl.n_out))
        v[sl.W] = rng.uniform(-limit, limit, size=sl.n_in * sl.n_out)
        if sl.gamma is not None:
            v[sl.gamma] = 1.0
            v[sl.run_var] = 1.0
    return ParamVector(v, arch)


def _activate(tag: str, z: np.ndarray, slope: float) -> np.ndarray:
    if tag == "identity":
        return z
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "leaky_relu":
        return np.where(z > 0.0, z, slope * z)
    if tag == "tanh":
        return np.tanh(z)
    if tag == "sigmoid":
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    raise ValueError(f"unknown activation {tag!r}")


def _activate_grad(tag: str, z: np.ndarray, a: np.ndarray, slope: float) -> np.ndarray:
    if tag == "identity":
        return np.ones_like(z)
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    if tag == "leaky_relu":
        return np.where(z > 0.0, 1.0, slope)
    if tag == "tanh":
        return 1.0 - a * a
    if tag == "sigmoid":
        return a * (1.0 - a)
    raise ValueError(f"unknown activation {tag!r}")


def _apply_head(head: str, y: np.ndarray) -> np.ndarray:
    if head == "linear":
        return y
    if head == "sigmoid_bce":
        return _activate("sigmoid", y, 0.0)
    if head == "softmax_ce":
        shifted = y - y.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    raise ValueError(f"unknown head {head!r}")


def _forward_cache(pv: ParamVector, batch: np.ndarray, train: bool) -> tuple[np.ndarray, list]:
    """Full forward pass keeping the intermediates needed for backward.

    Returns (yhat, cache). cache[l] holds the layer's input, pre/post
    batch-norm pre-activations, activation output, and batch-norm batch
    statistics when they were used.
    """
    arch = pv.arch
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("batch must be a 2-D matrix")
    if x.shape[1] != arch.input_dim:
        raise ShapeError(f"batch has {x.shape[1]} columns, arch expects {arch.input_dim}")
    v = pv.values
    cache = []
    a = x
    for l, sl in enumerate(_layer_slices(arch)):
        W = v[sl.W].reshape(sl.n_out, sl.n_in)
        z = a @ W.T
        if sl.b is not None:
            z = z + v[sl.b]
        entry = {"x": a, "z": z, "bn": None}
        zb = z
        if arch.batch_norm[l]:
            n = z.shape[0]
            use_batch = train and n > 1
            if use_batch:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
            else:
                mu = v[sl.run_mean]
                var = v[sl.run_var]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            z_hat = (z - mu) * inv_std
            zb = v[sl.gamma] * z_hat + v[sl.beta]
            entry["bn"] = {
                "mu": mu, "var": var, "inv_std": inv_std, "z_hat": z_hat,
                "batch_stats": use_batch,
            }
        act = arch.activations[l]
        a = _activate(act, zb, arch.leaky_slope)
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite activations at layer {l}")
        entry["zb"] = zb
        entry["a"] = a
        cache.append(entry)
    yhat = _apply_head(arch.output_head, a)
    cache.append({"y_pre": a, "yhat": yhat})
    return yhat, cache


def _backward(pv: ParamVector, cache: list, d_ypre: np.ndarray,
              need_input_grad: bool = False) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Backward pass from a gradient w.r.t. the pre-head output."""
    arch = pv.arch
    v = pv.values
    grad = np.zeros_like(v)
    d_a = d_ypre
    d_x = None
    for l in range(arch.n_layers - 1, -1, -1):
        sl = _layer_slices(arch)[l]
        entry = cache[l]
        d_zb = d_a * _activate_grad(arch.activations[l], entry["zb"], entry["a"], arch.leaky_slope)
        if entry["bn"] is not None:
            bn = entry["bn"]
            z_hat, inv_std = bn["z_hat"], bn["inv_std"]
            grad[sl.gamma] = (d_zb * z_hat).sum(axis=0)
            grad[sl.beta] = d_zb.sum(axis=0)
            d_zhat = d_zb * v[sl.gamma]
            if bn["batch_stats"]:
                n = d_zb.shape[0]
                # standard batch-norm backward through batch mean/variance
                d_z = (inv_std / n) * (
                    n * d_zhat
                    - d_zhat.sum(axis=0)
                    - z_hat * (d_zhat * z_hat).sum(axis=0)
                )
            else:
                d_z = d_zhat * inv_std
        else:
            d_z = d_zb
        W = v[sl.W].reshape(sl.n_out, sl.n_in)
        grad[sl.W] = (d_z.T @ entry["x"]).ravel()
        if sl.b is not None:
            grad[sl.b] = d_z.sum(axis=0)
        if l > 0 or need_input_grad:
            d_a = d_z @ W
    if need_input_grad:
        d_x = d_a
    return grad, d_x


def _head_backward(head: str, yhat: np.ndarray, d_yhat: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pre-head output given a gradient w.r.t. yhat."""
    if head == "linear":
        return d_yhat
    if head == "sigmoid_bce":
        return d_yhat * yhat * (1.0 - yhat)
    if head == "softmax_ce":
        dot = (d_yhat * yhat).sum(axis=1, keepdims=True)
        return yhat * (d_yhat - dot)
    raise ValueError(f"unknown head {head!r}")


def _bn_stat_update(pv: ParamVector, cache: list, momentum: float = BN_MOMENTUM) -> ParamVector:
    """Fold refreshed running statistics from a train-mode forward cache."""
    arch = pv.arch
    out = pv.values.copy()
    touched = False
    for l, sl in enumerate(_layer_slices(arch)):
        bn = cache[l]["bn"]
        if bn is None or not bn["batch_stats"]:
            continue
        n = cache[l]["z"].shape[0]
        var_unbiased = bn["var"] * n / (n - 1)
        out[sl.run_mean] = (1 - momentum) * out[sl.run_mean] + momentum * bn["mu"]
        out[sl.run_var] = (1 - momentum) * out[sl.run_var] + momentum * var_unbiased
        touched = True
    if not touched:
        return pv
    return pv.with_values(out)


def forward(pv: ParamVector, batch: np.ndarray, train: bool = False) -> np.ndarray:
    """Run the network on a batch; rows in, rows out.

    ``train`` selects batch statistics for batch-norm layers (falling back
    to running statistics at batch size 1); inference mode always uses the
    stored running statistics.
    """
    yhat, _ = _forward_cache(pv, batch, train)
    return yhat


def _prepare_targets(arch: ArchSpec, targets: np.ndarray, loss: str) -> np.ndarray:
    t = np.asarray(targets)
    if loss == "cross_entropy" and t.ndim == 1:
        onehot = np.zeros((t.shape[0], arch.output_dim))
        onehot[np.arange(t.shape[0]), t.astype(int)] = 1.0
        return onehot
    t = t.astype(np.float64)
    if t.ndim == 1:
        t = t[:, None]
    if t.shape[1] != arch.output_dim:
        raise ShapeError(f"targets have {t.shape[1]} columns, arch outputs {arch.output_dim}")
    return t


def _loss_and_dypre(arch: ArchSpec, cache: list, targets: np.ndarray,
                    loss: str) -> tuple[float, np.ndarray]:
    """Loss plus its gradient w.r.t. the pre-head output (fused, stable)."""
    y_pre = cache[-1]["y_pre"]
    yhat = cache[-1]["yhat"]
    n = y_pre.shape[0]
    t = _prepare_targets(arch, targets, loss)
    if t.shape[0] != n:
        raise ShapeError("targets row count does not match batch")
    if loss == "cross_entropy":
        lse = np.log(np.exp(y_pre - y_pre.max(axis=1, keepdims=True)).sum(axis=1))
        lse += y_pre.max(axis=1)
        value = float(np.mean(lse - (t * y_pre).sum(axis=1)))
        d = (yhat - t) / n
    elif loss == "bce":
        # log sigmoid(z) = -softplus(-z); log(1 - sigmoid(z)) = -softplus(z)
        value = float(np.mean(t * np.logaddexp(0.0, -y_pre) + (1 - t) * np.logaddexp(0.0, y_pre)))
        d = (yhat - t) / t.size
    elif loss == "mse":
        diff = y_pre - t
        value = float(0.5 * np.mean((diff * diff).sum(axis=1)))
        d = diff / n
    else:
        raise ValueError(f"unknown loss {loss!r}")
    if not np.isfinite(value):
        raise NumericError("loss is non-finite")
    return value, d


def loss_and_grad(pv: ParamVector, batch: np.ndarray, targets: np.ndarray,
                  loss: str, train: bool = True) -> tuple[float, ParamVector]:
    """Mean-reduced loss and its gradient as a ParamVector.

    The loss tag must match the architecture's head (cross_entropy with a
    softmax head, bce with a sigmoid head, mse with a linear head).
    """
    if HEAD_FOR_LOSS.get(loss) != pv.arch.output_head:
        raise ValueError(f"loss {loss!r} incompatible with head {pv.arch.output_head!r}")
    yhat, cache = _forward_cache(pv, batch, train)
    value, d_ypre = _loss_and_dypre(pv.arch, cache, targets, loss)
    grad, _ = _backward(pv, cache, d_ypre)
    return value, ParamVector(grad, pv.arch)


@dataclass
class OptimizerState:
    """SGD(lr, momentum) or Adam(lr, beta1, beta2, eps) with flat slot buffers."""

    kind: str
    lr: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @staticmethod
    def sgd(lr: float, momentum: float = 0.0) -> "OptimizerState":
        return OptimizerState("sgd", lr, momentum=momentum)

    @staticmethod
    def adam(lr: float, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8) -> "OptimizerState":
        return OptimizerState("adam", lr, beta1=beta1, beta2=beta2, eps=eps)


def optimizer_step(state: OptimizerState, pv: ParamVector, grad: ParamVector) -> ParamVector:
    """Apply one update; mutates ``state`` buffers, returns the new model."""
    if len(pv) != len(grad):
        raise ShapeError("model and gradient lengths differ")
    g = grad.values
    v = pv.values
    if state.kind == "sgd":
        buf = state.slots.get("momentum")
        if state.momentum != 0.0:
            if buf is None:
                buf = np.zeros_like(v)
            buf = state.momentum * buf + g
            state.slots["momentum"] = buf
            update = buf
        else:
            update = g
        new = v - state.lr * update
    else:
        m = state.slots.get("m")
        s = state.slots.get("v")
        if m is None:
            m = np.zeros_like(v)
            s = np.zeros_like(v)
        state.step += 1
        m = state.beta1 * m + (1 - state.beta1) * g
        s = state.beta2 * s + (1 - state.beta2) * g * g
        state.slots["m"] = m
        state.slots["v"] = s
        m_hat = m / (1 - state.beta1 ** state.step)
        s_hat = s / (1 - state.beta2 ** state.step)
        new = v - state.lr * m_hat / (np.sqrt(s_hat) + state.eps)
    return pv.with_values(new)


def train_batch(pv: ParamVector, state: OptimizerState, batch: np.ndarray,
                targets: np.ndarray, loss: str) -> tuple[ParamVector, float]:
    """One train-mode step: loss, backward, optimizer update, and batch-norm
    running-statistic refresh, all from a single forward pass."""
    if HEAD_FOR_LOSS.get(loss) != pv.arch.output_head:
        raise ValueError(f"loss {loss!r} incompatible with head {pv.arch.output_head!r}")
    _, cache = _forward_cache(pv, batch, True)
    value, d_ypre = _loss_and_dypre(pv.arch, cache, targets, loss)
    grad, _ = _backward(pv, cache, d_ypre)
    new = optimizer_step(state, pv, ParamVector(grad, pv.arch))
    new = _bn_stat_update(new, cache)
    return new, value


def grad_check(pv: ParamVector, batch: np.ndarray, targets: np.ndarray,
               loss: str, eps: float = 1e-5, train: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per parameter is |analytic - numeric| divided by
    max(1e-8, |analytic| + |numeric|). O(P) forward passes; meant for small
    models. Two kinds of slots are excluded from the max:

    * batch-norm running statistics — state, not parameters the loss is
      differentiated against;
    * parameters whose +/-eps probes land on opposite sides of a relu-family
      kink (detected exactly via pre-activation sign flips between the two
      probes) — the derivative jumps inside the probe interval, so the
      central difference does not estimate the gradient there.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, analytic = loss_and_grad(pv, batch, targets, loss, train=train)
    arch = pv.arch
    kinked = [l for l, a in enumerate(arch.activations) if a in ("relu", "leaky_relu")]

    def f(values: np.ndarray):
        probe = pv.with_values(values)
        _, cache = _forward_cache(probe, batch, train)
        value, _ = _loss_and_dypre(arch, cache, targets, loss)
        signs = [cache[l]["zb"] > 0.0 for l in kinked]
        return value, signs

    base = pv.values
    buffers = _buffer_mask(arch)
    worst = 0.0
    for i in range(len(base)):
        if buffers[i]:
            continue
        up = base.copy(); up[i] += eps
        dn = base.copy(); dn[i] -= eps
        f_up, s_up = f(up)
        f_dn, s_dn = f(dn)
        if any(not np.array_equal(a, b) for a, b in zip(s_up, s_dn)):
            continue
        numeric = (f_up - f_dn) / (2 * eps)
        a = analytic.values[i]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        if err > worst:
            worst = err
    return worst


def pack_param_vector(pv: ParamVector) -> bytes:
    """Serialize: little-endian u32 header length, JSON ArchSpec header,
    little-endian float64 values."""
    header = json.dumps(pv.arch.to_dict(), sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(header)) + header + pv.values.astype("<f8").tobytes()


def unpack_param_vector(blob: bytes) -> ParamVector:
    if len(blob) < 4:
        raise ValueError("truncated parameter blob")
    (hlen,) = struct.unpack_from("<I", blob, 0)
    if len(blob) < 4 + hlen:
        raise ValueError("truncated parameter header")
    arch = ArchSpec.from_dict(json.loads(blob[4:4 + hlen].decode("utf-8")))
    values = np.frombuffer(blob, dtype="<f8", offset=4 + hlen).astype(np.float64)
    return ParamVector(values, arch)
