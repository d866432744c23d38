"""Small multilayer perceptrons with closed-form derivatives.

Parameters live in one flat float64 vector, layer-major: for every affine
layer the weight matrix ``W`` (shape ``(fan_out, fan_in)``, row-major) is
followed by its bias ``b``. Inputs may be a single vector ``(d_in,)`` or a
batch ``(N, d_in)``; outputs follow the same convention.

Besides forward evaluation and reverse-mode products, a scalar network
exposes its input gradient, input Hessian-vector products and the parameter
derivative of ``c . grad_z f``. The last two are what an adjoint solver needs
when the vector field contains ``grad_z f``.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ACTIVATIONS = ("softplus", "tanh")
_BOUNDED = {"tanh": 1.0}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple
    activations: tuple
    output_dim: int = 1
    output_activation: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "activations", tuple(self.activations))
        if self.input_dim <= 0 or self.output_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError("layer widths must be positive integers")
        if len(self.activations) != len(self.hidden):
            raise ValueError("need exactly one activation per hidden layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.output_activation not in (None, "none", "softplus"):
            raise ValueError(f"unsupported output activation {self.output_activation!r}")
        if self.output_activation == "none":
            object.__setattr__(self, "output_activation", None)

    @property
    def layer_widths(self) -> tuple:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def shapes(self) -> list:
        w = self.layer_widths
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "activations": list(self.activations),
            "output_dim": self.output_dim,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden=tuple(d["hidden"]),
            activations=tuple(d["activations"]),
            output_dim=int(d.get("output_dim", 1)),
            output_activation=d.get("output_activation"),
        )

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def unpack(spec: MlpSpec, theta: np.ndarray) -> list:
    """Views ``[(W1, b1), ..., (WL, bL)]`` into ``theta``."""
    theta = np.asarray(theta)
    if theta.shape != (spec.n_params,):
        raise ValueError(f"parameter vector has shape {theta.shape}, expected ({spec.n_params},)")
    layers, k = [], 0
    for o, i in spec.shapes:
        W = theta[k:k + o * i].reshape(o, i)
        k += o * i
        b = theta[k:k + o]
        k += o
        layers.append((W, b))
    return layers


def _act(name: str, a: np.ndarray, order: int = 1):
    """Activation value and its first ``order`` derivatives."""
    if name == "tanh":
        s = np.tanh(a)
        d1 = 1.0 - s * s
        if order < 2:
            return s, d1
        return s, d1, -2.0 * s * d1
    # softplus, evaluated stably; its derivative is the logistic function
    e = np.exp(-np.abs(a))
    s = np.maximum(a, 0.0) + np.log1p(e)
    inv = 1.0 / (1.0 + e)
    d1 = np.where(a >= 0, inv, e * inv)
    if order < 2:
        return s, d1
    return s, d1, d1 * (1.0 - d1)


def softplus(a):
    return _act("softplus", np.asarray(a, dtype=float), 1)[0]


def _as_batch(spec: MlpSpec, z):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    if zb.ndim != 2 or zb.shape[1] != spec.input_dim:
        raise ValueError(f"input has shape {z.shape}, expected (..., {spec.input_dim})")
    if not np.all(np.isfinite(zb)):
        raise ValueError("non-finite network input")
    return zb, single


def _forward_cache(spec, layers, z, order=1):
    hs, ds, d2s = [z], [], []
    h = z
    for (W, b), name in zip(layers[:-1], spec.activations):
        a = h @ W.T + b
        vals = _act(name, a, order)
        h = vals[0]
        hs.append(h)
        ds.append(vals[1])
        if order >= 2:
            d2s.append(vals[2])
    W, b = layers[-1]
    a_out = h @ W.T + b
    return hs, ds, d2s, a_out


def forward(spec: MlpSpec, theta, z) -> np.ndarray:
    zb, single = _as_batch(spec, z)
    layers = unpack(spec, theta)
    _, _, _, a_out = _forward_cache(spec, layers, zb, order=1)
    y = _act(spec.output_activation, a_out, 1)[0] if spec.output_activation else a_out
    return y[0] if single else y


def vjp(spec: MlpSpec, theta, z, cotangent):
    """Reverse-mode product: ``(c^T dy/dz, sum_n c_n^T dy_n/dtheta)``."""
    zb, single = _as_batch(spec, z)
    c = np.asarray(cotangent, dtype=float).reshape(zb.shape[0], spec.output_dim)
    layers = unpack(spec, theta)
    hs, ds, _, a_out = _forward_cache(spec, layers, zb)
    abar = c * _act(spec.output_activation, a_out, 1)[1] if spec.output_activation else c
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        grads.append((abar.sum(axis=0), abar.T @ hs[li]))
        hbar = abar @ W
        if li > 0:
            abar = hbar * ds[li - 1]
    gtheta = np.concatenate([np.concatenate([gW.ravel(), gb]) for gb, gW in reversed(grads)])
    return (hbar[0] if single else hbar), gtheta


def vjp_params(spec: MlpSpec, theta, z, cotangent) -> np.ndarray:
    return vjp(spec, theta, z, cotangent)[1]


def grad_input(spec: MlpSpec, theta, z) -> np.ndarray:
    """Jacobian ``dy/dz`` with shape ``(d_out, d_in)`` (batched: ``(N, d_out, d_in)``)."""
    zb, single = _as_batch(spec, z)
    N = zb.shape[0]
    jac = np.empty((N, spec.output_dim, spec.input_dim))
    for k in range(spec.output_dim):
        c = np.zeros((N, spec.output_dim))
        c[:, k] = 1.0
        jac[:, k, :] = vjp(spec, theta, zb, c)[0]
    return jac[0] if single else jac


def gradient_terms(spec: MlpSpec, theta, z, direction):
    """Second-order quantities of a scalar network in one pass.

    For each input row ``z_n`` with direction ``c_n`` returns

    * ``y``      network output, shape ``(N,)``
    * ``grad``   ``grad_z y``, shape ``(N, d_in)``
    * ``hvp``    ``Hess_z y @ c_n``, shape ``(N, d_in)``
    * ``gtheta`` ``sum_n d(c_n . grad_z y_n)/dtheta``, shape ``(n_params,)``

    computed by reverse accumulation through the forward tangent of the
    network (directional derivative along ``c``).
    """
    if spec.output_dim != 1:
        raise ValueError("gradient_terms needs a scalar-output network")
    zb, single = _as_batch(spec, z)
    c = np.asarray(direction, dtype=float).reshape(zb.shape)
    layers = unpack(spec, theta)
    hs, ds, d2s, a_out = _forward_cache(spec, layers, zb, order=2)

    # forward tangents: td[l] is the tangent of h_l, ta[l] of the pre-activation of layer l+1
    td = [c]
    ta = []
    for li, (W, _) in enumerate(layers[:-1]):
        a_dot = td[-1] @ W.T
        ta.append(a_dot)
        td.append(ds[li] * a_dot)
    out_dot = td[-1] @ layers[-1][0].T

    if spec.output_activation:
        y, s1, s2 = _act(spec.output_activation, a_out, 2)
        tbar = s1                   # d(out_dot)/d(tangent of a_out)
        abar = s2 * out_dot         # d(out_dot)/d(a_out)
    else:
        y = a_out
        tbar = np.ones_like(a_out)
        abar = None

    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        gW = tbar.T @ td[li]
        if abar is not None:
            gW = gW + abar.T @ hs[li]
            gb = abar.sum(axis=0)
            hbar = abar @ W
        else:
            gb = np.zeros(W.shape[0])
            hbar = None
        grads.append((gW, gb))
        tdbar = tbar @ W
        if li > 0:
            s1, s2 = ds[li - 1], d2s[li - 1]
            new_abar = s2 * ta[li - 1] * tdbar
            if hbar is not None:
                new_abar = new_abar + s1 * hbar
            abar = new_abar
            tbar = s1 * tdbar
    grad = tdbar
    hvp = hbar if hbar is not None else np.zeros_like(grad)
    gtheta = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
    y = y[:, 0]
    if single:
        return y[0], grad[0], hvp[0], gtheta
    return y, grad, hvp, gtheta


def input_gradient(spec: MlpSpec, theta, z) -> np.ndarray:
    """``grad_z y`` of a scalar network, shape ``(d_in,)`` or ``(N, d_in)``."""
    return gradient_terms(spec, theta, z, np.zeros_like(np.asarray(z, dtype=float)))[1]


def input_hessian(spec: MlpSpec, theta, z) -> np.ndarray:
    zb, single = _as_batch(spec, z)
    N, d = zb.shape
    H = np.empty((N, d, d))
    for j in range(d):
        c = np.zeros_like(zb)
        c[:, j] = 1.0
        H[:, :, j] = gradient_terms(spec, theta, zb, c)[2]
    return H[0] if single else H


def second_derivs(spec: MlpSpec, theta, z):
    """Input Hessian of a scalar network and the map ``v -> v . d(grad_z y)/dtheta``.

    The returned callable accepts ``v`` shaped like ``z`` and sums over the
    batch.
    """
    z = np.asarray(z, dtype=float)
    hess = input_hessian(spec, theta, z)

    def mixed(v):
        return gradient_terms(spec, theta, z, v)[3]

    return hess, mixed


def xavier_init(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights (gain 1), zero biases."""
    parts = []
    for o, i in spec.shapes:
        lim = math.sqrt(6.0 / (i + o))
        parts.append(rng.uniform(-lim, lim, size=o * i))
        parts.append(np.zeros(o))
    return np.concatenate(parts)


def zero_last_layer(spec: MlpSpec, theta) -> np.ndarray:
    theta = np.array(theta, dtype=float)
    o, i = spec.shapes[-1]
    theta[-(o * i + o):] = 0.0
    return theta


def output_bound(spec: MlpSpec, theta) -> float:
    """Certified bound on ``sup_z |y(z)|`` for a gamma-bounded last hidden layer.

    ``gamma * sum_i |w_i| + |b|``: the output bias is added on top of the
    plain weight sum so the bound also covers networks with an output offset.
    """
    if spec.output_dim != 1 or spec.output_activation is not None:
        raise ValueError("bound applies to scalar networks with affine output")
    if not spec.hidden:
        raise ValueError("network has no hidden layer; output is unbounded")
    gamma = _BOUNDED.get(spec.activations[-1])
    if gamma is None:
        raise ValueError(f"last hidden activation {spec.activations[-1]!r} is unbounded")
    W, b = unpack(spec, theta)[-1]
    return float(gamma * np.abs(W).sum() + np.abs(b).sum())


_MAGIC = b"MLPPARAM"
_HEADER = struct.Struct("<8s32sQ")


def save_params(path, spec: MlpSpec, theta, digest: Optional[bytes] = None):
    """Binary checkpoint: magic, SHA-256 of the architecture, length, then little-endian f8."""
    theta = np.asarray(theta, dtype="<f8").ravel()
    if spec is not None and theta.shape != (spec.n_params,):
        raise ValueError("parameter vector does not match the architecture")
    if digest is None:
        if spec is None:
            raise ValueError("need an architecture or an explicit digest")
        digest = spec.digest()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, digest, theta.size))
        fh.write(theta.tobytes())


def load_params(path, spec: Optional[MlpSpec] = None, digest: Optional[bytes] = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("file too short for a parameter checkpoint")
    magic, found, n = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError("not a parameter checkpoint")
    expected = digest if digest is not None else (spec.digest() if spec is not None else None)
    if expected is not None and found != expected:
        raise ValueError("checkpoint was written for a different architecture")
    body = raw[_HEADER.size:]
    if len(body) != 8 * n:
        raise ValueError(f"checkpoint declares {n} values but holds {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").astype(float)


def save_text(path, spec: MlpSpec, theta):
    """Portable JSON checkpoint; floats written with ``repr`` round-trip exactly."""
    theta = np.asarray(theta, dtype=float)
    doc = {"spec": spec.to_dict(), "theta": [float(v) for v in theta]}
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_text(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    spec = MlpSpec.from_dict(doc["spec"])
    theta = np.asarray(doc["theta"], dtype=float)
    if theta.shape != (spec.n_params,):
        raise ValueError("parameter count does not match the architecture")
    return spec, theta


def param_count(specs: Sequence[MlpSpec]) -> int:
    return sum(s.n_params for s in specs)
