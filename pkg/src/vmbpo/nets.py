"""Small numpy function approximators with hand-written reverse-mode gradients.

Parameters always live in one flat float64 vector; a :class:`Layout` maps
named tensors (``W0``, ``b0``, ...) to slices of it. Batches are row-major:
inputs have shape ``(N, input_dim)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -10.0, 2.0
SQUASH_EPS = 1e-6
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

_MAGIC = b"VMBPOPRM"
_VERSION = 1


class Layout:
    """Ordered mapping from tensor names to ``(offset, shape)`` in a flat vector."""

    def __init__(self, entries):
        self.entries = {}
        offset = 0
        for name, shape in entries:
            shape = tuple(int(s) for s in shape)
            self.entries[name] = (offset, shape)
            offset += int(np.prod(shape))
        self.size = offset

    def unpack(self, flat: np.ndarray) -> dict:
        if flat.shape != (self.size,):
            raise ValueError(f"parameter vector has shape {flat.shape}, layout needs ({self.size},)")
        return {k: flat[o:o + int(np.prod(s))].reshape(s) for k, (o, s) in self.entries.items()}

    def to_list(self):
        return [[k, list(s)] for k, (_, s) in self.entries.items()]

    def __eq__(self, other):
        return isinstance(other, Layout) and self.to_list() == other.to_list()


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple = (64, 64)
    output_dim: int = 1
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if min(dims) < 1:
            raise ValueError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def sizes(self):
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def layout(self) -> Layout:
        entries = []
        for i, (m, n) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            entries += [(f"W{i}", (m, n)), (f"b{i}", (n,))]
        return Layout(entries)


def init_params(spec: MlpSpec, rng: np.random.Generator, out_scale: float = 1.0) -> np.ndarray:
    """Glorot-uniform weights, zero biases; the last layer is scaled by ``out_scale``."""
    layout = spec.layout
    flat = np.zeros(layout.size)
    views = layout.unpack(flat)
    n_layers = len(spec.sizes) - 1
    for i, (m, n) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
        bound = math.sqrt(6.0 / (m + n))
        views[f"W{i}"][...] = rng.uniform(-bound, bound, size=(m, n))
        if i == n_layers - 1:
            views[f"W{i}"] *= out_scale
    return flat


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name, z, h):
    return 1.0 - h * h if name == "tanh" else (z > 0).astype(float)


def forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray, cache: list | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"input shape {x.shape} does not match input_dim {spec.input_dim}")
    p = spec.layout.unpack(params)
    n_layers = len(spec.sizes) - 1
    h = x
    for i in range(n_layers):
        z = h @ p[f"W{i}"] + p[f"b{i}"]
        if cache is not None:
            cache.append((h, z))
        h = _act(spec.activation, z) if i < n_layers - 1 else z
    return h


def backward(spec: MlpSpec, params: np.ndarray, cache: list, cotangent: np.ndarray):
    """Gradient of ``<output, cotangent>`` w.r.t. the parameters and the input."""
    p = spec.layout.unpack(params)
    grad = np.zeros_like(params)
    g = spec.layout.unpack(grad)
    delta = np.asarray(cotangent, dtype=float)
    n_layers = len(spec.sizes) - 1
    for i in reversed(range(n_layers)):
        h_in, z = cache[i]
        if i < n_layers - 1:
            delta = delta * _act_grad(spec.activation, z, _act(spec.activation, z))
        g[f"W{i}"][...] = h_in.T @ delta
        g[f"b{i}"][...] = delta.sum(axis=0)
        delta = delta @ p[f"W{i}"].T
    return grad, delta


def grad(spec: MlpSpec, params: np.ndarray, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    cache = []
    out = forward(spec, params, x, cache)
    cotangent = np.asarray(cotangent, dtype=float)
    if cotangent.shape != out.shape:
        raise ValueError(f"cotangent shape {cotangent.shape} != output shape {out.shape}")
    return backward(spec, params, cache, cotangent)[0]


def numerical_gradient(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function."""
    theta = np.array(theta, dtype=float)
    out = np.zeros_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        fp = f(theta)
        theta[i] = old - h
        fm = f(theta)
        theta[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# ---------------------------------------------------------------------------
# Gaussian heads


def _sech2(u):
    """1 - tanh(u)^2 without the cancellation near saturation."""
    e = np.exp(-2.0 * np.abs(u))
    return 4.0 * e / (1.0 + e) ** 2


@dataclass(frozen=True)
class GaussianHead:
    """Diagonal Gaussian over ``dim`` outputs, read from raw ``(N, 2 dim)`` features.

    The first half of the features is the mean, the second half the
    log-stddev (clipped to [-10, 2]). With ``squash`` a sample is
    ``scale * tanh(u)`` and log-densities carry the change-of-variable term.
    """

    dim: int
    squash: bool = False
    scale: float = 1.0

    def split(self, out):
        mean = out[:, : self.dim]
        raw = out[:, self.dim:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)

    def _correction(self, u):
        """Per-dimension log|da/du| and its derivative w.r.t. u."""
        if not self.squash:
            return np.zeros_like(u), np.zeros_like(u)
        t = np.tanh(u)
        s = _sech2(u)
        return math.log(self.scale) + np.log(s + SQUASH_EPS), -2.0 * t * s / (s + SQUASH_EPS)

    def action(self, u):
        return self.scale * np.tanh(u) if self.squash else u

    def preimage(self, a, limit: float = 1.0 - 1e-6):
        if not self.squash:
            return np.asarray(a, dtype=float)
        return np.arctanh(np.clip(np.asarray(a) / self.scale, -limit, limit))

    def sample(self, out, eps):
        """Reparameterized sample. Returns ``(action, logp, u)``."""
        mean, log_std, _ = self.split(out)
        u = mean + np.exp(log_std) * eps
        corr, _ = self._correction(u)
        logp = np.sum(-0.5 * eps**2 - log_std - 0.5 * math.log(2 * math.pi) - corr, axis=1)
        return self.action(u), logp, u

    def sample_backward(self, out, eps, d_action=None, d_logp=None, d_u=None):
        """Pathwise gradient w.r.t. ``out`` for cotangents on action, logp and u.

        ``eps`` is held fixed, so u, the action and logp all move with the
        mean and the log-stddev.
        """
        mean, log_std, inside = self.split(out)
        std = np.exp(log_std)
        u = mean + std * eps
        _, dcorr = self._correction(u)
        du = np.zeros_like(u) if d_u is None else np.array(d_u, dtype=float)
        if d_action is not None:
            da_du = self.scale * _sech2(u) if self.squash else 1.0
            du = du + d_action * da_du
        d_mean = du.copy()
        d_log_std = du * std * eps
        if d_logp is not None:
            w = np.asarray(d_logp, dtype=float)[:, None]
            d_mean += w * -dcorr
            d_log_std += w * (-1.0 - dcorr * std * eps)
        return np.hstack([d_mean, d_log_std * inside])

    def log_prob(self, out, u):
        """Log-density of the action ``self.action(u)``."""
        mean, log_std, _ = self.split(out)
        z = (u - mean) * np.exp(-log_std)
        corr, _ = self._correction(u)
        return np.sum(-0.5 * z**2 - log_std - 0.5 * math.log(2 * math.pi) - corr, axis=1)

    def log_prob_backward(self, out, u, d_logp):
        """Gradients of ``d_logp * log_prob`` w.r.t. ``out`` and ``u``."""
        mean, log_std, inside = self.split(out)
        inv_var = np.exp(-2 * log_std)
        diff = u - mean
        _, dcorr = self._correction(u)
        w = np.asarray(d_logp, dtype=float)[:, None]
        d_mean = w * diff * inv_var
        d_log_std = w * (-1.0 + diff**2 * inv_var) * inside
        d_u = w * (-diff * inv_var - dcorr)
        return np.hstack([d_mean, d_log_std]), d_u

    def kl(self, out_p, out_q):
        """KL(p || q) per row between two heads' Gaussians (squashing cancels)."""
        mp, lp, _ = self.split(out_p)
        mq, lq, _ = self.split(out_q)
        return np.sum(lq - lp + (np.exp(2 * lp) + (mp - mq) ** 2) / (2 * np.exp(2 * lq)) - 0.5, axis=1)

    def kl_backward_q(self, out_p, out_q, d_kl):
        """Gradient of ``d_kl * KL(p || q)`` w.r.t. ``out_q``."""
        mp, lp, _ = self.split(out_p)
        mq, lq, inside = self.split(out_q)
        w = np.asarray(d_kl, dtype=float)[:, None]
        inv_var_q = np.exp(-2 * lq)
        d_mean = w * (mq - mp) * inv_var_q
        d_log_std = w * (1.0 - (np.exp(2 * lp) + (mp - mq) ** 2) * inv_var_q) * inside
        return np.hstack([d_mean, d_log_std])


def gaussian_sample_and_logp(head: GaussianHead, spec: MlpSpec, params: np.ndarray, features: np.ndarray,
                             eps: np.ndarray):
    """Run the trunk and sample from the head with externally supplied noise.

    Returns ``(action, logp, backward)`` where ``backward(d_action, d_logp)``
    gives the gradient w.r.t. ``params`` of the pathwise loss.
    """
    cache = []
    out = forward(spec, params, features, cache)
    action, logp, _ = head.sample(out, eps)

    def backward_fn(d_action=None, d_logp=None):
        d_out = head.sample_backward(out, eps, d_action, d_logp)
        return backward(spec, params, cache, d_out)[0]

    return action, logp, backward_fn


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, params: np.ndarray, gradient: np.ndarray, lr: float):
    """One bias-corrected Adam *descent* step. Returns ``(new_params, new_state)``."""
    b1, b2 = ADAM_BETAS
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * gradient
    v = b2 * state.v + (1 - b2) * gradient * gradient
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# checkpoints


def save_params(path, params: np.ndarray, layout: Layout) -> None:
    """Versioned header, JSON layout, then little-endian float64 data."""
    header = json.dumps({"layout": layout.to_list()}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        fh.write(np.asarray(params, dtype="<f8").tobytes())


def load_params(path):
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError("not a parameter checkpoint")
    version, n = struct.unpack("<II", data[8:16])
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    layout = Layout(json.loads(data[16:16 + n])["layout"])
    params = np.frombuffer(data[16 + n:], dtype="<f8").astype(float)
    if params.size != layout.size:
        raise ValueError("checkpoint data does not match its layout")
    return params, layout
