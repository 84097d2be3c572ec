"""Small float64 neural-network kernel shared by every learner.

Networks are plain stacks of dense, layer-norm and activation layers with a
hand-written backward pass.  Parameters live in ``dict[str, ndarray]`` so that
target networks, Adam state and checkpoints can all be handled as flat
mappings.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class NumericFault(ArithmeticError):
    """Raised when a non-finite value would be written into parameters."""


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# random streams
# --------------------------------------------------------------------------

def _stream_key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream ids must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Return a Philox-4x64-10 generator for ``(seed, *stream)``.

    Stream parts may be ints or strings (strings are mapped through CRC-32).
    The key is derived with numpy's ``SeedSequence(entropy=seed,
    spawn_key=stream)`` so identical arguments always give identical draws.
    """
    keys = tuple(_stream_key(p) for p in stream)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=keys)
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# elementwise functions
# --------------------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=DTYPE)))


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def silu(x):
    x = np.asarray(x, dtype=DTYPE)
    return x * sigmoid(x)


def silu_grad(x):
    x = np.asarray(x, dtype=DTYPE)
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


# --------------------------------------------------------------------------
# single-layer helpers
# --------------------------------------------------------------------------

@dataclass
class DenseLayer:
    weights: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("dense layer needs weights [out, in] and bias [out]")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"expected input of width {layer.in_dim}, got {x.shape[-1]}")
    return x @ layer.weights.T + layer.bias


def layer_norm(x, gain, shift, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] < 2:
        raise ShapeError("layer norm needs at least two features")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return np.asarray(gain) * (x - mu) / np.sqrt(var + eps) + np.asarray(shift)


# --------------------------------------------------------------------------
# sequential networks
# --------------------------------------------------------------------------

class MLP:
    """A fixed stack of layers with explicit forward/backward.

    ``arch`` is a list of tuples: ``("dense", n_in, n_out)``,
    ``("layernorm", n)``, ``("silu",)`` or ``("sigmoid",)``.  Parameters are
    named ``"{index}.W"``, ``"{index}.b"``, ``"{index}.gain"``,
    ``"{index}.shift"``.  ``forward``/``backward`` accept an alternative
    parameter dict, which is how target networks share an architecture with
    their online twin.
    """

    def __init__(self, arch, rng: np.random.Generator | None = None,
                 zero_last: bool = False, ln_eps: float = 1e-5):
        self.arch = [tuple(a) for a in arch]
        self.ln_eps = ln_eps
        self.params: dict[str, np.ndarray] = {}
        last_dense = max(i for i, a in enumerate(self.arch) if a[0] == "dense")
        for i, spec in enumerate(self.arch):
            kind = spec[0]
            if kind == "dense":
                n_in, n_out = spec[1], spec[2]
                if zero_last and i == last_dense:
                    W = np.zeros((n_out, n_in))
                    b = np.zeros(n_out)
                else:
                    bound = 1.0 / np.sqrt(n_in)
                    if rng is None:
                        raise ValueError("rng required for random initialisation")
                    W = rng.uniform(-bound, bound, size=(n_out, n_in))
                    b = rng.uniform(-bound, bound, size=n_out)
                self.params[f"{i}.W"] = W.astype(DTYPE)
                self.params[f"{i}.b"] = b.astype(DTYPE)
            elif kind == "layernorm":
                self.params[f"{i}.gain"] = np.ones(spec[1])
                self.params[f"{i}.shift"] = np.zeros(spec[1])
            elif kind not in ("silu", "sigmoid"):
                raise ValueError(f"unknown layer kind {kind!r}")

    @property
    def in_dim(self) -> int:
        return self.arch[0][1]

    def copy_params(self, params=None) -> dict[str, np.ndarray]:
        src = self.params if params is None else params
        return {k: v.copy() for k, v in src.items()}

    def forward(self, x, params=None):
        p = self.params if params is None else params
        h = np.asarray(x, dtype=DTYPE)
        squeeze = h.ndim == 1
        if squeeze:
            h = h[None, :]
        if h.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of width {self.in_dim}, got {h.shape[1]}")
        cache = []
        for i, spec in enumerate(self.arch):
            kind = spec[0]
            if kind == "dense":
                cache.append(h)
                h = h @ p[f"{i}.W"].T + p[f"{i}.b"]
            elif kind == "layernorm":
                mu = h.mean(axis=1, keepdims=True)
                xc = h - mu
                inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + self.ln_eps)
                xhat = xc * inv
                cache.append((xhat, inv))
                h = xhat * p[f"{i}.gain"] + p[f"{i}.shift"]
            elif kind == "silu":
                s = sigmoid(h)
                cache.append((h, s))
                h = h * s
            else:  # sigmoid
                s = sigmoid(h)
                cache.append(s)
                h = s
        return (h[0] if squeeze else h), (cache, squeeze)

    def __call__(self, x, params=None):
        return self.forward(x, params)[0]

    def backward(self, cache, dout, params=None, need_params: bool = True):
        """Backpropagate ``dout``; returns ``(grads, dx)``."""
        p = self.params if params is None else params
        layer_cache, squeeze = cache
        g = np.asarray(dout, dtype=DTYPE)
        if squeeze:
            g = g[None, :]
        grads: dict[str, np.ndarray] = {}
        for i in range(len(self.arch) - 1, -1, -1):
            kind = self.arch[i][0]
            c = layer_cache[i]
            if kind == "dense":
                if need_params:
                    grads[f"{i}.W"] = g.T @ c
                    grads[f"{i}.b"] = g.sum(axis=0)
                g = g @ p[f"{i}.W"]
            elif kind == "layernorm":
                xhat, inv = c
                if need_params:
                    grads[f"{i}.gain"] = (g * xhat).sum(axis=0)
                    grads[f"{i}.shift"] = g.sum(axis=0)
                dxhat = g * p[f"{i}.gain"]
                n = xhat.shape[1]
                g = inv / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                               - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
            elif kind == "silu":
                h, s = c
                g = g * s * (1.0 + h * (1.0 - s))
            else:
                g = g * c * (1.0 - c)
        return grads, (g[0] if squeeze else g)


def polyak_update(target: dict, online: dict, tau: float) -> None:
    """In place: target <- (1 - tau) * target + tau * online."""
    for k, v in online.items():
        t = target[k]
        t *= 1.0 - tau
        t += tau * v


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam, applied in place.

    Any non-finite gradient rejects the whole update (nothing is modified)
    and raises :class:`NumericFault`.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for {k!r}")
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --------------------------------------------------------------------------
# gradient verification
# --------------------------------------------------------------------------

def grad_check(net: MLP, loss, x, tolerance: float | None = None, h: float = 1e-6,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare backprop against central differences.

    ``loss(out) -> (value, dvalue/dout)``.  Returns the maximum over checked
    parameter entries of ``|analytic - numeric| / max(1, |numeric|)``.  With
    ``max_entries`` only that many randomly chosen entries per tensor are
    perturbed.  If ``tolerance`` is given and exceeded, ``AssertionError`` is
    raised.
    """
    out, cache = net.forward(x)
    _, dout = loss(out)
    grads, _ = net.backward(cache, dout)
    worst = 0.0
    for name, p in net.params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or make_rng(0, "grad_check")).choice(flat.size, max_entries, replace=False)
        gflat = grads[name].reshape(-1)
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            up = loss(net(x))[0]
            flat[j] = old - h
            down = loss(net(x))[0]
            flat[j] = old
            num = (up - down) / (2 * h)
            err = abs(gflat[j] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    if tolerance is not None and worst >= tolerance:
        raise AssertionError(f"gradient check failed: {worst:.3e} >= {tolerance:.1e}")
    return worst
