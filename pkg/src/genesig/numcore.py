"""Dense 2-D numerics: a small reverse-mode autodiff tape and seeded sampling.

Everything is float64 and strictly two-dimensional (scalars are 1x1), which
keeps the gradient bookkeeping trivial and the finite-difference checks tight.
The op set is exactly what the training and attribution paths need: matmul,
elementwise add/sub/mul, scalar scale, row broadcast, relu, reductions, a
fused batch-norm, and a fused masked weighted cross-entropy.

Sampling helpers wrap ``numpy.random.Generator`` so that a single integer
seed fixes every stream bit-for-bit across platforms.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "backward", "matmul", "add", "sub", "mul", "scale", "add_row",
    "relu", "sum_all", "pick", "col_affine", "batch_norm_train",
    "weighted_cross_entropy", "glorot_uniform", "log_softmax", "softmax",
    "make_rng", "sample_gamma_poisson", "sample_uniform",
    "sample_exponential", "sample_lognormal",
]


# ---------------------------------------------------------------------------
# autodiff tape
# ---------------------------------------------------------------------------

class Tensor:
    """A 2-D float64 array plus the tape links needed for backprop.

    ``requires`` marks whether gradients should flow into this node; constants
    (input features during training, graph operators, dropout masks) are
    created with ``requires=False`` so backward skips them entirely.
    """

    __slots__ = ("data", "grad", "parents", "bwd", "requires")

    def __init__(self, data, requires=True, parents=(), bwd=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.parents = parents
        self.bwd = bwd
        self.requires = requires

    @property
    def shape(self):
        return self.data.shape

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires={self.requires})"


def _node(data, parents, bwd):
    req = any(p.requires for p in parents)
    return Tensor(data, requires=req, parents=parents if req else (),
                  bwd=bwd if req else None)


def backward(root):
    """Run reverse-mode accumulation from a scalar (1x1) root.

    After the call every reachable tensor with ``requires=True`` holds
    d(root)/d(tensor) in ``.grad``. Raises if the root is not scalar.
    """
    if root.shape != (1, 1):
        raise ValueError(f"backward root must be scalar (1,1), got {root.shape}")
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires:
                stack.append((p, False))
    root.add_grad(np.ones((1, 1)))
    for node in reversed(order):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions differ, {a.data.shape} x {b.data.shape}")
    out = _node(a.data @ b.data, (a, b), None)

    def bwd(g):
        if a.requires:
            a.add_grad(g @ b.data.T)
        if b.requires:
            b.add_grad(a.data.T @ g)

    out.bwd = bwd
    return out


def _check_same_shape(a, b, name):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{name}: shapes differ, {a.data.shape} vs {b.data.shape}")


def add(a, b):
    _check_same_shape(a, b, "add")
    out = _node(a.data + b.data, (a, b), None)

    def bwd(g):
        if a.requires:
            a.add_grad(g)
        if b.requires:
            b.add_grad(g)

    out.bwd = bwd
    return out


def sub(a, b):
    _check_same_shape(a, b, "sub")
    out = _node(a.data - b.data, (a, b), None)

    def bwd(g):
        if a.requires:
            a.add_grad(g)
        if b.requires:
            b.add_grad(-g)

    out.bwd = bwd
    return out


def mul(a, b):
    _check_same_shape(a, b, "mul")
    out = _node(a.data * b.data, (a, b), None)

    def bwd(g):
        if a.requires:
            a.add_grad(g * b.data)
        if b.requires:
            b.add_grad(g * a.data)

    out.bwd = bwd
    return out


def scale(a, c):
    c = float(c)
    out = _node(a.data * c, (a,), None)

    def bwd(g):
        if a.requires:
            a.add_grad(g * c)

    out.bwd = bwd
    return out


def add_row(a, row):
    """Add a (1,C) row vector to every row of a (N,C) matrix."""
    if row.data.shape != (1, a.data.shape[1]):
        raise ValueError(
            f"add_row: expected row shape (1,{a.data.shape[1]}), got {row.data.shape}")
    out = _node(a.data + row.data, (a, row), None)

    def bwd(g):
        if a.requires:
            a.add_grad(g)
        if row.requires:
            row.add_grad(g.sum(axis=0, keepdims=True))

    out.bwd = bwd
    return out


def relu(a):
    mask = a.data > 0
    out = _node(np.where(mask, a.data, 0.0), (a,), None)

    def bwd(g):
        if a.requires:
            a.add_grad(g * mask)

    out.bwd = bwd
    return out


def sum_all(a):
    out = _node(np.array([[a.data.sum()]]), (a,), None)

    def bwd(g):
        if a.requires:
            a.add_grad(np.full_like(a.data, g[0, 0]))

    out.bwd = bwd
    return out


def pick(a, i, j):
    """Select a single entry as a scalar node (used as an attribution root)."""
    out = _node(np.array([[a.data[i, j]]]), (a,), None)

    def bwd(g):
        if a.requires:
            gi = np.zeros_like(a.data)
            gi[i, j] = g[0, 0]
            a.add_grad(gi)

    out.bwd = bwd
    return out


def col_affine(a, mult, shift):
    """Per-column affine map y = a * mult + shift with constant (C,) vectors.

    This is the eval-mode form of batch norm, where the running statistics
    have been folded into ``mult`` and ``shift``.
    """
    mult = np.asarray(mult, dtype=np.float64).reshape(1, -1)
    shift = np.asarray(shift, dtype=np.float64).reshape(1, -1)
    out = _node(a.data * mult + shift, (a,), None)

    def bwd(g):
        if a.requires:
            a.add_grad(g * mult)

    out.bwd = bwd
    return out


def batch_norm_train(a, gamma, beta, eps=1e-5):
    """Fused training-mode batch norm over rows (channels are columns).

    Normalizes with the biased batch variance and returns
    ``(out, batch_mean, batch_var)`` so the caller can update running
    statistics; the statistics are plain arrays outside the tape.
    """
    x = a.data
    n = x.shape[0]
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    out = _node(xhat * gamma.data + beta.data, (a, gamma, beta), None)

    def bwd(g):
        if gamma.requires:
            gamma.add_grad((g * xhat).sum(axis=0, keepdims=True))
        if beta.requires:
            beta.add_grad(g.sum(axis=0, keepdims=True))
        if a.requires:
            gh = g * gamma.data
            a.add_grad(inv_std / n * (
                n * gh
                - gh.sum(axis=0, keepdims=True)
                - xhat * (gh * xhat).sum(axis=0, keepdims=True)))

    out.bwd = bwd
    return out, mu, var


def weighted_cross_entropy(logits, labels, mask, weights):
    """Masked, class-weighted cross entropy as a single fused scalar op.

    loss = mean over masked rows i of weights[labels[i]] * (-log softmax_i[labels[i]]).
    ``labels`` (N,), ``mask`` boolean (N,) and ``weights`` (K,) are constants.
    """
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    weights = np.asarray(weights, dtype=np.float64)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("weighted_cross_entropy: empty mask")
    z = logits.data
    zm = z[idx]
    lse = _logsumexp_rows(zm)
    picked = zm[np.arange(idx.size), labels[idx]]
    w = weights[labels[idx]]
    loss = float(np.mean(w * (lse - picked)))
    out = _node(np.array([[loss]]), (logits,), None)

    def bwd(g):
        if logits.requires:
            grad = np.zeros_like(z)
            p = np.exp(zm - lse[:, None])
            p[np.arange(idx.size), labels[idx]] -= 1.0
            grad[idx] = p * (w / idx.size)[:, None]
            logits.add_grad(grad * g[0, 0])

    out.bwd = bwd
    return out


# ---------------------------------------------------------------------------
# plain-array helpers
# ---------------------------------------------------------------------------

def _logsumexp_rows(z):
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    return z - _logsumexp_rows(z)[:, None]


def softmax(z):
    return np.exp(log_softmax(z))


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# seeded randomness
# ---------------------------------------------------------------------------

def make_rng(seed):
    """Deterministic generator; ``seed`` may be an int or a sequence of ints."""
    return np.random.default_rng(seed)


def sample_gamma_poisson(mu, phi, rng, size=None):
    """Overdispersed counts via the gamma-Poisson mixture.

    Draws lambda ~ Gamma(shape=phi, scale=mu/phi) then a Poisson count, so the
    result has mean ``mu`` and variance ``mu + mu**2 / phi``; the mixture is
    exact for this mean/dispersion parameterization. ``mu`` may be an array
    (elementwise means); ``phi`` is a positive scalar.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if np.any(mu <= 0):
        raise ValueError("sample_gamma_poisson: mu must be > 0")
    if not phi > 0:
        raise ValueError("sample_gamma_poisson: phi must be > 0")
    lam = rng.gamma(shape=phi, scale=mu / phi, size=size if size is not None else mu.shape)
    return rng.poisson(lam)


def sample_uniform(low, high, rng, size=None):
    if not high > low:
        raise ValueError("sample_uniform: need high > low")
    return rng.uniform(low, high, size=size)


def sample_exponential(mean, rng, size=None):
    """Exponential draws parameterized by the mean (scale), not the rate."""
    if not mean > 0:
        raise ValueError("sample_exponential: mean must be > 0")
    return rng.exponential(scale=mean, size=size)


def sample_lognormal(rng, size=None, mu=0.0, sigma=1.0):
    if not sigma > 0:
        raise ValueError("sample_lognormal: sigma must be > 0")
    return rng.lognormal(mean=mu, sigma=sigma, size=size)
