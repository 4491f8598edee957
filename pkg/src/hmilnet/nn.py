"""Dense layers, bag aggregations, loss and optimizer with explicit backward passes.

Everything operates on float64 row-major matrices (rows are instances or
batch members). Each differentiable block returns a cache from its forward
pass that its backward pass consumes; there is no general autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")
PNORM_EPS = 1e-12


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    return np.log(np.expm1(y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def glorot_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot normal: N(0, 2 / (fan_in + fan_out)) for a rows x cols (out x in) matrix."""
    return rng.normal(0.0, np.sqrt(2.0 / (rows + cols)), size=(rows, cols))


# ---------------------------------------------------------------- dense


def dense_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray, activation: str = "identity"):
    if x.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ValueError(f"dense input has shape {x.shape}, layer expects (*, {W.shape[1]})")
    pre = x @ W.T + b
    if activation == "tanh":
        y = np.tanh(pre)
    elif activation == "relu":
        y = np.maximum(pre, 0.0)
    elif activation == "identity":
        y = pre
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return y, (x, pre, y, activation)


def dense_backward(W: np.ndarray, cache, dy: np.ndarray):
    """Return (dx, dW, db) for upstream gradient `dy`."""
    x, pre, y, activation = cache
    if activation == "tanh":
        dpre = dy * (1.0 - y * y)
    elif activation == "relu":
        dpre = dy * (pre > 0)
    else:
        dpre = dy
    return dpre @ W, dpre.T @ x, dpre.sum(axis=0)


# ---------------------------------------------------------------- aggregation


def _segments(offsets: np.ndarray):
    """Split bag offsets into (non-empty bag mask, starts, per-instance bag index, sizes)."""
    sizes = np.diff(offsets)
    nonempty = sizes > 0
    starts = offsets[:-1][nonempty]
    k = sizes[nonempty]
    seg = np.repeat(np.arange(len(k)), k)
    return nonempty, starts, seg, k


def aggregate_forward(z: np.ndarray, offsets: np.ndarray, weights: np.ndarray,
                      rho_r: np.ndarray, rho_p: np.ndarray, theta_c: np.ndarray):
    """Concatenated [weighted mean, max, LogSumExp, weighted p-norm] per non-empty bag.

    `offsets` delimits bags in the rows of `z`; output rows correspond to the
    non-empty bags only (the returned mask says which). The LogSumExp
    temperature and p-norm exponent are reparameterized as
    softplus(rho_r) and 1 + softplus(rho_p).
    """
    nonempty, starts, seg, k = _segments(offsets)
    if len(starts) == 0:
        return np.empty((0, 4 * z.shape[1])), nonempty, None
    w = weights[:, None]
    wsum = np.add.reduceat(weights, starts)
    mean = np.add.reduceat(w * z, starts) / wsum[:, None]

    mx = np.maximum.reduceat(z, starts)

    tr = softplus(rho_r)
    sh = np.exp(tr * (z - mx[seg]))
    s = np.add.reduceat(sh, starts)
    lse = mx + np.log(s / k[:, None]) / tr

    tp = 1.0 + softplus(rho_p)
    dev = z - theta_c
    a = np.abs(dev)
    ap = a ** tp
    m = np.add.reduceat(w * ap, starts) / wsum[:, None] + PNORM_EPS
    pn = m ** (1.0 / tp)

    out = np.concatenate([mean, mx, lse, pn], axis=1)
    cache = (z, weights, starts, seg, k, wsum, mx, tr, sh, s, lse, tp, dev, a, ap, m, pn,
             rho_r, rho_p)
    return out, nonempty, cache


def aggregate_backward(cache, dout: np.ndarray):
    """Return (dz, d_rho_r, d_rho_p, d_theta_c); weights are constants."""
    (z, weights, starts, seg, k, wsum, mx, tr, sh, s, lse, tp, dev, a, ap, m, pn,
     rho_r, rho_p) = cache
    n, c = z.shape
    dmean, dmax, dlse, dpn = np.split(dout, 4, axis=1)
    wn = (weights / wsum[seg])[:, None]

    dz = wn * dmean[seg]

    # max: route to the first arg-max of each (bag, channel)
    idx = np.where(z == mx[seg], np.arange(n)[:, None], n)
    first = np.minimum.reduceat(idx, starts)
    np.add.at(dz, (first.ravel(), np.tile(np.arange(c), len(starts))), dmax.ravel())

    p = sh / s[seg]
    dz += p * dlse[seg]
    pz = np.add.reduceat(p * z, starts)
    d_tr = (dlse * (pz - lse) / tr).sum(axis=0)
    d_rho_r = d_tr * sigmoid(rho_r)

    dm = dpn * pn / (tp * m)
    g_inst = wn * tp * a ** (tp - 1.0) * np.sign(dev) * dm[seg]
    dz += g_inst
    d_theta_c = -g_inst.sum(axis=0)
    loga = np.log(np.where(a > 0, a, 1.0))
    dm_dtp = np.add.reduceat(weights[:, None] * ap * loga, starts) / wsum[:, None]
    dpn_dtp = pn * (dm_dtp / (tp * m) - np.log(m) / tp ** 2)
    d_rho_p = (dpn * dpn_dtp).sum(axis=0) * sigmoid(rho_p)
    return dz, d_rho_r, d_rho_p, d_theta_c


@dataclass
class AggregationBlock:
    """Learnable per-channel parameters of the four parallel aggregations."""

    dim: int
    rho_r: np.ndarray = None
    rho_p: np.ndarray = None
    theta_c: np.ndarray = None

    def __post_init__(self):
        # theta_r = 1, theta_p = 2, theta_c = 0
        if self.rho_r is None:
            self.rho_r = np.full(self.dim, softplus_inv(1.0))
        if self.rho_p is None:
            self.rho_p = np.full(self.dim, softplus_inv(1.0))
        if self.theta_c is None:
            self.theta_c = np.zeros(self.dim)

    @property
    def theta_r(self):
        return softplus(self.rho_r)

    @property
    def theta_p(self):
        return 1.0 + softplus(self.rho_p)


def aggregate(block: AggregationBlock, instances: np.ndarray, weights=None) -> np.ndarray:
    """Aggregate a single non-empty bag to a vector of length 4 * dim."""
    instances = np.atleast_2d(np.asarray(instances, dtype=np.float64))
    if len(instances) == 0:
        raise ValueError("cannot aggregate an empty bag; use the imputation vector")
    if weights is None:
        weights = np.ones(len(instances))
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights <= 0):
        raise ValueError("importance weights must be positive")
    out, _, _ = aggregate_forward(instances, np.array([0, len(instances)]), weights,
                                  block.rho_r, block.rho_p, block.theta_c)
    return out[0]


# ---------------------------------------------------------------- loss


def weighted_bce(logits: np.ndarray, labels: np.ndarray, omega0: float = 0.9,
                 omega1: float = 0.1):
    """Class-weighted cross entropy of 2-way softmax; returns (mean loss, dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    omega = np.where(labels == 1, omega1, omega0)
    loss = -(omega * logp[np.arange(n), labels]).sum() / n
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad *= (omega / n)[:, None]
    return float(loss), grad


def softmax_positive(logits: np.ndarray) -> np.ndarray:
    """Probability of the malicious class from 2-way logits."""
    logits = np.atleast_2d(logits)
    return sigmoid(logits[:, 1] - logits[:, 0])


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """One in-place Adam update of every parameter that has a gradient."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------- gradient oracle


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar `f()` w.r.t. array `x` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
