"""Numeric substrate: activations, LSTM cell forward/backward, Gaussian NLL,
Adam, PCA, and finite-difference gradient checking.

All functions are pure and operate on float64 numpy arrays.  Batched inputs
put the batch on axis 0.  LSTM gate columns are laid out ``[i | f | o | g]``
(input, forget, output gates, then the tanh candidate), so the three sigmoid
gates form one contiguous block; the forget-gate bias lives in ``b[H:2H]``.

Gradients here are hand-derived for this fixed architecture; there is no
general autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit  # numerically stable sigmoid

from .rng import RngStream

LOG_2PI = float(np.log(2.0 * np.pi))


def sigmoid(x):
    return expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)


def _check_shapes(spec):
    """spec: list of (name, array, expected_shape); raises on mismatch."""
    for name, arr, want in spec:
        if tuple(arr.shape) != tuple(want):
            # list every participating array so the bad wiring is visible
            offenders = ", ".join(f"{n}{tuple(a.shape)}" for n, a, _ in spec)
            raise ValueError(
                f"dimension mismatch: {name} has shape {tuple(arr.shape)}, "
                f"expected {tuple(want)} (arrays: {offenders})"
            )


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

def lstm_cell_step(x, h, c, wx, wh, b, names=("x", "h", "c", "wx", "wh", "b")):
    """One LSTM step.  Returns (h_new, c_new).

    x: (B, Din), h/c: (B, H), wx: (Din, 4H), wh: (H, 4H), b: (4H,).
    """
    h_new, c_new, _ = lstm_cell_forward(x, h, c, wx, wh, b, names)
    return h_new, c_new


def lstm_cell_forward(x, h, c, wx, wh, b, names=("x", "h", "c", "wx", "wh", "b")):
    """LSTM step that also returns the cache needed for the backward pass."""
    x = np.atleast_2d(x)
    h = np.atleast_2d(h)
    c = np.atleast_2d(c)
    din = wx.shape[0]
    hh = wh.shape[0]
    _check_shapes([
        (names[0], x, (x.shape[0], din)),
        (names[1], h, (x.shape[0], hh)),
        (names[2], c, (x.shape[0], hh)),
        (names[3], wx, (din, 4 * hh)),
        (names[4], wh, (hh, 4 * hh)),
        (names[5], b, (4 * hh,)),
    ])
    z = x @ wx + h @ wh + b
    sig = expit(z[:, : 3 * hh])
    i = sig[:, :hh]
    f = sig[:, hh : 2 * hh]
    o = sig[:, 2 * hh : 3 * hh]
    g = np.tanh(z[:, 3 * hh :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    cache = (x, h, c, i, f, o, g, tc)
    return h_new, c_new, cache


def lstm_cell_backward(dh_new, dc_new, cache, wx, wh):
    """Backward through one LSTM step.

    dh_new/dc_new are gradients w.r.t. this step's outputs; returns
    (dx, dh, dc, dwx, dwh, db) for the inputs and parameters.
    """
    x, h, c, i, f, o, g, tc = cache
    do = dh_new * tc
    dc_total = dc_new + dh_new * o * (1.0 - tc * tc)
    di = dc_total * g
    df = dc_total * c
    dg = dc_total * i
    dc_prev = dc_total * f
    # pre-activation gradients; sigmoid' = s(1-s), tanh' = 1-t^2
    dz = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), do * o * (1.0 - o),
         dg * (1.0 - g * g)],
        axis=1,
    )
    dx = dz @ wx.T
    dh_prev = dz @ wh.T
    dwx = x.T @ dz
    dwh = h.T @ dz
    db = dz.sum(axis=0)
    return dx, dh_prev, dc_prev, dwx, dwh, db


# ---------------------------------------------------------------------------
# Gaussian negative log likelihood
# ---------------------------------------------------------------------------

def gaussian_nll(mean, var, target) -> float:
    """Sum over elements of (t-m)^2/(2v) + ln(2 pi v)/2, as a minimization loss.

    Requires var >= 1e-6 everywhere (enforced upstream by the variance head).
    """
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mean.shape != target.shape or mean.shape != var.shape:
        raise ValueError(
            f"dimension mismatch: mean{mean.shape}, var{var.shape}, "
            f"target{target.shape}"
        )
    if np.any(var <= 0.0):
        raise ValueError("gaussian_nll: non-positive variance")
    resid = target - mean
    return float(0.5 * np.sum(resid * resid / var) + 0.5 * np.sum(np.log(2.0 * np.pi * var)))


def gaussian_nll_grads(mean, var, target):
    """Gradients of gaussian_nll w.r.t. mean and var."""
    resid = mean - target
    dmean = resid / var
    dvar = -0.5 * (resid * resid) / (var * var) + 0.5 / var
    return dmean, dvar


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict
    v: dict


def adam_init(params: dict) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(a) for k, a in params.items()},
        v={k: np.zeros_like(a) for k, a in params.items()},
    )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Standard Adam update with bias correction.  Returns (params, state)."""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if np.any(np.isnan(g)):
            raise FloatingPointError(f"NaN gradient in array '{name}'")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


def clip_global_norm(grads: dict, max_norm: float):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def pca_fit(rows, k: int):
    """PCA by eigendecomposition of the sample covariance (ddof=1).

    Returns (components, explained_variance, mean): components is (k, D) with
    orthonormal rows sorted by descending eigenvalue; the largest-magnitude
    element of each component is made positive so signs are reproducible.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ValueError(f"pca_fit: need a 2-d matrix with >= 2 rows, got shape {rows.shape}")
    n, dim = rows.shape
    if k > dim:
        raise ValueError(f"pca_fit: k={k} exceeds dimension {dim}")
    mean = rows.mean(axis=0)
    centered = rows - mean
    cov = (centered.T @ centered) / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    components = evecs[:, order].T.copy()
    for comp in components:
        j = np.argmax(np.abs(comp))
        if comp[j] < 0:
            comp *= -1.0
    return components, evals[order], mean


def pca_project(rows, components, mean):
    return (np.asarray(rows, dtype=np.float64) - mean) @ components.T


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    worst: tuple  # (array name, flat index, analytic, numeric)
    per_array: dict  # name -> max relative error over checked coordinates
    noise_floor: float
    n_checked: int
    n_skipped: int

    def __str__(self):
        name, idx, a, n = self.worst
        return (f"max rel error {self.max_rel_error:.3e} "
                f"at {name}[{idx}] (analytic {a:.6e}, numeric {n:.6e}); "
                f"{self.n_checked} coords checked, {self.n_skipped} below "
                f"noise floor {self.noise_floor:.1e}")


def finite_diff_gradcheck(loss_fn, params: dict, grads: dict,
                          epsilon: float = 1e-4, max_coords: int = 200,
                          rng: RngStream | None = None) -> GradcheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn(params) must be deterministic (freeze every random draw before
    calling).  For arrays with more than max_coords entries a random subset
    of coordinates is checked.  Relative error per coordinate is
    |a - n| / (max(|a|, |n|) + 1e-12); the worst coordinate is reported.

    Central differences carry roundoff noise of order eps_mach * |f| / eps.
    A coordinate whose analytic/numeric difference lies below that noise
    floor is agreement as far as this method can resolve, so it is counted
    in n_skipped instead of contributing a meaningless relative error (tiny
    true gradients would otherwise fail on pure roundoff).  A genuinely
    wrong gradient is never masked: any difference above the floor is
    checked at full strictness.
    """
    if rng is None:
        rng = RngStream(0, ("gradcheck",))
    f0 = loss_fn(params)
    noise_floor = 64.0 * float(np.finfo(np.float64).eps) * max(1.0, abs(f0)) / epsilon
    worst = (None, -1, 0.0, 0.0)
    worst_err = 0.0
    per_array = {}
    n_checked = n_skipped = 0
    for name in sorted(params):
        p = params[name]
        size = p.size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.child(name).permutation(size)[:max_coords]
        arr_err = 0.0
        for idx in coords:
            multi = np.unravel_index(idx, p.shape)
            orig = p[multi]
            p[multi] = orig + epsilon
            f_plus = loss_fn(params)
            p[multi] = orig - epsilon
            f_minus = loss_fn(params)
            p[multi] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            analytic = grads[name].reshape(-1)[idx]
            diff = abs(analytic - numeric)
            if diff < noise_floor:
                n_skipped += 1
                continue
            n_checked += 1
            err = diff / (max(abs(analytic), abs(numeric)) + 1e-12)
            if err > arr_err:
                arr_err = err
            if err > worst_err:
                worst_err = err
                worst = (name, int(idx), float(analytic), float(numeric))
        per_array[name] = arr_err
    return GradcheckReport(max_rel_error=worst_err, worst=worst,
                           per_array=per_array, noise_floor=noise_floor,
                           n_checked=n_checked, n_skipped=n_skipped)


# ---------------------------------------------------------------------------
# Gaussian sampling
# ---------------------------------------------------------------------------

def sample_gaussian(rng: RngStream, mean, std: float) -> np.ndarray:
    """mean + std * z with z ~ N(0, I); std=0 returns mean exactly."""
    mean = np.asarray(mean, dtype=np.float64)
    if std < 0:
        raise ValueError(f"sample_gaussian: negative std {std}")
    z = rng.normal(mean.shape)
    return mean + std * z
