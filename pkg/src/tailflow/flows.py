"""Invertible layers, base distributions, and full flow assembly.

Layers are stored in generative order: ``forward`` maps base-space z toward
data and ``inverse`` maps data back to the base.  Autoregressive layers
condition on the data-side variable, so the inverse (the density-estimation
direction) is a single vectorized pass while the forward direction fills one
dimension at a time.  Every formula is written against dispatch helpers so
plain numpy arrays and tape variables flow through the same code path.

Parameters live in one flat name -> array dict owned by the model; layer
objects hold only structure (masks, sizes, key prefixes).  Positivity is
enforced by softplus everywhere a parameter must stay positive.
"""

from __future__ import annotations

import base64
import json
import zlib

import numpy as np
from scipy.linalg import solve_triangular

from . import autodiff as ad
from . import special
from . import tailtransform as tt
from .autodiff import Tape, Var, value_of

__all__ = [
    "MaskedConditioner",
    "SplineKnots",
    "RqsArLayer",
    "AffineArLayer",
    "LuLinearLayer",
    "MarginalTtfLayer",
    "StdNormalBase",
    "StudentTBase",
    "GaussianMixtureBase",
    "GenNormalBase",
    "FlowModel",
    "flow_log_prob",
    "flow_forward",
    "flow_sample",
    "flow_sample_with_log_prob",
    "build_architecture",
    "set_frozen_tails",
    "set_frozen_nu",
    "save_model",
    "load_model",
    "softplus_inv",
    "ARCHITECTURES",
]

ARCHITECTURES = (
    "normal", "m_normal", "g_normal", "mTAF", "gTAF", "TTF", "TTFfix", "TTF_tBase", "COMET",
)

_LOG_2PI = np.log(2.0 * np.pi)


def softplus_inv(y):
    """Inverse of log(1 + e^x); y must be positive."""
    y = np.asarray(y, dtype=float)
    # log(e^y - 1) = y + log(1 - e^-y)
    return y + np.log(-np.expm1(-y))


# -- dispatch helpers ----------------------------------------------------------


def _tape(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _pair(a, b):
    """Promote mixed ndarray/Var operands onto the shared tape."""
    t = _tape(a, b)
    if t is None:
        return np.asarray(a, dtype=float), np.asarray(b, dtype=float), None
    return t.as_var(a), t.as_var(b), t


def _mm_tb(a, b):
    """a @ b.T."""
    a, b, t = _pair(a, b)
    return a.matmul_tb(b) if t else a @ b.T


def _mm(a, b):
    a, b, t = _pair(a, b)
    return a.matmul(b) if t else a @ b


def _add_rowvec(m, v):
    m, v, t = _pair(m, v)
    return m.add_rowvec(v) if t else m + v[None, :]


def _mul_rowvec(m, v):
    m, v, t = _pair(m, v)
    return m.mul_rowvec(v) if t else m * v[None, :]


def _div_rowvec(m, v):
    m, v, t = _pair(m, v)
    return m.div_rowvec(v) if t else m / v[None, :]


def _div_colvec(m, v):
    m, v, t = _pair(m, v)
    return m.div_colvec(v) if t else m / v[:, None]


def _rowsum(m):
    return m.rowsum() if isinstance(m, Var) else np.sum(m, axis=1)


def _col(m, j):
    return m.col(j) if isinstance(m, Var) else m[:, j]


def _cols(m, sl):
    return m.cols(sl) if isinstance(m, Var) else m[:, sl]


def _select(m, idx):
    if isinstance(m, Var):
        return m.select_cols(idx)
    return m[np.arange(m.shape[0]), idx]


def _elem(v, j):
    return v.elem(j) if isinstance(v, Var) else float(v[j])


def _relu(x):
    return x.relu() if isinstance(x, Var) else np.maximum(x, 0.0)


def _stack_cols(cols):
    t = _tape(*cols)
    if t is None:
        return np.stack([np.asarray(c, dtype=float) for c in cols], axis=1)
    return ad.stack_cols([t.as_var(c) for c in cols])


def _softmax_rows(m):
    c = np.max(value_of(m), axis=1, keepdims=True)
    e = ad.exp(m - c)
    return _div_colvec(e, _rowsum(e))


def _zeros_col(like, n):
    t = _tape(like)
    z = np.zeros(n)
    return t.lift(z) if t else z


# -- masked autoregressive conditioner -----------------------------------------


class MaskedConditioner:
    """Two-hidden-layer masked MLP emitting n_out parameters per dimension.

    Output columns are laid out parameter-major: column b*d + i carries
    parameter b for dimension i, so the block for dimension i is the strided
    slice [i::d] and parameter b across all dimensions is the contiguous
    slice [b*d:(b+1)*d].  Degrees are assigned so the block for dimension i
    depends only on inputs strictly before i; dimension 0 sees biases alone.
    """

    ACTIVATION = "relu"

    def __init__(self, d: int, n_out: int, prefix: str):
        self.d = d
        self.n_out = n_out
        self.prefix = prefix
        h = d + 10
        self.hidden = h
        m_in = np.arange(d)
        m_h = np.arange(h) % max(d - 1, 1)
        out_deg = np.arange(d * n_out) % d
        self.mask1 = (m_h[:, None] >= m_in[None, :]).astype(float)
        self.mask2 = (m_h[:, None] >= m_h[None, :]).astype(float)
        self.mask3 = (out_deg[:, None] > m_h[None, :]).astype(float)

    def _keys(self):
        p = self.prefix
        return (f"{p}.w1", f"{p}.b1", f"{p}.w2", f"{p}.b2", f"{p}.w3", f"{p}.b3")

    def init_params(self, rng: special.Rng, out_bias: np.ndarray | None = None) -> dict:
        h, d = self.hidden, self.d
        k1, b1, k2, b2, k3, b3 = self._keys()

        def glorot(shape, key):
            r = rng.child(zlib.crc32(key.encode()))
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            return r.uniform(-lim, lim, shape)

        bias3 = np.zeros(d * self.n_out) if out_bias is None else np.asarray(out_bias, float)
        return {
            k1: glorot((h, d), k1), b1: np.zeros(h),
            k2: glorot((h, h), k2), b2: np.zeros(h),
            k3: np.zeros((d * self.n_out, h)), b3: bias3,
        }

    def forward(self, params, x):
        """(n, d) -> (n, d*n_out) respecting the autoregressive masks."""
        k1, b1, k2, b2, k3, b3 = self._keys()
        h1 = _relu(_add_rowvec(_mm_tb(x, params[k1] * self.mask1), params[b1]))
        h2 = _relu(_add_rowvec(_mm_tb(h1, params[k2] * self.mask2), params[b2]))
        return _add_rowvec(_mm_tb(h2, params[k3] * self.mask3), params[b3])

    def dim_block(self, out, i: int):
        """All n_out parameters for dimension i, in parameter order."""
        return _cols(out, slice(i, None, self.d))

    def param_block(self, out, b: int):
        """Parameter b for every dimension, in dimension order."""
        return _cols(out, slice(b * self.d, (b + 1) * self.d))


# -- rational quadratic spline --------------------------------------------------

_MIN_BIN_WIDTH = 1e-3
_MIN_BIN_HEIGHT = 1e-3
_MIN_DERIVATIVE = 1e-3
# Raw value whose softplus, plus the derivative floor, is exactly 1: boundary
# knots get slope 1 so the spline meets its linear tails smoothly.
_BOUNDARY_DERIV_RAW = float(softplus_inv(1.0 - _MIN_DERIVATIVE))


def _spline_eval(x, cumw, cumh, deriv, bound: float, inverse: bool):
    """Monotone rational-quadratic spline on [-bound, bound], identity outside.

    cumw/cumh are (n, K+1) knot coordinates, deriv the (n, K+1) knot slopes.
    Returns (y, elementwise log |dy/dx|).
    """
    k_bins = value_of(cumw).shape[1] - 1
    xv = value_of(x)
    inside = (xv >= -bound) & (xv <= bound)
    x_safe = ad.where_mask(inside, x, 0.0)
    knots_v = value_of(cumh if inverse else cumw)
    idx = np.clip(
        (value_of(x_safe)[:, None] >= knots_v[:, :-1]).sum(axis=1) - 1, 0, k_bins - 1
    )

    xk = _select(cumw, idx)
    wk = _select(cumw, idx + 1) - xk
    yk = _select(cumh, idx)
    hk = _select(cumh, idx + 1) - yk
    dk = _select(deriv, idx)
    dk1 = _select(deriv, idx + 1)
    sk = hk / wk

    if not inverse:
        th = (x_safe - xk) / wk
        om = 1.0 - th
        q = th * om
        num = hk * (sk * th * th + dk * q)
        den = sk + (dk1 + dk - 2.0 * sk) * q
        y = yk + num / den
        ld = 2.0 * ad.log(sk) + ad.log(dk1 * th * th + 2.0 * sk * q + dk * om * om) \
            - 2.0 * ad.log(den)
    else:
        dlt = x_safe - yk
        r = dk + dk1 - 2.0 * sk
        a = dlt * r + hk * (sk - dk)
        b = hk * dk - dlt * r
        c = -(sk * dlt)
        disc = ad.maximum_const(b * b - 4.0 * a * c, 0.0)
        th = (2.0 * c) / (-(b + ad.sqrt(disc)))
        om = 1.0 - th
        q = th * om
        y = th * wk + xk
        den = sk + r * q
        ld = -(2.0 * ad.log(sk) + ad.log(dk1 * th * th + 2.0 * sk * q + dk * om * om)
               - 2.0 * ad.log(den))

    y = ad.where_mask(inside, y, x)
    ld = ad.where_mask(inside, ld, 0.0)
    return y, ld


def _raw_to_knots(w_raw, h_raw, d_raw, bound: float):
    """Conditioner outputs -> (cumw, cumh, deriv) knot matrices.

    Widths and heights go through a min-floored softmax; the first and last
    knots are pinned exactly to the box corners, boundary slopes exactly to 1.
    """
    k_bins = value_of(w_raw).shape[1]
    n = value_of(w_raw).shape[0]

    def cum_knots(raw, min_size):
        rel = _softmax_rows(raw) * (1.0 - min_size * k_bins) + min_size
        cum = rel.cumsum_cols() if isinstance(rel, Var) else np.cumsum(rel, axis=1)
        inner = _cols(cum * (2.0 * bound) - bound, slice(0, k_bins - 1))
        cols = [_zeros_col(inner, n) - bound]
        cols += [_col(inner, j) for j in range(k_bins - 1)]
        cols += [_zeros_col(inner, n) + bound]
        return _stack_cols(cols)

    cumw = cum_knots(w_raw, _MIN_BIN_WIDTH)
    cumh = cum_knots(h_raw, _MIN_BIN_HEIGHT)
    d_int = ad.softplus(d_raw) + _MIN_DERIVATIVE
    ones = [_zeros_col(d_int, n) + 1.0]
    deriv = _stack_cols(ones + [_col(d_int, j) for j in range(k_bins - 1)] + ones)
    return cumw, cumh, deriv


class SplineKnots:
    """Explicit knot set for one dimension; validates at construction.

    widths/heights are absolute bin sizes that must fill the box exactly;
    derivs are the K+1 knot slopes, all positive.
    """

    def __init__(self, widths, heights, derivs, bound: float = 2.5):
        widths = np.asarray(widths, dtype=float)
        heights = np.asarray(heights, dtype=float)
        derivs = np.asarray(derivs, dtype=float)
        if widths.shape != heights.shape or derivs.shape != (widths.size + 1,):
            raise ValueError("SplineKnots: need K widths, K heights, K+1 derivatives")
        if np.any(widths <= 0.0) or np.any(heights <= 0.0):
            raise ValueError("SplineKnots: bin sizes must be positive")
        if np.any(derivs <= 0.0):
            raise ValueError("SplineKnots: knot derivatives must be positive")
        size = 2.0 * bound
        if abs(widths.sum() - size) > 1e-9 * size or abs(heights.sum() - size) > 1e-9 * size:
            raise ValueError("SplineKnots: bins must fill the box exactly")
        self.bound = float(bound)
        self.cumw = np.concatenate([[-bound], -bound + np.cumsum(widths)])
        self.cumh = np.concatenate([[-bound], -bound + np.cumsum(heights)])
        self.cumw[-1] = bound
        self.cumh[-1] = bound
        self.derivs = derivs

    def _tiled(self, n):
        return (
            np.tile(self.cumw, (n, 1)),
            np.tile(self.cumh, (n, 1)),
            np.tile(self.derivs, (n, 1)),
        )

    def forward(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return _spline_eval(x, *self._tiled(x.size), self.bound, inverse=False)

    def inverse(self, y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        return _spline_eval(y, *self._tiled(y.size), self.bound, inverse=True)


# -- autoregressive layers -------------------------------------------------------


class RqsArLayer:
    """Autoregressive rational quadratic spline layer."""

    def __init__(self, d: int, prefix: str, bins: int = 5, bound: float = 2.5):
        self.d = d
        self.prefix = prefix
        self.bins = bins
        self.bound = float(bound)
        self.cond = MaskedConditioner(d, 3 * bins - 1, prefix + ".cond")

    def init_params(self, rng: special.Rng) -> dict:
        # Derivative-block biases make the initial map the exact identity.
        bias = np.zeros(self.d * self.cond.n_out)
        bias[2 * self.bins * self.d:] = _BOUNDARY_DERIV_RAW
        return self.cond.init_params(rng, out_bias=bias)

    def _dim_knots(self, out, i: int):
        block = self.cond.dim_block(out, i)
        k = self.bins
        return _raw_to_knots(
            _cols(block, slice(0, k)),
            _cols(block, slice(k, 2 * k)),
            _cols(block, slice(2 * k, 3 * k - 1)),
            self.bound,
        )

    def inverse(self, params, x):
        out = self.cond.forward(params, x)
        z_cols, ld = [], 0.0
        for i in range(self.d):
            cumw, cumh, deriv = self._dim_knots(out, i)
            zi, ldi = _spline_eval(_col(x, i), cumw, cumh, deriv, self.bound, inverse=True)
            z_cols.append(zi)
            ld = ldi + ld
        return _stack_cols(z_cols), ld

    def forward(self, params, z):
        n = value_of(z).shape[0]
        cols = [_zeros_col(z, n) for _ in range(self.d)]
        ld = 0.0
        for i in range(self.d):
            out = self.cond.forward(params, _stack_cols(cols))
            cumw, cumh, deriv = self._dim_knots(out, i)
            xi, ldi = _spline_eval(_col(z, i), cumw, cumh, deriv, self.bound, inverse=False)
            cols[i] = xi
            ld = ldi + ld
        return _stack_cols(cols), ld


class AffineArLayer:
    """Autoregressive affine layer: x_i = shift_i(x_<i) + exp(logscale_i(x_<i)) z_i."""

    def __init__(self, d: int, prefix: str):
        self.d = d
        self.prefix = prefix
        self.cond = MaskedConditioner(d, 2, prefix + ".cond")

    def init_params(self, rng: special.Rng) -> dict:
        return self.cond.init_params(rng)

    def inverse(self, params, x):
        out = self.cond.forward(params, x)
        shift = self.cond.param_block(out, 0)
        logs = self.cond.param_block(out, 1)
        z = (x - shift) * ad.exp(-logs)
        return z, -_rowsum(logs)

    def forward(self, params, z):
        n = value_of(z).shape[0]
        cols = [_zeros_col(z, n) for _ in range(self.d)]
        ld = 0.0
        for i in range(self.d):
            out = self.cond.forward(params, _stack_cols(cols))
            shift_i = _col(out, i)
            logs_i = _col(out, self.d + i)
            cols[i] = shift_i + ad.exp(logs_i) * _col(z, i)
            ld = logs_i + ld
        return _stack_cols(cols), ld


class LuLinearLayer:
    """Trainable linear map x = L U z with unit-lower L and positive diag(U)."""

    def __init__(self, d: int, prefix: str):
        self.d = d
        self.prefix = prefix

    def init_params(self, rng: special.Rng) -> dict:
        p = self.prefix
        return {
            f"{p}.lower": np.zeros((self.d, self.d)),
            f"{p}.upper": np.zeros((self.d, self.d)),
            f"{p}.logdiag": np.zeros(self.d),
        }

    def _factors(self, params):
        p = self.prefix
        a, b, dg = params[f"{p}.lower"], params[f"{p}.upper"], params[f"{p}.logdiag"]
        eye = np.eye(self.d)
        if isinstance(a, Var):
            lo = a.tril_strict() + eye
            up = b.triu_strict() + ad.exp(dg).diag_embed()
        else:
            lo = np.tril(a, -1) + eye
            up = np.triu(b, 1) + np.diag(np.exp(dg))
        return lo, up, dg

    def forward(self, params, z):
        lo, up, dg = self._factors(params)
        x = _mm_tb(z, _mm(lo, up))
        # log-det is row-independent; scalar broadcasts against the (n,) sums
        ld = dg.sum() if isinstance(dg, Var) else float(np.sum(dg))
        return x, ld

    def inverse(self, params, x):
        lo, up, dg = self._factors(params)
        if isinstance(x, Var) or isinstance(lo, Var):
            t = _tape(x, lo)
            xv = t.as_var(x)
            z = xv.solve_tri_right(t.as_var(lo), lower=True)
            z = z.solve_tri_right(t.as_var(up), lower=False)
        else:
            # z = x @ (LU)^{-T} = (x @ L^{-T}) @ U^{-T}
            z = solve_triangular(lo, x.T, lower=True).T
            z = solve_triangular(up, z.T, lower=False).T
        ld = dg.sum() if isinstance(dg, Var) else float(np.sum(dg))
        return z, -ld


class MarginalTtfLayer:
    """Elementwise tail transform layer; one (mu, sigma, lambda+-) per dimension."""

    def __init__(self, d: int, prefix: str):
        self.d = d
        self.prefix = prefix

    def init_params(self, rng: special.Rng) -> dict:
        p = self.prefix
        r = rng.child(zlib.crc32(p.encode()))
        lam_p = r.uniform(0.05, 1.0, self.d)
        lam_n = r.uniform(0.05, 1.0, self.d)
        return {
            f"{p}.mu": np.zeros(self.d),
            f"{p}.sigma_raw": np.full(self.d, softplus_inv(1.0)),
            f"{p}.lp_raw": softplus_inv(lam_p),
            f"{p}.ln_raw": softplus_inv(lam_n),
        }

    def _dim_params(self, params, j):
        p = self.prefix
        mu = _elem(params[f"{p}.mu"], j)
        sigma = ad.softplus(_elem(params[f"{p}.sigma_raw"], j))
        lam_p = ad.softplus(_elem(params[f"{p}.lp_raw"], j))
        lam_n = ad.softplus(_elem(params[f"{p}.ln_raw"], j))
        return mu, sigma, lam_p, lam_n

    def forward(self, params, z):
        cols, ld = [], 0.0
        for j in range(self.d):
            mu, sigma, lam_p, lam_n = self._dim_params(params, j)
            zj = _col(z, j)
            cols.append(tt._forward_core(zj, mu, sigma, lam_p, lam_n))
            ld = tt.ttf_log_deriv(zj, mu=mu, sigma=sigma, lambda_pos=lam_p, lambda_neg=lam_n) + ld
        return _stack_cols(cols), ld

    def inverse(self, params, x):
        cols, ld = [], 0.0
        for j in range(self.d):
            mu, sigma, lam_p, lam_n = self._dim_params(params, j)
            zj, ldj = tt.ttf_inverse_with_log_deriv(
                _col(x, j), mu=mu, sigma=sigma, lambda_pos=lam_p, lambda_neg=lam_n
            )
            cols.append(zj)
            ld = ldj + ld
        return _stack_cols(cols), ld


# -- base distributions -----------------------------------------------------------


class StdNormalBase:
    def __init__(self, d: int):
        self.d = d

    def init_params(self, rng: special.Rng) -> dict:
        return {}

    def log_prob(self, params, z):
        return -0.5 * _rowsum(z * z) - 0.5 * self.d * _LOG_2PI

    def sample(self, params, rng: special.Rng, n: int) -> np.ndarray:
        return rng.normal((n, self.d))

    def sample_node(self, tape: Tape, params, rng: special.Rng, n: int):
        return tape.lift(self.sample(params, rng, n))


class StudentTBase:
    """Independent per-dimension Student-T; nu trainable via softplus or frozen."""

    def __init__(self, d: int, trainable: bool, nu_init: float = 30.0):
        self.d = d
        self.trainable = trainable
        self.nu_init = float(nu_init)

    def init_params(self, rng: special.Rng) -> dict:
        return {"base.nu_raw": np.full(self.d, softplus_inv(self.nu_init))}

    def nu(self, params):
        return ad.softplus(params["base.nu_raw"])

    def log_prob(self, params, z):
        nu = self.nu(params)
        const = (
            ad.lgamma((nu + 1.0) * 0.5) - ad.lgamma(nu * 0.5)
            - 0.5 * (ad.log(nu) + np.log(np.pi))
        )
        e = ad.log1p(_div_rowvec(z * z, nu))
        tail = _rowsum(_mul_rowvec(e, (nu + 1.0) * 0.5))
        return -tail + const.sum()

    def sample(self, params, rng: special.Rng, n: int) -> np.ndarray:
        nu = value_of(self.nu(params))
        return np.stack([rng.student_t(nu[j], n) for j in range(self.d)], axis=1)

    def sample_node(self, tape: Tape, params, rng: special.Rng, n: int):
        nu_raw = params["base.nu_raw"]
        cols = []
        for j in range(self.d):
            nu_j = ad.softplus(_elem(nu_raw, j))
            if isinstance(nu_j, Var):
                cols.append(ad.sample_student_t_node(nu_j, rng.child(j), n))
            else:
                cols.append(tape.lift(rng.child(j).student_t(nu_j, n)))
        return _stack_cols([tape.as_var(c) for c in cols])


class GaussianMixtureBase:
    """Mixture of diagonal Gaussians (density-estimation base only)."""

    def __init__(self, d: int, components: int = 5):
        self.d = d
        self.k = components

    def init_params(self, rng: special.Rng) -> dict:
        r = rng.child(zlib.crc32(b"base.mixture"))
        return {
            "base.logits": np.zeros(self.k),
            "base.means": 0.5 * r.normal((self.d, self.k)),
            "base.logstd": np.zeros((self.d, self.k)),
        }

    def log_prob(self, params, z):
        logits, means, logstd = params["base.logits"], params["base.means"], params["base.logstd"]
        c = float(np.max(value_of(logits)))
        lse = ad.log(ad.exp(logits - c).sum()) + c
        logw = logits - lse
        comps = []
        for k in range(self.k):
            m_k = _col(means, k)
            ls_k = _col(logstd, k)
            diff = _add_rowvec(z, -m_k)
            scaled = _div_rowvec(diff, ad.exp(ls_k))
            comps.append(
                -0.5 * _rowsum(scaled * scaled) - ls_k.sum() - 0.5 * self.d * _LOG_2PI
            )
        mat = _add_rowvec(_stack_cols(comps), logw)
        rowmax = np.max(value_of(mat), axis=1)
        if isinstance(mat, Var):
            return ad.log(_rowsum(ad.exp(mat - rowmax[:, None]))) + rowmax
        return np.log(np.sum(np.exp(mat - rowmax[:, None]), axis=1)) + rowmax

    def sample(self, params, rng: special.Rng, n: int) -> np.ndarray:
        logits = value_of(params["base.logits"])
        means = value_of(params["base.means"])
        std = np.exp(value_of(params["base.logstd"]))
        w = np.exp(logits - np.max(logits))
        w /= w.sum()
        ks = np.searchsorted(np.cumsum(w), rng.uniform(size=n))
        return means[:, ks].T + rng.normal((n, self.d)) * std[:, ks].T

    def sample_node(self, tape: Tape, params, rng: special.Rng, n: int):
        return tape.lift(self.sample(params, rng, n))


class GenNormalBase:
    """Independent generalized normals; location, scale, and shape trainable.

    The shape carries a 0.1 softplus floor: unconstrained shapes approaching
    zero develop density cusps that destabilize gradients.
    """

    SHAPE_FLOOR = 0.1

    def __init__(self, d: int):
        self.d = d

    def init_params(self, rng: special.Rng) -> dict:
        # beta = 2, alpha = sqrt 2 makes the initial base exactly N(0, 1).
        return {
            "base.loc": np.zeros(self.d),
            "base.scale_raw": np.full(self.d, softplus_inv(np.sqrt(2.0))),
            "base.shape_raw": np.full(self.d, softplus_inv(2.0 - self.SHAPE_FLOOR)),
        }

    def _beta_alpha(self, params):
        beta = ad.softplus(params["base.shape_raw"]) + self.SHAPE_FLOOR
        alpha = ad.softplus(params["base.scale_raw"])
        return beta, alpha

    def log_prob(self, params, z):
        beta, alpha = self._beta_alpha(params)
        const = ad.log(beta) - np.log(2.0) - ad.log(alpha) - ad.lgamma(1.0 / beta)
        a = _div_rowvec(ad.absolute(_add_rowvec(z, -params["base.loc"])), alpha)
        # a^beta via exp(beta log a); a is floored away from 0 to keep logs finite
        powed = ad.exp(_mul_rowvec(ad.log(ad.maximum_const(a, 1e-300)), beta))
        return -_rowsum(powed) + const.sum()

    def sample(self, params, rng: special.Rng, n: int) -> np.ndarray:
        beta = value_of(ad.softplus(params["base.shape_raw"])) + self.SHAPE_FLOOR
        alpha = value_of(ad.softplus(params["base.scale_raw"]))
        loc = value_of(params["base.loc"])
        out = np.empty((n, self.d))
        for j in range(self.d):
            g = special.sample_gamma(1.0 / beta[j], rng.child(j), n)
            mag = alpha[j] * g ** (1.0 / beta[j])
            sign = np.where(rng.child(1000 + j).uniform(size=n) < 0.5, -1.0, 1.0)
            out[:, j] = loc[j] + sign * mag
        return out

    def sample_node(self, tape: Tape, params, rng: special.Rng, n: int):
        return tape.lift(self.sample(params, rng, n))


# -- the flow model ----------------------------------------------------------------


class FlowModel:
    """A base distribution plus layers in generative order, with flat params."""

    def __init__(self, name: str, d: int, base, layers, params: dict,
                 frozen: set | None = None, options: dict | None = None):
        self.name = name
        self.d = d
        self.base = base
        self.layers = layers
        self.params = params
        self.frozen = set(frozen or ())
        self.options = dict(options or {})

    def trainable_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def tape_params(self, tape: Tape) -> dict:
        """Register trainables as params, frozen entries as constants."""
        out = {}
        for k, v in self.params.items():
            out[k] = tape.lift(v) if k in self.frozen else tape.param(v, k)
        return out

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}


def flow_log_prob(x, model: FlowModel, params: dict | None = None):
    """log q(x): pull x back through the layers and add the base density."""
    params = model.params if params is None else params
    cur, acc = x, 0.0
    for layer in reversed(model.layers):
        cur, ld = layer.inverse(params, cur)
        acc = ld + acc
    return model.base.log_prob(params, cur) + acc


def flow_forward(z, model: FlowModel, params: dict | None = None):
    """Push base-space z through the layers; returns (x, total forward log-det)."""
    params = model.params if params is None else params
    cur, acc = z, 0.0
    for layer in model.layers:
        cur, ld = layer.forward(params, cur)
        acc = ld + acc
    return cur, acc


def flow_sample(model: FlowModel, rng: special.Rng, n: int,
                params: dict | None = None) -> np.ndarray:
    params = model.params if params is None else params
    z = model.base.sample(params, rng, n)
    x, _ = flow_forward(z, model, params)
    return x


def flow_sample_with_log_prob(tape: Tape, model: FlowModel, params: dict,
                              rng: special.Rng, n: int):
    """Reparameterized draws with their own log density (for ELBO training)."""
    z = model.base.sample_node(tape, params, rng, n)
    log_q0 = model.base.log_prob(params, z)
    x, fwd_ld = flow_forward(z, model, params)
    return x, log_q0 - fwd_ld


# -- architecture assembly ----------------------------------------------------------


def build_architecture(name: str, d: int, options: dict | None = None,
                       seed: int = 0) -> FlowModel:
    """Assemble one of the named flow architectures.

    All architectures share the RQS-then-affine autoregressive core; the
    tail-aware ones append an elementwise tail transform, optionally with an
    LU linear layer immediately before it.  TTFfix freezes the tail shapes
    and mTAF freezes the base degrees of freedom (two-stage training).
    """
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")
    if d < 1:
        raise ValueError("dimension must be at least 1")
    opts = {"bins": 5, "bound": 2.5, "lu": False, "nu_init": 30.0,
            "activation": MaskedConditioner.ACTIVATION}
    opts.update(options or {})
    rng = special.Rng(seed)

    if name in ("normal", "TTF", "TTFfix", "COMET"):
        base = StdNormalBase(d)
    elif name == "m_normal":
        base = GaussianMixtureBase(d, 5)
    elif name == "g_normal":
        base = GenNormalBase(d)
    elif name == "mTAF":
        base = StudentTBase(d, trainable=False, nu_init=opts["nu_init"])
    else:  # gTAF, TTF_tBase
        base = StudentTBase(d, trainable=True, nu_init=opts["nu_init"])

    layers = [
        RqsArLayer(d, "rqs", bins=opts["bins"], bound=opts["bound"]),
        AffineArLayer(d, "affine"),
    ]
    if name in ("TTF", "TTFfix", "TTF_tBase"):
        if opts["lu"]:
            layers.append(LuLinearLayer(d, "lu"))
        layers.append(MarginalTtfLayer(d, "tails"))
    elif opts["lu"]:
        layers.append(LuLinearLayer(d, "lu"))

    params: dict = {}
    params.update(base.init_params(rng))
    for layer in layers:
        params.update(layer.init_params(rng))

    frozen = set()
    if name == "TTFfix":
        frozen |= {"tails.lp_raw", "tails.ln_raw"}
    if name == "mTAF":
        frozen |= {"base.nu_raw"}
    return FlowModel(name, d, base, layers, params, frozen, opts)


def set_frozen_tails(model: FlowModel, lam_pos, lam_neg=None) -> None:
    """Write estimated tail shapes into the tail layer (two-stage fitting)."""
    lam_pos = np.asarray(lam_pos, dtype=float)
    lam_neg = lam_pos if lam_neg is None else np.asarray(lam_neg, dtype=float)
    model.params["tails.lp_raw"] = softplus_inv(lam_pos)
    model.params["tails.ln_raw"] = softplus_inv(lam_neg)


def set_frozen_nu(model: FlowModel, nu) -> None:
    """Write estimated degrees of freedom into a Student-T base."""
    model.params["base.nu_raw"] = softplus_inv(np.asarray(nu, dtype=float))


# -- serialization --------------------------------------------------------------------

_FORMAT = "tailflow-model"
_VERSION = 1


def save_model(model: FlowModel, path: str) -> None:
    """Flat, versioned, self-describing record; bit-exact float64 round trip."""
    rec = {
        "format": _FORMAT,
        "version": _VERSION,
        "name": model.name,
        "d": model.d,
        "options": model.options,
        "frozen": sorted(model.frozen),
        "params": {
            k: {
                "shape": list(v.shape),
                "data": base64.b64encode(np.ascontiguousarray(v, dtype=float).tobytes()).decode(),
            }
            for k, v in model.params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rec, fh, indent=1)


def load_model(path: str) -> FlowModel:
    with open(path, encoding="utf-8") as fh:
        rec = json.load(fh)
    if rec.get("format") != _FORMAT or rec.get("version") != _VERSION:
        raise ValueError(f"not a {_FORMAT} v{_VERSION} record: {path}")
    model = build_architecture(rec["name"], rec["d"], rec["options"])
    model.frozen = set(rec["frozen"])
    params = {}
    for k, spec in rec["params"].items():
        arr = np.frombuffer(base64.b64decode(spec["data"]), dtype=float)
        params[k] = arr.reshape(spec["shape"]).copy()
    model.params = params
    return model
