"""The seven anchor families.

Every function takes blocks shaped (..., m, C) and returns per-channel
features shaped (..., C, d).  ``mode="soft"`` gives the differentiable,
temperature-smoothed variant; ``mode="hard"`` gives the exact one.  Families
without a temperature (filterbank, spectral, shape, autocorr) are identical in
both modes.
"""
from __future__ import annotations

import numpy as np

from ..tensor import Tensor, as_tensor, ops, rdft
from .params import MODES, ExtractorParams, spectral_frame

# Rows whose soft-quantile solve did not settle; see ``extract_quantiles``.
QUANTILE_FALLBACKS = {"count": 0}


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _time_last(blocks, min_length: int, family: str) -> Tensor:
    x = as_tensor(blocks)
    if x.ndim < 2:
        raise ValueError(f"{family}: blocks need shape (..., m, C), got {x.shape}")
    m = x.shape[-2]
    if m < min_length:
        raise ValueError(f"{family}: block length {m} is below the minimum {min_length}")
    return ops.swapaxes(x, -1, -2)


def _lag_products(u: Tensor, lag: int = 1) -> Tensor:
    return u[..., :-lag] * u[..., lag:]


def _diff(u: Tensor) -> Tensor:
    return u[..., 1:] - u[..., :-1]


def _lag_correlation(d: Tensor, lag: int, eps: float) -> Tensor:
    """sum_t d_t d_{t+lag} / (sum_t d_t^2 + eps) for an already centred ``d``."""
    num = ops.sum(_lag_products(d, lag), axis=-1)
    return num / (ops.sum(d * d, axis=-1) + eps)


# -- filterbank --------------------------------------------------------------

def sinc_kernels(params: ExtractorParams) -> Tensor:
    """Hamming-windowed band-pass kernels, shape (F, kernel_length)."""
    length = params.kernel_length
    if length % 2 == 0:
        raise ValueError(f"filterbank: kernel length must be odd, got {length}")
    half = length // 2
    t = np.arange(1, half + 1, dtype=np.float64)
    f_low, f_high = params.band_edges()
    fl = ops.reshape(f_low, (-1, 1))
    fh = ops.reshape(f_high, (-1, 1))
    side = (ops.sin(fh * (2 * np.pi * t)) - ops.sin(fl * (2 * np.pi * t))) / (np.pi * t)
    centre = (fh - fl) * 2.0
    kernel = ops.concat([ops.flip(side, -1), centre, side], axis=-1)
    return kernel * np.hamming(length)


def extract_filterbank(blocks, params: ExtractorParams, mode: str = "soft") -> Tensor:
    _check_mode(mode)
    x = as_tensor(blocks)
    if x.ndim >= 2 and x.shape[-2] < params.kernel_length:
        raise ValueError(
            f"filterbank: block length {x.shape[-2]} is shorter than the kernel ({params.kernel_length})"
        )
    x = _time_last(x, params.kernel_length, "filterbank")
    lead, m = x.shape[:-1], x.shape[-1]
    kern = sinc_kernels(params)
    n_f = kern.shape[0]
    flat = ops.reshape(x, (-1, 1, m))
    resp = ops.conv1d(flat, ops.reshape(kern, (n_f, 1, -1)), padding=params.kernel_length // 2)
    energy = ops.mean(resp * resp, axis=-1)
    return ops.reshape(energy, lead + (n_f,))


# -- spectral ----------------------------------------------------------------

def extract_spectral(blocks, params: ExtractorParams, mode: str = "soft") -> Tensor:
    """Frame-averaged log1p magnitudes plus centroid, bandwidth, entropy and phase drift."""
    _check_mode(mode)
    x = _time_last(blocks, 4, "spectral")
    m = x.shape[-1]
    frame = spectral_frame(m, params.max_frame)
    hop = frame // 2
    n_frames = (m - frame) // hop + 1
    frames = ops.stack([x[..., i * hop:i * hop + frame] for i in range(n_frames)], axis=-2)

    offset = np.arange(frame) - (frame - 1) / 2.0
    width = params.window_width() * float(frame)
    window = ops.exp((-0.5 * offset ** 2) / ops.reshape(width * width, (1,)))
    re, im = rdft(frames * window)
    mag = ops.hypot(re, im)
    power = re * re + im * im

    logmag = ops.mean(ops.log1p(mag), axis=-2)
    p_avg = ops.mean(power, axis=-2)
    n_bins = frame // 2 + 1
    freqs = np.arange(n_bins) * params.sampling_rate / frame
    p_norm = p_avg / (ops.sum(p_avg, axis=-1, keepdims=True) + params.eps)
    centroid = ops.sum(p_norm * freqs, axis=-1)
    spread = (freqs - ops.reshape(centroid, centroid.shape + (1,))) ** 2
    bandwidth = ops.sqrt(ops.sum(p_norm * spread, axis=-1) + params.eps)
    entropy = -ops.sum(p_norm * ops.log(p_norm + params.eps), axis=-1)
    if n_frames > 1:
        re0, re1, im0, im1 = re[..., :-1, :], re[..., 1:, :], im[..., :-1, :], im[..., 1:, :]
        dphi = ops.atan2(im1 * re0 - re1 * im0, re1 * re0 + im1 * im0)
        phase = ops.mean(ops.abs(dphi), axis=(-2, -1))
    else:
        phase = Tensor(np.zeros(centroid.shape))
    summaries = ops.stack([centroid, bandwidth, entropy, phase], axis=-1)
    return ops.concat([logmag, summaries], axis=-1)


# -- statistics --------------------------------------------------------------

def extract_statistics(blocks, params: ExtractorParams, mode: str = "soft") -> Tensor:
    """[mean, min, max, RMS, std]; soft mode smooths min/max with log-sum-exp."""
    _check_mode(mode)
    x = _time_last(blocks, 2, "statistics")
    mu = ops.mean(x, axis=-1)
    centred = x - ops.reshape(mu, mu.shape + (1,))
    if mode == "soft":
        tau = params.tau_stat
        lo = ops.logsumexp(x * (-1.0 / tau), axis=-1) * (-tau)
        hi = ops.logsumexp(x * (1.0 / tau), axis=-1) * tau
        rms = ops.sqrt(ops.mean(x * x, axis=-1) + params.eps)
        std = ops.sqrt(ops.mean(centred * centred, axis=-1) + params.eps)
    else:
        lo, hi = ops.min(x, axis=-1), ops.max(x, axis=-1)
        rms = Tensor(np.sqrt(np.mean(x.data ** 2, axis=-1)))
        std = Tensor(np.sqrt(np.mean(centred.data ** 2, axis=-1)))
    return ops.stack([mu, lo, hi, rms, std], axis=-1)


# -- shape -------------------------------------------------------------------

def extract_shape(blocks, params: ExtractorParams, mode: str = "soft") -> Tensor:
    """[skewness, excess kurtosis] with eps-regularised central moments."""
    _check_mode(mode)
    x = _time_last(blocks, 4, "shape")
    mu = ops.mean(x, axis=-1, keepdims=True)
    d = x - mu
    d2 = d * d
    m2 = ops.mean(d2, axis=-1) + params.eps
    m3 = ops.mean(d2 * d, axis=-1)
    m4 = ops.mean(d2 * d2, axis=-1)
    skew = m3 / ops.power(m2, 1.5)
    kurt = m4 / (m2 * m2) - 3.0
    return ops.stack([skew, kurt], axis=-1)


# -- crossings ---------------------------------------------------------------

def _crossing_rate(u: Tensor, tau: float, mode: str) -> Tensor:
    prod = _lag_products(u)
    if mode == "soft":
        return ops.mean(ops.sigmoid(prod * (-1.0 / tau)), axis=-1)
    return Tensor(np.mean(prod.data < 0, axis=-1).astype(np.float64))


def extract_crossings(blocks, params: ExtractorParams, mode: str = "soft") -> Tensor:
    """[zero-crossing rate, mean-crossing rate, slope zero-crossing rate,
    sign regularity, extrema rate]."""
    _check_mode(mode)
    x = _time_last(blocks, 3, "crossing")
    tau = params.tau_cross
    zcr = _crossing_rate(x, tau, mode)
    mcr = _crossing_rate(x - ops.mean(x, axis=-1, keepdims=True), tau, mode)
    dx = _diff(x)
    dzcr = _crossing_rate(dx, tau, mode)
    # extrema: slope sign changes, normalised by the m - 2 interior points
    extrema = _crossing_rate(dx, tau, mode)
    signs = ops.tanh(x * (1.0 / tau)) if mode == "soft" else Tensor(np.sign(x.data))
    sd = signs - ops.mean(signs, axis=-1, keepdims=True)
    regularity = _lag_correlation(sd, 1, params.eps)
    return ops.stack([zcr, mcr, dzcr, regularity, extrema], axis=-1)


# -- quantiles ---------------------------------------------------------------

def hard_quantiles(x: np.ndarray, levels) -> np.ndarray:
    """Exact quantiles along the last axis, stacked on a new last axis.

    Uses the averaged inverted-CDF rule: the midpoint of the two straddling
    order statistics when ``p*m`` is an integer, else the next order statistic.
    This is the zero-temperature limit of the soft quantile below.
    """
    q = np.quantile(x, np.asarray(levels), axis=-1, method="averaged_inverted_cdf")
    return np.moveaxis(q, 0, -1)


def _order_bracket(x: np.ndarray, levels: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Interval guaranteed to contain the soft quantile: around the order
    statistics that straddle ``p*m``, padded by 30 temperatures."""
    m = x.shape[-1]
    xs = np.sort(x, axis=-1)
    pm = levels * m
    a = np.clip(np.ceil(pm).astype(int) - 1, 0, m - 1)
    b = np.clip(np.floor(pm).astype(int), 0, m - 1)
    return xs[..., a] - 30.0 * tau, xs[..., b] + 30.0 * tau


def soft_quantiles(x: Tensor, levels, tau: float, steps: int = 20) -> Tensor:
    """Solve mean_i sigmoid((q - x_i)/tau) = p for every level by unrolled,
    bracket-safeguarded Newton iterations starting at the mean.

    The bracket starts around the straddling order statistics; a Newton step
    that would leave it is replaced by bisection.  Rows whose last update
    still exceeds the signal range at any level, and constant rows, fall back to the exact
    quantile with zero gradient.
    """
    p = np.asarray(levels, dtype=np.float64)
    xs = ops.reshape(x, x.shape[:-1] + (1, x.shape[-1]))
    q = ops.broadcast_to(ops.mean(x, axis=-1, keepdims=True), x.shape[:-1] + (len(p),))
    lo0, hi0 = _order_bracket(x.data, p, tau)
    lo, hi = Tensor(lo0), Tensor(hi0)
    update = np.zeros(q.shape)
    inv_tau = 1.0 / tau
    for _ in range(steps):
        s = ops.sigmoid((ops.reshape(q, q.shape + (1,)) - xs) * inv_tau)
        g = ops.mean(s, axis=-1) - p
        dg = ops.mean(s * (1.0 - s), axis=-1) * inv_tau
        inside = (q.data > lo.data) & (q.data < hi.data)
        lo = ops.where(inside & (g.data < 0), q, lo)
        hi = ops.where(inside & (g.data > 0), q, hi)
        safe = dg.data > 1e-300
        newton = q - g / ops.where(safe, dg, 1.0)
        ok = safe & (newton.data >= lo.data) & (newton.data <= hi.data) & np.isfinite(newton.data)
        q_next = ops.where(ok, newton, (lo + hi) * 0.5)
        update = q_next.data - q.data
        q = q_next
    span = np.max(x.data, axis=-1, keepdims=True) - np.min(x.data, axis=-1, keepdims=True)
    # Whole rows fall back together so the levels stay ordered.
    bad = np.any((np.abs(update) > span) | ~np.isfinite(q.data), axis=-1, keepdims=True) | (span == 0)
    if bad.any():
        QUANTILE_FALLBACKS["count"] += int(np.sum(bad & (span != 0)))
        q = ops.where(np.broadcast_to(bad, q.shape), Tensor(hard_quantiles(x.data, p)), q)
    return q


def extract_quantiles(blocks, params: ExtractorParams, mode: str = "soft") -> Tensor:
    _check_mode(mode)
    x = _time_last(blocks, 2, "quantiles")
    if mode == "hard":
        return Tensor(hard_quantiles(x.data, params.quantile_levels))
    return soft_quantiles(x, params.quantile_levels, params.tau_quant, params.newton_steps)


# -- autocorrelation ---------------------------------------------------------

def extract_autocorr(blocks, params: ExtractorParams, mode: str = "soft") -> Tensor:
    _check_mode(mode)
    x = _time_last(blocks, 2, "autocorr")
    m = x.shape[-1]
    if max(params.autocorr_lags) >= m:
        raise ValueError(f"autocorr: lag {max(params.autocorr_lags)} must be below block length {m}")
    d = x - ops.mean(x, axis=-1, keepdims=True)
    return ops.stack([_lag_correlation(d, int(k), params.eps) for k in params.autocorr_lags], axis=-1)


FAMILY_FUNCS = {
    "filterbank": extract_filterbank,
    "spectral": extract_spectral,
    "statistics": extract_statistics,
    "shape": extract_shape,
    "crossing": extract_crossings,
    "quantiles": extract_quantiles,
    "autocorr": extract_autocorr,
}
