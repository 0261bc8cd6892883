"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and the environment variable
``PROSODY_INTENT_DISABLE_NUMBA`` is unset (or set to ``0``). Both paths
implement the same arithmetic; ``benchmarks/bench_kernels.py`` times them
against each other and the test-suite checks they agree.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

ENV_FLAG = "PROSODY_INTENT_DISABLE_NUMBA"

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


_use_numba = HAVE_NUMBA and os.environ.get(ENV_FLAG, "0").lower() in ("", "0", "false", "no")


def backend() -> str:
    return "numba" if _use_numba else "numpy"


@contextmanager
def use_backend(name: str):
    """Temporarily force ``"numba"`` or ``"numpy"`` kernels."""
    global _use_numba
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    prev = _use_numba
    _use_numba = name == "numba"
    try:
        yield
    finally:
        _use_numba = prev


# ---------------------------------------------------------------- autocorrelation


@njit(cache=True)
def _acf_peaks_nb(frames, lmin, lmax):
    n_frames, n = frames.shape
    lags = np.zeros(n_frames)
    peaks = np.zeros(n_frames)
    r = np.empty(lmax + 2)
    for f in range(n_frames):
        x = frames[f]
        r0 = 0.0
        for i in range(n):
            r0 += x[i] * x[i]
        if r0 <= 0.0:
            continue
        for tau in range(lmin - 1, lmax + 2):
            acc = 0.0
            for i in range(n - tau):
                acc += x[i] * x[i + tau]
            r[tau] = acc / r0
        best = lmin
        for tau in range(lmin + 1, lmax + 1):
            if r[tau] > r[best]:
                best = tau
        y0 = r[best - 1]
        y1 = r[best]
        y2 = r[best + 1]
        denom = y0 - 2.0 * y1 + y2
        delta = 0.0
        if denom != 0.0:
            delta = 0.5 * (y0 - y2) / denom
            if delta > 0.5:
                delta = 0.5
            elif delta < -0.5:
                delta = -0.5
        lags[f] = best + delta
        peaks[f] = y1
    return lags, peaks


def _acf_peaks_np(frames, lmin, lmax):
    n_frames, n = frames.shape
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(frames, nfft, axis=1)
    acf = np.fft.irfft(spec.real ** 2 + spec.imag ** 2, nfft, axis=1)[:, : lmax + 2]
    r0 = np.einsum("ij,ij->i", frames, frames)
    lags = np.zeros(n_frames)
    peaks = np.zeros(n_frames)
    live = r0 > 0.0
    if not live.any():
        return lags, peaks
    r = acf[live] / r0[live, None]
    best = lmin + np.argmax(r[:, lmin : lmax + 1], axis=1)
    rows = np.arange(r.shape[0])
    y0, y1, y2 = r[rows, best - 1], r[rows, best], r[rows, best + 1]
    denom = y0 - 2.0 * y1 + y2
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(denom != 0.0, 0.5 * (y0 - y2) / denom, 0.0)
    lags[live] = best + np.clip(delta, -0.5, 0.5)
    peaks[live] = y1
    return lags, peaks


def acf_peaks(frames: np.ndarray, lmin: int, lmax: int) -> tuple[np.ndarray, np.ndarray]:
    """Peak of the normalized autocorrelation r(lag)/r(0) for each frame row.

    Searches integer lags in ``[lmin, lmax]`` and refines the winner by
    parabolic interpolation. Returns ``(lag, peak_value)`` per frame; silent
    frames get ``(0, 0)``. Requires ``1 <= lmin`` and ``lmax + 1 < frame length``.
    """
    frames = np.ascontiguousarray(np.atleast_2d(frames), dtype=np.float64)
    if lmin < 1 or lmax + 1 >= frames.shape[1] or lmax < lmin:
        raise ValueError(f"lag range [{lmin}, {lmax}] invalid for frame length {frames.shape[1]}")
    if _use_numba:
        return _acf_peaks_nb(frames, int(lmin), int(lmax))
    return _acf_peaks_np(frames, int(lmin), int(lmax))


# ---------------------------------------------------------------- confusion counts


@njit(cache=True)
def _confusion_nb(y_true, y_pred, n_classes):
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    for i in range(y_true.shape[0]):
        out[y_true[i], y_pred[i]] += 1
    return out


def _confusion_np(y_true, y_pred, n_classes):
    flat = np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes)
    return flat.reshape(n_classes, n_classes).astype(np.int64)


def confusion_counts(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> np.ndarray:
    """Row = gold class, column = predicted class."""
    y_true = np.ascontiguousarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.ascontiguousarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ValueError("label arrays differ in length")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0
                        or max(y_true.max(), y_pred.max()) >= n_classes):
        raise ValueError("label outside [0, n_classes)")
    if _use_numba:
        return _confusion_nb(y_true, y_pred, int(n_classes))
    return _confusion_np(y_true, y_pred, int(n_classes))


# ---------------------------------------------------------------- adam


@njit(cache=True)
def _adam_nb(theta, grad, m, v, lr, b1, b2, eps, wd, t, decoupled):
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i in range(theta.size):
        g = grad[i]
        if not decoupled:
            g = g + wd * theta[i]
        m[i] = b1 * m[i] + (1.0 - b1) * g
        v[i] = b2 * v[i] + (1.0 - b2) * g * g
        mhat = m[i] / c1
        vhat = v[i] / c2
        if decoupled:
            theta[i] = theta[i] - lr * wd * theta[i]
        theta[i] = theta[i] - lr * mhat / (np.sqrt(vhat) + eps)


def _adam_np(theta, grad, m, v, lr, b1, b2, eps, wd, t, decoupled):
    g = grad if decoupled else grad + wd * theta
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    if decoupled:
        theta -= lr * wd * theta
    theta -= lr * mhat / (np.sqrt(vhat) + eps)


def adam_update(theta, grad, m, v, *, lr, beta1, beta2, eps, weight_decay, step, decoupled=False):
    """One in-place Adam update of flat float64 arrays ``theta``, ``m``, ``v``."""
    if _use_numba:
        _adam_nb(theta.reshape(-1), np.ascontiguousarray(grad).reshape(-1), m.reshape(-1),
                 v.reshape(-1), float(lr), float(beta1), float(beta2), float(eps),
                 float(weight_decay), int(step), bool(decoupled))
    else:
        _adam_np(theta, grad, m, v, float(lr), float(beta1), float(beta2), float(eps),
                 float(weight_decay), int(step), bool(decoupled))
