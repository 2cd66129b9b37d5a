"""Linear prediction by Burg's recursion and pole/formant conversions."""

from __future__ import annotations

import numpy as np
from scipy import signal


def burg(x, order: int) -> np.ndarray:
    """Burg estimate of the prediction polynomial ``[1, a1, ..., ap]``.

    The error filter is ``A(z) = 1 + a1 z^-1 + ... + ap z^-p`` so that
    ``lfilter(a, 1, x)`` is the forward prediction residual.
    """
    x = np.asarray(x, dtype=float)
    if order < 1:
        raise ValueError("order must be >= 1")
    if x.size <= order:
        raise ValueError("signal shorter than the prediction order")
    f = x[1:].copy()
    b = x[:-1].copy()
    a = np.array([1.0])
    for _ in range(order):
        den = f @ f + b @ b
        if den <= 0:
            a = np.r_[a, 0.0]
            f, b = f[1:], b[:-1]
            continue
        k = -2.0 * (f @ b) / den
        ext = np.r_[a, 0.0]
        a = ext + k * ext[::-1]
        f, b = (f + k * b)[1:], (b + k * f)[:-1]
    return a


def poles_to_formants(a, sample_rate: float):
    """Frequencies and bandwidths (Hz) of the upper-half-plane roots of ``a``.

    Returned arrays are sorted by frequency.
    """
    roots = np.roots(a)
    roots = roots[np.imag(roots) > 0]
    freqs = np.angle(roots) * sample_rate / (2 * np.pi)
    with np.errstate(divide="ignore"):
        bws = -np.log(np.abs(roots)) * sample_rate / np.pi
    order = np.argsort(freqs)
    return freqs[order], bws[order]


def formants_to_poly(freqs, bws, sample_rate: float) -> np.ndarray:
    """All-pole polynomial with one conjugate pole pair per (freq, bw)."""
    freqs = np.asarray(freqs, dtype=float)
    bws = np.asarray(bws, dtype=float)
    r = np.exp(-np.pi * bws / sample_rate)
    poles = r * np.exp(2j * np.pi * freqs / sample_rate)
    return np.real(np.poly(np.r_[poles, np.conj(poles)]))


def shift_poles(a, sample_rate: float, shifts: dict[int, float],
                min_freq: float = 90.0, max_bw: float = 700.0) -> np.ndarray:
    """Move selected resonances of an LPC polynomial.

    ``shifts`` maps a formant index (0 for F1) to a frequency offset in Hz.
    Formants are counted among roots with frequency above ``min_freq`` and
    bandwidth below ``max_bw``; other roots are left in place. Raises
    ``ValueError`` when a requested formant does not exist or a shifted pole
    leaves (0, Nyquist).
    """
    roots = np.roots(a)
    upper = np.flatnonzero(np.imag(roots) > 1e-12)
    freqs = np.angle(roots[upper]) * sample_rate / (2 * np.pi)
    bws = -np.log(np.abs(roots[upper])) * sample_rate / np.pi
    cand = [i for i in np.argsort(freqs)
            if freqs[i] > min_freq and bws[i] < max_bw]
    new_roots = roots.copy()
    for idx, df in shifts.items():
        if idx >= len(cand):
            raise ValueError(f"formant F{idx + 1} not found in frame")
        j = upper[cand[idx]]
        nf = freqs[cand[idx]] + df
        if not 0 < nf < sample_rate / 2:
            raise ValueError(f"shifted F{idx + 1} = {nf:.1f} Hz out of range")
        rho = np.abs(roots[j])
        new_roots[j] = rho * np.exp(2j * np.pi * nf / sample_rate)
    # rebuild conjugates from the upper half so the polynomial stays real
    up = new_roots[upper]
    real_roots = roots[np.abs(np.imag(roots)) < 1e-12]
    full = np.r_[up, np.conj(up), real_roots]
    return np.real(np.poly(full))


def lpc_envelope(a, sample_rate: float, n_freqs: int = 512, gain: float = 1.0):
    """Magnitude response ``gain / |A(e^jw)|`` on a linear frequency grid."""
    w, h = signal.freqz([gain], a, worN=n_freqs, fs=sample_rate)
    return w, np.abs(h)


def pre_emphasis(x, sample_rate: float, from_hz: float = 50.0) -> np.ndarray:
    """First-order high-frequency boost starting at ``from_hz``."""
    alpha = np.exp(-2 * np.pi * from_hz / sample_rate)
    return signal.lfilter([1.0, -alpha], [1.0], x)


def gaussian_window(n: int) -> np.ndarray:
    """Gaussian taper of ``n`` samples, edges near exp(-12)."""
    t = (np.arange(n) - (n - 1) / 2) / ((n - 1) / 2 if n > 1 else 1.0)
    w = np.exp(-12.0 * t ** 2)
    return (w - np.exp(-12.0)) / (1 - np.exp(-12.0))


def frame_lpc(x, sample_rate: float, order: int, window: float, step: float,
              emphasis_from: float = 50.0):
    """Burg polynomials on Gaussian frames centred every ``step`` seconds.

    ``window`` is the effective duration; the physical Gaussian spans twice
    that. Frames that are entirely zero yield ``None``. Returns the frame
    centre sample indices and the list of polynomials.
    """
    nwin = int(round(2 * window * sample_rate))
    nstep = int(round(step * sample_rate))
    if nstep < 1:
        raise ValueError("step shorter than one sample")
    half = nwin // 2
    xe = pre_emphasis(x, sample_rate, emphasis_from) if emphasis_from else np.asarray(x, float)
    xp = np.pad(xe, (half, nwin - half))
    win = gaussian_window(nwin)
    centres = np.arange(0, len(x), nstep)
    polys = []
    for c in centres:
        frame = xp[c:c + nwin] * win
        polys.append(burg(frame, order) if np.any(frame) else None)
    return centres, polys
