"""Formant and f0 measurement of vowel tokens.

Formants come from the roots of per-frame prediction polynomials, fitted
by default on the closed phase of each glottal cycle (Burg frames are the
fallback); f0 from normalised autocorrelation. A token's measurement point is the
tenth glottal period after voicing onset, where onset is found from
low-frequency (80-1000 Hz) band energy.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal

from . import lpc
from .responses import RESPONSE_FIELDS, parse_token_name
from .units import FormantPoint


class AnalysisError(ValueError):
    """Token cannot be measured (silent, unvoiced, or too short)."""


@dataclass
class FormantTrack:
    """Per-frame formant candidates of one token.

    ``formants[i]`` is an array of shape (k, 2) holding (frequency, bandwidth)
    pairs in increasing frequency for the frame at ``times[i]``.
    """

    times: np.ndarray
    formants: list[np.ndarray]
    voicing_onset: float
    voicing_offset: float
    duration: float
    reliable: bool = True

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("frame times must increase")

    def formant(self, index: int) -> np.ndarray:
        """Frequency track of formant ``index`` (0 = F1); NaN where absent."""
        return np.array([f[index, 0] if f.shape[0] > index else np.nan
                         for f in self.formants])


@dataclass(frozen=True)
class MeasurementPoint:
    time: float
    point: FormantPoint
    f0: float = float("nan")
    flags: tuple[str, ...] = field(default_factory=tuple)


def _to_rate(x, rate_in, rate_out):
    if rate_in == rate_out:
        return np.asarray(x, dtype=float)
    frac = Fraction(int(rate_out), int(rate_in)).limit_denominator(1000)
    return signal.resample_poly(x, frac.numerator, frac.denominator)


def _band_energy(x, sample_rate, frame=0.01, hop=0.005, band=(80.0, 1000.0)):
    hi = min(band[1], 0.45 * sample_rate)
    sos = signal.butter(4, [band[0], hi], btype="bandpass", fs=sample_rate, output="sos")
    y = signal.sosfilt(sos, x)
    nf = max(1, int(round(frame * sample_rate)))
    nh = max(1, int(round(hop * sample_rate)))
    n = 1 + max(0, (y.size - nf)) // nh
    e = np.array([np.sum(y[i * nh:i * nh + nf] ** 2) for i in range(n)])
    times = np.arange(n) * nh / sample_rate
    return times, e


def voiced_span(x, sample_rate: float, threshold: float = 0.1, run: int = 3):
    """Start and end time (s) of the region where band energy exceeds
    ``threshold`` times its maximum for at least ``run`` frames."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise AnalysisError("empty audio")
    times, e = _band_energy(x, sample_rate)
    if e.max() <= 0:
        raise AnalysisError("no voicing found")
    hot = e > threshold * e.max()
    counts = np.convolve(hot.astype(int), np.ones(run, dtype=int), "valid")
    starts = np.flatnonzero(counts >= run)
    if starts.size == 0:
        raise AnalysisError("no voicing found")
    on = times[starts[0]]
    off = min(times[starts[-1] + run - 1] + 0.01, x.size / sample_rate)
    return float(on), float(off)


def find_voicing_onset(x, sample_rate: float) -> float:
    """Earliest time at which 80-1000 Hz band energy exceeds 10% of its
    maximum for three consecutive 5 ms frames."""
    return voiced_span(x, sample_rate)[0]


def track_f0(x, sample_rate: float, window: float = 0.04, step: float = 0.01,
             fmin: float = 70.0, fmax: float = 400.0, voicing_threshold: float = 0.45):
    """Normalised-autocorrelation f0 track.

    Returns ``(times, f0, strength)``; unvoiced frames have ``f0 = nan``.
    Voiced values more than half an octave from the track median (octave
    jumps, typically in frames hanging over the token edges) are unvoiced.
    """
    x = np.asarray(x, dtype=float)
    nw = int(round(window * sample_rate))
    ns = int(round(step * sample_rate))
    lag_lo = int(np.floor(sample_rate / fmax))
    lag_hi = int(np.ceil(sample_rate / fmin))
    half = nw // 2
    xp = np.pad(x, (half, nw - half))
    centres = np.arange(0, x.size, ns)
    f0 = np.full(centres.size, np.nan)
    strength = np.zeros(centres.size)
    win = np.hanning(nw)
    wac = np.correlate(win, win, "full")[nw - 1:]
    for i, c in enumerate(centres):
        fr = xp[c:c + nw]
        fr = (fr - fr.mean()) * win
        e = fr @ fr
        if e <= 1e-12:
            continue
        ac = signal.correlate(fr, fr, "full", method="fft")[nw - 1:] / e
        hi = min(lag_hi, nw - 2)
        if hi <= lag_lo:
            continue
        # divide out the window's own autocorrelation to flatten the lag decay
        r = ac[lag_lo:hi + 1] / np.maximum(wac[lag_lo:hi + 1] / wac[0], 1e-3)
        k = int(np.argmax(r))
        strength[i] = r[k]
        if r[k] < voicing_threshold:
            continue
        lag = lag_lo + k
        if 0 < k < r.size - 1:
            den = r[k - 1] - 2 * r[k] + r[k + 1]
            if den < 0:
                lag += 0.5 * (r[k - 1] - r[k + 1]) / den
        f0[i] = sample_rate / lag
    voiced = np.isfinite(f0)
    if voiced.any():
        jump = np.abs(np.log2(f0[voiced] / np.median(f0[voiced]))) > 0.5
        f0[np.flatnonzero(voiced)[jump]] = np.nan
    return centres / sample_rate, f0, strength


def default_order(sample_rate: float) -> int:
    """Prediction order for a given rate: about one pole pair per kHz, plus two."""
    p = int(round(sample_rate / 1000.0)) + 2
    return p + (p % 2)


def closed_phase_lpc(x, centre: int, span: int, order: int, sample_rate: float,
                     skip: int = 3, min_rows: int | None = None):
    """Covariance-method prediction polynomial from closed-phase samples.

    Excitation instants inside ``x[centre - span//2 : centre + span//2]``
    are located as peaks of a Burg residual. Prediction rows are taken from
    ``skip`` samples after each instant up to the next one, so the fit sees
    only free resonance decay. Returns ``None`` when fewer than two
    instants are found or there are too few rows.
    """
    n = x.size
    lo = max(order + 1, centre - span // 2)
    hi = min(n, centre + span // 2)
    if hi - lo <= 4 * order:
        return None
    seg = x[lo:hi]
    if not np.any(seg):
        return None
    a0 = lpc.burg(seg * lpc.gaussian_window(seg.size), order)
    res = np.abs(signal.lfilter(a0, [1.0], x[lo - order:hi])[order:])
    peaks, _ = signal.find_peaks(res, distance=max(1, int(sample_rate / 400.0)),
                                 height=0.3 * res.max())
    if peaks.size < 2:
        return None
    rows = np.concatenate([np.arange(g0 + skip, g1) for g0, g1 in zip(peaks, peaks[1:])
                           if g1 - g0 > skip]) + lo
    if rows.size < (min_rows or 3 * order):
        return None
    X = np.column_stack([x[rows - k] for k in range(1, order + 1)])
    coef, *_ = np.linalg.lstsq(X, -x[rows], rcond=None)
    return np.r_[1.0, coef]


def track_formants(x, sample_rate: float, window: float = 0.025, step: float = 0.01,
                   lpc_order: int | None = None, method: str = "closed-phase",
                   max_formant: float = 5500.0, min_freq: float = 90.0,
                   max_bw: float = 700.0) -> FormantTrack:
    """Linear-prediction formant track of a token.

    ``method="closed-phase"`` (default) analyses each frame at the native
    rate with a covariance fit over the closed-phase samples inside a
    ``2 * window`` span, falling back to Burg on frames without two
    excitation instants. ``method="burg"`` resamples to ``2 * max_formant``
    when the source rate is higher and uses Burg on Gaussian frames of
    effective length ``window``. Either way, roots above the real axis are
    kept when their bandwidth is below both ``max_bw`` and their own
    frequency (broader poles shape the spectral tilt rather than forming a
    peak) and their frequency lies in (``min_freq``, Nyquist - 50 Hz).
    """
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise AnalysisError("empty audio")
    if not window > step > 0:
        raise ValueError("need window > step > 0")
    if method not in ("closed-phase", "burg"):
        raise ValueError(f"unknown method {method!r}")
    if np.max(np.abs(x)) < 1e-6:
        raise AnalysisError("silent audio: no formant track")
    rate = sample_rate
    if method == "burg" and sample_rate > 2 * max_formant:
        rate = 2 * max_formant
        x = _to_rate(x, sample_rate, rate)
    order = lpc_order or default_order(rate)
    on, off = voiced_span(x, rate)
    centres, polys = lpc.frame_lpc(x, rate, order, window, step)
    if method == "closed-phase":
        # no pre-emphasis here: it amplifies quantisation noise in the decay tails
        span = int(round(2 * window * rate))
        polys = [_cp_or(a, x, c, span, order, rate) for a, c in zip(polys, centres)]
    nyq = rate / 2
    formants = []
    energy = np.array([np.sum(x[max(0, c - 64):c + 64] ** 2) for c in centres])
    quiet = energy < 1e-4 * energy.max()
    for a, q in zip(polys, quiet):
        if a is None or q:
            formants.append(np.zeros((0, 2)))
            continue
        f, b = lpc.poles_to_formants(a, rate)
        keep = (f > min_freq) & (f < nyq - 50) & (b < max_bw) & (b < f)
        formants.append(np.column_stack([f[keep], b[keep]]))
    _, _, strength = track_f0(x, rate)
    inside = (centres / rate >= on) & (centres / rate <= off)
    reliable = bool(inside.any() and np.median(strength[inside]) > 0.5)
    return FormantTrack(centres / rate, formants, on, off, x.size / rate, reliable)


def _cp_or(a, xe, centre, span, order, rate):
    if a is None:
        return None
    cp = closed_phase_lpc(xe, centre, span, order, rate)
    return a if cp is None else cp


def tenth_period_time(onset: float, f0_times, f0_values, n_periods: int = 10,
                      end: float | None = None) -> float:
    """Time after ``onset`` spanned by ``n_periods`` glottal periods.

    Each period is ``1 / f0`` with f0 read from the track at the running
    position (nearest voiced value). Raises :class:`AnalysisError` if the
    periods run past ``end``.
    """
    f0_times = np.asarray(f0_times, dtype=float)
    f0_values = np.asarray(f0_values, dtype=float)
    ok = np.isfinite(f0_values)
    if not ok.any():
        raise AnalysisError("no voiced f0 frames")
    vt, vf = f0_times[ok], f0_values[ok]
    t = onset
    for _ in range(n_periods):
        f = np.interp(t, vt, vf)
        t += 1.0 / f
    if end is not None and t > end:
        raise AnalysisError(
            f"token too short: {n_periods} periods need until {t:.3f} s, voicing ends {end:.3f} s")
    return float(t)


def measure_at_tenth_period(track: FormantTrack, f0_times, f0_values,
                            n_periods: int = 10) -> MeasurementPoint:
    """F1/F2 at the frame nearest the tenth period after voicing onset."""
    t = tenth_period_time(track.voicing_onset, f0_times, f0_values, n_periods,
                          end=track.voicing_offset)
    order = np.argsort(np.abs(track.times - t))
    for i in order[:5]:
        fr = track.formants[i]
        if fr.shape[0] >= 2:
            f0 = float(np.interp(t, *_voiced(f0_times, f0_values)))
            flags = () if track.reliable else ("unreliable",)
            return MeasurementPoint(float(t), FormantPoint(fr[0, 0], fr[1, 0]), f0, flags)
    raise AnalysisError(f"no frame near {t:.3f} s has two formants")


def _voiced(times, values):
    times = np.asarray(times, float)
    values = np.asarray(values, float)
    ok = np.isfinite(values)
    return times[ok], values[ok]


def measure_token(x, sample_rate: float, window: float = 0.025, step: float = 0.01,
                  lpc_order: int | None = None, method: str = "closed-phase",
                  offset: float = 0.0, analysis_rate: float | None = None) -> MeasurementPoint:
    """Track formants and f0 and return the tenth-period measurement.

    ``offset`` shifts the analysis frame grid by that many seconds (used to
    check re-measurement stability). ``analysis_rate`` resamples the token
    first, e.g. to emulate a lower digitization rate.
    """
    x = np.asarray(x, dtype=float)
    if analysis_rate is not None and analysis_rate != sample_rate:
        x = _to_rate(x, sample_rate, analysis_rate)
        sample_rate = analysis_rate
    if offset:
        n = int(round(abs(offset) * sample_rate))
        x = np.r_[np.zeros(n), x] if offset > 0 else x[n:]
    track = track_formants(x, sample_rate, window, step, lpc_order, method)
    times, f0, _ = track_f0(x, sample_rate)
    m = measure_at_tenth_period(track, times, f0)
    if offset > 0:
        m = MeasurementPoint(m.time - n / sample_rate, m.point, m.f0, m.flags)
    return m


def write_measurements(path: str, rows) -> None:
    """Write ``(token, MeasurementPoint | None, error)`` rows in the response CSV layout.

    Subject, stimulus and repetition are filled in when the token name follows
    the ``<subject>_s<stim>_r<rep>`` convention.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESPONSE_FIELDS)
        for token, m, err in rows:
            ident = parse_token_name(token) or ("", "", "")
            if m is None:
                w.writerow([token, *ident, "", "", "", "", "", err or "error"])
            else:
                w.writerow([token, *ident, "", f"{m.time:.5f}", f"{m.point.f1:.3f}",
                            f"{m.point.f2:.3f}", f"{m.f0:.3f}", ";".join(m.flags)])


def analyze_directory(audio_dir: str, out_csv: str, **kw) -> list:
    """Measure every ``.wav`` in ``audio_dir`` (sorted by name) into ``out_csv``."""
    from .wav import read_wav

    rows = []
    for name in sorted(os.listdir(audio_dir)):
        if not name.lower().endswith(".wav"):
            continue
        x, sr = read_wav(os.path.join(audio_dir, name))
        token = os.path.splitext(name)[0]
        try:
            rows.append((token, measure_token(x, sr, **kw), None))
        except AnalysisError as exc:
            rows.append((token, None, str(exc)))
    write_measurements(out_csv, rows)
    return rows
