"""Vowel continua: parametric formant synthesis and LPC resynthesis.

Two ways of producing a stimulus series are provided:

* :func:`build_parametric_continuum` interpolates formant targets in mel
  space between two endpoint vowels and renders each one with a cascade
  formant synthesizer (:func:`render_vowel`).
* :func:`plan_resynthesis` / :func:`resynthesize_series` take a speaker's
  own tokens, analyse the base token by linear prediction and re-filter its
  source with F1 and F2 poles moved in fixed Hz steps.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal

from . import lpc
from .units import MEL_FORMULA, FormantPoint, hz_to_mel, mel_distance, mel_interpolate
from .wav import write_wav

log = logging.getLogger(__name__)

PARAMETRIC_RATE = 16000
RESYNTHESIS_RATE = 11025
PEAK_LEVEL = 10 ** (-3 / 20)


@dataclass(frozen=True)
class PitchContour:
    """Piecewise-linear rise-fall f0 contour.

    ``start``, ``peak`` and ``end`` are multiples of ``mean_f0`` before
    rescaling; the rendered contour is rescaled so its time average is
    exactly ``mean_f0``.
    """

    mean_f0: float = 117.0
    start: float = 0.9
    peak: float = 1.1
    end: float = 0.85
    peak_position: float = 0.3

    def __post_init__(self):
        if self.mean_f0 <= 0:
            raise ValueError("mean_f0 must be positive")
        if min(self.start, self.peak, self.end) <= 0:
            raise ValueError("contour fractions must be positive")
        if not 0 < self.peak_position < 1:
            raise ValueError("peak_position must lie in (0, 1)")

    def sample(self, n: int, sample_rate: float) -> np.ndarray:
        """f0 value for each of ``n`` samples."""
        t = np.arange(n) / sample_rate
        dur = n / sample_rate
        shape = np.interp(t, [0.0, self.peak_position * dur, dur],
                          [self.start, self.peak, self.end])
        return shape * (self.mean_f0 / shape.mean())


@dataclass(frozen=True)
class StimulusSpec:
    id: int
    target: FormantPoint
    duration: float = 0.25
    f0: PitchContour = field(default_factory=PitchContour)

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")


@dataclass
class SynthesisSettings:
    """Resonator defaults for the parametric synthesizer."""

    b1: float = 60.0
    b2: float = 90.0
    f3: float = 2800.0
    b3: float = 150.0
    f4: float = 3500.0
    b4: float = 200.0
    tilt_corner: float = 100.0
    radiation: bool = True
    ramp: float = 0.01


@dataclass
class Continuum:
    """An ordered stimulus series plus (optionally) its rendered audio.

    ``measured`` holds re-extracted formants for resynthesized series and
    ``flags`` lists any round-trip failures found while building it.
    """

    stimuli: list[StimulusSpec]
    mode: str
    sample_rate: int
    audio: list[np.ndarray] = field(default_factory=list)
    measured: list[FormantPoint | None] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.id for s in self.stimuli]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("stimulus ids must be strictly increasing")

    @property
    def ids(self) -> list[int]:
        return [s.id for s in self.stimuli]

    def target(self, stim_id: int) -> FormantPoint:
        for s in self.stimuli:
            if s.id == stim_id:
                return s.target
        raise KeyError(stim_id)

    def mel_gaps(self) -> np.ndarray:
        t = [s.target for s in self.stimuli]
        return np.array([mel_distance(a, b) for a, b in zip(t, t[1:])])


def _resonator(x, freq, bw, sample_rate):
    # unity gain at DC (Klatt form)
    T = 1.0 / sample_rate
    c = -np.exp(-2 * np.pi * bw * T)
    b = 2 * np.exp(-np.pi * bw * T) * np.cos(2 * np.pi * freq * T)
    a = 1.0 - b - c
    return signal.lfilter([a], [1.0, -b, -c], x)


def glottal_pulses(f0: np.ndarray, sample_rate: float) -> np.ndarray:
    """Unit impulses placed once per period of a time-varying f0 track."""
    phase = np.cumsum(f0) / sample_rate
    idx = np.flatnonzero(np.diff(np.floor(phase), prepend=-1.0) > 0)
    pulses = np.zeros(f0.size)
    pulses[idx] = 1.0
    return pulses


def render_vowel(spec: StimulusSpec, sample_rate: int = PARAMETRIC_RATE,
                 settings: SynthesisSettings | None = None) -> np.ndarray:
    """Render a steady voiced vowel with a cascade formant synthesizer.

    Source: impulse train following ``spec.f0`` through two one-pole
    low-pass sections (-12 dB/octave). Filter: F1, F2 at the target and
    fixed F3, F4, then a first-difference lip-radiation stage unless
    disabled. The result is ramped on and off and peak-normalised to
    -3 dBFS.
    """
    s = settings or SynthesisSettings()
    nyq = sample_rate / 2
    if max(spec.target.f2, s.f4) >= nyq - 100:
        raise ValueError(f"formants exceed Nyquist for sample rate {sample_rate}")
    n = int(round(spec.duration * sample_rate))
    src = glottal_pulses(spec.f0.sample(n, sample_rate), sample_rate)
    pole = np.exp(-2 * np.pi * s.tilt_corner / sample_rate)
    src = signal.lfilter([1 - pole], [1, -pole], src)
    src = signal.lfilter([1 - pole], [1, -pole], src)
    y = src
    for f, b in ((spec.target.f1, s.b1), (spec.target.f2, s.b2),
                 (s.f3, s.b3), (s.f4, s.b4)):
        y = _resonator(y, f, b, sample_rate)
    if s.radiation:
        y = np.diff(y, prepend=0.0)
    nr = min(int(s.ramp * sample_rate), n // 4)
    if nr > 0:
        ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, nr))
        y[:nr] *= ramp
        y[-nr:] *= ramp[::-1]
    y = y - y.mean()
    return PEAK_LEVEL * y / np.max(np.abs(y))


def build_parametric_continuum(endpoint_a: FormantPoint, endpoint_b: FormantPoint,
                               n: int = 9, duration: float = 0.25,
                               f0: PitchContour | None = None,
                               sample_rate: int = PARAMETRIC_RATE,
                               settings: SynthesisSettings | None = None,
                               render: bool = True) -> Continuum:
    """Equally mel-spaced series of ``n`` vowels from ``endpoint_a`` to ``endpoint_b``.

    Stimuli are numbered from 1.
    """
    if n < 2:
        raise ValueError("a continuum needs at least two stimuli")
    if mel_distance(endpoint_a, endpoint_b) == 0:
        raise ValueError("continuum endpoints coincide")
    f0 = f0 or PitchContour()
    settings = settings or SynthesisSettings()
    specs = []
    for i in range(n):
        t = i / (n - 1)
        target = endpoint_a if i == 0 else endpoint_b if i == n - 1 else \
            mel_interpolate(endpoint_a, endpoint_b, t)
        specs.append(StimulusSpec(i + 1, target, duration, f0))
    cont = Continuum(specs, "parametric", sample_rate,
                     settings={"synthesis": asdict(settings)})
    if render:
        cont.audio = [render_vowel(s, sample_rate, settings) for s in specs]
    return cont


# --------------------------------------------------------------------------
# resynthesis


@dataclass
class ResynthesisPlan:
    base_token: np.ndarray
    sample_rate: int
    f1_step: float
    f2_step: float
    index_range: tuple[int, int] = (-1, 12)
    lpc_order: int = 12
    window: float = 0.025
    time_step: float = 0.01
    duration: float | None = None

    def __post_init__(self):
        if self.lpc_order < 8 or self.lpc_order % 2:
            raise ValueError("lpc_order must be even and >= 8")
        if not self.window > self.time_step > 0:
            raise ValueError("need window > time_step > 0")
        lo, hi = self.index_range
        if not lo <= 1 <= hi:
            raise ValueError("index_range must contain 1")

    @property
    def indices(self) -> list[int]:
        return list(range(self.index_range[0], self.index_range[1] + 1))


def _resample(x, rate_in, rate_out):
    if rate_in == rate_out:
        return np.asarray(x, dtype=float)
    g = np.gcd(int(rate_in), int(rate_out))
    return signal.resample_poly(x, int(rate_out) // g, int(rate_in) // g)


def is_clipped(x, level: float = 0.999, run: int = 3) -> bool:
    """True if ``run`` or more consecutive samples sit at full scale."""
    hot = np.abs(np.asarray(x)) >= level
    if run <= 1:
        return bool(hot.any())
    counts = np.convolve(hot.astype(int), np.ones(run, dtype=int), "valid")
    return bool(np.any(counts >= run))


def token_robustness(x, sample_rate: int, lpc_order: int = 12) -> float:
    """Duration times mean spectral prominence (dB) of the first three LPC peaks."""
    from .analysis import voiced_span

    x = _resample(x, sample_rate, RESYNTHESIS_RATE)
    on, off = voiced_span(x, RESYNTHESIS_RATE)
    seg = x[int(on * RESYNTHESIS_RATE):int(off * RESYNTHESIS_RATE)]
    if seg.size <= lpc_order * 4:
        return 0.0
    a = lpc.burg(lpc.pre_emphasis(seg * np.hanning(seg.size), RESYNTHESIS_RATE),
                 lpc_order)
    w, h = lpc.lpc_envelope(a, RESYNTHESIS_RATE, 1024)
    db = 20 * np.log10(h + 1e-12)
    peaks, props = signal.find_peaks(db, prominence=0)
    if peaks.size == 0:
        return 0.0
    prom = props["prominences"][:3]
    return float((off - on) * prom.mean())


def _mean_formants(tokens, sample_rate):
    from .analysis import measure_token

    pts = [measure_token(t, sample_rate).point for t in tokens]
    return (float(np.mean([p.f1 for p in pts])), float(np.mean([p.f2 for p in pts])))


def plan_resynthesis(hid_tokens, head_tokens, sample_rate: int,
                     steps_between: int = 10, index_range=(-1, 12),
                     lpc_order: int = 12, window: float = 0.025,
                     time_step: float = 0.01) -> ResynthesisPlan:
    """Derive formant step sizes from two words' mean formants and pick a base token.

    The F1/F2 steps are ``(mean(head) - mean(hid)) / steps_between`` with sign
    kept. The base token is the unclipped 'hid' token with the highest
    :func:`token_robustness` score.
    """
    if not hid_tokens or not head_tokens:
        raise ValueError("need at least one token per word")
    hid = _mean_formants(hid_tokens, sample_rate)
    head = _mean_formants(head_tokens, sample_rate)
    f1_step = (head[0] - hid[0]) / steps_between
    f2_step = (head[1] - hid[1]) / steps_between
    if f1_step == 0 and f2_step == 0:
        raise ValueError("the two words have identical mean formants")
    candidates = [t for t in hid_tokens if not is_clipped(t)]
    if not candidates:
        raise ValueError("every 'hid' token is clipped")
    scores = [token_robustness(t, sample_rate, lpc_order) for t in candidates]
    base = _resample(candidates[int(np.argmax(scores))], sample_rate, RESYNTHESIS_RATE)
    log.info("resynthesis plan: f1_step=%.2f f2_step=%.2f", f1_step, f2_step)
    return ResynthesisPlan(base, RESYNTHESIS_RATE, f1_step, f2_step,
                           tuple(index_range), lpc_order, window, time_step,
                           duration=base.size / RESYNTHESIS_RATE)


def _filter_blocks(x, centres, polys, inverse):
    """Apply a time-varying polynomial filter, one block per frame.

    ``inverse=True`` computes the residual ``A(z) x``; otherwise the all-pole
    synthesis ``x / A(z)``. Filter memory carries across blocks.
    """
    n = x.size
    y = np.zeros(n)
    edges = np.r_[0, (centres[1:] + centres[:-1]) // 2, n]
    ident = np.array([1.0])
    for i, a in enumerate(polys):
        a = ident if a is None else a
        s, e = edges[i], edges[i + 1]
        if e <= s:
            continue
        p = a.size - 1
        if inverse:
            lo = max(0, s - p)
            seg = signal.lfilter(a, [1.0], x[lo:e])
            y[s:e] = seg[s - lo:]
        else:
            past = y[max(0, s - p):s][::-1]
            past = np.r_[past, np.zeros(p - past.size)]
            zi = signal.lfiltic([1.0], a, past) if p else None
            if p:
                y[s:e], _ = signal.lfilter([1.0], a, x[s:e], zi=zi)
            else:
                y[s:e] = x[s:e]
    return y


def resynthesize_series(plan: ResynthesisPlan, tolerance=(20.0, 50.0),
                        check: bool = True) -> Continuum:
    """Resynthesize the base token once per index with shifted F1/F2.

    Index ``k`` moves F1 by ``(k-1)*f1_step`` and F2 by ``(k-1)*f2_step``.
    With ``check`` on, every token is re-measured; deviations beyond
    ``tolerance`` (Hz) from the intended formants, or a non-monotone series,
    are recorded in ``Continuum.flags`` rather than raised.
    """
    from .analysis import measure_token

    sr = plan.sample_rate
    x = plan.base_token
    centres, polys = lpc.frame_lpc(x, sr, plan.lpc_order, plan.window, plan.time_step)
    residual = _filter_blocks(lpc.pre_emphasis(x, sr), centres, polys, inverse=True)
    ref = measure_token(x, sr)
    base_point = ref.point
    specs, audio, measured, flags = [], [], [], []
    for k in plan.indices:
        df1 = (k - 1) * plan.f1_step
        df2 = (k - 1) * plan.f2_step
        target = FormantPoint(base_point.f1 + df1, base_point.f2 + df2)
        if k == 1:
            shifted = polys
        else:
            shifted = []
            for a in polys:
                if a is None:
                    shifted.append(None)
                    continue
                try:
                    shifted.append(lpc.shift_poles(a, sr, {0: df1, 1: df2}))
                except ValueError:
                    shifted.append(a)
            _check_order(shifted, sr, k)
        y = _filter_blocks(residual, centres, shifted, inverse=False)
        # undo pre-emphasis applied before analysis; the integrator also
        # lifts any low-frequency residue, which the high-pass removes
        alpha = np.exp(-2 * np.pi * 50.0 / sr)
        y = signal.lfilter([1.0], [1.0, -alpha], y)
        y = signal.sosfiltfilt(_HIGHPASS(sr), y)
        peak = np.max(np.abs(y))
        if not np.isfinite(peak) or peak == 0:
            raise ValueError(f"resynthesis of stimulus {k} produced no signal")
        y = PEAK_LEVEL * y / peak
        specs.append(StimulusSpec(k, target, x.size / sr, PitchContour()))
        audio.append(y)
        if check:
            m = measure_token(y, sr).point
            measured.append(m)
            if abs(m.f1 - target.f1) > tolerance[0]:
                flags.append(f"stimulus {k}: F1 {m.f1:.0f} Hz vs target {target.f1:.0f} Hz")
            if abs(m.f2 - target.f2) > tolerance[1]:
                flags.append(f"stimulus {k}: F2 {m.f2:.0f} Hz vs target {target.f2:.0f} Hz")
    if check:
        flags.extend(_monotonicity_flags(plan, measured, tolerance))
    for f in flags:
        log.warning("resynthesis check failed: %s", f)
    return Continuum(specs, "resynthesis", sr, audio, measured, flags,
                     settings={"plan": {"f1_step": plan.f1_step, "f2_step": plan.f2_step,
                                        "lpc_order": plan.lpc_order, "window": plan.window,
                                        "time_step": plan.time_step,
                                        "index_range": list(plan.index_range)}})


def _HIGHPASS(sr, corner=60.0):
    return signal.butter(2, corner, "highpass", fs=sr, output="sos")


def _check_order(polys, sr, k):
    for a in polys:
        if a is None:
            continue
        f, b = lpc.poles_to_formants(a, sr)
        keep = f[(f > 90) & (b < 700)]
        if keep.size >= 2 and keep[0] >= keep[1]:
            raise ValueError(f"stimulus {k}: shifted F1 crosses F2")


def _monotonicity_flags(plan, measured, tolerance):
    out = []
    s1 = np.sign(plan.f1_step)
    s2 = np.sign(plan.f2_step)
    for (ka, a), (kb, b) in zip(zip(plan.indices, measured),
                                zip(plan.indices[1:], measured[1:])):
        if s1 and s1 * (b.f1 - a.f1) < -tolerance[0]:
            out.append(f"F1 not monotone between stimuli {ka} and {kb}")
        if s2 and s2 * (b.f2 - a.f2) < -tolerance[1]:
            out.append(f"F2 not monotone between stimuli {ka} and {kb}")
    return out


# --------------------------------------------------------------------------
# persistence


def write_continuum(cont: Continuum, out_dir: str, prefix: str = "stim") -> str:
    """Write one WAV per stimulus plus ``continuum.json``; return the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, spec in enumerate(cont.stimuli):
        name = f"{prefix}_{spec.id:+03d}.wav"
        if cont.audio:
            write_wav(os.path.join(out_dir, name), cont.audio[i], cont.sample_rate)
        row = {
            "id": spec.id,
            "f1_hz": spec.target.f1,
            "f2_hz": spec.target.f2,
            "f1_mel": hz_to_mel(spec.target.f1),
            "f2_mel": hz_to_mel(spec.target.f2),
            "duration": spec.duration,
            "f0": asdict(spec.f0),
            "audio": name if cont.audio else None,
        }
        if cont.measured:
            m = cont.measured[i]
            row["measured_f1_hz"] = m.f1 if m else None
            row["measured_f2_hz"] = m.f2 if m else None
        rows.append(row)
    manifest = {
        "mode": cont.mode,
        "sample_rate": cont.sample_rate,
        "mel_formula": MEL_FORMULA,
        "settings": cont.settings,
        "flags": cont.flags,
        "stimuli": rows,
    }
    path = os.path.join(out_dir, "continuum.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def read_continuum(path: str, load_audio: bool = False) -> Continuum:
    """Load a continuum manifest written by :func:`write_continuum`."""
    from .wav import read_wav

    with open(path) as fh:
        m = json.load(fh)
    specs, audio, measured = [], [], []
    base = os.path.dirname(path)
    for r in m["stimuli"]:
        specs.append(StimulusSpec(r["id"], FormantPoint(r["f1_hz"], r["f2_hz"]),
                                  r["duration"], PitchContour(**r["f0"])))
        if load_audio and r.get("audio"):
            audio.append(read_wav(os.path.join(base, r["audio"]))[0])
        if r.get("measured_f1_hz") is not None:
            measured.append(FormantPoint(r["measured_f1_hz"], r["measured_f2_hz"]))
    return Continuum(specs, m["mode"], m["sample_rate"], audio, measured,
                     m.get("flags", []), m.get("settings", {}))
