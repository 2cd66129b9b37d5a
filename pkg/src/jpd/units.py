"""Frequency-scale conversions and the (F1, F2) formant point.

The mel scale used throughout is ``2595 * log10(1 + f / 700)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

MEL_FORMULA = "2595*log10(1+f/700)"


def hz_to_mel(f):
    """Convert frequency in Hz to mels.

    Accepts scalars or array-likes. Raises ``ValueError`` for negative or
    non-finite input.
    """
    if isinstance(f, (float, int, np.floating, np.integer)):
        # scalar fast path; the simulator converts points one at a time
        if not 0 <= f < math.inf:
            raise ValueError("frequency must be finite and non-negative")
        return 2595.0 * math.log10(1.0 + f / 700.0)
    f_arr = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f_arr)) or np.any(f_arr < 0):
        raise ValueError("frequency must be finite and non-negative")
    m = 2595.0 * np.log10(1.0 + f_arr / 700.0)
    return float(m) if m.ndim == 0 else m


def mel_to_hz(m):
    """Inverse of :func:`hz_to_mel`."""
    if isinstance(m, (float, int, np.floating, np.integer)):
        if not 0 <= m < math.inf:
            raise ValueError("mel value must be finite and non-negative")
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    m_arr = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m_arr)) or np.any(m_arr < 0):
        raise ValueError("mel value must be finite and non-negative")
    f = 700.0 * (10.0 ** (m_arr / 2595.0) - 1.0)
    return float(f) if f.ndim == 0 else f


@dataclass(frozen=True)
class FormantPoint:
    """First and second formant frequencies in Hz."""

    f1: float
    f2: float

    def __post_init__(self):
        if not (math.isfinite(self.f1) and math.isfinite(self.f2)):
            raise ValueError("formant frequencies must be finite")
        if not 0 < self.f1 < self.f2:
            raise ValueError(f"need 0 < F1 < F2, got ({self.f1}, {self.f2})")

    @cached_property
    def mel(self) -> np.ndarray:
        m = np.array([hz_to_mel(self.f1), hz_to_mel(self.f2)])
        m.flags.writeable = False
        return m

    @classmethod
    def from_mel(cls, m1: float, m2: float) -> "FormantPoint":
        return cls(mel_to_hz(m1), mel_to_hz(m2))

    def check_nyquist(self, sample_rate: float) -> None:
        if self.f2 >= sample_rate / 2:
            raise ValueError(
                f"F2={self.f2} Hz is not below Nyquist ({sample_rate / 2} Hz)")

    def as_tuple(self) -> tuple[float, float]:
        return (self.f1, self.f2)


def mel_distance(a: FormantPoint, b: FormantPoint) -> float:
    """Euclidean distance between two formant points in (mel F1, mel F2)."""
    d = a.mel - b.mel
    return float(np.hypot(d[0], d[1]))


def mel_interpolate(a: FormantPoint, b: FormantPoint, t: float) -> FormantPoint:
    """Point a fraction ``t`` of the way from ``a`` to ``b`` along the mel line."""
    m = (1.0 - t) * a.mel + t * b.mel
    return FormantPoint.from_mel(m[0], m[1])
