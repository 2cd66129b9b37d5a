"""Stochastic mimicry subjects with a known transfer function.

A simulated subject hears a stimulus (an F1/F2 target) and produces a
response by, in mel space,

1. choosing a category from the stimulus position relative to its boundary
   (or, with ``category_sampling``, drawing it per trial from the subject's
   own categorization probit, so that productions near the boundary are
   bimodal),
2. pulling the target toward that category's prototype by ``warp_strength``,
3. pulling again by ``category_weight`` (the categorical share of the
   response),
4. scaling the result about the midpoint of the prototypes by
   ``response_gain``,

and finally adding independent Gaussian production noise in Hz. Each
(subject, stimulus, repetition) draws from its own counter-derived RNG
stream, so results do not depend on presentation order or on how trials
are distributed over workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.special import ndtr

from .responses import MimicryResponse
from .units import FormantPoint

_ORDER_KEY = 1
_TRIAL_KEY = 2
_CATEGORY_KEY = 3


@dataclass(frozen=True)
class SubjectProfile:
    name: str
    boundary_stim: float
    prototypes: tuple[FormantPoint, FormantPoint]
    warp_strength: float = 0.0
    category_weight: float = 0.0
    production_noise: tuple[float, float] = (29.0, 58.0)
    response_gain: float = 1.0
    categorization_slope: float = 1.2
    category_sampling: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warp_strength <= 1:
            raise ValueError("warp_strength must lie in [0, 1]")
        if not 0 <= self.category_weight <= 1:
            raise ValueError("category_weight must lie in [0, 1]")
        if min(self.production_noise) <= 0:
            raise ValueError("production noise must be positive")
        if self.response_gain <= 0:
            raise ValueError("response_gain must be positive")
        if len(self.prototypes) != 2:
            raise ValueError("exactly two prototypes are required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prototypes"] = [[p.f1, p.f2] for p in self.prototypes]
        d["production_noise"] = list(self.production_noise)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SubjectProfile":
        d = dict(d)
        d["prototypes"] = tuple(FormantPoint(*p) for p in d["prototypes"])
        d["production_noise"] = tuple(d.get("production_noise", (29.0, 58.0)))
        return cls(**d)

    def with_seed(self, seed: int) -> "SubjectProfile":
        return replace(self, seed=int(seed))


def load_profiles(path: str) -> list[SubjectProfile]:
    """Profiles from a JSON file holding one profile object or a list of them."""
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data.get("subjects", [data])
    return [SubjectProfile.from_dict(d) for d in data]


def _key(stimulus_id: int) -> int:
    # zigzag so negative stimulus numbers map to distinct non-negative keys
    return 2 * stimulus_id if stimulus_id >= 0 else -2 * stimulus_id - 1


def trial_rng(profile: SubjectProfile, stimulus_id: int, repetition: int,
              stream: int = _TRIAL_KEY) -> np.random.Generator:
    """Independent generator for one (subject, stimulus, repetition)."""
    ss = np.random.SeedSequence(profile.seed, spawn_key=(stream, _key(stimulus_id), repetition))
    return np.random.default_rng(ss)


def category_of(profile: SubjectProfile, stimulus: FormantPoint,
                position: float | None = None) -> int:
    """0 below the boundary, 1 at or above it.

    Without a stimulus-number ``position`` the nearer prototype (in mel)
    decides.
    """
    if position is not None:
        return int(position >= profile.boundary_stim)
    m1, m2 = stimulus.mel
    d = [math.hypot(m1 - p.mel[0], m2 - p.mel[1]) for p in profile.prototypes]
    return int(d[1] < d[0])


def intended_target(profile: SubjectProfile, stimulus: FormantPoint,
                    position: float | None = None, category: int | None = None) -> FormantPoint:
    """Noise-free production target for a stimulus, given its category
    (looked up with :func:`category_of` when not supplied)."""
    cat = category_of(profile, stimulus, position) if category is None else int(category)
    proto = profile.prototypes[cat].mel
    m = (1 - profile.warp_strength) * stimulus.mel + profile.warp_strength * proto
    m = (1 - profile.category_weight) * m + profile.category_weight * proto
    mid = 0.5 * (profile.prototypes[0].mel + profile.prototypes[1].mel)
    m = mid + profile.response_gain * (m - mid)
    m = np.maximum(m, 1.0)
    return FormantPoint.from_mel(*m)


def respond(profile: SubjectProfile, stimulus: FormantPoint, position: float | None = None,
            stimulus_id: int = 0, repetition: int = 0,
            rng: np.random.Generator | None = None) -> MimicryResponse:
    """One mimicked production of ``stimulus``.

    With ``category_sampling`` and a known ``position`` the category is
    drawn first from the same trial generator. Noise draws that break
    ``0 < F1 < F2`` are redrawn up to ten times, after which the values are
    clamped into order.
    """
    if rng is None:
        rng = trial_rng(profile, stimulus_id, repetition)
    cat = None
    if profile.category_sampling and position is not None:
        cat = int(rng.random() < categorization_probability(profile, position))
    t = intended_target(profile, stimulus, position, cat)
    s1, s2 = profile.production_noise
    for _ in range(10):
        f1 = t.f1 + s1 * rng.standard_normal()
        f2 = t.f2 + s2 * rng.standard_normal()
        if 0 < f1 < f2:
            break
    else:
        f1 = max(f1, 1.0)
        f2 = max(f2, f1 + 1.0)
    return MimicryResponse(profile.name, stimulus_id, repetition, FormantPoint(f1, f2))


def run_block(profile: SubjectProfile, continuum, reps: int = 6) -> list[MimicryResponse]:
    """``reps`` responses per stimulus, returned in a seeded random presentation order."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    trials = [(s, r) for s in continuum.stimuli for r in range(reps)]
    order = np.random.default_rng(
        np.random.SeedSequence(profile.seed, spawn_key=(_ORDER_KEY,))).permutation(len(trials))
    out = []
    for pos, i in enumerate(order):
        spec, rep = trials[i]
        r = respond(profile, spec.target, position=spec.id, stimulus_id=spec.id, repetition=rep)
        out.append(replace(r, order=pos))
    return out


def categorization_probability(profile: SubjectProfile, stimulus_id: float) -> float:
    """Probability of the upper category label: ``Phi(slope * (x - boundary))``."""
    return float(ndtr(profile.categorization_slope * (stimulus_id - profile.boundary_stim)))


def categorize(profile: SubjectProfile, stimulus_id: float, trial: int = 0,
               rng: np.random.Generator | None = None) -> tuple[int, float]:
    """Sampled category label (0 or 1) and its probability of being 1."""
    p = categorization_probability(profile, stimulus_id)
    if rng is None:
        rng = trial_rng(profile, int(math.floor(stimulus_id)), trial, _CATEGORY_KEY)
    return int(rng.random() < p), p


def run_categorization(profile: SubjectProfile, stimulus_ids, reps: int = 6):
    """Counts of upper-category labels per stimulus: ``(ids, n, k)``."""
    ids = list(stimulus_ids)
    k = [sum(categorize(profile, s, t)[0] for t in range(reps)) for s in ids]
    return np.array(ids), np.full(len(ids), reps), np.array(k)


def same_stimulus_difference_probability(noise=(29.0, 58.0), thresholds=(81.3, 161.4)) -> float:
    """Closed-form P(diff) for two independent productions of one target."""
    p_same = 1.0
    for s, t in zip(noise, thresholds):
        z = t / (s * math.sqrt(2))
        p_same *= ndtr(z) - ndtr(-z)
    return 1.0 - p_same


def difference_probability(delta_hz, noise=(29.0, 58.0), thresholds=(81.3, 161.4)) -> float:
    """Closed-form P(diff) for two productions whose means differ by ``delta_hz``."""
    p_same = 1.0
    for dm, s, t in zip(delta_hz, noise, thresholds):
        sd = s * math.sqrt(2)
        p_same *= ndtr((t - dm) / sd) - ndtr((-t - dm) / sd)
    return 1.0 - p_same
