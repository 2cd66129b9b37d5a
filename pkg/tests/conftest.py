import numpy as np
import pytest

from jpd.synthesis import PitchContour, StimulusSpec, plan_resynthesis, render_vowel, resynthesize_series
from jpd.units import FormantPoint


def vowel(f1, f2, duration=0.25, mean_f0=117.0, sr=16000):
    return render_vowel(StimulusSpec(0, FormantPoint(f1, f2), duration, PitchContour(mean_f0)), sr)


@pytest.fixture(scope="session")
def male_series():
    """Resynthesized 14-step series from a 400/2000 -> 550/1800 Hz talker."""
    plan = plan_resynthesis([vowel(400, 2000)], [vowel(550, 1800)], 16000)
    return plan, resynthesize_series(plan)
