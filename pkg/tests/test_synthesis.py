import json

import numpy as np
import pytest

from conftest import vowel
from jpd import synthesis
from jpd.analysis import measure_token, track_f0
from jpd.synthesis import (Continuum, PitchContour, ResynthesisPlan, StimulusSpec,
                           build_parametric_continuum, plan_resynthesis, read_continuum,
                           render_vowel, write_continuum)
from jpd.units import FormantPoint, mel_distance

A, B = FormantPoint(270, 2290), FormantPoint(390, 1990)


def test_continuum_endpoints_and_spacing():
    c = build_parametric_continuum(A, B, 9, render=False)
    assert c.ids == list(range(1, 10))
    assert c.stimuli[0].target == A and c.stimuli[-1].target == B
    gaps = c.mel_gaps()
    assert np.allclose(gaps, gaps[0], rtol=1e-6)
    assert gaps.sum() == pytest.approx(mel_distance(A, B))


def test_two_step_continuum_is_endpoints():
    c = build_parametric_continuum(A, B, 2, render=False)
    assert [s.target for s in c.stimuli] == [A, B]


@pytest.mark.parametrize("a, b, n", [(A, A, 9), (A, B, 1)])
def test_continuum_errors(a, b, n):
    with pytest.raises(ValueError):
        build_parametric_continuum(a, b, n, render=False)


def test_render_length_and_level():
    x = render_vowel(StimulusSpec(1, A, 0.25), 16000)
    assert x.size == 4000
    assert np.max(np.abs(x)) == pytest.approx(10 ** (-3 / 20))
    assert abs(x[0]) < 1e-3 and abs(x[-1]) < 1e-3


def test_render_rejects_formants_above_nyquist():
    with pytest.raises(ValueError):
        render_vowel(StimulusSpec(1, FormantPoint(300, 3000)), 6000)


def test_rendered_vowel_reanalyses_to_target():
    m = measure_token(vowel(270, 2290), 16000)
    assert abs(m.point.f1 - 270) <= 20
    assert abs(m.point.f2 - 2290) <= 50


def test_mean_f0():
    _, f0, _ = track_f0(vowel(300, 2200), 16000)
    assert np.nanmean(f0) == pytest.approx(117.0, abs=2.0)


def test_pitch_contour_shape():
    f = PitchContour().sample(4000, 16000)
    assert f.mean() == pytest.approx(117.0)
    assert np.argmax(f) == pytest.approx(0.3 * 4000, abs=2)
    assert f[0] > f[-1]


def test_plan_arithmetic(monkeypatch):
    means = iter([(400.0, 2000.0), (550.0, 1800.0)])
    monkeypatch.setattr(synthesis, "_mean_formants", lambda tokens, sr: next(means))
    plan = plan_resynthesis([vowel(400, 2000)], [vowel(550, 1800)], 16000)
    assert plan.f1_step == pytest.approx(15.0)
    assert plan.f2_step == pytest.approx(-20.0)
    assert len(plan.indices) == 14 and plan.indices[0] == -1 and plan.indices[-1] == 12


def test_plan_from_measured_tokens(male_series):
    plan, _ = male_series
    assert plan.f1_step == pytest.approx(15.0, abs=1.5)
    assert plan.f2_step == pytest.approx(-20.0, abs=2.0)


def test_plan_errors():
    with pytest.raises(ValueError):
        plan_resynthesis([], [vowel(550, 1800)], 16000)
    with pytest.raises(ValueError):
        ResynthesisPlan(np.zeros(10), 11025, 1.0, 1.0, lpc_order=11)
    with pytest.raises(ValueError):
        ResynthesisPlan(np.zeros(10), 11025, 1.0, 1.0, index_range=(2, 5))


def test_plan_rejects_identical_words(monkeypatch):
    monkeypatch.setattr(synthesis, "_mean_formants", lambda tokens, sr: (400.0, 2000.0))
    with pytest.raises(ValueError):
        plan_resynthesis([vowel(400, 2000)], [vowel(400, 2000)], 16000)


def test_clipped_base_tokens_are_skipped():
    clipped = np.clip(4 * vowel(400, 2000), -1, 1)
    with pytest.raises(ValueError, match="clipped"):
        plan_resynthesis([clipped], [vowel(550, 1800)], 16000)


def test_resynthesis_identity(male_series):
    plan, cont = male_series
    base = measure_token(plan.base_token, plan.sample_rate).point
    m = cont.measured[cont.ids.index(1)]
    assert abs(m.f1 - base.f1) <= 20 and abs(m.f2 - base.f2) <= 50


def test_resynthesis_k11_raises_f1(male_series):
    plan, cont = male_series
    m1 = cont.measured[cont.ids.index(1)]
    m11 = cont.measured[cont.ids.index(11)]
    assert m11.f1 - m1.f1 == pytest.approx(10 * plan.f1_step, abs=20)


def test_resynthesis_monotone(male_series):
    _, cont = male_series
    f1 = np.array([m.f1 for m in cont.measured])
    f2 = np.array([m.f2 for m in cont.measured])
    assert np.all(np.diff(f1) >= -20)
    assert np.all(np.diff(f2) <= 50)
    assert not [f for f in cont.flags if "monotone" in f]


def test_resynthesis_flags_failures(monkeypatch, male_series):
    # a plan whose measured steps disagree with the request must be flagged, not hidden
    plan, _ = male_series
    from dataclasses import replace
    bad = replace(plan, index_range=(1, 3))
    real = synthesis.lpc.shift_poles
    monkeypatch.setattr(synthesis.lpc, "shift_poles",
                        lambda a, sr, shifts, **kw: real(a, sr, {0: 0.0, 1: 0.0}))
    cont = synthesis.resynthesize_series(replace(bad, f1_step=40.0))
    assert any("F1" in f for f in cont.flags)


def test_write_and_read(tmp_path):
    c = build_parametric_continuum(A, B, 3, duration=0.1)
    path = write_continuum(c, str(tmp_path))
    meta = json.load(open(path))
    assert meta["mel_formula"] and [s["audio"] for s in meta["stimuli"]] == [
        "stim_+01.wav", "stim_+02.wav", "stim_+03.wav"]
    back = read_continuum(path, load_audio=True)
    assert back.ids == c.ids
    assert back.stimuli[1].target.f1 == pytest.approx(c.stimuli[1].target.f1)
    assert np.max(np.abs(back.audio[0] - c.audio[0])) < 1e-4


def test_continuum_ids_must_increase():
    with pytest.raises(ValueError):
        Continuum([StimulusSpec(2, A), StimulusSpec(1, B)], "parametric", 16000)
