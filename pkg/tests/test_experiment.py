import csv
import filecmp
import json
import math
import os

import numpy as np
import pytest

from jpd.experiment import (FIGURES, ConfigError, ExperimentConfig, MissingIntermediatesError,
                            StageError, TalkerGroup, adaptive_step_search, analytic_threshold,
                            bundled_config, load_config, magnet_ordering, render_report,
                            run_pipeline, run_staircases, subject_seed)
from jpd.psychometrics import fit_jpd, tabulate
from jpd.responses import read_responses
from jpd.simulator import SubjectProfile, run_block
from jpd.synthesis import build_parametric_continuum
from jpd.units import FormantPoint

A, B = FormantPoint(270, 2290), FormantPoint(390, 1990)
CSVS = ("responses.csv", "categorization.csv", "differences.csv", "jpd.csv", "boundaries.csv",
        "summary.csv")


def small_config(**kw):
    subjects = [SubjectProfile(f"s{i}", 5.0 + 0.2 * i, (A, B), warp_strength=0.3,
                               category_weight=0.3) for i in range(4)]
    base = dict(name="small", seed=11, subjects=subjects, reps=3, categorization_reps=4)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    d = str(tmp_path_factory.mktemp("run"))
    return run_pipeline(small_config(), d)


def test_run_writes_all_outputs(small_run):
    for name in CSVS + FIGURES + ("summary.txt", "manifest.json", "config.json",
                                  "stimuli_measured.csv", "stimuli/continuum.json"):
        assert os.path.isfile(small_run.path(name)), name
    man = json.load(open(small_run.path("manifest.json")))
    assert man["config"]["seed"] == 11 and "responses.csv" in man["files"]
    assert len(read_responses(small_run.path("responses.csv"))) == 4 * 9 * 3


def test_determinism_and_parallel(small_run, tmp_path):
    again = run_pipeline(small_config(), str(tmp_path / "a"))
    par = run_pipeline(small_config(workers=2), str(tmp_path / "b"))
    for name in CSVS:
        assert filecmp.cmp(small_run.path(name), again.path(name), shallow=False), name
        assert filecmp.cmp(small_run.path(name), par.path(name), shallow=False), name
    other = run_pipeline(small_config(seed=12), str(tmp_path / "c"))
    assert not filecmp.cmp(small_run.path("responses.csv"), other.path("responses.csv"),
                           shallow=False)


def test_subject_seeds_are_distinct():
    seeds = {subject_seed(1, i) for i in range(100)}
    assert len(seeds) == 100 and subject_seed(1, 3) == subject_seed(1, 3)


def test_stage_by_stage_matches_full_run(small_run, tmp_path):
    cfg = small_config()
    d = str(tmp_path)
    for stage in ("synth", "simulate", "analyze", "tabulate", "fit", "report"):
        run_pipeline(cfg, d, (stage,))
    for name in CSVS:
        assert filecmp.cmp(small_run.path(name), os.path.join(d, name), shallow=False)


def test_report_on_empty_dir(tmp_path):
    with pytest.raises(MissingIntermediatesError):
        render_report(str(tmp_path))


def test_report_rerender(small_run, tmp_path):
    import shutil
    d = str(tmp_path / "copy")
    shutil.copytree(small_run.run_dir, d)
    for f in FIGURES + ("summary.csv",):
        os.remove(os.path.join(d, f))
    rep = render_report(d)
    assert all(os.path.isfile(os.path.join(d, f)) for f in FIGURES)
    assert rep.summary["upper_bound"] == small_run.summary["upper_bound"]
    rows = list(csv.DictReader(open(os.path.join(d, "summary.csv"))))
    assert [r["bound"] for r in rows] == ["upper", "lower"]


def test_stage_error_names_stage(tmp_path):
    with pytest.raises(StageError) as err:
        run_pipeline(small_config(), str(tmp_path), ("tabulate",))
    assert err.value.stage == "tabulate"


def test_noise_free_mimicry(tmp_path):
    subjects = [SubjectProfile(f"s{i}", 5.0, (A, B), production_noise=(1e-6, 1e-6))
                for i in range(2)]
    rep = run_pipeline(small_config(subjects=subjects), str(tmp_path))
    rows = {r["reference_stim"]: r for r in csv.DictReader(open(rep.path("jpd.csv")))}
    # the central reference never sees a comparison past either threshold
    assert rows["5"]["status"] == "degenerate" and rep.summary["excluded"] == [5]
    # elsewhere the curve is a step between the last 'same' and first 'different' distance
    for ref in ("1", "9"):
        assert float(rows[ref]["inverse_steepness_mels"]) < 3
        assert 90 < float(rows[ref]["x50_mels"]) < 110


@pytest.mark.parametrize("kw, msg", [
    (dict(mode="exp3"), "mode"),
    (dict(pooling="median"), "pooling"),
    (dict(reps=0), "reps"),
    (dict(workers=0), "workers"),
])
def test_config_checks(kw, msg):
    with pytest.raises(ConfigError, match=msg):
        small_config(**kw)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        small_config(seed=None).validate()
    with pytest.raises(ConfigError, match="subjects"):
        small_config(subjects=[]).validate()
    with pytest.raises(ConfigError, match="audio"):
        small_config(audio_dir=str(tmp_path / "nope")).validate()
    with pytest.raises(ConfigError, match="talker group"):
        small_config(mode="exp2-resynthesis").validate()
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))
    with pytest.raises(ConfigError):
        bundled_config("exp9")


def test_config_round_trip(tmp_path):
    cfg = load_config(bundled_config("exp1_reference"), seed=4)
    assert cfg.seed == 4 and len(cfg.subjects) == 16
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    back = load_config(str(p))
    assert back.to_dict() == cfg.to_dict()
    cfg.analysis_rate = 9600
    p.write_text(json.dumps(cfg.to_dict()))
    assert load_config(str(p)).analysis_rate == 9600
    cfg2 = load_config(bundled_config("exp2_reference"))
    assert {g.name for g in cfg2.groups} == {"male", "female"}
    assert set(cfg2.subject_groups.values()) == {"male", "female"}


def test_per_subject_mean_pooling(tmp_path):
    rep = run_pipeline(small_config(pooling="per-subject-mean", reps=4), str(tmp_path))
    assert os.path.isfile(rep.path("differences_by_subject.csv"))
    rows = list(csv.DictReader(open(rep.path("jpd_by_subject.csv"))))
    assert {r["subject"] for r in rows} == {"s0", "s1", "s2", "s3"}
    pooled = [r for r in csv.DictReader(open(rep.path("jpd.csv")))
              if r["reference_stim"].isdigit()]
    assert len(pooled) == 9 and all(r["status"] == "ok" for r in pooled)


def test_recorded_responses_are_interchangeable(tmp_path):
    cfg = small_config(render_responses=True, categorization_reps=0, reps=2)
    rec = run_pipeline(cfg, str(tmp_path / "rendered"))
    intended = {r.token: r for r in read_responses(rec.path("responses_intended.csv"))}
    measured = read_responses(rec.path("responses.csv"))
    assert len(measured) == len(intended)
    err1 = [abs(m.produced.f1 - intended[m.token].produced.f1) for m in measured]
    err2 = [abs(m.produced.f2 - intended[m.token].produced.f2) for m in measured]
    assert np.median(err1) < 20 and np.median(err2) < 50
    # the same recordings fed in from outside give the same tables
    ext = small_config(audio_dir=rec.path("responses_audio"), seed=None, categorization_reps=0,
                       reps=2)
    out = run_pipeline(ext, str(tmp_path / "external"))
    assert filecmp.cmp(rec.path("differences.csv"), out.path("differences.csv"), shallow=False)


def test_exp2_smoke(tmp_path):
    cfg = load_config(bundled_config("exp2_reference"))
    cfg.subjects = [s for s in cfg.subjects if s.name in ("m1", "f1")]
    cfg.reps = 2
    rep = run_pipeline(cfg, str(tmp_path))
    for g in ("male", "female"):
        meta = json.load(open(rep.path(f"stimuli/{g}/continuum.json")))
        assert len(meta["stimuli"]) == 14
    # the high-f0 series misses its F1 targets and must say so
    female = json.load(open(rep.path("stimuli/female/continuum.json")))
    assert any("F1" in f for f in female["flags"])
    assert os.path.isfile(rep.path("summary.csv"))


def test_magnet_ordering():
    refs = list(range(1, 10))
    x50 = [40, 45, 38, 30, 10, 12, 25, 44, 39]
    holds, detail = magnet_ordering(refs, x50, [2.0, 8.0], 5.5)
    assert holds and "max 45.00" in detail
    x50[5] = 41
    assert not magnet_ordering(refs, x50, [2.0, 8.0], 5.5)[0]
    assert not magnet_ordering(refs, [math.nan] * 9, [2.0, 8.0], 5.5)[0]


# ---------------------------------------------------------------- staircase

U = (B.mel - A.mel) / np.linalg.norm(B.mel - A.mel)
REF = FormantPoint.from_mel(*(A.mel - 60 * U))
PROTOS = (FormantPoint.from_mel(*(A.mel - 120 * U)), FormantPoint(600, 1500))


@pytest.mark.parametrize("kw", [{}, dict(response_gain=2.0), dict(warp_strength=0.5)],
                         ids=["identity", "gain", "warp"])
def test_staircase_agrees_with_fit_and_closed_form(kw):
    # boundary beyond the continuum: every stimulus keeps the first category
    p = SubjectProfile("s", 99.0, PROTOS, seed=4, **kw)
    cont = build_parametric_continuum(REF, FormantPoint.from_mel(*(REF.mel + 300 * U)), 13,
                                      render=False)
    fitted = fit_jpd(tabulate(run_block(p, cont, 60), cont), 1).x50
    stair = adaptive_step_search(p, REF, U, n_tracks=4)
    exact = analytic_threshold(p, REF, U)
    assert stair.converged and len(stair.track_distances) == 4
    assert stair.distance == pytest.approx(fitted, rel=0.2)
    assert stair.distance == pytest.approx(exact, rel=0.2)
    assert fitted == pytest.approx(exact, rel=0.1)


def test_staircase_higher_target_needs_larger_step():
    p = SubjectProfile("s", 99.0, PROTOS, seed=2)
    lo = adaptive_step_search(p, REF, U, n_tracks=4).distance
    hi = adaptive_step_search(p, REF, U, target_p=0.75, n_tracks=4).distance
    assert hi > lo
    assert analytic_threshold(p, REF, U, target_p=0.75) > analytic_threshold(p, REF, U)


def test_staircase_is_deterministic():
    p = SubjectProfile("s", 99.0, PROTOS, seed=9)
    assert adaptive_step_search(p, REF, U) == adaptive_step_search(p, REF, U)


def test_staircase_rejects_target_below_floor():
    p = SubjectProfile("s", 99.0, PROTOS)
    with pytest.raises(ValueError, match="floor"):
        adaptive_step_search(p, REF, U, target_p=0.05)
    with pytest.raises(ValueError):
        adaptive_step_search(p, REF, (0, 0))


def test_staircase_flags_non_convergence():
    p = SubjectProfile("s", 99.0, PROTOS, seed=1)
    r = adaptive_step_search(p, REF, U, max_trials=10)
    assert not r.converged and "no convergence" in r.flags


def test_run_staircases(tmp_path):
    cfg = small_config(staircase={"reference_stim": 5, "n_tracks": 2})
    files = run_staircases(cfg, str(tmp_path))
    rows = list(csv.DictReader(open(tmp_path / files[0])))
    assert [r["subject"] for r in rows] == ["s0", "s1", "s2", "s3"]
    assert all(float(r["distance_mels"]) > 0 for r in rows)


def test_warp_raises_limens_at_prototypes():
    # warp-only subjects with prototypes at the continuum ends
    cont = build_parametric_continuum(A, B, 9, render=False)
    rs = []
    for i in range(8):
        rs += run_block(SubjectProfile(f"s{i}", 5.5, (A, B), warp_strength=0.6, seed=i), cont, 6)
    t = tabulate(rs, cont)
    x50 = {r: fit_jpd(t, r).x50 for r in cont.ids}
    assert min(x50[1], x50[9]) > max(x50[5], x50[6])
