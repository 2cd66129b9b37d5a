import itertools
import math

import numpy as np
import pytest
from scipy.stats import norm

from jpd.psychometrics import (Cell, DataError, DifferenceRule, DifferenceTable, classify_pair,
                               fit_categorization, fit_jpd, fit_probit, grid_oracle_fit,
                               probit_loglik, read_estimates, summarize, tabulate, write_estimates)
from jpd.responses import MimicryResponse
from jpd.simulator import SubjectProfile, run_block
from jpd.synthesis import build_parametric_continuum
from jpd.units import FormantPoint, mel_distance

A, B = FormantPoint(270, 2290), FormantPoint(390, 1990)
CONT = build_parametric_continuum(A, B, 9, render=False)
DIST = np.arange(0, 100, 10.0)


def resp(f1, f2, subject="s", stim=1):
    return MimicryResponse(subject, stim, 0, FormantPoint(f1, f2))


@pytest.mark.parametrize("d1, d2, different", [(0, 0, False), (100, 0, True), (50, 150, False),
                                               (0, -170, True), (81, 161, False)])
def test_classify_pair(d1, d2, different):
    assert classify_pair(resp(400, 2000), resp(400 + d1, 2000 + d2)) is different


def test_threshold_equality_counts_as_same():
    rule = DifferenceRule(80.0, 160.0)
    assert not classify_pair(resp(400, 2000), resp(480, 2160), rule)
    assert classify_pair(resp(400, 2000), resp(480.5, 2000), rule)


def test_cross_subject_pair_rejected():
    with pytest.raises(ValueError):
        classify_pair(resp(400, 2000, "a"), resp(400, 2000, "b"))


def test_directional_rule():
    rule = DifferenceRule(directional=True)
    # F1 was meant to rise; a large fall does not count
    assert not classify_pair(resp(400, 2000), resp(300, 2000), rule, (20, 0))
    assert classify_pair(resp(400, 2000), resp(500, 2000), rule, (20, 0))
    # zero intended change leaves the direction free
    assert classify_pair(resp(400, 2000), resp(300, 2000), rule, (0, -15))
    with pytest.raises(ValueError):
        classify_pair(resp(400, 2000), resp(300, 2000), rule)


def brute_table(responses, rule=DifferenceRule()):
    cells = {}
    for a, b in itertools.permutations(range(len(responses)), 2):
        ra, rb = responses[a], responses[b]
        if ra.subject != rb.subject:
            continue
        key = (ra.stimulus_id, rb.stimulus_id)
        n, k = cells.get(key, (0, 0))
        delta = (CONT.target(rb.stimulus_id).f1 - CONT.target(ra.stimulus_id).f1,
                 CONT.target(rb.stimulus_id).f2 - CONT.target(ra.stimulus_id).f2)
        cells[key] = (n + 1, k + classify_pair(ra, rb, rule, delta))
    return cells


@pytest.mark.parametrize("directional", [False, True])
def test_tabulate_matches_brute_force(directional):
    rule = DifferenceRule(directional=directional)
    rs = []
    for i, name in enumerate(("a", "b")):
        p = SubjectProfile(name, 5.5, (A, B), production_noise=(40, 80), seed=i)
        rs += run_block(p, CONT, 6)
    t = tabulate(rs, CONT, rule)
    assert len(t.cells) == 81
    assert t.cells[(3, 3)].n_pairs == 2 * 30
    brute = brute_table(rs, rule)
    assert {k: (c.n_pairs, c.n_different) for k, c in t.cells.items()} == brute
    for (r, c), cell in t.cells.items():
        assert cell.distance == pytest.approx(mel_distance(CONT.target(r), CONT.target(c)))


def test_tabulate_identity_profile_has_no_differences():
    p = SubjectProfile("s", 5.5, (A, B), production_noise=(1e-9, 1e-9))
    t = tabulate(run_block(p, CONT, 6), CONT)
    same = [c for (r, k), c in t.cells.items() if abs(r - k) <= 1]
    assert all(c.n_different == 0 for c in same)
    assert all(c.n_different == 0 for c in t.cells.values() if c.distance < 80)


def test_same_stimulus_floor():
    rs = []
    for i in range(40):
        rs += run_block(SubjectProfile(f"s{i}", 5.5, (A, B), seed=i), CONT, 6)
    t = tabulate(rs, CONT)
    n = sum(t.cells[(s, s)].n_pairs for s in CONT.ids)
    k = sum(t.cells[(s, s)].n_different for s in CONT.ids)
    assert k / n == pytest.approx(0.10, abs=0.02)


def test_or_rule_is_monotone_in_thresholds():
    rs = run_block(SubjectProfile("s", 5.5, (A, B), production_noise=(40, 80), seed=2), CONT, 6)
    loose = tabulate(rs, CONT, DifferenceRule(60, 120))
    tight = tabulate(rs, CONT, DifferenceRule(100, 200))
    assert all(loose.cells[k].n_different >= tight.cells[k].n_different for k in loose.cells)


def test_tabulate_empty():
    with pytest.raises(DataError):
        tabulate([], CONT)


def test_tabulate_by_subject_pools_to_total():
    rs = []
    for i in range(3):
        rs += run_block(SubjectProfile(f"s{i}", 5.5, (A, B), seed=i), CONT, 2)
    per = tabulate(rs, CONT, by_subject=True)
    pooled = tabulate(rs, CONT)
    assert sorted(per) == ["s0", "s1", "s2"]
    for key, cell in pooled.cells.items():
        assert cell.n_pairs == sum(t.cells[key].n_pairs for t in per.values())


def test_merged_averages_distances_by_pairs():
    a = DifferenceTable({(1, 2): Cell(10, 2, 20.0)})
    b = DifferenceTable({(1, 2): Cell(30, 9, 40.0), (1, 3): Cell(5, 1, 50.0)})
    m = a.merged(b)
    assert m.cells[(1, 2)].n_pairs == 40 and m.cells[(1, 2)].n_different == 11
    assert m.cells[(1, 2)].distance == pytest.approx(35.0)
    assert m.cells[(1, 3)] == Cell(5, 1, 50.0)


def exact_table(alpha, beta, c, n, distances=DIST):
    p = c + (1 - c) * norm.cdf(alpha + beta * distances)
    cells = {(1, i + 1): Cell(n, int(round(pi * n)), float(d))
             for i, (d, pi) in enumerate(zip(distances, p))}
    return DifferenceTable(cells)


def test_closed_form_limens():
    x50 = (norm.ppf((0.5 - 0.1) / 0.9) + 2) / 0.05
    x75 = (norm.ppf((0.75 - 0.1) / 0.9) + 2) / 0.05
    assert x50 == pytest.approx(37.2, abs=0.05)
    assert x75 - x50 == pytest.approx(14.6, abs=0.05)


def test_probit_recovery_exact_data():
    e = fit_jpd(exact_table(-2.0, 0.05, 0.1, 10000), 1)
    assert e.usable
    assert e.x50 == pytest.approx(37.2, rel=0.02)
    assert e.inverse_steepness == pytest.approx(14.6, rel=0.05)
    assert e.fit.alpha == pytest.approx(-2.0, abs=0.02)
    assert e.fit.beta == pytest.approx(0.05, abs=0.001)


def test_probit_consistency():
    rng = np.random.default_rng(1)
    truth = 37.2
    err = {}
    for n in (100, 1000, 10000):
        e = []
        for _ in range(30):
            p = 0.1 + 0.9 * norm.cdf(-2.0 + 0.05 * DIST)
            k = rng.binomial(n, p)
            t = DifferenceTable({(1, i): Cell(n, int(ki), float(d))
                                 for i, (d, ki) in enumerate(zip(DIST, k))})
            e.append(fit_jpd(t, 1).x50 - truth)
        err[n] = np.sqrt(np.mean(np.square(e)))
    assert err[100] > err[1000] > err[10000]
    assert err[10000] < 0.02 * truth


def test_oracle_dominance_on_random_tables():
    rng = np.random.default_rng(7)
    for _ in range(20):
        d = np.sort(rng.uniform(0, 120, 8))
        n = rng.integers(10, 200, 8)
        p = 0.1 + 0.9 * norm.cdf(rng.uniform(-4, 1) + rng.uniform(0.01, 0.2) * d)
        k = rng.binomial(n, p)
        t = DifferenceTable({(1, i): Cell(int(ni), int(ki), float(di))
                             for i, (di, ni, ki) in enumerate(zip(d, n, k))})
        try:
            e = fit_jpd(t, 1)
        except DataError:
            continue
        if e.fit.status == "degenerate":
            continue
        g = grid_oracle_fit(t, 1)
        assert e.fit.log_likelihood >= g.log_likelihood - 1e-3


def test_grid_oracle_near_truth():
    g = grid_oracle_fit(exact_table(-2.0, 0.05, 0.1, 10000), 1)
    assert abs(g.alpha + 2.0) <= 0.01 + 1e-9
    assert abs(g.beta - 0.05) <= 0.001 + 1e-9


def test_grid_oracle_errors():
    with pytest.raises(DataError):
        grid_oracle_fit(DifferenceTable(), 1)


def test_insufficient_distances():
    t = DifferenceTable({(1, 1): Cell(30, 3, 0.0), (1, 2): Cell(36, 10, 20.0)})
    with pytest.raises(DataError):
        fit_jpd(t, 1)


def test_degenerate_table_is_flagged():
    t = DifferenceTable({(1, i): Cell(36, 0, 10.0 * i) for i in range(1, 6)})
    e = fit_jpd(t, 1)
    assert not e.usable and e.fit.status == "degenerate" and math.isnan(e.x50)


def test_joint_floor_estimate():
    e = fit_jpd(exact_table(-2.0, 0.05, 0.1, 10000), 1, floor_c=None)
    assert e.fit.floor_c == pytest.approx(0.1, abs=0.01)


def test_negative_limen_is_excluded():
    t = exact_table(0.5, 0.05, 0.1, 1000)
    e = fit_jpd(t, 1)
    assert e.x50 < 0 and e.fit.status == "negative-limen" and not e.usable


def test_loglik_matches_direct_sum():
    d, n, k = DIST, np.full(10, 20), np.arange(10)
    p = 0.1 + 0.9 * norm.cdf(-1 + 0.03 * d)
    direct = np.sum(k * np.log(p) + (n - k) * np.log(1 - p))
    assert probit_loglik(-1, 0.03, d, n, k) == pytest.approx(direct)


def test_fit_probit_reports_convergence():
    f = fit_probit(DIST, np.full(10, 100), np.round(100 * (0.1 + 0.9 * norm.cdf(-2 + .05 * DIST))))
    assert f.converged and f.status == "ok" and f.n_iterations > 0


def test_categorization_boundary():
    p = np.array([0.02, 0.10, 0.50, 0.90, 0.98])
    f = fit_categorization([1, 2, 3, 4, 5], np.full(5, 1000), np.round(1000 * p))
    assert f.boundary == pytest.approx(3.0, abs=0.01)
    assert not f.separated


def test_categorization_separation():
    f = fit_categorization([1, 2, 3, 4], [6] * 4, [0, 0, 6, 6])
    assert f.separated and f.boundary == 2.5 and f.bracket == (2, 3)
    f = fit_categorization([1, 2, 3], [6] * 3, [0, 0, 0])
    assert f.separated


def test_simulated_boundaries_recovered():
    from jpd.simulator import run_categorization
    for b in (5.0, 6.2, 7.9):
        p = SubjectProfile("s", b, (A, B), categorization_slope=1.2, seed=int(10 * b))
        f = fit_categorization(*run_categorization(p, range(1, 10), reps=60))
        assert 5 <= f.boundary <= 8


def test_summary_and_files(tmp_path):
    ests = [fit_jpd(exact_table(a, 0.05, 0.1, 1000), 1) for a in (-2.0, -1.0)]
    ests[1].reference_stim = 2
    s = summarize(ests)
    assert s["upper_reference"] == 1 and s["lower_reference"] == 2
    path = str(tmp_path / "j.csv")
    write_estimates(path, ests)
    rows = read_estimates(path)
    assert [r["reference_stim"] for r in rows] == ["1", "2"]
    assert float(rows[0]["x50_mels"]) == pytest.approx(ests[0].x50, abs=1e-5)
    assert "upper_bound" in open(path).read()


def test_difference_table_csv(tmp_path):
    t = exact_table(-2.0, 0.05, 0.1, 50)
    p = str(tmp_path / "d.csv")
    t.to_csv(p)
    back = DifferenceTable.from_csv(p)
    assert back.references == [1]
    d, n, k = back.for_reference(1)
    assert np.allclose(d, DIST) and np.all(n == 50)
