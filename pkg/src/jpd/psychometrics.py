"""Difference tabulation and probit fits for production limens.

Every response of a subject is compared with every other response of the
same subject. A pair is "different" when F1 or F2 differs by more than a
threshold. Pair outcomes are pooled per (reference stimulus, comparison
stimulus) cell, and for each reference stimulus the probability of a
difference is modelled as a function of the mel distance ``d`` between
the two stimuli::

    P(diff | d) = c + (1 - c) * Phi(alpha + beta * d)

with a fixed floor ``c``. The limen ``X50`` is the distance where this
reaches 0.5; ``X75 - X50`` measures how gradual the rise is.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import ndtr, ndtri

from .responses import MimicryResponse
from .units import mel_distance

log = logging.getLogger(__name__)

_EPS = 1e-12


class DataError(ValueError):
    """Not enough usable data for the requested fit."""


@dataclass(frozen=True)
class DifferenceRule:
    f1_threshold: float = 81.3
    f2_threshold: float = 161.4
    directional: bool = False

    def __post_init__(self):
        if self.f1_threshold <= 0 or self.f2_threshold <= 0:
            raise ValueError("thresholds must be positive")


def classify_pair(reference: MimicryResponse, comparison: MimicryResponse,
                  rule: DifferenceRule = DifferenceRule(), target_delta=None) -> bool:
    """True when ``comparison`` counts as different from ``reference``.

    A dimension differs when its absolute change exceeds the threshold
    (equality counts as same). With ``rule.directional`` the change must
    also have the sign of ``target_delta`` (comparison target minus
    reference target, Hz) in that dimension; a zero target change leaves the
    direction free.
    """
    if reference.subject != comparison.subject:
        raise ValueError("pairs must come from the same subject")
    d1 = comparison.produced.f1 - reference.produced.f1
    d2 = comparison.produced.f2 - reference.produced.f2
    diff1 = abs(d1) > rule.f1_threshold
    diff2 = abs(d2) > rule.f2_threshold
    if rule.directional:
        if target_delta is None:
            raise ValueError("directional rule needs the target difference")
        t1, t2 = target_delta
        diff1 = diff1 and (t1 == 0 or np.sign(d1) == np.sign(t1))
        diff2 = diff2 and (t2 == 0 or np.sign(d2) == np.sign(t2))
    return bool(diff1 or diff2)


@dataclass
class Cell:
    n_pairs: int
    n_different: int
    distance: float


@dataclass
class DifferenceTable:
    """Pair counts keyed by ``(reference_stim, comparison_stim)``."""

    cells: dict[tuple[int, int], Cell] = field(default_factory=dict)

    @property
    def references(self) -> list[int]:
        return sorted({r for r, _ in self.cells})

    def for_reference(self, reference_stim: int):
        """Arrays ``(distance, n_pairs, n_different)`` for one reference."""
        rows = [(c.distance, c.n_pairs, c.n_different)
                for (r, _), c in sorted(self.cells.items()) if r == reference_stim]
        if not rows:
            return np.zeros(0), np.zeros(0, int), np.zeros(0, int)
        d, n, k = map(np.array, zip(*rows))
        return d.astype(float), n.astype(int), k.astype(int)

    def merged(self, other: "DifferenceTable") -> "DifferenceTable":
        """Sum counts cell by cell. Where both tables hold a cell, the
        distance becomes the pair-weighted mean of the two (continua built
        for different talkers need not share step sizes)."""
        out = {key: Cell(c.n_pairs, c.n_different, c.distance) for key, c in self.cells.items()}
        for key, c in other.cells.items():
            if key in out:
                a = out[key]
                n = a.n_pairs + c.n_pairs
                a.distance = (a.distance * a.n_pairs + c.distance * c.n_pairs) / n if n else a.distance
                a.n_pairs = n
                a.n_different += c.n_different
            else:
                out[key] = Cell(c.n_pairs, c.n_different, c.distance)
        return DifferenceTable(out)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["reference_stim", "comparison_stim", "n_pairs", "n_different",
                        "distance_mels", "p_different"])
            for (r, c), cell in sorted(self.cells.items()):
                w.writerow([r, c, cell.n_pairs, cell.n_different, f"{cell.distance:.6f}",
                            f"{cell.n_different / cell.n_pairs:.6f}"])

    @classmethod
    def from_csv(cls, path: str) -> "DifferenceTable":
        cells = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                cells[(int(row["reference_stim"]), int(row["comparison_stim"]))] = Cell(
                    int(row["n_pairs"]), int(row["n_different"]), float(row["distance_mels"]))
        return cls(cells)


def tabulate(responses, continuum, rule: DifferenceRule = DifferenceRule(),
             by_subject: bool = False):
    """Count different/total ordered response pairs per stimulus cell.

    Pairs are formed within each subject only, in both orders, without
    self-pairs. The cell distance is the mel distance between the two
    stimulus targets of ``continuum``. Returns one pooled table, or a dict
    of per-subject tables when ``by_subject`` is set.
    """
    responses = list(responses)
    if not responses:
        raise DataError("no responses to tabulate")
    groups = defaultdict(list)
    for r in responses:
        groups[r.subject].append(r)
    targets = {s.id: s.target for s in continuum.stimuli}
    per_subject = {}
    for subject in sorted(groups):
        rs = groups[subject]
        stim = np.array([r.stimulus_id for r in rs])
        f1 = np.array([r.produced.f1 for r in rs])
        f2 = np.array([r.produced.f2 for r in rs])
        d1 = f1[None, :] - f1[:, None]
        d2 = f2[None, :] - f2[:, None]
        diff1 = np.abs(d1) > rule.f1_threshold
        diff2 = np.abs(d2) > rule.f2_threshold
        if rule.directional:
            t1 = np.array([targets[s].f1 for s in stim])
            t2 = np.array([targets[s].f2 for s in stim])
            s1 = np.sign(t1[None, :] - t1[:, None])
            s2 = np.sign(t2[None, :] - t2[:, None])
            diff1 &= (s1 == 0) | (np.sign(d1) == s1)
            diff2 &= (s2 == 0) | (np.sign(d2) == s2)
        different = diff1 | diff2
        np.fill_diagonal(different, False)
        ids = sorted(set(stim.tolist()))
        index = {s: i for i, s in enumerate(ids)}
        si = np.array([index[s] for s in stim])
        n = np.zeros((len(ids), len(ids)), int)
        k = np.zeros((len(ids), len(ids)), int)
        counts = np.bincount(si, minlength=len(ids))
        n[:] = np.outer(counts, counts)
        n[np.diag_indices(len(ids))] -= counts
        np.add.at(k, (si[:, None], si[None, :]), different)
        cells = {}
        for a, ra in enumerate(ids):
            for b, rb in enumerate(ids):
                if n[a, b] > 0:
                    cells[(ra, rb)] = Cell(int(n[a, b]), int(k[a, b]),
                                           mel_distance(targets[ra], targets[rb]))
        per_subject[subject] = DifferenceTable(cells)
    if by_subject:
        return per_subject
    pooled = DifferenceTable()
    for t in per_subject.values():
        pooled = pooled.merged(t)
    return pooled


# --------------------------------------------------------------------------
# probit fitting


@dataclass
class ProbitFit:
    alpha: float
    beta: float
    floor_c: float
    converged: bool
    log_likelihood: float
    n_iterations: int
    status: str = "ok"
    gradient_norm: float = math.nan

    def predict(self, d):
        return self.floor_c + (1 - self.floor_c) * ndtr(self.alpha + self.beta * np.asarray(d, float))

    def distance_at(self, p: float) -> float:
        """Distance where the fitted curve reaches probability ``p``."""
        if not self.beta > 0:
            return math.nan
        q = (p - self.floor_c) / (1 - self.floor_c)
        if not 0 < q < 1:
            return math.nan
        return float((ndtri(q) - self.alpha) / self.beta)


@dataclass
class JpdEstimate:
    reference_stim: int
    x50: float
    inverse_steepness: float
    fit: ProbitFit
    n: int

    @property
    def usable(self) -> bool:
        return self.fit.converged and self.fit.status == "ok" and math.isfinite(self.x50)


def probit_loglik(alpha: float, beta: float, d, n, k, c: float = 0.1) -> float:
    """Binomial log-likelihood of the floored probit."""
    p = c_plus(c, ndtr(alpha + beta * np.asarray(d, float)))
    return float(np.sum(k * np.log(p) + (np.asarray(n) - k) * np.log1p(-p)))


def _derivs(theta, d, n, k, c):
    alpha, beta = theta
    eta = alpha + beta * d
    Phi = ndtr(eta)
    phi = np.exp(-0.5 * eta ** 2) / math.sqrt(2 * math.pi)
    p = np.clip(c + (1 - c) * Phi, _EPS, 1 - _EPS)
    ll = float(np.sum(k * np.log(p) + (n - k) * np.log1p(-p)))
    r = k / p - (n - k) / (1 - p)
    g_eta = r * (1 - c) * phi
    grad = np.array([g_eta.sum(), (g_eta * d).sum()])
    h_eta = -(k / p ** 2 + (n - k) / (1 - p) ** 2) * ((1 - c) * phi) ** 2 \
        - r * (1 - c) * phi * eta
    H = np.array([[h_eta.sum(), (h_eta * d).sum()],
                  [(h_eta * d).sum(), (h_eta * d * d).sum()]])
    w = n * ((1 - c) * phi) ** 2 / (p * (1 - p))
    info = np.array([[w.sum(), (w * d).sum()], [(w * d).sum(), (w * d * d).sum()]])
    return ll, grad, H, info


def _start(d, n, k, c):
    q = np.clip((k / np.maximum(n, 1) - c) / (1 - c), 0.02, 0.98)
    z = ndtri(q)
    if np.ptp(d) == 0:
        return np.array([float(np.average(z, weights=n)), 0.01])
    slope, icpt = np.polyfit(d, z, 1, w=np.sqrt(n))
    return np.array([icpt, max(slope, 1e-3)])


def fit_probit(d, n, k, floor_c: float = 0.1, max_iter: int = 200,
               tol: float = 1e-9, start=None) -> ProbitFit:
    """Maximum-likelihood ``(alpha, beta)`` of the floored probit.

    Damped Newton: the full Newton step is used when the Hessian is
    negative definite, Fisher scoring otherwise, and the step is halved
    until the likelihood does not drop. Convergence means the gradient
    norm, divided by the number of trials, fell below ``tol``. Hitting the
    iteration limit or a non-finite Hessian returns ``converged=False``.
    """
    d = np.asarray(d, float)
    n = np.asarray(n, float)
    k = np.asarray(k, float)
    total = n.sum()
    theta = _start(d, n, k, floor_c) if start is None else np.asarray(start, float)
    ll, grad, H, info = _derivs(theta, d, n, k, floor_c)
    it = 0
    status = "ok"
    converged = False
    for it in range(1, max_iter + 1):
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(grad))):
            status = "non-finite"
            break
        if np.linalg.norm(grad) / total < tol:
            converged = True
            break
        try:
            if np.all(np.linalg.eigvalsh(H) < 0):
                step = -np.linalg.solve(H, grad)
            else:
                step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            status = "singular"
            break
        t = 1.0
        for _ in range(40):
            cand = theta + t * step
            ll_new = _derivs(cand, d, n, k, floor_c)[0]
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            status = "line-search"
            break
        theta = cand
        ll, grad, H, info = _derivs(theta, d, n, k, floor_c)
    else:
        status = "max-iter"
    gnorm = float(np.linalg.norm(grad) / total)
    if converged and not theta[1] > 0:
        status = "non-monotone"
    return ProbitFit(float(theta[0]), float(theta[1]), floor_c, converged, ll, it,
                     status, gnorm)


def fit_jpd(table: DifferenceTable, reference_stim: int, floor_c: float | None = 0.1,
            **kw) -> JpdEstimate:
    """Fit the floored probit for one reference stimulus and derive X50, X75 - X50.

    ``floor_c=None`` estimates the floor jointly (profile likelihood over
    c in [0, 0.5]). Raises :class:`DataError` when fewer than three distinct
    distances have data. Degenerate data (no cell above the floor) and
    non-monotone optima give an estimate with ``converged=False`` or a
    non-``ok`` status and NaN limens, never an exception. A negative X50
    keeps its value but gets status ``"negative-limen"``, which excludes it
    from summaries.
    """
    d, n, k = table.for_reference(reference_stim)
    keep = n > 0
    d, n, k = d[keep], n[keep], k[keep]
    if np.unique(np.round(d, 9)).size < 3:
        raise DataError(f"reference {reference_stim}: need >= 3 distinct distances")
    c = 0.1 if floor_c is None else floor_c
    if floor_c is None:
        res = optimize.minimize_scalar(
            lambda cc: -fit_probit(d, n, k, cc, **kw).log_likelihood,
            bounds=(0.0, 0.5), method="bounded", options={"xatol": 1e-5})
        c = float(res.x)
    if np.all(k / n <= c):
        ll = float(np.sum(k * np.log(max(c, _EPS)) + (n - k) * np.log1p(-c)))
        fit = ProbitFit(math.nan, 0.0, c, False, ll, 0, "degenerate")
        return JpdEstimate(reference_stim, math.nan, math.nan, fit, int(n.sum()))
    fit = fit_probit(d, n, k, c, **kw)
    x50 = fit.distance_at(0.5)
    x75 = fit.distance_at(0.75)
    if not fit.converged:
        log.info("reference %s: probit fit did not converge (%s)", reference_stim, fit.status)
    elif math.isfinite(x50) and x50 < 0:
        # even identical stimuli are judged different more than half the time
        fit.status = "negative-limen"
    return JpdEstimate(reference_stim, x50, x75 - x50, fit, int(n.sum()))


def grid_oracle_fit(table: DifferenceTable, reference_stim: int, floor_c: float = 0.1,
                    alphas=None, betas=None) -> ProbitFit:
    """Exhaustive-grid maximum of the same likelihood; a check on :func:`fit_jpd`.

    Default grid: alpha in [-10, 10] step 0.01, beta in (0, 1] step 0.001.
    """
    d, n, k = table.for_reference(reference_stim)
    keep = n > 0
    d, n, k = d[keep], n[keep], k[keep]
    if d.size == 0:
        raise DataError(f"reference {reference_stim}: no data")
    if np.unique(np.round(d, 9)).size < 3:
        raise DataError(f"reference {reference_stim}: need >= 3 distinct distances")
    alphas = np.round(np.arange(-1000, 1001) * 0.01, 2) if alphas is None else np.asarray(alphas)
    betas = np.arange(1, 1001) * 0.001 if betas is None else np.asarray(betas)
    ll = np.zeros((alphas.size, betas.size))
    for dj, nj, kj in zip(d, n, k):
        p = c_plus(floor_c, ndtr(alphas[:, None] + betas[None, :] * dj))
        ll += kj * np.log(p) + (nj - kj) * np.log1p(-p)
    i, j = np.unravel_index(np.argmax(ll), ll.shape)
    return ProbitFit(float(alphas[i]), float(betas[j]), floor_c, True, float(ll[i, j]), 0,
                     "grid")


def c_plus(c, phi):
    return np.clip(c + (1 - c) * phi, _EPS, 1 - _EPS)


# --------------------------------------------------------------------------
# categorization boundary


@dataclass
class CategorizationFit:
    boundary: float
    alpha: float
    beta: float
    separated: bool = False
    bracket: tuple[float, float] | None = None
    converged: bool = True


def fit_categorization(stimuli, n_trials, n_category) -> CategorizationFit:
    """Probit in stimulus number for the proportion of one category label.

    The boundary is ``-alpha / beta``. Perfectly separated or one-sided
    data have no finite MLE; those return ``separated=True`` with the
    boundary placed midway between the last all-0 and first all-1 stimulus
    (or at the series edge when every label is the same).
    """
    x = np.asarray(stimuli, float)
    n = np.asarray(n_trials, float)
    k = np.asarray(n_category, float)
    keep = n > 0
    x, n, k = x[keep], n[keep], k[keep]
    if x.size < 2:
        raise DataError("need at least two stimuli with trials")
    order = np.argsort(x)
    x, n, k = x[order], n[order], k[order]
    p = k / n
    if np.all(p == 0) or np.all(p == 1):
        edge = (x[-1], x[-1]) if np.all(p == 0) else (x[0], x[0])
        return CategorizationFit(edge[0], math.nan, math.nan, True, edge, False)
    zeros = np.flatnonzero(p == 0)
    ones = np.flatnonzero(p == 1)
    mixed = np.flatnonzero((p > 0) & (p < 1))
    if mixed.size == 0 and zeros.size and ones.size and zeros.max() < ones.min():
        lo, hi = x[zeros.max()], x[ones.min()]
        return CategorizationFit(0.5 * (lo + hi), math.nan, math.nan, True, (lo, hi), False)
    fit = fit_probit(x, n, k, floor_c=0.0)
    boundary = -fit.alpha / fit.beta if fit.beta != 0 else math.nan
    return CategorizationFit(float(boundary), fit.alpha, fit.beta, False, None, fit.converged)


# --------------------------------------------------------------------------
# summaries and files

JPD_FIELDS = ["reference_stim", "x50_mels", "inverse_steepness_mels", "alpha", "beta", "c",
              "converged", "status", "n"]


def summarize(estimates) -> dict:
    """Upper and lower JPD bounds over usable estimates."""
    ok = [e for e in estimates if e.usable]
    excluded = [e.reference_stim for e in estimates if not e.usable]
    if not ok:
        return {"upper_bound": math.nan, "upper_reference": None,
                "lower_bound": math.nan, "lower_reference": None, "excluded": excluded}
    hi = max(ok, key=lambda e: e.x50)
    lo = min(ok, key=lambda e: e.x50)
    return {"upper_bound": hi.x50, "upper_reference": hi.reference_stim,
            "lower_bound": lo.x50, "lower_reference": lo.reference_stim, "excluded": excluded}


def write_estimates(path: str, estimates) -> None:
    s = summarize(estimates)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(JPD_FIELDS)
        for e in estimates:
            f = e.fit
            w.writerow([e.reference_stim, _num(e.x50), _num(e.inverse_steepness), _num(f.alpha),
                        _num(f.beta), f"{f.floor_c:.4f}", int(f.converged), f.status, e.n])
        w.writerow(["upper_bound", _num(s["upper_bound"]), "", "", "", "", "",
                    f"reference={s['upper_reference']}", ""])
        w.writerow(["lower_bound", _num(s["lower_bound"]), "", "", "", "", "",
                    f"reference={s['lower_reference']}", ""])


def read_estimates(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return [row for row in csv.DictReader(fh)
                if row["reference_stim"] not in ("upper_bound", "lower_bound")]


def _num(v, spec=".6f"):
    return "" if v is None or not math.isfinite(v) else format(v, spec)
