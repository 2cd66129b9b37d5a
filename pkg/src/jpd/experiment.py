"""Staged experiment runs, reports, and the adaptive step-size staircase.

A run lives in one directory and every stage communicates through files
in it, so any stage can be rerun (or replaced by outside data) on its own:

==========  ===================================================================
synth       ``stimuli/continuum.json`` + WAVs (one sub-directory per talker
            group in resynthesis mode)
simulate    ``responses.csv`` (or rendered response WAVs when
            ``render_responses`` is set), ``categorization.csv``
analyze     ``stimuli_measured.csv``; ``responses.csv`` from audio when the
            responses are recordings
tabulate    ``differences.csv`` (and ``differences_by_subject.csv``)
fit         ``jpd.csv``, ``boundaries.csv`` (and ``jpd_by_subject.csv``)
report      ``summary.csv``, ``summary.txt``, four SVG figures, ``manifest.json``
==========  ===================================================================
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from . import __version__
from .analysis import AnalysisError, analyze_directory, measure_token, write_measurements
from .psychometrics import (DataError, DifferenceRule, DifferenceTable, JpdEstimate, ProbitFit,
                            classify_pair, fit_categorization, fit_jpd, read_estimates, summarize,
                            tabulate, write_estimates)
from .responses import read_responses, write_responses
from .simulator import (SubjectProfile, difference_probability, intended_target, respond,
                        run_block, run_categorization, same_stimulus_difference_probability)
from .synthesis import (PitchContour, StimulusSpec, build_parametric_continuum, plan_resynthesis,
                        read_continuum, render_vowel, resynthesize_series, write_continuum)
from .units import FormantPoint, mel_distance
from .wav import read_wav, write_wav

log = logging.getLogger(__name__)

MODES = ("exp1-parametric", "exp2-resynthesis")
POOLING = ("pooled", "per-subject-mean")
STAGES = ("synth", "simulate", "analyze", "tabulate", "fit", "report")
FIGURES = ("categorization.svg", "responses.svg", "x50.svg", "inverse_steepness.svg")

_STAIRCASE_KEY = 5
_TOKEN_KEY = 6


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; files written by earlier stages are kept."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class MissingIntermediatesError(FileNotFoundError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TalkerGroup:
    """One talker group of the resynthesis experiment: the group's mean
    'hid' and 'head' vowels and voice pitch."""

    name: str
    hid: FormantPoint
    head: FormantPoint
    mean_f0: float = 117.0
    n_tokens: int = 3
    jitter: tuple[float, float] = (8.0, 20.0)

    def to_dict(self) -> dict:
        return {"name": self.name, "hid": list(self.hid.as_tuple()),
                "head": list(self.head.as_tuple()), "mean_f0": self.mean_f0,
                "n_tokens": self.n_tokens, "jitter": list(self.jitter)}

    @classmethod
    def from_dict(cls, d: dict) -> "TalkerGroup":
        return cls(d["name"], FormantPoint(*d["hid"]), FormantPoint(*d["head"]),
                   float(d.get("mean_f0", 117.0)), int(d.get("n_tokens", 3)),
                   tuple(d.get("jitter", (8.0, 20.0))))


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    mode: str = "exp1-parametric"
    seed: int | None = None
    # parametric continuum
    endpoints: tuple[FormantPoint, FormantPoint] = (FormantPoint(270.0, 2290.0),
                                                    FormantPoint(390.0, 1990.0))
    n_stimuli: int = 9
    duration: float = 0.25
    mean_f0: float = 117.0
    sample_rate: int = 16000
    # resynthesis continuum
    groups: list[TalkerGroup] = field(default_factory=list)
    steps_between: int = 10
    index_range: tuple[int, int] = (-1, 12)
    # subjects and procedure
    subjects: list[SubjectProfile] = field(default_factory=list)
    subject_groups: dict[str, str] = field(default_factory=dict)
    reps: int = 6
    categorization_reps: int = 6
    audio_dir: str | None = None
    render_responses: bool = False
    # analysis
    analysis_rate: int | None = None
    rule: DifferenceRule = field(default_factory=DifferenceRule)
    floor_c: float | None = 0.1
    pooling: str = "pooled"
    staircase: dict = field(default_factory=dict)
    workers: int = 1
    out: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pooling not in POOLING:
            raise ConfigError(f"pooling must be one of {POOLING}, got {self.pooling!r}")
        if self.reps < 1 or self.categorization_reps < 0:
            raise ConfigError("reps must be >= 1 and categorization_reps >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def validate(self) -> "ExperimentConfig":
        """Checks that need the file system or apply only to fresh runs."""
        if self.audio_dir is None:
            if self.seed is None:
                raise ConfigError("a seed is required for simulated subjects")
            if not self.subjects:
                raise ConfigError("no subjects configured")
        elif not os.path.isdir(self.audio_dir):
            raise ConfigError(f"audio directory not found: {self.audio_dir}")
        if self.mode == "exp2-resynthesis":
            if not self.groups:
                raise ConfigError("resynthesis mode needs at least one talker group")
            names = {g.name for g in self.groups}
            for s in self.subjects:
                if self.subject_groups.get(s.name) not in names:
                    raise ConfigError(f"subject {s.name!r} has no valid talker group")
        elif self.n_stimuli < 3:
            raise ConfigError("need at least three stimuli")
        return self

    @property
    def simulated(self) -> bool:
        return self.audio_dir is None

    def resolved_subjects(self) -> list[SubjectProfile]:
        """Subject profiles with per-subject seeds split off the run seed."""
        return [p.with_seed(subject_seed(self.seed, i)) for i, p in enumerate(self.subjects)]

    def to_dict(self) -> dict:
        subjects = []
        for p in self.subjects:
            d = p.to_dict()
            if p.name in self.subject_groups:
                d["group"] = self.subject_groups[p.name]
            subjects.append(d)
        return {
            "name": self.name,
            "mode": self.mode,
            "seed": self.seed,
            "continuum": {"endpoints": [list(e.as_tuple()) for e in self.endpoints],
                          "n_stimuli": self.n_stimuli, "duration": self.duration,
                          "mean_f0": self.mean_f0, "sample_rate": self.sample_rate},
            "resynthesis": {"groups": [g.to_dict() for g in self.groups],
                            "steps_between": self.steps_between,
                            "index_range": list(self.index_range)},
            "subjects": subjects,
            "reps": self.reps,
            "categorization_reps": self.categorization_reps,
            "audio_dir": self.audio_dir,
            "render_responses": self.render_responses,
            "analysis": {"rate": self.analysis_rate},
            "rule": {"f1_threshold": self.rule.f1_threshold,
                     "f2_threshold": self.rule.f2_threshold,
                     "directional": self.rule.directional},
            "fit": {"floor_c": self.floor_c, "pooling": self.pooling},
            "staircase": dict(self.staircase),
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "ExperimentConfig":
        d = dict(d)
        kw = {}
        for key in ("name", "mode", "seed", "reps", "categorization_reps",
                    "render_responses", "workers", "staircase", "out"):
            if key in d:
                kw[key] = d[key]
        cont = d.get("continuum", {})
        if "endpoints" in cont:
            kw["endpoints"] = tuple(FormantPoint(*e) for e in cont["endpoints"])
        for key in ("n_stimuli", "duration", "mean_f0", "sample_rate"):
            if key in cont:
                kw[key] = cont[key]
        res = d.get("resynthesis", {})
        if res.get("groups"):
            kw["groups"] = [TalkerGroup.from_dict(g) for g in res["groups"]]
        if "steps_between" in res:
            kw["steps_between"] = int(res["steps_between"])
        if "index_range" in res:
            kw["index_range"] = tuple(res["index_range"])
        subjects = d.get("subjects", [])
        if isinstance(subjects, str):
            path = _resolve(subjects, base_dir)
            if not os.path.isfile(path):
                raise ConfigError(f"subject file not found: {path}")
            with open(path) as fh:
                subjects = json.load(fh)
            if isinstance(subjects, dict):
                subjects = subjects.get("subjects", [subjects])
        profiles, groups = [], dict(d.get("subject_groups", {}))
        for s in subjects:
            s = dict(s)
            g = s.pop("group", None)
            if g is not None:
                groups[s["name"]] = g
            profiles.append(SubjectProfile.from_dict(s))
        if len({p.name for p in profiles}) != len(profiles):
            raise ConfigError("subject names must be unique")
        kw["subjects"] = profiles
        kw["subject_groups"] = groups
        if d.get("audio_dir"):
            kw["audio_dir"] = _resolve(d["audio_dir"], base_dir)
        if d.get("analysis", {}).get("rate"):
            kw["analysis_rate"] = int(d["analysis"]["rate"])
        if "rule" in d:
            kw["rule"] = DifferenceRule(**d["rule"])
        fit = d.get("fit", {})
        if "floor_c" in fit:
            kw["floor_c"] = fit["floor_c"]
        if "pooling" in fit:
            kw["pooling"] = fit["pooling"]
        return cls(**kw)


def _resolve(path: str, base_dir: str) -> str:
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


def load_config(path: str, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    """Read a JSON config; ``seed``/``out`` override the file's values."""
    if not os.path.isfile(path):
        raise ConfigError(f"config not found: {path}")
    with open(path) as fh:
        d = json.load(fh)
    if seed is not None:
        d["seed"] = int(seed)
    if out is not None:
        d["out"] = out
    return ExperimentConfig.from_dict(d, os.path.dirname(os.path.abspath(path))).validate()


def bundled_config(name: str) -> str:
    """Path of a config shipped with the package (e.g. ``"exp1_reference"``)."""
    here = os.path.join(os.path.dirname(__file__), "configs")
    path = os.path.join(here, name if name.endswith(".json") else name + ".json")
    if not os.path.isfile(path):
        raise ConfigError(f"no bundled config named {name!r}")
    return path


def subject_seed(seed: int, index: int) -> int:
    """Seed for the ``index``-th subject, split off the run seed."""
    return int(np.random.SeedSequence(int(seed), spawn_key=(index,)).generate_state(1)[0])


# --------------------------------------------------------------------------
# run report


@dataclass
class RunReport:
    run_dir: str
    config: dict
    outputs: dict[str, list[str]] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    exceptions: list[str] = field(default_factory=list)
    version: str = __version__

    def path(self, name: str) -> str:
        return os.path.join(self.run_dir, name)

    def manifest(self) -> dict:
        files = sorted({p for ps in self.outputs.values() for p in ps})
        return {
            "toolkit": {"name": "jpd", "version": self.version},
            "config": self.config,
            "inputs": _input_manifest(self.config),
            "stages": self.outputs,
            "files": {p: _sha256(self.path(p)) for p in files if os.path.isfile(self.path(p))},
            "summary": self.summary,
            "exceptions": self.exceptions,
        }


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_manifest(config: dict) -> dict:
    audio = config.get("audio_dir")
    if not audio or not os.path.isdir(audio):
        return {"audio_dir": None, "files": {}}
    names = sorted(n for n in os.listdir(audio) if n.lower().endswith(".wav"))
    return {"audio_dir": audio, "files": {n: _sha256(os.path.join(audio, n)) for n in names}}


# --------------------------------------------------------------------------
# stages


def _map(fn, items, workers: int):
    """Ordered map; results never depend on ``workers``."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _rel(run_dir, *paths):
    return [os.path.relpath(p, run_dir) for p in paths]


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _continuum_paths(cfg: ExperimentConfig, run_dir: str) -> dict[str, str]:
    """Continuum manifest per talker group ('' for the single parametric series)."""
    if cfg.mode == "exp1-parametric":
        return {"": os.path.join(run_dir, "stimuli", "continuum.json")}
    return {g.name: os.path.join(run_dir, "stimuli", g.name, "continuum.json") for g in cfg.groups}


def _heard(cont):
    """The continuum as heard: re-measured formants where available."""
    if not cont.measured:
        return cont
    stimuli = [replace(s, target=m) if m is not None else s
               for s, m in zip(cont.stimuli, cont.measured)]
    return replace(cont, stimuli=stimuli, audio=[])


def _load_continua(cfg, run_dir, heard=True):
    out = {}
    for g, path in _continuum_paths(cfg, run_dir).items():
        if not os.path.isfile(path):
            raise MissingIntermediatesError(f"missing stimuli: {path}")
        c = read_continuum(path)
        out[g] = _heard(c) if heard else c
    return out


def _group_of(cfg, subject: str) -> str:
    if cfg.mode == "exp1-parametric":
        return ""
    try:
        return cfg.subject_groups[subject]
    except KeyError:
        raise DataError(f"subject {subject!r} has no talker group") from None


def stage_synth(cfg: ExperimentConfig, run_dir: str) -> list[str]:
    written = []
    if cfg.mode == "exp1-parametric":
        a, b = cfg.endpoints
        cont = build_parametric_continuum(a, b, cfg.n_stimuli, cfg.duration,
                                          PitchContour(cfg.mean_f0), cfg.sample_rate)
        out = os.path.join(run_dir, "stimuli")
        written.append(write_continuum(cont, out))
        written += [os.path.join(out, f"stim_{s.id:+03d}.wav") for s in cont.stimuli]
        return _rel(run_dir, *written)
    for gi, g in enumerate(cfg.groups):
        rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed or 0),
                                                           spawn_key=(_TOKEN_KEY, gi)))
        tokens = {}
        for word, point in (("hid", g.hid), ("head", g.head)):
            tokens[word] = []
            for _ in range(g.n_tokens):
                f1 = point.f1 + g.jitter[0] * rng.standard_normal()
                f2 = point.f2 + g.jitter[1] * rng.standard_normal()
                spec = StimulusSpec(0, FormantPoint(f1, f2), cfg.duration, PitchContour(g.mean_f0))
                tokens[word].append(render_vowel(spec, cfg.sample_rate))
        plan = plan_resynthesis(tokens["hid"], tokens["head"], cfg.sample_rate,
                                cfg.steps_between, cfg.index_range)
        cont = resynthesize_series(plan)
        cont.settings["group"] = g.to_dict()
        out = os.path.join(run_dir, "stimuli", g.name)
        written.append(write_continuum(cont, out))
        written += [os.path.join(out, f"stim_{s.id:+03d}.wav") for s in cont.stimuli]
    return _rel(run_dir, *written)


def _simulate_subject(args):
    profile, heard, reps, cat_reps = args
    responses = run_block(profile, heard, reps)
    cat = None
    if cat_reps:
        cat = run_categorization(profile, heard.ids, cat_reps)
    return responses, cat


def stage_simulate(cfg: ExperimentConfig, run_dir: str) -> list[str]:
    if not cfg.simulated:
        log.info("responses come from %s; nothing to simulate", cfg.audio_dir)
        return []
    continua = _load_continua(cfg, run_dir)
    profiles = cfg.resolved_subjects()
    jobs = [(p, continua[_group_of(cfg, p.name)], cfg.reps, cfg.categorization_reps)
            for p in profiles]
    results = _map(_simulate_subject, jobs, cfg.workers)
    responses = [r for rs, _ in results for r in rs]
    written = []
    if cfg.render_responses:
        audio = os.path.join(run_dir, "responses_audio")
        os.makedirs(audio, exist_ok=True)
        for r in responses:
            spec = StimulusSpec(r.stimulus_id, r.produced, cfg.duration, PitchContour(cfg.mean_f0))
            path = os.path.join(audio, r.token + ".wav")
            write_wav(path, render_vowel(spec, cfg.sample_rate), cfg.sample_rate)
        path = os.path.join(run_dir, "responses_intended.csv")
    else:
        path = os.path.join(run_dir, "responses.csv")
    write_responses(path, responses)
    written.append(path)
    if cfg.categorization_reps:
        path = os.path.join(run_dir, "categorization.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "stimulus_id", "n_trials", "n_upper"])
            for p, (_, (ids, n, k)) in zip(profiles, results):
                for row in zip(ids, n, k):
                    w.writerow([p.name, *map(int, row)])
        written.append(path)
    return _rel(run_dir, *written)


def _measure_file(args):
    path, rate = args
    x, sr = read_wav(path)
    try:
        return measure_token(x, sr, analysis_rate=rate), None
    except AnalysisError as exc:
        return None, str(exc)


def stage_analyze(cfg: ExperimentConfig, run_dir: str) -> list[str]:
    written = []
    rows = []
    for g, path in _continuum_paths(cfg, run_dir).items():
        if not os.path.isfile(path):
            raise MissingIntermediatesError(f"missing stimuli: {path}")
        base = os.path.dirname(path)
        with open(path) as fh:
            names = [s["audio"] for s in json.load(fh)["stimuli"] if s.get("audio")]
        results = _map(_measure_file, [(os.path.join(base, n), cfg.analysis_rate) for n in names],
                       cfg.workers)
        for name, (m, err) in zip(names, results):
            token = os.path.splitext(name)[0]
            rows.append((f"{g}_{token}" if g else token, m, err))
    out = os.path.join(run_dir, "stimuli_measured.csv")
    write_measurements(out, rows)
    written.append(out)
    source = cfg.audio_dir
    if source is None and cfg.render_responses:
        source = os.path.join(run_dir, "responses_audio")
    if source is not None:
        out = os.path.join(run_dir, "responses.csv")
        analyze_directory(source, out, analysis_rate=cfg.analysis_rate)
        written.append(out)
    return _rel(run_dir, *written)


def _tables(cfg, run_dir, by_subject):
    path = os.path.join(run_dir, "responses.csv")
    if not os.path.isfile(path):
        raise MissingIntermediatesError(f"missing responses: {path}")
    responses = read_responses(path)
    continua = _load_continua(cfg, run_dir)
    groups: dict[str, list] = {}
    for r in responses:
        groups.setdefault(_group_of(cfg, r.subject), []).append(r)
    if by_subject:
        out = {}
        for g in sorted(groups):
            out.update(tabulate(groups[g], continua[g], cfg.rule, by_subject=True))
        return out
    pooled = DifferenceTable()
    for g in sorted(groups):
        pooled = pooled.merged(tabulate(groups[g], continua[g], cfg.rule))
    return pooled


def stage_tabulate(cfg: ExperimentConfig, run_dir: str) -> list[str]:
    pooled = _tables(cfg, run_dir, by_subject=False)
    out = os.path.join(run_dir, "differences.csv")
    pooled.to_csv(out)
    written = [out]
    if cfg.pooling == "per-subject-mean":
        per = _tables(cfg, run_dir, by_subject=True)
        out = os.path.join(run_dir, "differences_by_subject.csv")
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "reference_stim", "comparison_stim", "n_pairs",
                        "n_different", "distance_mels"])
            for s in sorted(per):
                for (r, c), cell in sorted(per[s].cells.items()):
                    w.writerow([s, r, c, cell.n_pairs, cell.n_different, f"{cell.distance:.6f}"])
        written.append(out)
    return _rel(run_dir, *written)


def _fit_task(args):
    table, ref, floor_c = args
    try:
        return fit_jpd(table, ref, floor_c), None
    except DataError as exc:
        return None, str(exc)


def _read_by_subject(path):
    from .psychometrics import Cell

    tables: dict[str, dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            tables.setdefault(row["subject"], {})[
                (int(row["reference_stim"]), int(row["comparison_stim"]))] = Cell(
                int(row["n_pairs"]), int(row["n_different"]), float(row["distance_mels"]))
    return {s: DifferenceTable(c) for s, c in tables.items()}


def _mean_estimate(ref, ests, floor_c):
    ok = [e for e in ests if e.usable]
    n = int(sum(e.n for e in ests))
    if not ok:
        fit = ProbitFit(math.nan, math.nan, floor_c, False, math.nan, 0, "no-usable-subject")
        return JpdEstimate(ref, math.nan, math.nan, fit, n)
    fit = ProbitFit(float(np.mean([e.fit.alpha for e in ok])),
                    float(np.mean([e.fit.beta for e in ok])), floor_c, True,
                    float(sum(e.fit.log_likelihood for e in ok)), 0, "ok")
    return JpdEstimate(ref, float(np.mean([e.x50 for e in ok])),
                       float(np.mean([e.inverse_steepness for e in ok])), fit, n)


def stage_fit(cfg: ExperimentConfig, run_dir: str) -> tuple[list[str], list[str]]:
    """Fit limens and categorization boundaries; returns (files, exceptions)."""
    path = os.path.join(run_dir, "differences.csv")
    if not os.path.isfile(path):
        raise MissingIntermediatesError(f"missing difference table: {path}")
    exceptions = []
    written = []
    if cfg.pooling == "pooled":
        table = DifferenceTable.from_csv(path)
        results = _map(_fit_task, [(table, r, cfg.floor_c) for r in table.references],
                       cfg.workers)
        estimates = []
        for ref, (est, err) in zip(table.references, results):
            if est is None:
                exceptions.append(f"reference {ref}: {err}")
            else:
                estimates.append(est)
    else:
        per = _read_by_subject(os.path.join(run_dir, "differences_by_subject.csv"))
        jobs = [(s, r) for s in sorted(per) for r in per[s].references]
        results = _map(_fit_task, [(per[s], r, cfg.floor_c) for s, r in jobs], cfg.workers)
        by_ref: dict[int, list] = {}
        out = os.path.join(run_dir, "jpd_by_subject.csv")
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "reference_stim", "x50_mels", "inverse_steepness_mels",
                        "alpha", "beta", "converged", "status", "n"])
            for (s, r), (est, err) in zip(jobs, results):
                if est is None:
                    exceptions.append(f"subject {s} reference {r}: {err}")
                    continue
                by_ref.setdefault(r, []).append(est)
                w.writerow([s, r, _num(est.x50), _num(est.inverse_steepness),
                            _num(est.fit.alpha), _num(est.fit.beta), int(est.fit.converged),
                            est.fit.status, est.n])
        written.append(out)
        c = 0.1 if cfg.floor_c is None else cfg.floor_c
        estimates = [_mean_estimate(r, by_ref[r], c) for r in sorted(by_ref)]
    for e in estimates:
        if not e.usable:
            exceptions.append(f"reference {e.reference_stim}: excluded ({e.fit.status}, "
                              f"converged={e.fit.converged})")
    out = os.path.join(run_dir, "jpd.csv")
    write_estimates(out, estimates)
    written.insert(0, out)
    cat_path = os.path.join(run_dir, "categorization.csv")
    if os.path.isfile(cat_path):
        out = os.path.join(run_dir, "boundaries.csv")
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "boundary", "alpha", "beta", "separated", "converged"])
            for subject, (ids, n, k) in sorted(_read_categorization(cat_path).items()):
                try:
                    f = fit_categorization(ids, n, k)
                except DataError as exc:
                    exceptions.append(f"categorization {subject}: {exc}")
                    continue
                w.writerow([subject, _num(f.boundary), _num(f.alpha), _num(f.beta),
                            int(f.separated), int(f.converged)])
        written.append(out)
    return _rel(run_dir, *written), exceptions


def _read_categorization(path):
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(r["subject"], []).append(
                (int(r["stimulus_id"]), int(r["n_trials"]), int(r["n_upper"])))
    return {s: tuple(np.array(c) for c in zip(*v)) for s, v in rows.items()}


def _num(v, spec=".6f"):
    return "" if v is None or not math.isfinite(v) else format(v, spec)


# --------------------------------------------------------------------------
# pipeline


def run_pipeline(cfg: ExperimentConfig, run_dir: str | None = None,
                 stages=STAGES) -> RunReport:
    """Run the requested stages in order and return the run report.

    A failing stage raises :class:`StageError` naming the stage; files from
    earlier stages stay on disk.
    """
    cfg.validate()
    run_dir = run_dir or cfg.out
    if not run_dir:
        raise ConfigError("no output directory given")
    os.makedirs(run_dir, exist_ok=True)
    _write_json(os.path.join(run_dir, "config.json"), cfg.to_dict())
    report = RunReport(run_dir, cfg.to_dict(), {"config": ["config.json"]})
    for stage in STAGES:
        if stage not in stages:
            continue
        log.info("stage %s", stage)
        try:
            if stage == "fit":
                files, exc = stage_fit(cfg, run_dir)
                report.exceptions += exc
            elif stage == "report":
                report = render_report(run_dir, report)
                continue
            else:
                files = _STAGE_FUNCS[stage](cfg, run_dir)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        report.outputs[stage] = files
    return report


_STAGE_FUNCS = {"synth": stage_synth, "simulate": stage_simulate, "analyze": stage_analyze,
                "tabulate": stage_tabulate}


# --------------------------------------------------------------------------
# reporting


def prototype_positions(cfg: ExperimentConfig, continua: dict) -> list[float]:
    """Mean stimulus number of each prototype (nearest stimulus in mel)."""
    pos = [[], []]
    for p in cfg.subjects:
        cont = continua[_group_of(cfg, p.name)]
        for i, proto in enumerate(p.prototypes):
            d = [mel_distance(s.target, proto) for s in cont.stimuli]
            pos[i].append(cont.stimuli[int(np.argmin(d))].id)
    return [float(np.mean(v)) for v in pos if v]


def magnet_ordering(refs, x50, prototypes, boundary) -> tuple[bool, str]:
    """Check the peak/valley pattern of per-reference limens.

    References within one step of a prototype position are
    'prototype-adjacent'; those less than one step from the boundary are
    'boundary-adjacent'. The pattern holds when the overall maximum lies at
    a prototype-adjacent reference, the minimum at a boundary-adjacent one,
    and every boundary-adjacent limen is below every prototype-adjacent one.
    """
    refs = np.asarray(refs, float)
    x50 = np.asarray(x50, float)
    ok = np.isfinite(x50)
    refs, x50 = refs[ok], x50[ok]
    near_p = np.zeros(refs.size, bool)
    for p in prototypes:
        near_p |= np.abs(refs - p) <= 1.0
    near_b = np.abs(refs - boundary) < 1.0
    near_p &= ~near_b
    if not near_p.any() or not near_b.any():
        return False, "no prototype- or boundary-adjacent references with usable limens"
    imax, imin = int(np.argmax(x50)), int(np.argmin(x50))
    detail = (f"max {x50[imax]:.2f} at ref {refs[imax]:g}, min {x50[imin]:.2f} at ref "
              f"{refs[imin]:g}; boundary-adjacent max {x50[near_b].max():.2f} vs "
              f"prototype-adjacent min {x50[near_p].min():.2f}")
    holds = bool(near_p[imax] and near_b[imin] and x50[near_b].max() < x50[near_p].min())
    return holds, detail


def _read_boundaries(path):
    if not os.path.isfile(path):
        return {}
    with open(path, newline="") as fh:
        return {r["subject"]: float(r["boundary"]) for r in csv.DictReader(fh) if r["boundary"]}


def render_report(run_dir: str, report: RunReport | None = None) -> RunReport:
    """Figures, the bounds summary and ``manifest.json`` from a run's files."""
    from . import plots

    needed = ["config.json", "responses.csv", "differences.csv", "jpd.csv"]
    missing = [n for n in needed if not os.path.isfile(os.path.join(run_dir, n))]
    if missing:
        raise MissingIntermediatesError(f"{run_dir}: missing {', '.join(missing)}")
    with open(os.path.join(run_dir, "config.json")) as fh:
        config = json.load(fh)
    # the run's own record of its config; inputs need not still exist
    cfg = ExperimentConfig.from_dict({**config, "audio_dir": None})
    if report is None:
        report = RunReport(run_dir, config, {"config": ["config.json"]})
    continua = _load_continua(cfg, run_dir)
    rows = read_estimates(os.path.join(run_dir, "jpd.csv"))
    refs = [int(r["reference_stim"]) for r in rows]
    x50 = [float(r["x50_mels"]) if r["x50_mels"] else math.nan for r in rows]
    inv = [float(r["inverse_steepness_mels"]) if r["inverse_steepness_mels"] else math.nan
           for r in rows]
    usable = [r["converged"] == "1" and r["status"] == "ok" and r["x50_mels"] != "" for r in rows]
    ok = [i for i, u in enumerate(usable) if u]
    summary = {"upper_bound": None, "upper_reference": None, "upper_inverse_steepness": None,
               "lower_bound": None, "lower_reference": None, "lower_inverse_steepness": None,
               "excluded": [refs[i] for i, u in enumerate(usable) if not u]}
    if ok:
        hi = max(ok, key=lambda i: x50[i])
        lo = min(ok, key=lambda i: x50[i])
        summary.update(upper_bound=round(x50[hi], 6), upper_reference=refs[hi],
                       upper_inverse_steepness=round(inv[hi], 6),
                       lower_bound=round(x50[lo], 6), lower_reference=refs[lo],
                       lower_inverse_steepness=round(inv[lo], 6))
    boundaries = _read_boundaries(os.path.join(run_dir, "boundaries.csv"))
    finite_b = [b for b in boundaries.values() if math.isfinite(b)]
    mean_b = float(np.mean(finite_b)) if finite_b else math.nan
    protos = prototype_positions(cfg, continua) if cfg.subjects else []
    summary["mean_boundary"] = round(mean_b, 6) if math.isfinite(mean_b) else None
    summary["prototype_positions"] = [round(p, 6) for p in protos]
    if protos and math.isfinite(mean_b):
        holds, detail = magnet_ordering(refs, [x50[i] if usable[i] else math.nan
                                               for i in range(len(refs))], protos, mean_b)
        summary["magnet_ordering"] = holds
        summary["magnet_ordering_detail"] = detail

    written = []
    path = os.path.join(run_dir, "summary.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "bound", "reference_stim", "x50_mels",
                    "inverse_steepness_mels"])
        for b in ("upper", "lower"):
            w.writerow([cfg.name, b, summary[f"{b}_reference"] if ok else "",
                        _num(summary[f"{b}_bound"] if ok else math.nan),
                        _num(summary[f"{b}_inverse_steepness"] if ok else math.nan)])
    written.append(path)
    path = os.path.join(run_dir, "summary.txt")
    with open(path, "w") as fh:
        fh.write(_summary_text(cfg, summary, refs, x50, inv, usable))
    written.append(path)

    marks = {p: "prototype" for p in protos}
    if math.isfinite(mean_b):
        marks[mean_b] = "boundary"
    plots.plot_limens(os.path.join(run_dir, "x50.svg"), refs,
                      [x50[i] if usable[i] else math.nan for i in range(len(refs))],
                      "X50 (mels)", marks)
    plots.plot_limens(os.path.join(run_dir, "inverse_steepness.svg"), refs,
                      [inv[i] if usable[i] else math.nan for i in range(len(refs))],
                      "X75 - X50 (mels)", marks)
    cat_path = os.path.join(run_dir, "categorization.csv")
    curves = {}
    if os.path.isfile(cat_path):
        for s, (ids, n, k) in _read_categorization(cat_path).items():
            curves[s] = (ids, k / n)
    plots.plot_categorization(os.path.join(run_dir, "categorization.svg"), curves,
                              list(boundaries.values()))
    plots.plot_responses(os.path.join(run_dir, "responses.svg"),
                         *_response_means(cfg, run_dir, continua))
    written += [os.path.join(run_dir, f) for f in FIGURES]

    report.summary = summary
    report.outputs["report"] = _rel(run_dir, *written) + ["manifest.json"]
    manifest = report.manifest()
    manifest["files"].pop("manifest.json", None)
    _write_json(os.path.join(run_dir, "manifest.json"), manifest)
    return report


def _summary_text(cfg, summary, refs, x50, inv, usable) -> str:
    lines = [f"Just producible difference limens: {cfg.name} ({cfg.mode})", ""]
    lines.append(f"{'reference':>9}  {'X50 (mel)':>10}  {'X75-X50':>9}  status")
    for r, a, b, u in zip(refs, x50, inv, usable):
        lines.append(f"{r:>9d}  {a:>10.2f}  {b:>9.2f}  {'ok' if u else 'excluded'}")
    lines.append("")
    if summary["upper_bound"] is None:
        lines.append("No usable estimates.")
    else:
        lines.append(f"Upper bound: {summary['upper_bound']:.2f} mels "
                     f"(reference {summary['upper_reference']}, X75-X50 "
                     f"{summary['upper_inverse_steepness']:.2f})")
        lines.append(f"Lower bound: {summary['lower_bound']:.2f} mels "
                     f"(reference {summary['lower_reference']}, X75-X50 "
                     f"{summary['lower_inverse_steepness']:.2f})")
    if summary["excluded"]:
        lines.append("Excluded references: " + ", ".join(map(str, summary["excluded"])))
    if "magnet_ordering" in summary:
        lines.append(f"Prototype-peak / boundary-valley pattern: "
                     f"{'holds' if summary['magnet_ordering'] else 'does not hold'} "
                     f"({summary['magnet_ordering_detail']})")
    return "\n".join(lines) + "\n"


def _response_means(cfg, run_dir, continua):
    responses = read_responses(os.path.join(run_dir, "responses.csv"))
    first = continua[sorted(continua)[0]]
    stimuli = [(s.id, s.target.f1, s.target.f2) for s in first.stimuli]
    means = {}
    for r in responses:
        g = _group_of(cfg, r.subject) or "responses"
        means.setdefault(g, {}).setdefault(r.stimulus_id, []).append(
            r.produced.as_tuple())
    out = {}
    for g, by_stim in means.items():
        out[g] = [(s, *np.mean(v, axis=0)) for s, v in sorted(by_stim.items())]
    return stimuli, out


# --------------------------------------------------------------------------
# adaptive procedure


@dataclass(frozen=True)
class StaircaseResult:
    distance: float
    reversals: tuple[tuple[float, ...], ...]
    n_trials: int
    converged: bool
    target_p: float
    track_distances: tuple[float, ...] = ()
    flags: str = ""


def _unit(direction) -> np.ndarray:
    u = np.asarray(direction, float)
    norm = np.linalg.norm(u)
    if u.shape != (2,) or not norm > 0 or not np.isfinite(norm):
        raise ValueError("direction must be a non-zero 2-vector in (mel F1, mel F2)")
    return u / norm


def _step_point(reference: FormantPoint, u, d) -> FormantPoint:
    return FormantPoint.from_mel(*(reference.mel + d * u))


def _track(profile, reference, u, rule, target_p, start, step, min_step, n_reversals,
           max_trials, track, position):
    up_ratio = target_p / (1 - target_p)
    d, cur = float(start), float(step)
    last_move = 0
    reversals = []
    trial = 0
    while trial < max_trials and len(reversals) < n_reversals:
        rng = np.random.default_rng(np.random.SeedSequence(
            profile.seed, spawn_key=(_STAIRCASE_KEY, track, trial)))
        comp = _step_point(reference, u, d)
        pa, pb = (None, None) if position is None else (position[0], position[0] + d / position[1])
        a = respond(profile, reference, pa, stimulus_id=0, repetition=trial, rng=rng)
        b = respond(profile, comp, pb, stimulus_id=1, repetition=trial, rng=rng)
        delta = (comp.f1 - reference.f1, comp.f2 - reference.f2)
        move = -1 if classify_pair(a, b, rule, delta) else 1
        if last_move and move != last_move:
            reversals.append(d)
            cur = max(cur / 2, min_step)
        last_move = move
        d = max(d - cur, 0.0) if move < 0 else d + cur * up_ratio
        trial += 1
    return reversals, trial


def adaptive_step_search(profile: SubjectProfile, reference: FormantPoint, direction,
                         rule: DifferenceRule = DifferenceRule(), target_p: float = 0.5,
                         start: float = 150.0, step: float = 32.0, min_step: float = 4.0,
                         n_reversals: int = 12, n_average: int = 6,
                         max_trials: int = 400, n_tracks: int = 1,
                         position: tuple[float, float] | None = None) -> StaircaseResult:
    """Weighted up-down staircase on the reference-to-comparison distance (mels).

    Each trial elicits one production of the reference and one of a
    comparison ``d`` mels away along ``direction`` and classifies the pair.
    'Different' shrinks ``d`` by the current step, 'same' grows it by
    ``step * target_p / (1 - target_p)``, which balances at
    ``P(different) = target_p`` (plain 1-up/1-down at 0.5). The step halves
    at every reversal down to ``min_step``. A track's estimate is the mean
    of its last ``n_average`` reversal distances; with ``n_tracks > 1``
    independent tracks are run and their estimates averaged. A track that
    reaches ``max_trials`` first makes the result unconverged and flagged.

    ``position = (reference_position, mels_per_step)`` places the stimuli on
    a continuum's stimulus-number axis, so boundary-based categories apply
    as in :func:`run_block`; without it the nearest prototype decides.
    """
    floor = same_stimulus_difference_probability(profile.production_noise,
                                                 (rule.f1_threshold, rule.f2_threshold))
    if not floor < target_p < 1:
        raise ValueError(f"target_p must lie in ({floor:.3f}, 1), the floor being the "
                         f"same-stimulus difference rate")
    if not (start >= 0 and step > 0 and 0 < min_step <= step):
        raise ValueError("need start >= 0 and 0 < min_step <= step")
    if not 1 <= n_average <= n_reversals:
        raise ValueError("need 1 <= n_average <= n_reversals")
    if n_tracks < 1:
        raise ValueError("n_tracks must be >= 1")
    u = _unit(direction)
    revs, ests, flags = [], [], []
    total = 0
    for t in range(n_tracks):
        r, n = _track(profile, reference, u, rule, target_p, start, step, min_step,
                      n_reversals, max_trials, t, position)
        revs.append(tuple(r))
        total += n
        ests.append(float(np.mean(r[-n_average:])) if r else math.nan)
        if len(r) < n_reversals:
            flags.append(f"track {t}: no convergence after {max_trials} trials "
                         f"({len(r)} reversals)")
    est = float(np.nanmean(ests)) if np.isfinite(ests).any() else math.nan
    return StaircaseResult(est, tuple(revs), total, not flags, target_p, tuple(ests),
                           "; ".join(flags))


def analytic_threshold(profile: SubjectProfile, reference: FormantPoint, direction,
                       rule: DifferenceRule = DifferenceRule(), target_p: float = 0.5) -> float:
    """Distance along ``direction`` where the Gaussian noise model gives
    ``P(different) = target_p`` between productions of the noise-free
    targets (non-directional rule only)."""
    if rule.directional:
        raise ValueError("closed form only for the non-directional rule")
    u = _unit(direction)
    thr = (rule.f1_threshold, rule.f2_threshold)
    t0 = intended_target(profile, reference)

    def excess(d):
        t = intended_target(profile, _step_point(reference, u, d))
        return difference_probability((t.f1 - t0.f1, t.f2 - t0.f2),
                                      profile.production_noise, thr) - target_p

    if excess(0.0) >= 0:
        raise ValueError("target_p is not above the same-stimulus difference rate")
    hi = 25.0
    while True:
        try:
            if excess(hi) > 0:
                break
        except ValueError:
            raise ValueError("target_p not reached inside the valid formant region") from None
        hi *= 2
    return float(optimize.brentq(excess, 0.0, hi, xtol=1e-9))


def run_staircases(cfg: ExperimentConfig, run_dir: str) -> list[str]:
    """One staircase per configured subject; writes ``staircase.csv``."""
    opts = dict(cfg.staircase)
    a, b = cfg.endpoints
    ref_id = int(opts.pop("reference_stim", (cfg.n_stimuli + 1) // 2))
    target_p = float(opts.pop("target_p", 0.5))
    cont = build_parametric_continuum(a, b, cfg.n_stimuli, render=False)
    reference = cont.target(ref_id)
    u = _unit(b.mel - a.mel)
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, "staircase.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "reference_stim", "target_p", "distance_mels", "n_trials",
                    "n_reversals", "converged", "reversals", "flags"])
        for p in cfg.resolved_subjects():
            r = adaptive_step_search(p, reference, u, cfg.rule, target_p,
                                     position=(ref_id, float(np.mean(cont.mel_gaps()))), **opts)
            w.writerow([p.name, ref_id, target_p, _num(r.distance), r.n_trials,
                        sum(map(len, r.reversals)), int(r.converged),
                        " | ".join(" ".join(f"{v:.4f}" for v in t) for t in r.reversals),
                        r.flags])
    return [os.path.relpath(path, run_dir)]
