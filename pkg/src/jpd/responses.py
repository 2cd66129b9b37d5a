"""Mimicry response records and their CSV form.

Simulated responses and responses measured from recorded audio share one
CSV layout, so everything downstream of the response file is agnostic to
where the formant values came from.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass

from .units import FormantPoint

RESPONSE_FIELDS = ["token", "subject", "stimulus_id", "repetition", "order",
                   "time", "f1", "f2", "f0", "flags"]

_TOKEN_RE = re.compile(r"^(?P<subject>.+)_s(?P<stim>[+-]?\d+)_r(?P<rep>\d+)$")


@dataclass(frozen=True)
class MimicryResponse:
    subject: str
    stimulus_id: int
    repetition: int
    produced: FormantPoint
    order: int = -1
    time: float = math.nan
    f0: float = math.nan
    flags: str = ""

    @property
    def token(self) -> str:
        return token_name(self.subject, self.stimulus_id, self.repetition)


def token_name(subject: str, stimulus_id: int, repetition: int) -> str:
    return f"{subject}_s{stimulus_id:+03d}_r{repetition:02d}"


def parse_token_name(token: str):
    """``(subject, stimulus_id, repetition)`` from a token name, or ``None``."""
    m = _TOKEN_RE.match(token)
    if not m:
        return None
    return m["subject"], int(m["stim"]), int(m["rep"])


def _fmt(v, spec):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else format(v, spec)


def write_responses(path: str, responses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESPONSE_FIELDS)
        for r in responses:
            w.writerow([r.token, r.subject, r.stimulus_id, r.repetition, r.order,
                        _fmt(r.time, ".5f"), f"{r.produced.f1:.3f}", f"{r.produced.f2:.3f}",
                        _fmt(r.f0, ".3f"), r.flags])


def read_responses(path: str, skip_flagged: bool = True) -> list[MimicryResponse]:
    """Read a response CSV. Rows without formant values are dropped, as are
    rows carrying flags when ``skip_flagged`` is set."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if not row["f1"] or not row["f2"]:
                continue
            if skip_flagged and row.get("flags"):
                continue
            subject, stim, rep = row["subject"], row["stimulus_id"], row["repetition"]
            if not subject or stim == "":
                parsed = parse_token_name(row["token"])
                if parsed is None:
                    raise ValueError(f"cannot tell subject/stimulus of token {row['token']!r}")
                subject, stim, rep = parsed
            out.append(MimicryResponse(
                subject=str(subject), stimulus_id=int(stim), repetition=int(rep),
                produced=FormantPoint(float(row["f1"]), float(row["f2"])),
                order=int(row["order"]) if row.get("order") else -1,
                time=float(row["time"]) if row.get("time") else math.nan,
                f0=float(row["f0"]) if row.get("f0") else math.nan,
                flags=row.get("flags") or ""))
    return out
