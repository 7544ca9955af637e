"""Word error rate and the derived adaptation metrics.

"Words" here are whole vocabulary tokens. WER uses unit-cost Levenshtein
alignment; ties between one substitution and an insert+delete pair go to
the substitution (fewer edit operations).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median

from .errors import ContractError, DomainError


@dataclass
class UttScore:
    id: str
    ref: list[int]
    hyp: list[int]
    sub: int
    dele: int
    ins: int

    @property
    def edits(self) -> int:
        return self.sub + self.dele + self.ins

    @property
    def wer(self) -> float:
        return 100.0 * self.edits / len(self.ref)


def wer(ref: list[int], hyp: list[int], utt_id: str = "") -> UttScore:
    """Minimum-edit alignment of ``hyp`` against non-empty ``ref``."""
    if not ref:
        raise DomainError("WER is undefined for an empty reference")
    m, n = len(ref), len(hyp)
    # cells hold (cost, sub, del, ins); candidate order encodes the tie-break
    row = [(j, 0, 0, j) for j in range(n + 1)]
    for i in range(1, m + 1):
        prev = row
        row = [(i, 0, i, 0)] + [None] * n
        ri = ref[i - 1]
        for j in range(1, n + 1):
            dc, ds, dd, di = prev[j - 1]
            hit = 0 if ri == hyp[j - 1] else 1
            best = (dc + hit, ds + hit, dd, di)
            up = prev[j]
            if up[0] + 1 < best[0]:
                best = (up[0] + 1, up[1], up[2] + 1, up[3])
            left = row[j - 1]
            if left[0] + 1 < best[0]:
                best = (left[0] + 1, left[1], left[2], left[3] + 1)
            row[j] = best
    _, sub, dele, ins = row[n]
    return UttScore(id=utt_id, ref=list(ref), hyp=list(hyp), sub=sub, dele=dele, ins=ins)


@dataclass
class EvalReport:
    per_utterance: list[UttScore] = field(default_factory=list)

    def add(self, score: UttScore) -> None:
        self.per_utterance.append(score)

    @property
    def counts(self) -> dict[str, int]:
        return {
            "sub": sum(s.sub for s in self.per_utterance),
            "del": sum(s.dele for s in self.per_utterance),
            "ins": sum(s.ins for s in self.per_utterance),
            "ref_len": sum(len(s.ref) for s in self.per_utterance),
        }

    @property
    def wer(self) -> float:
        c = self.counts
        if c["ref_len"] == 0:
            raise DomainError("report has no reference tokens")
        return 100.0 * (c["sub"] + c["del"] + c["ins"]) / c["ref_len"]

    def to_dict(self) -> dict:
        return {
            "per_utterance": [
                {"id": s.id, "ref": s.ref, "hyp": s.hyp, "sub": s.sub,
                 "del": s.dele, "ins": s.ins, "wer": s.wer}
                for s in self.per_utterance
            ],
            "counts": self.counts,
            "wer": self.wer,
        }


def gamma(wer_unadapted: float, wer_adapted: float) -> float:
    """Relative WER improvement of an adapted model over the unadapted base."""
    if wer_unadapted <= 0:
        raise DomainError(f"unadapted WER must be > 0, got {wer_unadapted}")
    return (wer_unadapted - wer_adapted) / wer_unadapted


def delta(wer_adapters: float, wer_finetuned: float) -> float:
    """Relative WER gap of adapters vs full fine-tuning; negative when adapters win."""
    if wer_finetuned <= 0:
        raise DomainError(f"fine-tuned WER must be > 0, got {wer_finetuned}")
    return (wer_adapters - wer_finetuned) / wer_finetuned


def aggregate(values: list[float], mode: str) -> float:
    if not values:
        raise ContractError("aggregate of an empty list")
    if mode == "median_over_speakers":
        return float(median(values))
    if mode == "mean_over_accents":
        return float(sum(values) / len(values))
    raise ContractError(f"unknown aggregation mode {mode!r}")


@dataclass
class AdaptationComparison:
    wer_unadapted: float
    wer_adapted: float
    wer_finetuned: float

    @property
    def gamma_adapted(self) -> float:
        return gamma(self.wer_unadapted, self.wer_adapted)

    @property
    def gamma_finetuned(self) -> float:
        return gamma(self.wer_unadapted, self.wer_finetuned)

    @property
    def delta_value(self) -> float:
        return delta(self.wer_adapted, self.wer_finetuned)


def write_report(report: EvalReport, txt_path: str | Path, json_path: str | Path) -> None:
    """Line-oriented report plus a JSON twin with the same content."""
    lines = [f"{s.id}\twer={s.wer:.4f}\tsub={s.sub}\tdel={s.dele}\tins={s.ins}"
             f"\tref_len={len(s.ref)}" for s in report.per_utterance]
    c = report.counts
    lines.append(f"AGGREGATE\twer={report.wer:.4f}\tsub={c['sub']}\tdel={c['del']}"
                 f"\tins={c['ins']}\tref_len={c['ref_len']}")
    Path(txt_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                               encoding="utf-8")


def read_report_wer(json_path: str | Path) -> float:
    return float(json.loads(Path(json_path).read_text(encoding="utf-8"))["wer"])
