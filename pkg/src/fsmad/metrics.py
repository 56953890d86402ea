"""PAD evaluation metrics in the ISO/IEC 30107-3 style.

Scores are distances: lower means more bona-fide-like, and a sample is
classified as an attack when ``score >= threshold``. Every rate is returned
as a percentage.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class Pooling(str, enum.Enum):
    POOLED = "pooled"
    WORST_CASE = "worstcase"


@dataclass
class ScoreSet:
    bonafide_scores: list[float] = field(default_factory=list)
    attack_scores: dict[str, list[float]] = field(default_factory=dict)

    def pooled_attacks(self) -> np.ndarray:
        if not self.attack_scores:
            return np.zeros(0)
        return np.concatenate([np.asarray(self.attack_scores[t], dtype=np.float64) for t in sorted(self.attack_scores)])


@dataclass
class Confusion:
    bonafide_as_bonafide: int
    bonafide_as_attack: int
    attack_as_bonafide: int
    attack_as_attack: int


@dataclass
class EvalReport:
    d_eer: float
    eer_threshold: float
    bpcer10: float
    bpcer20: float
    det_points: list[tuple[float, float]]
    det_thresholds: list[float]
    per_tool_apcer_at_eer: dict[str, float]
    confusion: Confusion
    pooling: str = Pooling.POOLED.value

    def to_dict(self) -> dict:
        d = asdict(self)
        d["det_points"] = [list(p) for p in self.det_points]
        d["eer_threshold"] = _json_float(self.eer_threshold)
        d["det_thresholds"] = [_json_float(t) for t in self.det_thresholds]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def det_csv(self) -> str:
        lines = ["threshold,apcer,bpcer"]
        for th, (a, b) in zip(self.det_thresholds, self.det_points):
            lines.append(f"{_fmt(th)},{_fmt(a)},{_fmt(b)}")
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    if np.isposinf(x):
        return "inf"
    if np.isneginf(x):
        return "-inf"
    return format(float(x), ".17g")


def _json_float(x: float):
    return float(x) if np.isfinite(x) else _fmt(x)


def _as_array(scores, what: str) -> np.ndarray:
    a = np.asarray(scores, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError(f"{what} scores are empty")
    return a


def apcer(attack_scores: Sequence[float], th: float) -> float:
    """Percentage of attacks accepted as bona fide at threshold ``th``."""
    a = _as_array(attack_scores, "attack")
    accepted = a.size - int(np.count_nonzero(a >= th))
    return 100.0 * accepted / a.size


def bpcer(bonafide_scores: Sequence[float], th: float) -> float:
    """Percentage of bona fide samples rejected as attacks at threshold ``th``."""
    b = _as_array(bonafide_scores, "bona fide")
    return 100.0 * (b >= th).sum() / b.size


def worst_case_apcer(scores: ScoreSet, th: float) -> tuple[str, float]:
    if not scores.attack_scores:
        raise ValueError("no attack species in score set")
    best_tool, best = None, -1.0
    for tool in sorted(scores.attack_scores):
        rate = apcer(scores.attack_scores[tool], th)
        if rate > best:
            best_tool, best = tool, rate
    return best_tool, best


def _rate_curve(sorted_scores: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Fraction (in percent) of scores strictly below each threshold."""
    return 100.0 * np.searchsorted(sorted_scores, thresholds, side="left") / sorted_scores.size


def sweep_thresholds(scores: ScoreSet) -> np.ndarray:
    """Distinct observed scores in increasing order, then ``+inf``.

    The smallest observed score classifies everything as attack (the same
    partition as ``-inf``) and ``+inf`` accepts everything, so these
    ``m + 1`` thresholds reach every distinct operating point.
    """
    every = np.concatenate([np.asarray(scores.bonafide_scores, dtype=np.float64), scores.pooled_attacks()])
    return np.append(np.unique(every), np.inf)


def det_curve(scores: ScoreSet, pooling: Pooling = Pooling.POOLED):
    """APCER and BPCER at every sweep threshold.

    Returns:
        ``(thresholds, apcer, bpcer)`` arrays. APCER is non-decreasing and
        BPCER non-increasing along the sweep.
    """
    bf = np.sort(_as_array(scores.bonafide_scores, "bona fide"))
    if not scores.attack_scores:
        raise ValueError("attack scores are empty")
    th = sweep_thresholds(scores)
    bpcer_curve = 100.0 - _rate_curve(bf, th)
    if Pooling(pooling) is Pooling.POOLED:
        apcer_curve = _rate_curve(np.sort(_as_array(scores.pooled_attacks(), "attack")), th)
    else:
        per_tool = [_rate_curve(np.sort(_as_array(scores.attack_scores[t], "attack")), th) for t in sorted(scores.attack_scores)]
        apcer_curve = np.max(per_tool, axis=0)
    return th, apcer_curve, bpcer_curve


def equal_error_rate(apcer_curve: np.ndarray, bpcer_curve: np.ndarray) -> tuple[float, int]:
    """D-EER from a sweep, interpolating linearly across the crossing.

    Returns:
        ``(eer, index)`` where ``index`` is the sweep position minimising
        ``|APCER - BPCER|`` (lowest index on ties).
    """
    diff = apcer_curve - bpcer_curve
    idx = int(np.argmin(np.abs(diff)))
    if diff[idx] == 0:
        return float(apcer_curve[idx]), idx
    # diff runs from -100 to +100, so a sign change always exists
    j = int(np.flatnonzero(diff < 0)[-1])
    a0, a1 = apcer_curve[j], apcer_curve[j + 1]
    b0, b1 = bpcer_curve[j], bpcer_curve[j + 1]
    lam = (b0 - a0) / ((a1 - a0) - (b1 - b0))
    return float(a0 + lam * (a1 - a0)), idx


def bpcer_at_apcer(apcer_curve: np.ndarray, bpcer_curve: np.ndarray, target: float) -> float:
    """Smallest BPCER over thresholds whose APCER does not exceed ``target``."""
    ok = apcer_curve <= target
    return float(bpcer_curve[ok].min())


def det_and_operating_points(scores: ScoreSet, pooling: Pooling = Pooling.POOLED) -> EvalReport:
    pooling = Pooling(pooling)
    th, ap, bp = det_curve(scores, pooling)
    eer, idx = equal_error_rate(ap, bp)
    eer_th = float(th[idx])
    per_tool = {t: apcer(scores.attack_scores[t], eer_th) for t in sorted(scores.attack_scores)}
    bf = np.asarray(scores.bonafide_scores, dtype=np.float64)
    att = scores.pooled_attacks()
    confusion = Confusion(
        bonafide_as_bonafide=int((bf < eer_th).sum()),
        bonafide_as_attack=int((bf >= eer_th).sum()),
        attack_as_bonafide=int((att < eer_th).sum()),
        attack_as_attack=int((att >= eer_th).sum()),
    )
    return EvalReport(
        d_eer=eer,
        eer_threshold=eer_th,
        bpcer10=bpcer_at_apcer(ap, bp, 10.0),
        bpcer20=bpcer_at_apcer(ap, bp, 5.0),
        det_points=[(float(a), float(b)) for a, b in zip(ap, bp)],
        det_thresholds=[float(t) for t in th],
        per_tool_apcer_at_eer=per_tool,
        confusion=confusion,
        pooling=pooling.value,
    )


def write_report(report: EvalReport, json_path: str | Path, det_csv_path: str | Path | None = None) -> None:
    Path(json_path).write_text(report.to_json(), encoding="utf-8")
    if det_csv_path is not None:
        Path(det_csv_path).write_text(report.det_csv(), encoding="utf-8")


def score_set_from_mapping(bonafide: Sequence[float], attacks: Mapping[str, Sequence[float]]) -> ScoreSet:
    return ScoreSet([float(s) for s in bonafide], {t: [float(s) for s in v] for t, v in attacks.items()})
