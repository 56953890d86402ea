"""Template-averaged distance scoring and threshold decisions."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Dataset, InfeasibleError, ValidationError, derive_seed, format_float, make_rng
from .metrics import ScoreSet, det_and_operating_points
from .model import ModelParams, forward


@dataclass(frozen=True, eq=False)
class TemplateSet:
    templates: Dataset

    def __post_init__(self):
        if len(self.templates) == 0:
            raise ValidationError("template set is empty")
        if not all(c.is_bonafide for c in self.templates.labels):
            raise ValidationError("templates must all be bona fide")

    @property
    def count(self) -> int:
        return len(self.templates)


@dataclass(frozen=True)
class InferenceConfig:
    threshold: float | None = None
    template_seed: int = 0
    n_templates: int = 4

    def __post_init__(self):
        if self.n_templates < 1:
            raise ValidationError("n_templates must be >= 1")


@dataclass(frozen=True)
class ProbeScore:
    id: str
    label: str
    score: float


def select_templates(train_bonafide: Dataset, n: int, seed: int) -> TemplateSet:
    """Draw ``n`` distinct bona fide references uniformly at random."""
    pool = [i for i, c in enumerate(train_bonafide.labels) if c.is_bonafide]
    if n < 1:
        raise ValidationError("need at least one template")
    if n > len(pool):
        raise InfeasibleError(f"requested {n} templates but only {len(pool)} bona fide samples are available")
    picked = make_rng(seed).choice(len(pool), size=n, replace=False)
    return TemplateSet(train_bonafide.subset([pool[i] for i in picked], "templates"))


def _embedded_templates(params: ModelParams, T: TemplateSet) -> np.ndarray:
    return forward(params, T.templates.vectors)


def _avg_sq_distance(probe_emb: np.ndarray, template_emb: np.ndarray) -> np.ndarray:
    diff = probe_emb[:, None, :] - template_emb[None, :, :]
    return np.einsum("ptk,ptk->pt", diff, diff).mean(axis=1)


def score(params: ModelParams, probe, T: TemplateSet) -> float:
    """Mean squared embedding distance between ``probe`` and every template."""
    if T.count == 0:
        raise ValidationError("template set is empty")
    e = forward(params, np.asarray(probe, dtype=np.float64)[None, :])
    return float(_avg_sq_distance(e, _embedded_templates(params, T))[0])


def decide(phi_avg: float, th: float) -> int:
    """1 (bona fide) when the averaged distance is strictly below ``th``, else 0 (attack)."""
    return 1 if phi_avg < th else 0


def score_probes(params: ModelParams, test: Dataset, T: TemplateSet) -> list[ProbeScore]:
    if len(test) == 0:
        raise ValidationError("test set is empty")
    # Templates are embedded once; the per-probe mean keeps a fixed summation order.
    t_emb = _embedded_templates(params, T)
    phi = _avg_sq_distance(forward(params, test.vectors), t_emb)
    return [ProbeScore(test.ids[i], str(test.labels[i]), float(phi[i])) for i in range(len(test))]


def to_score_set(test: Dataset, probes: Sequence[ProbeScore]) -> ScoreSet:
    out = ScoreSet()
    for lab, p in zip(test.labels, probes):
        if lab.is_bonafide:
            out.bonafide_scores.append(p.score)
        else:
            out.attack_scores.setdefault(lab.tool, []).append(p.score)
    return out


def score_dataset(params: ModelParams, test: Dataset, T: TemplateSet) -> ScoreSet:
    return to_score_set(test, score_probes(params, test, T))


def scores_csv(probes: Sequence[ProbeScore], th: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "score", "decision"])
    for p in probes:
        w.writerow([p.id, p.label, format_float(p.score), decide(p.score, th)])
    return buf.getvalue()


@dataclass(frozen=True)
class GridRow:
    n_templates: int
    d_eer: float
    bpcer10: float
    is_best: bool = False


def template_grid_search(
    params: ModelParams, train_bonafide: Dataset, validation: Dataset, grid: Sequence[int], seed: int
) -> list[GridRow]:
    """Evaluate each template count in ``grid`` and flag the lowest D-EER.

    Ties on D-EER go to the smaller template count. Each row draws its
    templates with the same ``seed`` so a row matches a standalone run with
    that template count.
    """
    if not grid:
        raise ValidationError("template grid is empty")
    rows = []
    for n in grid:
        T = select_templates(train_bonafide, int(n), seed)
        report = det_and_operating_points(score_dataset(params, validation, T))
        rows.append(GridRow(int(n), report.d_eer, report.bpcer10))
    best = min(range(len(rows)), key=lambda i: (rows[i].d_eer, rows[i].n_templates, i))
    return [GridRow(r.n_templates, r.d_eer, r.bpcer10, i == best) for i, r in enumerate(rows)]


def grid_csv(rows: Sequence[GridRow]) -> str:
    lines = ["n_templates,d_eer,bpcer10,is_best"]
    lines += [f"{r.n_templates},{format_float(r.d_eer)},{format_float(r.bpcer10)},{int(r.is_best)}" for r in rows]
    return "\n".join(lines) + "\n"


def template_draw_scores(
    params: ModelParams, probe, pool: Dataset, n: int, draws: int, seed: int
) -> np.ndarray:
    """Averaged distance of one probe under ``draws`` independent template draws of size ``n``."""
    return np.array([score(params, probe, select_templates(pool, n, derive_seed(seed, "draw", d))) for d in range(draws)])
