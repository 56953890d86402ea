"""Experiment orchestration: cross-database runs and the few-shot injection sweep."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .core import (
    Dataset,
    InfeasibleError,
    SyntheticSpec,
    ValidationError,
    derive_seed,
    format_float,
    generate_synthetic,
    load_manifest,
    make_rng,
    split_subject_disjoint,
)
from .inference import InferenceConfig, ProbeScore, TemplateSet, score_probes, select_templates, to_score_set
from .loss import LossConfig
from .metrics import EvalReport, Pooling, det_and_operating_points
from .model import ModelParams, TrainConfig, VectorAugment, train

log = logging.getLogger(__name__)

MODES = ("cross", "in_domain")


class StageError(RuntimeError):
    """Wraps a failure with the pipeline stage it came from."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")


@dataclass(frozen=True)
class FewShotSpec:
    k_per_class: int = 0
    seed: int | None = None

    def __post_init__(self):
        if self.k_per_class < 0:
            raise ValidationError("k_per_class must be >= 0")


def inject_few_shot(train_set: Dataset, test_set: Dataset, k: int, seed: int) -> tuple[Dataset, Dataset]:
    """Move ``k`` random samples of every test class into the training set.

    Moved samples keep their domain tag. Each class must keep at least one
    test sample.
    """
    if k < 0:
        raise ValidationError("k_per_class must be >= 0")
    if k == 0:
        return train_set, test_set
    rng = make_rng(seed)
    moved: list[int] = []
    for c in test_set.classes():
        idx = test_set.indices_of(c)
        if len(idx) <= k:
            raise InfeasibleError(f"class {c} has {len(idx)} test samples; need more than k={k}")
        moved.extend(int(i) for i in rng.choice(idx, size=k, replace=False))
    moved_set = set(moved)
    keep = [i for i in range(len(test_set)) if i not in moved_set]
    new_train = train_set.concat(test_set.subset(moved), train_set.name)
    return new_train, test_set.subset(keep)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one run.

    Data comes either from manifests (``train_set``/``test_set``) or from an
    inline ``synthetic`` spec whose source domain is the training side and
    whose target domain is the test side. In ``cross`` mode the training
    portion of the train domain is paired with the whole test domain;
    ``in_domain`` splits the train domain alone.
    """

    train_set: str | None = None
    test_set: str | None = None
    synthetic: SyntheticSpec | None = None
    mode: str = "cross"
    train_fraction: float = 0.6
    seed: int = 0
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    inference: InferenceConfig = InferenceConfig()
    fewshot: FewShotSpec = FewShotSpec()
    pooling: Pooling = Pooling.POOLED
    report_path: str | None = "report.json"
    base_dir: str = field(default=".", compare=False)
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.synthetic is None and self.train_set is None:
            raise ValidationError("config needs either 'synthetic' or 'train_set'")
        if self.synthetic is None and self.mode == "cross" and self.test_set is None:
            raise ValidationError("cross mode with manifests needs 'test_set'")
        if not 0 < self.train_fraction < 1:
            raise ValidationError("train_fraction must lie in (0, 1)")

    # -- seeds -------------------------------------------------------------
    @property
    def template_seed(self) -> int:
        return self.inference.template_seed

    @property
    def fewshot_seed(self) -> int:
        return self.fewshot.seed if self.fewshot.seed is not None else derive_seed(self.seed, "fewshot")

    def injection_seed(self, k: int) -> int:
        return derive_seed(self.fewshot_seed, "k", k)

    def with_k(self, k: int) -> "ExperimentConfig":
        return replace(self, fewshot=replace(self.fewshot, k_per_class=int(k)))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = dict(self.raw)
        raw["seed"] = int(seed)
        return config_from_dict(raw, self.base_dir)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def config_hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _section(d: dict, key: str) -> dict:
    sec = d.get(key) or {}
    if not isinstance(sec, dict):
        raise ValidationError(f"'{key}' must be an object")
    return sec


def config_from_dict(d: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from its JSON form.

    Per-stage seeds left out of the document are derived from the top-level
    ``seed``; explicitly given ones win.
    """
    if not isinstance(d, dict):
        raise ValidationError("experiment config must be a JSON object")
    try:
        seed = int(d.get("seed", 0))
        loss_d = _section(d, "loss")
        loss = LossConfig(float(loss_d.get("margin", 0.2)), loss_d.get("mining_mode", "semihard"))
        tr = _section(d, "train")
        aug = tr.get("vector_augment")
        train_cfg = TrainConfig(
            epochs=int(tr.get("epochs", 30)),
            identities_per_batch=int(tr.get("identities_per_batch", 8)),
            samples_per_identity=int(tr.get("samples_per_identity", 4)),
            loss=loss,
            learning_rate=float(tr.get("learning_rate", 1e-5)),
            seed=int(tr["seed"]) if "seed" in tr else derive_seed(seed, "train"),
            hidden=tuple(tr.get("hidden", (128,))),
            embedding_dim=int(tr.get("embedding_dim", 64)),
            l2_normalize_output=bool(tr.get("l2_normalize_output", True)),
            vector_augment=VectorAugment(float(aug.get("noise_sigma", 0.0)), float(aug.get("dropout_prob", 0.0)))
            if aug
            else None,
        )
        inf = _section(d, "inference")
        th = inf.get("threshold")
        inference = InferenceConfig(
            threshold=None if th is None else float(th),
            template_seed=int(inf["template_seed"]) if "template_seed" in inf else derive_seed(seed, "templates"),
            n_templates=int(inf.get("n_templates", 4)),
        )
        fs = _section(d, "fewshot")
        fewshot = FewShotSpec(int(fs.get("k_per_class", 0)), int(fs["seed"]) if "seed" in fs else None)
        synthetic = SyntheticSpec.from_dict(d["synthetic"]) if d.get("synthetic") is not None else None
        return ExperimentConfig(
            train_set=d.get("train_set"),
            test_set=d.get("test_set"),
            synthetic=synthetic,
            mode=d.get("mode", "cross"),
            train_fraction=float(d.get("train_fraction", 0.6)),
            seed=seed,
            loss=loss,
            train=train_cfg,
            inference=inference,
            fewshot=fewshot,
            pooling=Pooling(d.get("pooling", "pooled")),
            report_path=d.get("report_path", "report.json"),
            base_dir=str(base_dir),
            raw=json.loads(json.dumps(d)),
        )
    except ValidationError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ValidationError(f"invalid experiment config: {exc}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(d, path.parent)


# ---------------------------------------------------------------------------
# Pipeline


def load_domains(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic)
    source = load_manifest(cfg.resolve(cfg.train_set))
    target = load_manifest(cfg.resolve(cfg.test_set)) if cfg.test_set else None
    return source, target


@dataclass(frozen=True)
class PreparedData:
    train: Dataset
    test: Dataset


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    """Load, split and (optionally) inject few-shot samples."""
    source, target = load_domains(cfg)
    src_train, src_test = split_subject_disjoint(source, cfg.train_fraction, derive_seed(cfg.seed, "split", "train-domain"))
    if cfg.mode == "in_domain":
        train_set, test_set = src_train, src_test
    else:
        # the target domain is never trained on, so all of it is test data
        train_set, test_set = src_train, target
        shared = set(train_set.domains) & set(test_set.domains)
        if shared:
            raise ValidationError(f"cross-database mode needs disjoint domains; both sides contain {sorted(shared)}")
    k = cfg.fewshot.k_per_class
    train_set, test_set = inject_few_shot(train_set, test_set, k, cfg.injection_seed(k))
    return PreparedData(train_set, test_set)


@dataclass
class ExperimentResult:
    report: EvalReport
    params: ModelParams
    history: list[float]
    templates: TemplateSet
    probes: list[ProbeScore]
    data: PreparedData


def run_stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (ValueError, RuntimeError, OSError) as exc:
        raise StageError(name, exc) from exc


def evaluate_params(cfg: ExperimentConfig, params: ModelParams, data: PreparedData):
    templates = run_stage(
        "templates", select_templates, data.train.bonafide(), cfg.inference.n_templates, cfg.template_seed
    )
    if params.input_dim != data.test.dim:
        raise StageError("score", ValidationError(f"model input {params.input_dim} != data dimension {data.test.dim}"))
    probes = run_stage("score", score_probes, params, data.test, templates)
    report = run_stage("metrics", det_and_operating_points, to_score_set(data.test, probes), cfg.pooling)
    return templates, probes, report


def run_experiment(cfg: ExperimentConfig, run_dir: str | Path | None = None) -> ExperimentResult:
    """Inject, train, pick templates, score and evaluate; optionally persist the report."""
    data = run_stage("data", prepare_data, cfg)
    params, history = run_stage("train", train, data.train, cfg.train, exclude_ids=frozenset(data.test.ids))
    templates, probes, report = evaluate_params(cfg, params, data)
    if run_dir is not None and cfg.report_path:
        path = Path(run_dir) / cfg.report_path
        path.parent.mkdir(parents=True, exist_ok=True)
        run_stage("report", path.write_text, report.to_json(), encoding="utf-8")
    return ExperimentResult(report, params, history, templates, probes, data)


@dataclass(frozen=True)
class SweepRow:
    k: int
    d_eer: float
    bpcer10: float
    bpcer20: float


def few_shot_sweep(cfg: ExperimentConfig, ks: Sequence[int]) -> list[SweepRow]:
    """One full run per ``k``, in the given order. Stops at the first failing row."""
    if not ks:
        raise ValidationError("ks must not be empty")
    rows = []
    for k in ks:
        try:
            result = run_experiment(cfg.with_k(int(k)))
        except (StageError, ValidationError) as exc:
            raise StageError(f"sweep k={k}", exc) from exc
        r = result.report
        log.info("k=%d d_eer=%.3f bpcer10=%.3f bpcer20=%.3f", k, r.d_eer, r.bpcer10, r.bpcer20)
        rows.append(SweepRow(int(k), r.d_eer, r.bpcer10, r.bpcer20))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    lines = ["k,d_eer,bpcer10,bpcer20"]
    lines += [f"{r.k},{format_float(r.d_eer)},{format_float(r.bpcer10)},{format_float(r.bpcer20)}" for r in rows]
    return "\n".join(lines) + "\n"
