"""Command-line entry point: ``fsmad <command> [options]``.

Every command writes into ``<out>/<config-hash>/<command>/`` and finishes by
writing ``run_manifest.json`` there. The run directory is printed on stdout.

Exit codes: 0 success, 2 config or validation error, 3 I/O error,
4 numeric or infeasibility error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    InfeasibleError,
    ManifestError,
    SyntheticSpec,
    ValidationError,
    generate_synthetic,
    load_manifest,
    write_manifest,
)
from .inference import grid_csv, scores_csv, template_grid_search
from .loss import MiningError
from .model import LeakageError, ModelParams, forward, load_checkpoint, save_checkpoint, train
from .projection import TsneConfig, export_projection, tsne_project
from .protocol import (
    ExperimentConfig,
    StageError,
    config_from_dict,
    evaluate_params,
    few_shot_sweep,
    load_config,
    prepare_data,
    run_stage,
    sweep_csv,
)

log = logging.getLogger("fsmad")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

DEFAULT_KS = "0,5,10,15,20"
DEFAULT_GRID = "1,2,4,8,12"


@dataclass
class RunManifest:
    command: str
    config_hash: str
    version: str
    seeds: dict
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    duration_seconds: float = 0.0

    def write(self, run_dir: Path) -> Path:
        path = run_dir / "run_manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def exit_code_for(exc: BaseException) -> int:
    while isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, InfeasibleError):
        return EXIT_NUMERIC
    if isinstance(exc, (ValidationError, ManifestError, MiningError, json.JSONDecodeError, KeyError)):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (ArithmeticError, LeakageError)):
        return EXIT_NUMERIC
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return 1


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def dict_hash(d: dict) -> str:
    canonical = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def parse_int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _write(path: Path, text: str) -> str:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path.name


class Run:
    """Bookkeeping shared by every command: run directory, inputs, outputs, timing."""

    def __init__(self, command: str, out: str, config_hash: str, seeds: dict):
        self.dir = Path(out) / config_hash / command
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command, config_hash, __version__, seeds)
        self._start = time.perf_counter()

    def input(self, path: str | Path) -> None:
        self.manifest.inputs[str(path)] = file_digest(path)

    def output(self, name: str, text: str) -> Path:
        path = self.dir / name
        self.manifest.outputs.append(_write(path, text))
        return path

    def finish(self) -> Path:
        self.manifest.duration_seconds = round(time.perf_counter() - self._start, 6)
        self.manifest.write(self.dir)
        return self.dir


# ---------------------------------------------------------------------------
# Config helpers


def _require_config(args) -> Path:
    if not args.config:
        raise ValidationError(f"'{args.command}' needs --config")
    return Path(args.config)


def _experiment_config(args) -> ExperimentConfig:
    cfg = load_config(_require_config(args))
    if args.seed is not None:
        raw = dict(cfg.raw)
        raw["seed"] = args.seed
        cfg = config_from_dict(raw, cfg.base_dir)
    return cfg


def _experiment_run(command: str, args, cfg: ExperimentConfig) -> Run:
    seeds = {
        "seed": cfg.seed,
        "train": cfg.train.seed,
        "templates": cfg.template_seed,
        "fewshot": cfg.fewshot_seed,
    }
    run = Run(command, args.out, cfg.config_hash(), seeds)
    run.input(args.config)
    for p in (cfg.train_set, cfg.test_set):
        if p:
            path = cfg.resolve(p)
            if path.exists():
                run.input(path)
    return run


def _checkpoint_or_train(args, cfg: ExperimentConfig, run: Run, data) -> ModelParams:
    if args.checkpoint:
        run.input(args.checkpoint)
        return run_stage("checkpoint", load_checkpoint, args.checkpoint)
    log.info("no --checkpoint given; training from the config")
    params, _ = run_stage("train", train, data.train, cfg.train, exclude_ids=frozenset(data.test.ids))
    return params


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(args) -> Path:
    path = _require_config(args)
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise ValidationError("synthetic spec must be a JSON object")
    if args.seed is not None:
        d = {**d, "seed": args.seed}
    spec = SyntheticSpec.from_dict(d)
    run = Run("generate", args.out, dict_hash(spec.to_dict()), {"seed": spec.seed})
    run.input(path)
    source, target = generate_synthetic(spec)
    for name, ds in (("source.csv", source), ("target.csv", target)):
        write_manifest(ds, run.dir / name)
        run.manifest.outputs.append(name)
    log.info("wrote %d source and %d target samples", len(source), len(target))
    return run.finish()


def cmd_train(args) -> Path:
    cfg = _experiment_config(args)
    run = _experiment_run("train", args, cfg)
    data = run_stage("data", prepare_data, cfg)
    params, history = run_stage("train", train, data.train, cfg.train, exclude_ids=frozenset(data.test.ids))
    save_checkpoint(params, run.dir / "checkpoint.json")
    run.manifest.outputs.append("checkpoint.json")
    lines = ["epoch,loss"] + [f"{i},{loss!r}" for i, loss in enumerate(history)]
    run.output("history.csv", "\n".join(lines) + "\n")
    log.info("trained %d epochs, final loss %.6g", len(history), history[-1] if history else float("nan"))
    return run.finish()


def cmd_evaluate(args) -> Path:
    cfg = _experiment_config(args)
    run = _experiment_run("evaluate", args, cfg)
    data = run_stage("data", prepare_data, cfg)
    params = _checkpoint_or_train(args, cfg, run, data)
    _, probes, report = evaluate_params(cfg, params, data)
    th = cfg.inference.threshold if cfg.inference.threshold is not None else report.eer_threshold
    run.output(Path(cfg.report_path or "report.json").name, report.to_json())
    run.output("det.csv", report.det_csv())
    run.output("scores.csv", scores_csv(probes, th))
    log.info("d_eer=%.4f bpcer10=%.4f bpcer20=%.4f", report.d_eer, report.bpcer10, report.bpcer20)
    return run.finish()


def cmd_sweep(args) -> Path:
    cfg = _experiment_config(args)
    run = _experiment_run("sweep", args, cfg)
    rows = few_shot_sweep(cfg, args.ks)
    run.output("sweep.csv", sweep_csv(rows))
    return run.finish()


def cmd_grid_templates(args) -> Path:
    cfg = _experiment_config(args)
    run = _experiment_run("grid-templates", args, cfg)
    data = run_stage("data", prepare_data, cfg)
    params = _checkpoint_or_train(args, cfg, run, data)
    # the held-out test side doubles as the validation set for the grid
    rows = run_stage(
        "templates", template_grid_search, params, data.train.bonafide(), data.test, args.grid, cfg.template_seed
    )
    run.output("grid.csv", grid_csv(rows))
    return run.finish()


def cmd_project(args) -> Path:
    seed = args.tsne_seed if args.tsne_seed is not None else (args.seed or 0)
    tsne = TsneConfig(perplexity=args.perplexity, iterations=args.iterations, learning_rate=args.learning_rate, seed=seed)
    key = {
        "checkpoint": file_digest(args.checkpoint),
        "manifest": file_digest(args.manifest),
        "tsne": asdict(tsne),
    }
    params = load_checkpoint(args.checkpoint)
    ds = load_manifest(args.manifest)
    if ds.dim != params.input_dim:
        raise ValidationError(f"checkpoint expects {params.input_dim}-d input but the manifest has {ds.dim}")
    tsne.check_feasible(len(ds))
    run = Run("project", args.out, dict_hash(key), {"tsne": seed})
    run.input(args.checkpoint)
    run.input(args.manifest)
    points = tsne_project(forward(params, ds.vectors), tsne)
    if not np.all(np.isfinite(points)):
        raise FloatingPointError("t-SNE produced non-finite coordinates")
    meta = [(ds.ids[i], str(ds.labels[i]), ds.domains[i]) for i in range(len(ds))]
    export_projection(points, meta, run.dir / "projection.csv")
    run.manifest.outputs.append("projection.csv")
    return run.finish()


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "grid-templates": cmd_grid_templates,
    "project": cmd_project,
}


def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config (spec for generate)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output root directory")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="fsmad", description="Few-shot morphing attack detection toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", default=None, help="JSON config (spec for generate)")
    parser.add_argument("--out", default="runs", help="output root directory (default: runs)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write synthetic source/target manifests")
    sub.add_parser("train", parents=[common], help="train the embedding head")
    for name, text in (("evaluate", "score the test side and write the report"), ("grid-templates", "template count grid")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="trained weights; trains from the config when omitted")
        if name == "grid-templates":
            p.add_argument("--grid", type=parse_int_list, default=parse_int_list(DEFAULT_GRID),
                           help=f"comma-separated template counts (default: {DEFAULT_GRID})")
    p = sub.add_parser("sweep", parents=[common], help="few-shot injection sweep")
    p.add_argument("--ks", type=parse_int_list, default=parse_int_list(DEFAULT_KS),
                   help=f"comma-separated samples per class (default: {DEFAULT_KS})")
    p = sub.add_parser("project", parents=[common], help="t-SNE projection of embedded manifest vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--learning-rate", type=float, default=200.0)
    p.add_argument("--tsne-seed", type=int, default=None, help="defaults to --seed, then 0")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            run_dir = COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an exit code
        code = exit_code_for(exc)
        if code == 1:
            log.exception("unexpected failure")
        print(f"fsmad {args.command}: error: {exc}", file=sys.stderr)
        return code
    print(run_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
