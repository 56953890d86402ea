"""End-to-end tests of the ``fsmad`` command line."""

import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fsmad.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, main
from fsmad.core import ClassLabel, Dataset, SyntheticSpec, generate_synthetic, load_manifest, write_manifest
from fsmad.metrics import EvalReport

SPEC = {"n_classes": 5, "dim": 16, "samples_per_class": 40, "cluster_spread": 0.2, "domain_shift": 3.0, "seed": 0}
EXPERIMENT = {
    "synthetic": SPEC,
    "seed": 0,
    "loss": {"margin": 1.0},
    "train": {"epochs": 3, "learning_rate": 1e-3, "identities_per_batch": 5, "samples_per_identity": 4,
              "hidden": [16], "embedding_dim": 8},
    "inference": {"n_templates": 4},
}


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out.strip(), err


def digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def exp_config(tmp_path):
    return write_json(tmp_path / "exp.json", EXPERIMENT)


@pytest.fixture
def trained(tmp_path, capsys, exp_config):
    code, out, _ = run(capsys, "--config", exp_config, "--out", tmp_path / "runs", "train")
    assert code == 0
    return Path(out) / "checkpoint.json"


class TestGenerate:
    def test_valid_spec(self, tmp_path, capsys):
        spec = write_json(tmp_path / "spec.json", SPEC)
        code, out, _ = run(capsys, "generate", "--config", spec, "--out", tmp_path / "o")
        assert code == 0
        run_dir = Path(out)
        assert load_manifest(run_dir / "source.csv").dim == 16
        assert len(load_manifest(run_dir / "target.csv")) == 200
        manifest = json.loads((run_dir / "run_manifest.json").read_text())
        assert manifest["outputs"] == ["source.csv", "target.csv"]
        assert manifest["config_hash"] == run_dir.parent.name

    def test_missing_field(self, tmp_path, capsys):
        bad = dict(SPEC)
        del bad["domain_shift"]
        code, _, err = run(capsys, "generate", "--config", write_json(tmp_path / "s.json", bad), "--out", tmp_path)
        assert code == EXIT_CONFIG
        assert "domain_shift" in err

    def test_same_spec_same_bytes(self, tmp_path, capsys):
        spec = write_json(tmp_path / "spec.json", SPEC)
        _, a, _ = run(capsys, "generate", "--config", spec, "--out", tmp_path / "a")
        _, b, _ = run(capsys, "generate", "--config", spec, "--out", tmp_path / "b")
        for name in ("source.csv", "target.csv"):
            assert (Path(a) / name).read_bytes() == (Path(b) / name).read_bytes()

    def test_seed_override_changes_run(self, tmp_path, capsys):
        spec = write_json(tmp_path / "spec.json", SPEC)
        _, a, _ = run(capsys, "generate", "--config", spec, "--out", tmp_path)
        _, b, _ = run(capsys, "generate", "--config", spec, "--out", tmp_path, "--seed", 5)
        assert a != b
        assert (Path(a) / "source.csv").read_bytes() != (Path(b) / "source.csv").read_bytes()

    def test_missing_config_file(self, tmp_path, capsys):
        code, _, _ = run(capsys, "generate", "--config", tmp_path / "absent.json", "--out", tmp_path)
        assert code == EXIT_IO


class TestTrain:
    def test_outputs(self, trained):
        rows = trained.with_name("history.csv").read_text().splitlines()
        assert rows[0] == "epoch,loss"
        assert len(rows) - 1 == EXPERIMENT["train"]["epochs"]
        assert json.loads(trained.read_text())["format"] == "fsmad-mlp"

    def test_unreadable_manifest(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"train_set": "missing.csv", "test_set": "missing2.csv"})
        code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path)
        assert code == EXIT_IO
        assert "data" in err

    def test_needs_config(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--out", tmp_path)
        assert code == EXIT_CONFIG
        assert "--config" in err


class TestEvaluate:
    def test_report_files(self, tmp_path, capsys, exp_config, trained):
        code, out, _ = run(capsys, "evaluate", "--config", exp_config, "--out", tmp_path / "runs",
                           "--checkpoint", trained)
        assert code == 0
        run_dir = Path(out)
        report = json.loads((run_dir / "report.json").read_text())
        assert set(EvalReport.__dataclass_fields__) <= set(report)
        det = (run_dir / "det.csv").read_text().splitlines()
        scores = list(csv.DictReader((run_dir / "scores.csv").open()))
        n_distinct = len({float(r["score"]) for r in scores})
        assert len(det) - 1 == n_distinct + 1
        assert len(scores) == 200

    def test_separable_target(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        labels = [ClassLabel.bonafide()] + [ClassLabel.morph(t) for t in ("A", "B", "C", "D")]
        for domain in ("src", "tgt"):
            ids, vecs, labs = [], [], []
            for c, lab in enumerate(labels):
                for i in range(40):
                    ids.append(f"{domain}-{c}-{i}")
                    labs.append(lab)
                    vecs.append(np.eye(5)[c] * 10 + rng.normal(0, 0.01, 5))
            ds = Dataset(domain, tuple(ids), tuple(ids), tuple(labs), (domain,) * len(ids), np.array(vecs))
            write_manifest(ds, tmp_path / f"{domain}.csv")
        exp = dict(EXPERIMENT, train_set="src.csv", test_set="tgt.csv")
        del exp["synthetic"]
        code, out, _ = run(capsys, "evaluate", "--config", write_json(tmp_path / "sep.json", exp), "--out", tmp_path)
        assert code == 0
        assert json.loads((Path(out) / "report.json").read_text())["d_eer"] == 0.0

    def test_dimension_mismatch(self, tmp_path, capsys, trained):
        cfg = write_json(tmp_path / "wide.json", dict(EXPERIMENT, synthetic=dict(SPEC, dim=20)))
        code, _, err = run(capsys, "evaluate", "--config", cfg, "--out", tmp_path, "--checkpoint", trained)
        assert code != 0
        assert "20" in err

    def test_inputs_untouched(self, tmp_path, capsys, exp_config, trained):
        before = digest(exp_config), digest(trained)
        run(capsys, "evaluate", "--config", exp_config, "--out", tmp_path / "runs", "--checkpoint", trained)
        assert (digest(exp_config), digest(trained)) == before


class TestSweep:
    def test_five_rows_and_repeatable(self, tmp_path, capsys, exp_config):
        _, a, _ = run(capsys, "sweep", "--config", exp_config, "--out", tmp_path / "a", "--ks", "0,5,10,15,20")
        _, b, _ = run(capsys, "sweep", "--config", exp_config, "--out", tmp_path / "b", "--ks", "0,5,10,15,20")
        text = (Path(a) / "sweep.csv").read_text()
        assert len(text.splitlines()) == 6
        assert text == (Path(b) / "sweep.csv").read_text()

    def test_baseline_only(self, tmp_path, capsys, exp_config):
        _, out, _ = run(capsys, "sweep", "--config", exp_config, "--out", tmp_path, "--ks", "0")
        assert (Path(out) / "sweep.csv").read_text().splitlines()[1].startswith("0,")

    def test_infeasible_k(self, tmp_path, capsys, exp_config):
        code, _, err = run(capsys, "sweep", "--config", exp_config, "--out", tmp_path, "--ks", "0,40")
        assert code == EXIT_NUMERIC
        assert "k=40" in err

    def test_bad_ks(self, tmp_path, capsys, exp_config):
        with pytest.raises(SystemExit) as info:
            main(["sweep", "--config", str(exp_config), "--ks", "a,b"])
        assert info.value.code == 2


class TestGridTemplates:
    def test_five_entry_grid(self, tmp_path, capsys, exp_config, trained):
        _, out, _ = run(capsys, "grid-templates", "--config", exp_config, "--out", tmp_path, "--checkpoint", trained,
                        "--grid", "1,2,4,8,12")
        rows = list(csv.DictReader((Path(out) / "grid.csv").open()))
        assert [int(r["n_templates"]) for r in rows] == [1, 2, 4, 8, 12]
        assert [r["is_best"] for r in rows].count("1") == 1
        assert set(r["is_best"] for r in rows) <= {"0", "1"}

    def test_single_entry(self, tmp_path, capsys, exp_config, trained):
        _, out, _ = run(capsys, "grid-templates", "--config", exp_config, "--out", tmp_path, "--checkpoint", trained,
                        "--grid", "4")
        rows = list(csv.DictReader((Path(out) / "grid.csv").open()))
        assert len(rows) == 1 and rows[0]["is_best"] == "1"

    def test_oversized(self, tmp_path, capsys, exp_config, trained):
        code, _, err = run(capsys, "grid-templates", "--config", exp_config, "--out", tmp_path,
                           "--checkpoint", trained, "--grid", "1,500")
        assert code == EXIT_NUMERIC
        assert "500" in err


class TestProject:
    @pytest.fixture
    def manifest(self, tmp_path):
        _, tgt = generate_synthetic(SyntheticSpec(**dict(SPEC, samples_per_class=8)))
        return write_manifest(tgt, tmp_path / "tgt.csv")

    def test_rows_and_labels(self, tmp_path, capsys, trained, manifest):
        code, out, _ = run(capsys, "project", "--checkpoint", trained, "--manifest", manifest, "--out", tmp_path,
                           "--perplexity", 5, "--iterations", 100)
        assert code == 0
        rows = list(csv.DictReader((Path(out) / "projection.csv").open()))
        ds = load_manifest(manifest)
        assert len(rows) == len(ds)
        assert [r["label"] for r in rows] == [str(c) for c in ds.labels]
        assert [r["id"] for r in rows] == list(ds.ids)

    def test_four_points(self, tmp_path, capsys, trained):
        _, tgt = generate_synthetic(SyntheticSpec(**dict(SPEC, samples_per_class=1, n_classes=4)))
        small = write_manifest(tgt, tmp_path / "four.csv")
        code, _, err = run(capsys, "project", "--checkpoint", trained, "--manifest", small, "--out", tmp_path)
        assert code == EXIT_NUMERIC
        assert "t-SNE" in err


def test_module_entry_point(tmp_path):
    spec = write_json(tmp_path / "spec.json", SPEC)
    proc = subprocess.run(
        [sys.executable, "-m", "fsmad", "--out", str(tmp_path), "--config", str(spec), "generate"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (Path(proc.stdout.strip()) / "source.csv").exists()
