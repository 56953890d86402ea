"""Acceptance suite.

Each test checks one numbered criterion and prints a single line of the form
``PASS criterion N: <title> (<detail>; <elapsed>s, limit <limit>s)``, even
under pytest's output capture. A criterion fails if its check fails or if it
runs past its time limit.
"""

import json
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from fsmad.cli import main
from fsmad.core import ClassLabel, Dataset
from fsmad.inference import TemplateSet, decide, score, template_draw_scores
from fsmad.loss import (
    LossConfig,
    MiningMode,
    TripletKind,
    classify_triplet,
    contrastive_loss,
    mine_batch,
    pair_distance,
    triplet_loss,
)
from fsmad.metrics import apcer, bpcer, det_and_operating_points, score_set_from_mapping, worst_case_apcer
from fsmad.model import ModelParams, batch_loss_and_grads
from fsmad.projection import TsneConfig, conditional_affinities, joint_affinities, run_tsne, squared_distances
from fsmad.protocol import config_from_dict, run_experiment
from oracles import (
    brute_all_valid,
    brute_kind,
    brute_rates,
    brute_report,
    brute_semihard,
    central_differences,
    distance_matrix,
    fixed_triplet_objective,
    relative_error,
)

BENCHMARK = Path(__file__).resolve().parents[1] / "configs" / "fewshot_benchmark.json"


@pytest.fixture
def report(capsys):
    """Print the criterion line past pytest's capture and return the verdict."""

    def _report(number, title, ok, detail, elapsed, limit=None):
        in_time = limit is None or elapsed < limit
        passed = bool(ok) and in_time
        budget = f", limit {limit}s" if limit is not None else ""
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {title} ({detail}; {elapsed:.1f}s{budget})"
        with capsys.disabled():
            print("\n" + line, flush=True)
        return passed

    return _report


def benchmark_config(seed, **overrides):
    raw = json.loads(BENCHMARK.read_text())
    raw["seed"] = seed
    raw["synthetic"]["seed"] = seed
    raw.update(overrides)
    return config_from_dict(raw, BENCHMARK.parent)


def labelled_batch(rng, B, n_labels):
    labels = [int(v) for v in rng.integers(0, n_labels, size=B)]
    labels[1] = labels[0]
    if len(set(labels)) < 2:
        labels[-1] = (labels[0] + 1) % n_labels
    return labels


def test_gradient_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(20240601)
    errors = []
    for _ in range(24):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(2, 7))] + [int(rng.integers(3, 9)) for _ in range(depth - 1)] + [int(rng.integers(2, 6))]
        # random biases keep ReLU pre-activations away from the kink at 0
        layers = tuple(
            (rng.standard_normal((i, o)), rng.standard_normal(o) * 0.5) for i, o in zip(sizes[:-1], sizes[1:])
        )
        l2 = bool(rng.integers(0, 2))
        params = ModelParams(layers, l2_normalize_output=l2)
        B = int(rng.integers(4, 17))
        labels = labelled_batch(rng, B, int(rng.integers(2, 4)))
        x = rng.standard_normal((B, sizes[0]))
        cfg = LossConfig(margin=float(rng.uniform(0.2, 1.5)), mining_mode=MiningMode.SEMI_HARD)

        loss, grads, triplets = batch_loss_and_grads(params, x, labels, cfg)
        objective = lambda flat: fixed_triplet_objective(flat, x, triplets, cfg.margin, l2)  # noqa: E731
        assert loss == pytest.approx(objective(params.flat()), rel=1e-12, abs=1e-15)
        errors.append(relative_error(grads, central_differences(objective, params.flat(), h=1e-5)))
    elapsed = time.perf_counter() - start
    worst = max(errors)
    assert report(
        1, "gradient oracle", worst < 1e-4, f"{len(errors)} instances, max relative error {worst:.2e}", elapsed, 30
    )


def test_mining_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    n_triplets = n_kinds = 0
    mismatches = []
    for batch in range(100):
        B = int(rng.integers(3, 65))
        E = int(rng.integers(2, 9))
        labels = labelled_batch(rng, B, int(rng.integers(2, 7)))
        if batch % 2:
            # small integer coordinates give exact distance ties
            x = rng.integers(-2, 3, size=(B, E)).astype(np.float64)
            margin = float(rng.integers(0, 4))
        else:
            x = rng.standard_normal((B, E))
            margin = float(rng.uniform(0.05, 2.0))
        dist = distance_matrix(x.tolist())

        got, _ = mine_batch(x, labels, LossConfig(margin=margin, mining_mode=MiningMode.SEMI_HARD))
        want = brute_semihard(dist, labels)
        n_triplets += len(want)
        if [tuple(t) for t in got] != want:
            mismatches.append(f"mining batch {batch}")

        for a, p, n in brute_all_valid(labels):
            n_kinds += 1
            if classify_triplet(dist[a][p], dist[a][n], margin).value != brute_kind(dist[a][p], dist[a][n], margin):
                mismatches.append(f"kind batch {batch} ({a},{p},{n})")
                break
    elapsed = time.perf_counter() - start
    detail = f"100 batches, {n_triplets} mined triplets, {n_kinds} classified, {len(mismatches)} mismatches"
    assert report(2, "mining oracle", not mismatches, detail, elapsed, 60), mismatches[:5]


def test_metric_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    for i in range(100):
        n_bf = int(rng.integers(1, 500))
        n_tools = int(rng.integers(1, 4))
        per_tool = [int(v) for v in rng.integers(1, (1000 - n_bf) // n_tools + 1, size=n_tools)]
        shift = rng.uniform(-1.0, 4.0)
        bf = rng.normal(0.0, 1.0, n_bf)
        attacks = {f"T{t}": rng.normal(shift, 1.0, n) for t, n in enumerate(per_tool)}
        if i % 3 == 0:
            bf = np.round(bf, 1)
            attacks = {k: np.round(v, 1) for k, v in attacks.items()}
        s = score_set_from_mapping(bf, attacks)
        pooled = s.pooled_attacks()

        r = det_and_operating_points(s)
        ref = brute_report(bf, pooled)
        diffs = [abs(r.d_eer - ref["d_eer"]), abs(r.bpcer10 - ref["bpcer10"]), abs(r.bpcer20 - ref["bpcer20"])]
        diffs.append(float(np.max(np.abs(np.asarray(r.det_points) - np.asarray(ref["points"])))))
        for th in np.concatenate([rng.choice(pooled, 5), rng.uniform(-3, 6, 5), [-np.inf, np.inf]]):
            want_a, want_b = brute_rates(bf, pooled, th)
            diffs += [abs(apcer(pooled, th) - want_a), abs(bpcer(bf, th) - want_b)]
        worst = max(worst, max(diffs))

    separated = det_and_operating_points(score_set_from_mapping(rng.uniform(0, 1, 300), {"X": rng.uniform(2, 3, 300)}))
    x = rng.normal(0.0, 1.0, 1000)
    identical = det_and_operating_points(score_set_from_mapping(x, {"X": x.copy()}))
    elapsed = time.perf_counter() - start

    fixed_ok = (separated.d_eer, separated.bpcer10, separated.bpcer20) == (0.0, 0.0, 0.0)
    fixed_ok = fixed_ok and abs(identical.d_eer - 50.0) <= 1.0
    detail = (
        f"100 sets, max deviation {worst:.1e}, separated D-EER {separated.d_eer:g}, "
        f"identical D-EER {identical.d_eer:.3f}"
    )
    assert report(3, "metric oracle", worst <= 1e-9 and fixed_ok, detail, elapsed, 60)


def test_unit_examples(report):
    start = time.perf_counter()
    m02, m1 = LossConfig(margin=0.2), LossConfig(margin=1.0)
    identity1 = ModelParams(((np.eye(1), np.zeros(1)),), l2_normalize_output=False)

    def templates(*rows):
        ids = tuple(f"t{i}" for i in range(len(rows)))
        vecs = np.asarray(rows, dtype=np.float64)
        return TemplateSet(Dataset("t", ids, ids, (ClassLabel.bonafide(),) * len(rows), ("t",) * len(rows), vecs))

    v = np.array([0.3, -1.2, 4.0])
    cases = {
        "pair_distance(v, v) = 0": pair_distance(v, v) == 0.0,
        "pair_distance((0,0),(3,4)) = 25": pair_distance([0, 0], [3, 4]) == 25.0,
        "contrastive d=0 y=0 -> 0": contrastive_loss(0.0, 0, m1) == 0.0,
        "contrastive d=0.5 y=1 m=1 -> 0.25": contrastive_loss(0.5, 1, m1) == 0.25,
        "contrastive d>=m y=1 -> 0": contrastive_loss(1.0, 1, m1) == 0.0 and contrastive_loss(3.0, 1, m1) == 0.0,
        "triplet (0.3, 0.8, 0.2) -> 0": triplet_loss(0.3, 0.8, m02) == 0.0,
        "triplet (0.8, 0.3, 0.2) -> 0.7": triplet_loss(0.8, 0.3, m02) == 0.7,
        "triplet d_ap=d_an m=0 -> 0": triplet_loss(0.4, 0.4, LossConfig(margin=0.0)) == 0.0,
        "classify (0.3, 0.8, 0.2) easy": classify_triplet(0.3, 0.8, 0.2) is TripletKind.EASY,
        "classify (0.8, 0.3) hard": classify_triplet(0.8, 0.3, 0.2) is TripletKind.HARD,
        "classify (0.3, 0.4, 0.2) semihard": classify_triplet(0.3, 0.4, 0.2) is TripletKind.SEMI_HARD,
        "phi_avg single identical template -> 0": score(identity1, [1.7], templates([1.7])) == 0.0,
        "phi_avg of {0.2, 0.4} -> 0.3": score(identity1, [0.0], templates([0.2**0.5], [0.4**0.5])) == 0.3,
        "decide at th -> 0": decide(0.5, 0.5) == 0,
        "decide phi=0 th>0 -> 1": decide(0.0, 0.1) == 1,
        "apcer all above th -> 0": apcer([0.5, 0.6], 0.4) == 0.0,
        "apcer 3 of 10 below th -> 30": apcer([0.1, 0.2, 0.3] + [0.9] * 7, 0.5) == 30.0,
        "apcer th=-inf -> 0": apcer([0.1, 5.0], -np.inf) == 0.0,
        "bpcer all below th -> 0": bpcer([0.1, 0.2], 0.3) == 0.0,
        "bpcer 1 of 4 at th -> 25": bpcer([0.1, 0.2, 0.3, 0.5], 0.5) == 25.0,
        "bpcer th=+inf -> 0": bpcer([0.1, 1e300], np.inf) == 0.0,
        "worst-case 10% vs 40% -> 40% tool": worst_case_apcer(
            score_set_from_mapping([0.0], {"A": [0.1] + [0.9] * 9, "B": [0.1] * 4 + [0.9] * 6}), 0.5
        ) == ("B", 40.0),
        "D-EER worked example -> 25": det_and_operating_points(
            score_set_from_mapping([0.1, 0.2, 0.3, 0.4], {"X": [0.25, 0.35, 0.45, 0.55]})
        ).d_eer == 25.0,
    }
    elapsed = time.perf_counter() - start
    failed = [name for name, ok in cases.items() if not ok]
    detail = f"{len(cases) - len(failed)}/{len(cases)} exact" + (f", failed: {failed}" if failed else "")
    assert report(4, "unit examples", not failed, detail, elapsed)


def test_few_shot_trend(report):
    start = time.perf_counter()
    ks = (0, 10, 15)
    d_eer = {k: [] for k in ks}
    b10 = {k: [] for k in ks}
    for seed in range(5):
        cfg = benchmark_config(seed)
        for k in ks:
            r = run_experiment(cfg.with_k(k)).report
            d_eer[k].append(r.d_eer)
            b10[k].append(r.bpcer10)
    elapsed = time.perf_counter() - start
    med_eer = {k: statistics.median(v) for k, v in d_eer.items()}
    med_b10 = {k: statistics.median(v) for k, v in b10.items()}
    ok = med_eer[10] <= 0.7 * med_eer[0] and med_b10[10] < med_b10[0] and med_b10[15] < med_b10[0]
    detail = (
        "median D-EER " + "/".join(f"{med_eer[k]:.2f}" for k in ks)
        + ", median BPCER10 " + "/".join(f"{med_b10[k]:.2f}" for k in ks)
        + f" at k={ks}, D-EER ratio k10/k0 {med_eer[10] / med_eer[0]:.2f}"
    )
    assert report(5, "few-shot trend", ok, detail, elapsed, 600)


def test_template_averaging(report):
    start = time.perf_counter()
    result = run_experiment(benchmark_config(0, mode="in_domain"))
    pool = result.data.train.bonafide()
    test = result.data.test
    ratios = []
    for c in test.classes():
        probe = test.vectors[test.indices_of(c)[0]]
        v1 = template_draw_scores(result.params, probe, pool, 1, 100, seed=1).var(ddof=1)
        v4 = template_draw_scores(result.params, probe, pool, 4, 100, seed=2).var(ddof=1)
        ratios.append(v4 / v1)
    elapsed = time.perf_counter() - start
    ok = all(0.125 <= r <= 0.5 for r in ratios)
    detail = f"var(n=4)/var(n=1) per class probe: {', '.join(f'{r:.3f}' for r in ratios)}"
    assert report(6, "template averaging", ok, detail, elapsed, 60)


def test_tsne_properties(report):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    X = rng.standard_normal((1000, 10))
    X[500:, 0] += 20.0
    labels = np.repeat([0, 1], 500)

    P_cond, _ = conditional_affinities(squared_distances(X), 30.0)
    P = joint_affinities(P_cond)
    invariant_dev = max(
        float(np.max(np.abs(P_cond.sum(axis=1) - 1.0))),
        float(np.max(np.abs(np.diag(P_cond)))),
        float(np.max(np.abs(P - P.T))),
        abs(float(P.sum()) - 1.0),
        max(0.0, -float(P.min())),
    )

    res = run_tsne(X, TsneConfig(seed=0))
    cents = np.stack([res.embedding[labels == c].mean(axis=0) for c in (0, 1)])
    pred = np.argmin(((res.embedding[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
    purity = float(np.mean(pred == labels))
    kl0, kl1 = res.kl_history[0], res.kl_history[-1]
    elapsed = time.perf_counter() - start

    ok = invariant_dev <= 1e-12 and purity >= 0.95 and kl1 < kl0
    detail = f"n=1000, invariant deviation {invariant_dev:.1e}, purity {purity:.3f}, KL {kl0:.3f} -> {kl1:.3f}"
    assert report(7, "t-SNE properties", ok, detail, elapsed, 120)


def _run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    assert code == 0, err
    return Path(out.strip())


def _outputs(run_dir):
    # run_manifest.json records wall-clock duration, so it is left out
    return {p.name: p.read_bytes() for p in sorted(run_dir.iterdir()) if p.name != "run_manifest.json"}


def test_cli_determinism(report, capsys, tmp_path):
    start = time.perf_counter()
    compared, differing = [], []
    for command, extra in (("sweep", ["--ks", "0,5,10,15,20"]), ("evaluate", [])):
        first = _run_cli(capsys, command, "--config", BENCHMARK, "--out", tmp_path / "a", *extra)
        second = _run_cli(capsys, command, "--config", BENCHMARK, "--out", tmp_path / "b", *extra)
        a, b = _outputs(first), _outputs(second)
        compared += [f"{command}/{name}" for name in a]
        if a != b:
            differing.append(command)
    elapsed = time.perf_counter() - start
    detail = f"compared {', '.join(compared)}" + (f"; differing: {differing}" if differing else "")
    assert report(8, "CLI determinism", not differing and len(compared) >= 4, detail, elapsed)
