"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. The lines are printed
with capture disabled so they show up in the normal pytest output.
"""

import itertools
import struct
import time

import numpy as np
import pytest

from conftest import THEORY_REGIME
from noisetransfer import experiments as ex
from noisetransfer.attack import AttackConfig, NoiseSpec, noise_pgd, pgd_baseline
from noisetransfer.cli import EXIT_OK, main
from noisetransfer.data import load_idx, parse_idx_images, parse_idx_labels
from noisetransfer.errors import BadMagicError, CountMismatchError, TruncatedPayloadError
from noisetransfer.model import init_model, load_ensemble, save_ensemble
from noisetransfer.tensor_core import one_hot

TRANSFER_SEEDS = (0, 1, 2, 3, 4)


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")


@pytest.fixture(scope="module")
def default_data():
    return ex.build_data(ex.load_config())


def test_criterion_1_gradient_correctness(capsys):
    exp = ex.load_config()
    start = time.perf_counter()
    rows = ex.gradcheck_rows(exp)
    elapsed = time.perf_counter() - start
    worst = max(r["rel_error"] for r in rows)
    widest = max(rows, key=lambda r: sum(map(int, r["layer_dims"].split("-"))))["layer_dims"]
    ok = len(rows) >= 20 and worst < 1e-5 and elapsed < 10
    report(capsys, 1, ok, f"{len(rows)} triples (widest {widest}), max rel error {worst:.2e} < 1e-5, "
                          f"{elapsed:.2f}s < 10s")
    assert ok


def test_criterion_2_degeneracy_to_baseline(capsys, default_data):
    _, test_set = default_data
    x = test_set.inputs[:120]
    y = one_hot(test_set.labels[:120], test_set.num_classes)
    model = init_model([test_set.dim, 64, test_set.num_classes], "tanh", 7)
    spec = NoiseSpec.none()
    checked, identical = 0, 0
    for random_start, resample in itertools.product((False, True), ("once", "per_step")):
        cfg = AttackConfig(0.3, 0.075, 10, random_start, rs_seed=11)
        base = pgd_baseline(model, x, y, cfg)
        noisy = noise_pgd(model, x, y, cfg, spec, resample)
        checked += len(x)
        identical += sum(base[i].tobytes() == noisy[i].tobytes() for i in range(len(x)))
    ok = identical == checked and len(x) >= 100
    report(capsys, 2, ok, f"{identical}/{checked} examples bit-identical (kind=none, M=1, sigma=0)")
    assert ok


def test_criterion_3_feasibility_grid(capsys, default_data):
    _, test_set = default_data
    x = test_set.inputs[:40]
    y = one_hot(test_set.labels[:40], test_set.num_classes)
    model = init_model([test_set.dim, 32, test_set.num_classes], "relu", 3)
    worst_excess, out_of_box, runs = -np.inf, 0, 0
    for eps, steps, rs in itertools.product((0.0, 0.1, 0.3), (0, 1, 10, 40), (False, True)):
        cfg = AttackConfig(eps, 0.05, steps, rs, rs_seed=2)
        outputs = [pgd_baseline(model, x, y, cfg),
                   noise_pgd(model, x, y, cfg, NoiseSpec("uniform", 0.3, 4, noise_seed=1)),
                   noise_pgd(model, x, y, cfg, NoiseSpec("gaussian", 0.3, 2, noise_seed=1), "per_step")]
        for adv in outputs:
            runs += 1
            worst_excess = max(worst_excess, float((np.abs(adv - x).max(axis=1) - eps).max()))
            out_of_box += int(((adv < 0) | (adv > 1)).sum())
    ok = worst_excess <= 1e-12 and out_of_box == 0
    report(capsys, 3, ok, f"{runs} attack runs, max(||x'-x||inf - eps) = {worst_excess:.1e}, "
                          f"{out_of_box} components outside [0,1]")
    assert ok


@pytest.fixture(scope="module")
def theory_results(desk_ensemble):
    ens, test_set = desk_ensemble
    results = {}
    start = time.perf_counter()
    for M in (2, 4, 8):
        exp = ex.load_config(None, THEORY_REGIME + (f"attack.M={M}",))
        rows = ex.theory_rows(exp, ens, ex.eval_points(exp, ens, test_set))
        results[M] = (rows, ex.theory_summary(rows))
    return results, time.perf_counter() - start


def test_criterion_4_cauchy_schwarz(capsys, theory_results):
    results, _ = theory_results
    rows, s = results[8]
    ok = s["points"] >= 100 and s["cs_violations"] == 0 and rows[0]["K"] == 8 and rows[0]["M"] == 8
    report(capsys, 4, ok, f"{s['cs_violations']} violations beyond 1e-9 over {s['points']} points, K=8, M=8")
    assert ok


def test_criterion_5_expansion_identity(capsys, theory_results):
    results, _ = theory_results
    points = sum(s["points"] for _, s in results.values())
    failures = sum(s["expansion_failures"] for _, s in results.values())
    ok = failures == 0
    report(capsys, 5, ok, f"{failures} of {points} points off by more than 1e-9 relative")
    assert ok


def test_criterion_6_mse_inequality(capsys, theory_results):
    results, elapsed = theory_results
    parts, ok = [], True
    for M, (rows, s) in results.items():
        mean_ok = s["mean_f_bar_mse"] <= s["mean_f_hat_mse"]
        ok &= s["points"] >= 100 and s["holds_fraction"] >= 0.9 and mean_ok
        parts.append(f"M={M}: holds {s['holds_fraction']:.3f}, mean f_bar {s['mean_f_bar_mse']:.4g} "
                     f"vs f_hat {s['mean_f_hat_mse']:.4g}, gap {s['mean_assumption_gap']:.3f}")
    ok &= elapsed < 300
    report(capsys, 6, ok, "; ".join(parts) + f" ({elapsed:.1f}s)")
    assert ok


def test_criterion_7_transfer_improvement(capsys):
    improvements, min_correct = [], []
    for seed in TRANSFER_SEEDS:
        exp = ex.load_config(None, (), seed)
        train_set, test_set = ex.build_data(exp)
        ens = ex.build_ensemble(exp, train_set)
        examples = ex.attack_examples(exp, test_set)
        s = ex.transfer_summary(ex.transfer_rows(ens, examples, ex.run_attacks(exp, ens, examples)))
        improvements.append(s["improvement"])
        min_correct.append(s["min_correct"])
    mean = float(np.mean(improvements))
    ok = mean >= 0 and min(min_correct) >= 200
    per_seed = ", ".join(f"{v:+.4f}" for v in improvements)
    report(capsys, 7, ok, f"per-seed improvement [{per_seed}], mean {mean:+.5f} >= 0, "
                          f"min correct examples per target {min(min_correct)}")
    assert ok


def test_criterion_8_cli_determinism(capsys, tmp_path):
    runs = {}
    for tag in ("a", "b"):
        out = tmp_path / tag
        for cmd in ("train-ensemble", "attack", "eval-transfer", "verify-theory", "gradcheck"):
            assert main([cmd, "--out", str(out), "--quiet", "--figures"]) == EXIT_OK
        runs[tag] = {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    same = runs["a"].keys() == runs["b"].keys() and all(runs["a"][k] == runs["b"][k] for k in runs["a"])
    report(capsys, 8, same, f"{len(runs['a'])} output files byte-identical across two runs of all 5 subcommands")
    assert same


def _idx_images(pixels, count, rows, cols, magic=2051):
    return struct.pack(">iiii", magic, count, rows, cols) + bytes(pixels)


def test_criterion_9_persistence_and_ingestion(capsys, desk_ensemble, tmp_path):
    ens, _ = desk_ensemble
    save_ensemble(ens, tmp_path / "ens")
    loaded = load_ensemble(tmp_path / "ens")
    roundtrip = len(loaded) == len(ens) and all(a == b for a, b in zip(loaded, ens))

    fixture = parse_idx_images(_idx_images([0, 255, 128, 64], 1, 2, 2))
    parsed = np.array_equal(fixture, [[0.0, 1.0, 128 / 255, 64 / 255]])

    rejected = {}
    try:
        parse_idx_images(_idx_images([0] * 4, 1, 2, 2, magic=2052))
    except BadMagicError as exc:
        rejected["bad magic"] = "2052" in str(exc)
    try:
        parse_idx_labels(struct.pack(">ii", 2049, 5) + bytes([1, 2]))
    except TruncatedPayloadError:
        rejected["truncated"] = True
    (tmp_path / "img").write_bytes(_idx_images([0] * 8, 2, 2, 2))
    (tmp_path / "lab").write_bytes(struct.pack(">ii", 2049, 3) + bytes([0, 1, 1]))
    try:
        load_idx(tmp_path / "img", tmp_path / "lab")
    except CountMismatchError:
        rejected["count mismatch"] = True
    distinct = len(rejected) == 3 and all(rejected.values())

    ok = roundtrip and parsed and distinct
    report(capsys, 9, ok, f"ensemble round-trip bit-exact: {roundtrip}; 2x2 fixture exact: {parsed}; "
                          f"malformed fixtures rejected with distinct errors: {sorted(rejected)}")
    assert ok
