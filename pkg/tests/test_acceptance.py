"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are repeated
in an "acceptance criteria" block at the end of the session.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from hisem import tensor as T
from hisem.bdam import BdamLayerParams, BiTemporalFeatures, attention_bias, bdam_forward, feature_conditioning
from hisem.hasd import Hasd, MoEConfig, expert_scores, group_constrained_select, moe_forward, routing_weights
from hisem.metrics import bleu_n, cider_d, meteor_lite, rho_conversion, rouge_l, s_star_m
from hisem.training import CurriculumConfig, ramp_factor
from reference_values import INCONSISTENT_ROWS, RHO_TABLES, SCORE_ROWS
from test_hasd import brute_force_select, dense_mixture
from test_metrics import _random_corpus, cider_oracle
from test_training import _wg_probe

TESTS = Path(__file__).parent

# glibc returns large freed blocks to the OS by default; every training step
# then pays for fresh page faults. Raising the thresholds keeps them pooled.
FAST_ENV = dict(os.environ, MALLOC_MMAP_THRESHOLD_="1000000000", MALLOC_TRIM_THRESHOLD_="1000000000")
FAST_ENV.pop("HISEM_SEED", None)


def hisem(*argv, check=True):
    proc = subprocess.run([sys.executable, "-m", "hisem", *map(str, argv)], capture_output=True, text=True,
                          env=FAST_ENV)
    if check and proc.returncode != 0:
        raise AssertionError(f"hisem {argv[0]} failed: {proc.stderr.strip()}")
    return proc


def write_config(path, **cfg):
    path.write_text(json.dumps(cfg))
    return path


# ------------------------------------------------------------------ 1, 2
def test_criterion_01_s_star_m_arithmetic(criterion):
    bad = []
    for key, (b4, meteor, rouge, cider, published) in sorted(SCORE_ROWS.items()):
        got = s_star_m(b4, rouge, meteor, cider)
        if abs(got - published) > 0.01:
            bad.append(f"{key} published {published} computed {got:.3f}")
    criterion(1, not bad, f"{len(SCORE_ROWS) - len(bad)}/{len(SCORE_ROWS)} rows within 0.01" + (
        f"; mismatched: {', '.join(bad)}" if bad else ""))
    # the one known defect in the published table is an expected failure; anything else fails outright
    if bad and [b.split()[0] for b in bad] == sorted(INCONSISTENT_ROWS):
        pytest.xfail("published S*_m of " + ", ".join(INCONSISTENT_ROWS) + " is not the mean of its components")
    assert not bad


def test_criterion_02_rho_arithmetic(criterion):
    cells = bad = 0
    for key, t in RHO_TABLES.items():
        for pre, gt, rho in zip(t["pre"], t["gt"], t["rho"]):
            if rho is None:
                continue
            cells += 1
            bad += abs(rho_conversion(pre, gt, t["acc_pre"], 100.0) - rho) > 0.01
    criterion(2, bad == 0, f"{cells - bad}/{cells} cells within 0.01")
    assert bad == 0


# ------------------------------------------------------------------ 3
def test_criterion_03_gradient_suite(criterion):
    files = ["test_tensor.py", "test_bdam.py", "test_hasd.py", "test_decoder.py", "test_model.py"]
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "-k", "gradients",
         *[str(TESTS / f) for f in files]],
        capture_output=True, text=True, cwd=TESTS.parent, env=FAST_ENV,
    )
    elapsed = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr
    ok = proc.returncode == 0 and " passed" in summary and "failed" not in summary
    criterion(3, ok and elapsed < 120, f"{summary.strip('= ')} ({elapsed:.0f}s)")
    assert ok, proc.stdout[-3000:]
    assert elapsed < 120


# ------------------------------------------------------------------ 4
def test_criterion_04_routing_invariants(criterion):
    rng = np.random.default_rng(1234)
    d = 6
    configs = [MoEConfig(expert_hidden_dim=5),
               MoEConfig(num_experts=6, num_groups=3, groups_topk=2, experts_topk=3, expert_hidden_dim=5),
               MoEConfig(num_experts=4, num_groups=4, groups_topk=1, experts_topk=1, expert_hidden_dim=5)]
    models = [Hasd(d, c, np.random.default_rng(i), ffn_hidden=7) for i, c in enumerate(configs)]
    counts = {"sum": 0, "k": 0, "groups": 0, "dense": 0}
    t0 = time.perf_counter()
    for i in range(1000):
        p = models[i % len(models)]
        cfg = p.cfg
        f_h = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 6)), d))
        scores = expert_scores(T.Tensor(f_h), p.moe.w_c)
        flat = scores.reshape(-1, cfg.num_experts)
        experts, _ = group_constrained_select(flat, cfg)
        weights = routing_weights(flat, experts)
        w = weights.data
        counts["sum"] += np.all(np.abs(w.sum(-1) - 1.0) <= 1e-9)
        counts["k"] += np.all((w != 0).sum(-1) == cfg.experts_topk)
        member = True
        for row, sel in zip(flat.data, experts):
            want, groups = brute_force_select(row, cfg)
            member &= sel.tolist() == want and {int(e) // cfg.group_size for e in sel} <= groups
        counts["groups"] += member
        with T.no_grad():
            got = moe_forward(T.Tensor(f_h), weights.reshape(scores.shape), p.moe).data
        counts["dense"] += got.tobytes() == dense_mixture(f_h, w.reshape(scores.shape), p.moe).tobytes()
    elapsed = time.perf_counter() - t0
    ok = all(v == 1000 for v in counts.values())
    criterion(4, ok and elapsed < 30, f"weights-sum {counts['sum']}, k-active {counts['k']}, "
              f"group-membership {counts['groups']}, dense-oracle {counts['dense']} of 1000 ({elapsed:.1f}s)")
    assert ok


# ------------------------------------------------------------------ 5
def test_criterion_05_bdam_fixed_point(criterion):
    rng = np.random.default_rng(5)
    d, grid = 8, (3, 3)
    a = rng.normal(size=(2, 9, d))
    layers = [BdamLayerParams(d, rng, tied=True) for _ in range(3)]
    out, trace = bdam_forward(BiTemporalFeatures(T.Tensor(a), T.Tensor(a.copy()), grid), layers, return_all=True)
    gap = float(np.max(np.abs(out.f_t1.data - out.f_t2.data)))
    bias_zero = True
    for step, p in zip(trace[:-1], layers):
        _, f_diff = feature_conditioning(step, p)
        bias_zero &= bool(np.all(attention_bias(f_diff, p.w_bias_12, p.alpha_12).data == 0.0))
        bias_zero &= bool(np.all(attention_bias(f_diff, p.w_bias_21, p.alpha_21).data == 0.0))
    ok = gap <= 1e-10 and bias_zero
    criterion(5, ok, f"max |F1 - F2| after 3 layers = {gap:.1e}, attention bias exactly zero: {bias_zero}")
    assert ok


# ------------------------------------------------------------------ 6
def test_criterion_06_curriculum(criterion):
    cfg = CurriculumConfig(epochs=50)
    table = [ramp_factor(e, cfg) for e in range(51)]
    w = cfg.warmup_epochs
    table_ok = all(a == 0.0 for a in table[:w]) and table[50] == 1.0 and all(
        x <= y for x, y in zip(table, table[1:]))
    warm_a, warm_fd = _wg_probe(epoch=1)
    late_a, late_fd = _wg_probe(epoch=7)
    blocked = np.all(warm_a == 0.0) and np.all(warm_fd == 0.0)
    flows = np.abs(late_fd).max() > 1e-6 and np.allclose(late_a, late_fd, rtol=1e-5, atol=1e-9)
    ok = bool(table_ok and blocked and flows)
    criterion(6, ok, f"ramp table ok: {table_ok}; router grad zero in warm-up: {bool(blocked)}; "
              f"nonzero and matching after: {bool(flows)}")
    assert ok


# ------------------------------------------------------------------ 7
def test_criterion_07_metric_oracles(criterion):
    hand = [
        bleu_n(["the the the"], [["the cat"]], 1) - 100 / 3,
        rouge_l(["a b c"], [["a c d"]]) - 200 / 3,
        meteor_lite(["a b c d"], [["a b c d"]]) - 100 * (1 - 0.5 / 64),
        bleu_n(["a b c d"], [["a b c d"]], 4) - 100.0,
    ]
    hand_ok = all(abs(x) <= 1e-4 for x in hand)
    rng = np.random.default_rng(2024)
    agree = 0
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(200):
            cands, refs = _random_corpus(rng)
            got, want = cider_d(cands, refs), cider_oracle(cands, refs)
            agree += abs(got - want) <= 1e-12 * max(1.0, abs(want))
    ok = hand_ok and agree == 200
    criterion(7, ok, f"hand examples within 1e-4: {hand_ok}; CIDEr-D matches oracle on {agree}/200 corpora")
    assert ok


# ------------------------------------------------------------------ 8, 9 share one trained model
@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("overfit")
    hisem("gen", "--n", 50, "--seed", 0, "--out", tmp / "train.jsonl")
    cfg = write_config(tmp / "config.json", seed=0, train_data=str(tmp / "train.jsonl"), out_dir=str(tmp / "run"),
                       training={"epochs": 300, "lr": 2e-3, "batch_size": 10})
    t0 = time.perf_counter()
    hisem("train", "--config", cfg)
    return tmp, time.perf_counter() - t0


def test_criterion_08_end_to_end_overfit(criterion, overfit_run):
    tmp, train_seconds = overfit_run
    ckpt = tmp / "run" / "checkpoint.hsem"
    rows = json.loads((tmp / "run" / "report.json").read_text())["rows"]
    out = json.loads(hisem("eval", "--checkpoint", ckpt, "--data", tmp / "train.jsonl", "--routing", "pre").stdout)
    rep = out["reports"]["all"]
    loss = rows[-1]["caption_loss"]
    ok = rep["router_accuracy"] == 100.0 and loss < 0.05 and rep["bleu4"] > 90 and train_seconds < 600
    criterion(8, ok, f"router acc {rep['router_accuracy']:.1f}%, caption loss {loss:.2e}, "
              f"BLEU-4 {rep['bleu4']:.2f}, training {train_seconds:.0f}s")
    assert ok


def test_overfit_model_describes_unchanged_pair(overfit_run):
    from hisem.data import NO_CHANGE_CAPTIONS, load_dataset

    tmp, _ = overfit_run
    pair = next(r for r in load_dataset(tmp / "train.jsonl") if r.label == 0)
    doc = json.loads(hisem("describe", "--checkpoint", tmp / "run" / "checkpoint.hsem", "--data", tmp / "train.jsonl",
                           "--pair-id", pair.id).stdout)
    assert doc["path"] == "unchanged" and doc["source"] == "predicted"
    assert doc["caption"] in NO_CHANGE_CAPTIONS


NOISE_LEVELS = (0.1, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0)


def test_criterion_09_gt_routing_dominates(criterion, overfit_run):
    tmp, _ = overfit_run
    ckpt = tmp / "run" / "checkpoint.hsem"
    t0 = time.perf_counter()
    for noise in NOISE_LEVELS:
        data = tmp / f"heldout_{noise}.jsonl"
        hisem("gen", "--n", 100, "--seed", 1, "--noise", noise, "--out", data)
        pre = json.loads(hisem("eval", "--checkpoint", ckpt, "--data", data, "--routing", "pre").stdout)
        if pre["reports"]["all"]["router_accuracy"] < 100.0:
            break
    else:
        criterion(9, False, "router stayed perfect at every noise level tried")
        pytest.fail("no noise level lowered router accuracy")
    gt = json.loads(hisem("eval", "--checkpoint", ckpt, "--data", data, "--routing", "gt").stdout)
    s_pre, s_gt = pre["reports"]["all"]["s_star_m"], gt["reports"]["all"]["s_star_m"]
    elapsed = time.perf_counter() - t0
    ok = s_gt >= s_pre and "rho" in gt
    criterion(9, ok, f"noise {noise}: router acc {pre['reports']['all']['router_accuracy']:.0f}%, "
              f"S*_m pre {s_pre:.2f} <= gt {s_gt:.2f} ({elapsed:.0f}s)")
    assert ok


# ------------------------------------------------------------------ 10
def test_criterion_10_determinism(criterion, tmp_path):
    hisem("gen", "--n", 20, "--seed", 3, "--out", tmp_path / "train.jsonl")
    hisem("gen", "--n", 6, "--seed", 4, "--out", tmp_path / "val.jsonl")
    t0 = time.perf_counter()
    for name in ("a", "b"):
        cfg = write_config(tmp_path / f"{name}.json", seed=11, train_data=str(tmp_path / "train.jsonl"),
                           val_data=str(tmp_path / "val.jsonl"), out_dir=str(tmp_path / name),
                           training={"epochs": 4, "lr": 1e-3, "batch_size": 8, "val_every": 2})
        hisem("train", "--config", cfg)
    files = ("checkpoint.hsem", "checkpoint_best.hsem", "report.csv", "report.json")
    same = [f for f in files if (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()]
    elapsed = time.perf_counter() - t0
    ok = len(same) == len(files)
    criterion(10, ok, f"byte-identical: {', '.join(same)} ({elapsed:.0f}s for two runs)")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
