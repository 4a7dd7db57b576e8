"""Acceptance suite: one test per criterion, one printed verdict line each.

The heavier criteria share module-scoped experiment fixtures (paired
seeds across arms, so arm differences isolate the intervention).
"""

import json
import math
import time

import numpy as np
import pytest

from lbi import cli
from lbi import data as D
from lbi import diffcore as dc
from lbi import ignoring as ig
from lbi import metrics as mt
from lbi import models as M
from lbi import pretraining as P

SEEDS = (0, 1, 2, 3, 4)


def verdict(n: int, name: str, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {n} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {n} ({name}): {detail}"


# ---------------------------------------------------------------------------
# Shared experiment machinery.
# ---------------------------------------------------------------------------


def _data_for_seed(seed: int):
    ds = D.generate_synthetic(2000, d_img=16, n_concepts=8, seed=1000 + seed)
    train, val, test = D.stratified_split(ds.examples, D.SplitSpec(seed=2000 + seed))
    dims = M.ModelDims(
        d_img=16, vocab_size=ds.vocab.size, embed_dim=16, hidden_dim=32,
        n_answers=ds.n_answers,
    )
    return ds, train, val, test, dims


def _finetune_cfg(seed: int) -> M.TrainConfig:
    return M.TrainConfig(epochs=60, batch_size=64, lr=0.005, seed=5000 + seed)


def _lbi_cfg(seed: int) -> ig.LbiConfig:
    # lr_a follows the stronger of the two published settings (0.1 with
    # weight decay 3e-4 and betas (0.5, 0.999)); defaults stay at 0.01.
    return ig.LbiConfig(
        epochs=60, train_batch_size=64, val_batch_size=128,
        lr_w=0.005, lr_a=0.1, seed=5000 + seed,
    )


def _train_plain(dims, examples, seed, pretrained=None):
    model = M.TwoTowerModel.create(dims, seed=4000 + seed)
    if pretrained is not None:
        model = M.transfer_encoders(pretrained, model)
    batch = M.make_vqa_batch(examples, dims.vocab_size, dims.n_answers)
    M.train_answer_model(model, batch, _finetune_cfg(seed))
    return model


def _train_ignoring(dims, examples, val, seed, pretrained=None):
    model = M.TwoTowerModel.create(dims, seed=4000 + seed)
    if pretrained is not None:
        model = M.transfer_encoders(pretrained, model)
    task = ig.VqaTask(
        model,
        M.make_vqa_batch(examples, dims.vocab_size, dims.n_answers),
        M.make_vqa_batch(val, dims.vocab_size, dims.n_answers),
    )
    result = ig.lbi_train(task, _lbi_cfg(seed))
    return model, result


@pytest.fixture(scope="module")
def corrupted_full_label_runs():
    """Criterion 4/5 arms: baseline and ignoring on 30%-flipped training data."""
    rows = []
    for seed in SEEDS:
        start = time.time()
        ds, train, val, test, dims = _data_for_seed(seed)
        train_cor, _ = D.corrupt(
            train, D.CorruptionSpec(label_flip_rate=0.3, seed=3000 + seed),
            ds.answer_table,
        )
        corrupted = np.array([bool(ex.corrupted) for ex in train_cor])

        base_model = _train_plain(dims, train_cor, seed)
        base_acc = P.evaluate_answer_model(base_model, test, ds.answer_table).accuracy

        ign_model, result = _train_ignoring(dims, train_cor, val, seed)
        ign_acc = P.evaluate_answer_model(ign_model, test, ds.answer_table).accuracy
        weights = result.final_weights()
        rows.append(
            {
                "seed": seed,
                "auc": ig.detection_auc(weights, corrupted),
                "gap": float(np.mean(weights[~corrupted]) - np.mean(weights[corrupted])),
                "base_acc": base_acc,
                "ign_acc": ign_acc,
                "seconds": time.time() - start,
                "weights_ok": bool(np.all((weights > 0) & (weights < 1))),
            }
        )
    return rows


@pytest.fixture(scope="module")
def low_label_runs():
    """Criterion 6/7 arms on 10%-labeled data, clean and corrupted."""
    out = {"clean": [], "corrupted": []}
    for seed in SEEDS:
        start = time.time()
        ds, train, val, test, dims = _data_for_seed(seed)
        rng = dc.make_rng(6000 + seed)
        n_lab = int(0.10 * len(train))
        labeled_pos = sorted(rng.permutation(len(train))[:n_lab])
        labeled = [train[i] for i in labeled_pos]
        labeled_cor, _ = D.corrupt(
            labeled, D.CorruptionSpec(label_flip_rate=0.3, seed=3000 + seed),
            ds.answer_table,
        )

        pre_model = M.TwoTowerModel.create(dims, seed=7000 + seed)
        pairs = P.sample_pairs(train, ds.vocab, "iq", 1.0, seed=9000 + seed)
        init_match = float(np.mean(pre_model.match_per_example_losses(pairs)))
        P.pretrain(
            pre_model, train, ds.vocab,
            P.PretrainConfig(epochs=30, batch_size=256, lr=0.005, seed=8000 + seed),
        )

        def acc_of(model):
            return P.evaluate_answer_model(model, test, ds.answer_table).accuracy

        clean_scratch = acc_of(_train_plain(dims, labeled, seed))
        clean_pre = acc_of(_train_plain(dims, labeled, seed, pretrained=pre_model))
        out["clean"].append(
            {
                "seed": seed,
                "scratch": clean_scratch,
                "pretrained": clean_pre,
                "init_match": init_match,
                "seconds": time.time() - start,
            }
        )

        start = time.time()
        cor_base = acc_of(_train_plain(dims, labeled_cor, seed))
        cor_pre = acc_of(_train_plain(dims, labeled_cor, seed, pretrained=pre_model))
        cor_ign = acc_of(_train_ignoring(dims, labeled_cor, val, seed)[0])
        cor_pre_ign = acc_of(
            _train_ignoring(dims, labeled_cor, val, seed, pretrained=pre_model)[0]
        )
        out["corrupted"].append(
            {
                "seed": seed,
                "base": cor_base,
                "ign": cor_ign,
                "pre": cor_pre,
                "pre_ign": cor_pre_ign,
                "seconds": time.time() - start,
            }
        )
    return out


# ---------------------------------------------------------------------------
# 1. Gradient correctness.
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    start = time.time()
    rng = dc.make_rng(101)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 9))
        h = int(rng.integers(1, 9))
        c = int(rng.integers(2, 9))
        b = int(rng.integers(1, 7))
        model = M.MlpClassifier.create(d, h, c, seed=int(rng.integers(0, 2**31)))
        x = rng.uniform(-2, 2, size=(b, d))
        labels = rng.integers(0, c, size=b)
        _, analytic = model.loss_and_grads(x, labels)
        numeric = dc.finite_diff_grad(
            lambda p: float(np.mean(model.per_example_losses(x, labels, params=p))),
            model.params,
            step=1e-5,
        )
        worst = max(worst, dc.gradient_rel_error(analytic, numeric))
    elapsed = time.time() - start
    verdict(
        1, "gradient-correctness",
        worst < 1e-4 and elapsed < 30.0,
        f"max rel err {worst:.2e} over 100 models, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. Hypergradient oracle agreement.
# ---------------------------------------------------------------------------


def test_criterion_2_hypergradient_oracle_agreement():
    start = time.time()
    rng = dc.make_rng(202)
    worst = 0.0
    for _ in range(50):
        n_tr = int(rng.integers(2, 11))
        n_val = int(rng.integers(1, 6))
        dim = int(rng.integers(1, 5))
        problem = ig.LeastSquaresProblem(
            rng.uniform(-2, 2, (n_tr, dim)), rng.uniform(-2, 2, n_tr),
            rng.uniform(-2, 2, (n_val, dim)), rng.uniform(-2, 2, n_val),
        )
        params = dc.ParameterSet({"w": rng.uniform(-1, 1, dim)})
        a = rng.uniform(0.1, 0.9, n_tr)
        fd = ig.hypergrad_fd(problem, params, a, 0.05)  # adaptive eps default
        exact = ig.hypergrad_exact(problem, params, a, 0.05)
        mask = np.abs(exact) > 1e-8
        if mask.any():
            rel = np.abs(fd[mask] - exact[mask]) / np.abs(exact[mask])
            worst = max(worst, float(rel.max()))

    problem = ig.LeastSquaresProblem([[1.0]], [1.0], [[1.0]], [1.0])
    params = dc.ParameterSet({"w": np.array([0.0])})
    closed = ig.hypergrad_fd(problem, params, np.ones(1), 0.1)[0]
    elapsed = time.time() - start
    verdict(
        2, "hypergradient-oracle-agreement",
        worst < 1e-2 and abs(closed - (-0.09)) < 1e-6 and elapsed < 60.0,
        f"max rel dev {worst:.2e}, closed-form {closed:.6f} (want -0.09), {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 3. Analytic identity of the weight gradient.
# ---------------------------------------------------------------------------


def test_criterion_3_weight_gradient_identity():
    rng = dc.make_rng(303)
    worst = 0.0
    for trial in range(20):
        n = int(rng.integers(2, 9))
        dim = int(rng.integers(1, 5))
        problem = ig.LeastSquaresProblem(
            rng.uniform(-2, 2, (n, dim)), rng.uniform(-2, 2, n),
            rng.uniform(-1, 1, (2, dim)), rng.uniform(-1, 1, 2),
        )
        params = dc.ParameterSet({"w": rng.uniform(-1, 1, dim)})
        losses = problem.per_example_train_losses(params)
        a = rng.uniform(0.1, 0.9, n)
        step = 1e-3
        for i in range(n):
            ap, am = a.copy(), a.copy()
            ap[i] += step
            am[i] -= step
            fd = (
                ig.weighted_train_loss(ap, losses)
                - ig.weighted_train_loss(am, losses)
            ) / (2 * step)
            worst = max(worst, abs(fd - losses[i]))
    verdict(
        3, "weight-gradient-identity",
        worst <= 1e-12,
        f"max abs deviation {worst:.2e} (tolerance 1e-12)",
    )


# ---------------------------------------------------------------------------
# 4. Corruption detection.
# ---------------------------------------------------------------------------


def test_criterion_4_corruption_detection(corrupted_full_label_runs):
    rows = corrupted_full_label_runs
    hits = sum(1 for r in rows if r["auc"] >= 0.8 and r["gap"] >= 0.1)
    slowest = max(r["seconds"] for r in rows)
    detail = (
        f"auc={[round(r['auc'], 3) for r in rows]}, "
        f"gap={[round(r['gap'], 3) for r in rows]}, "
        f"{hits}/5 seeds pass, slowest {slowest:.0f}s"
    )
    verdict(4, "corruption-detection", hits >= 4 and slowest < 600.0, detail)


# ---------------------------------------------------------------------------
# 5. Ignoring improves generalization.
# ---------------------------------------------------------------------------


def test_criterion_5_ignoring_improves_accuracy(corrupted_full_label_runs):
    rows = corrupted_full_label_runs
    mean_base = float(np.mean([r["base_acc"] for r in rows]))
    mean_ign = float(np.mean([r["ign_acc"] for r in rows]))
    verdict(
        5, "ignoring-improves-accuracy",
        mean_ign > mean_base,
        f"mean accuracy with ignoring {mean_ign:.3f} vs baseline {mean_base:.3f}",
    )


# ---------------------------------------------------------------------------
# 6. Pretraining helps in the low-label regime.
# ---------------------------------------------------------------------------


def test_criterion_6_pretraining_helps_low_label(low_label_runs):
    rows = low_label_runs["clean"]
    mean_scratch = float(np.mean([r["scratch"] for r in rows]))
    mean_pre = float(np.mean([r["pretrained"] for r in rows]))
    match_ok = all(abs(r["init_match"] - math.log(2)) < 0.15 for r in rows)
    slowest = max(r["seconds"] for r in rows)
    verdict(
        6, "pretraining-helps-low-label",
        mean_pre > mean_scratch and match_ok and slowest < 900.0,
        f"pretrained {mean_pre:.3f} vs scratch {mean_scratch:.3f}, "
        f"init match {[round(r['init_match'], 3) for r in rows]} "
        f"(ln2 +- 0.15), slowest {slowest:.0f}s",
    )


# ---------------------------------------------------------------------------
# 7. Ablation ordering.
# ---------------------------------------------------------------------------


def test_criterion_7_ablation_ordering(low_label_runs):
    rows = low_label_runs["corrupted"]
    means = {
        arm: float(np.mean([r[arm] for r in rows]))
        for arm in ("base", "ign", "pre", "pre_ign")
    }
    ok = (
        means["pre_ign"] >= means["pre"]
        and means["pre_ign"] >= means["ign"]
        and means["pre"] >= means["base"]
        and means["ign"] >= means["base"]
        and means["pre_ign"] > means["base"]
    )
    verdict(
        7, "ablation-ordering",
        ok,
        "mean accuracy " + ", ".join(f"{k}={v:.3f}" for k, v in means.items()),
    )


# ---------------------------------------------------------------------------
# 8. Metrics unit values.
# ---------------------------------------------------------------------------


def test_criterion_8_metrics_unit_suite():
    start = time.time()
    checks = [
        mt.exact_match_accuracy(["yes", "no"], ["yes", "yes"]) == 0.5,
        mt.exact_match_accuracy(["a", "b"], ["a", "b"]) == 1.0,
        mt.exact_match_accuracy(["a", "b"], ["c", "d"]) == 0.0,
        abs(mt.macro_token_f1(["cell wall"], ["wall"]) - 2.0 / 3.0) < 1e-15,
        mt.macro_token_f1([""], ["wall"]) == 0.0,
        mt.macro_token_f1(["x y"], ["x y"]) == 1.0,
        abs(mt.bleu_n(["the the the"], ["the cat"], 1) - 1.0 / 3.0) < 1e-15,
        mt.bleu_n(["yes"], ["no"], 1) == 0.0,
        all(mt.bleu_n(["a b c"], ["a b c"], n) == 1.0 for n in (1, 2, 3)),
    ]
    elapsed = time.time() - start
    verdict(
        8, "metrics-unit-suite",
        all(checks) and elapsed < 1.0,
        f"{sum(checks)}/{len(checks)} exact values, {elapsed:.3f}s",
    )


# ---------------------------------------------------------------------------
# 9. Split protocol.
# ---------------------------------------------------------------------------


def test_criterion_9_split_protocol():
    from collections import Counter

    worst_dev = 0.0
    for seed in range(20):
        ds = D.generate_synthetic(1000, d_img=8, n_concepts=4, seed=100 + seed)
        train, val, test = D.stratified_split(ds.examples, D.SplitSpec(seed=seed))
        assert len(train) + len(val) + len(test) == 1000
        total = Counter(ex.question_type for ex in ds.examples)
        for fraction, part in ((0.6, train), (0.2, val), (0.2, test)):
            got = Counter(ex.question_type for ex in part)
            for qtype, count in total.items():
                worst_dev = max(worst_dev, abs(got[qtype] - fraction * count))
    verdict(
        9, "split-protocol",
        worst_dev <= 1.0,
        f"max per-category deviation {worst_dev:.2f} examples over 20 seeds",
    )


# ---------------------------------------------------------------------------
# 10. CLI determinism.
# ---------------------------------------------------------------------------


def _manifest(path):
    return json.loads((path / "manifest.json").read_text())["files"]


def test_criterion_10_cli_determinism(tmp_path):
    fast = [
        "--set", "data.n=200", "--set", "data.d_img=8", "--set", "data.n_concepts=4",
        "--set", "train.epochs=2", "--set", "ignoring.epochs=2",
        "--set", "model.embed_dim=8", "--set", "model.hidden_dim=12",
        "--set", "pretrain.epochs=1", "--set", "pretrain.batch_size=64",
        "--set", "hypergrad_check.n_instances=5",
    ]
    results = {}
    for tag in ("a", "b"):
        root = tmp_path / tag
        gen, split, cor = root / "gen", root / "split", root / "cor"
        pre, train, ev, hg = root / "pre", root / "train", root / "eval", root / "hg"
        assert cli.main(["generate", "--out", str(gen), "--seed", "7"] + fast) == 0
        assert cli.main(
            ["split", "--dataset", str(gen / "dataset.jsonl"), "--out", str(split),
             "--seed", "7"] + fast
        ) == 0
        assert cli.main(
            ["corrupt", "--dataset", str(split / "train.jsonl"),
             "--meta", str(gen / "meta.json"), "--out", str(cor), "--seed", "7"] + fast
        ) == 0
        assert cli.main(
            ["pretrain", "--train", str(split / "train.jsonl"),
             "--meta", str(gen / "meta.json"), "--out", str(pre), "--seed", "7"] + fast
        ) == 0
        assert cli.main(
            ["train", "--train", str(cor / "dataset.jsonl"),
             "--val", str(split / "val.jsonl"), "--test", str(split / "test.jsonl"),
             "--meta", str(gen / "meta.json"), "--out", str(train),
             "--seed", "7", "--ignoring", "on"] + fast
        ) == 0
        assert cli.main(
            ["evaluate", "--checkpoint", str(train / "checkpoint.json"),
             "--split", str(split / "test.jsonl"), "--out", str(ev), "--seed", "7"]
            + fast
        ) == 0
        assert cli.main(
            ["hypergrad-check", "--out", str(hg), "--seed", "7"] + fast
        ) == 0
        results[tag] = {
            name: _manifest(path)
            for name, path in {
                "generate": gen, "split": split, "corrupt": cor, "pretrain": pre,
                "train": train, "evaluate": ev, "hypergrad-check": hg,
            }.items()
        }
    mismatched = [
        cmd for cmd in results["a"] if results["a"][cmd] != results["b"][cmd]
    ]
    verdict(
        10, "cli-determinism",
        not mismatched,
        "identical hashes for all 7 commands" if not mismatched
        else f"hash mismatch in: {mismatched}",
    )
