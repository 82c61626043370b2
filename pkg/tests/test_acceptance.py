"""Acceptance suite: one test per criterion, each reporting a pass/fail line.

The lines are collected in ``conftest.ACCEPTANCE_LINES`` and printed in the
terminal summary. The training criteria share one seeded ablation sweep.
"""

import dataclasses
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, SWEEP_SEEDS

from mafnet import ablation
from mafnet.checkpoint import load_checkpoint, save_checkpoint
from mafnet.data import accuracy, decode_tensor, encode_tensor, f1_score, load_tensor, save_tensor
from mafnet.llfe import cross_attention, llfe_forward
from mafnet.mlfe import EVAL, TRAIN, AttentionStack, attention_drop, fuse_and_gate, lanet_forward
from mafnet.model import TOY_CONFIG, MafConfig, init_params, maf_forward
from mafnet.tensor import Rng, Tape, Tensor, backward, check_gradients, cross_entropy
from mafnet.viz import encode_ppm, overlay


def record(k: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def perturbed(params, seed, std=0.1):
    rng = np.random.default_rng(seed)
    return params.map_tensors(lambda n, t: Tensor(t.data + rng.normal(size=t.shape) * std))


def random_params(cfg, seed):
    return perturbed(init_params(cfg, seed), seed, std=0.5)


# ---------------------------------------------------------------------------
# 1. End-to-end gradients at the toy size
# ---------------------------------------------------------------------------


def test_criterion_1_gradients():
    cfg = TOY_CONFIG
    assert cfg.image_size == (12, 12) and cfg.channels == 8 and cfg.feature_grid == (2, 2)
    assert (cfg.num_lanets, cfg.heads, cfg.units) == (2, 2, 1)
    start = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        # away from init, where the fused max can sit on exact ties
        params = perturbed(init_params(cfg, seed), 1000 + seed)
        x = Tensor(np.random.default_rng(seed).uniform(size=(1, 12, 12)))
        label = seed % 2
        named = params.named_tensors()
        leaves = {n: Tensor(t.data, requires_grad=True) for n, t in named.items()}
        live = params.map_tensors(lambda n, t: leaves[n])
        with Tape() as tape:
            loss = cross_entropy(maf_forward(x, live, cfg, None, EVAL)[0], label)
        grads = backward(tape, loss)
        for name, t in named.items():
            f = lambda v, name=name: cross_entropy(  # noqa: E731
                maf_forward(x, params.replace_tensor(name, v), cfg, None, EVAL)[0], label)
            worst = max(worst, check_gradients(f, t, analytic=grads[leaves[name]]))
        worst = max(worst, check_gradients(lambda v: cross_entropy(maf_forward(v, params, cfg, None, EVAL)[0], label), x))
    seconds = time.perf_counter() - start
    record(1, worst < 1e-4 and seconds < 120,
           f"max relative error {worst:.2e} (< 1e-4) over 10 seeds in {seconds:.1f}s (< 120s)")


# ---------------------------------------------------------------------------
# 2. Attention algebra
# ---------------------------------------------------------------------------


def test_criterion_2_attention_algebra():
    rng = np.random.default_rng(2)
    worst_row, map_lo, map_hi, gate_excess = 0.0, 1.0, 0.0, -np.inf
    for case in range(1000):
        heads = int(rng.choice([1, 2, 4]))
        c = 4 * int(rng.integers(1, 5))
        if c % heads:
            heads = 1
        cfg = dataclasses.replace(TOY_CONFIG, channels=c, heads=heads, r=4,
                                  num_lanets=int(rng.integers(1, 5)))
        params = random_params(cfg, case)
        attn = params.units[0][0].attn
        mq, mk = int(rng.integers(1, 7)), int(rng.integers(1, 10))
        q = Tensor(rng.normal(size=(mq, c)) * rng.uniform(0.1, 5))
        kv = Tensor(rng.normal(size=(mk, c)) * rng.uniform(0.1, 5))
        _, weights = cross_attention(q, kv, attn, 0.0, None, EVAL, return_weights=True)
        worst_row = max(worst_row, float(np.abs(weights.data.sum(-1) - 1.0).max()))

        h, w = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        x = Tensor(rng.normal(size=(c, h, w)) * rng.uniform(0.1, 3))
        maps = np.concatenate([lanet_forward(x, ln).data for ln in params.mlfe.lanets])
        map_lo, map_hi = min(map_lo, maps.min()), max(map_hi, maps.max())
        gated = fuse_and_gate(x, AttentionStack(Tensor(maps), np.array(-1))).data
        gate_excess = max(gate_excess, float((np.abs(gated) - np.abs(x.data)).max()))
    ok = worst_row <= 1e-12 and map_lo > 0.0 and map_hi < 1.0 and gate_excess <= 0.0
    record(2, ok, f"softmax row error {worst_row:.1e} (<= 1e-12), maps in (0,1) with min {map_lo:.2g} "
                  f"and 1 - max {1.0 - map_hi:.2g}, max |gated|-|x| {gate_excess:.3g} (<= 0), 1000 cases")


# ---------------------------------------------------------------------------
# 3. Drop semantics
# ---------------------------------------------------------------------------


def test_criterion_3_drop_semantics():
    trials = 10_000
    stack = AttentionStack(Tensor(np.full((2, 3, 3), 0.5)), np.array(-1))
    map_hits = sum(attention_drop(stack, 0.6, Rng(30).split(t), TRAIN).dropped_index is not None
                   for t in range(trials)) / trials

    cfg = dataclasses.replace(TOY_CONFIG, heads=2)
    attn = init_params(cfg, 0).units[0][0].attn
    q, kv = Tensor(np.ones((1, 8))), Tensor(np.ones((3, 8)))
    head_hits = 0
    for t in range(trials):
        _, weights = cross_attention(q, kv, attn, 0.4, Rng(31).split(t), TRAIN, return_weights=True)
        head_hits += bool((weights.data.sum(axis=(-1, -2)) == 0).any())
    head_freq = head_hits / trials

    base = MafConfig()
    params = perturbed(init_params(base, 3), 3)
    x = Tensor(np.random.default_rng(3).uniform(size=(4, 1, 48, 48)))
    zero = dataclasses.replace(base, p_map=0.0, p_head=0.0)
    train_logits, _ = maf_forward(x, params, zero, Rng(7), TRAIN)
    eval_logits, _ = maf_forward(x, params, zero, None, EVAL)
    bit_exact = train_logits.data.tobytes() == eval_logits.data.tobytes()
    ignores = all(
        maf_forward(x, params, dataclasses.replace(base, p_map=pm, p_head=ph), Rng(s), EVAL)[0].data.tobytes()
        == eval_logits.data.tobytes()
        for s, (pm, ph) in enumerate([(0.6, 0.4), (1.0, 1.0), (0.3, 0.9)]))
    ok = bit_exact and ignores and abs(map_hits - 0.6) <= 0.02 and abs(head_freq - 0.4) <= 0.02
    record(3, ok, f"p=0 train==eval bit-exact {bit_exact}, eval ignores p {ignores}, "
                  f"map drop freq {map_hits:.4f} (0.6±0.02), head drop freq {head_freq:.4f} (0.4±0.02)")


# ---------------------------------------------------------------------------
# 4. Permutation equivariance of the local feature extractor
# ---------------------------------------------------------------------------


def test_criterion_4_llfe_equivariance():
    cfg = dataclasses.replace(MafConfig(), units=2)
    params = perturbed(init_params(cfg, 4), 4, std=0.05)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(36, cfg.channels))
    out = llfe_forward(Tensor(x), params.patches, params.units, 0.0, None, EVAL).data
    worst = 0.0
    for _ in range(20):
        perm = rng.permutation(36)
        moved = llfe_forward(Tensor(x[perm]), params.patches, params.units, 0.0, None, EVAL).data
        worst = max(worst, float(np.abs(moved - out[perm]).max()))
    record(4, worst <= 1e-9, f"max deviation {worst:.1e} (<= 1e-9) over 20 permutations")


# ---------------------------------------------------------------------------
# 5-7. Synthetic task and ablations (shared sweep)
# ---------------------------------------------------------------------------


def _job(sweep, variant, seed, n=2):
    return next(r for r in sweep.results
                if r.job.variant == variant and r.job.seed == seed and r.job.config.num_lanets == n)


@pytest.mark.slow
def test_criterion_5_synthetic_task(sweep):
    r = _job(sweep, "full", 0)
    clean, occluded = r.scores["clean"][0], r.scores["occluded"][0]
    others = ", ".join(f"s{s}={_job(sweep, 'full', s).scores['clean'][0]:.4f}/"
                       f"{_job(sweep, 'full', s).scores['occluded'][0]:.4f}" for s in SWEEP_SEEDS[1:])
    ok = clean >= 0.95 and occluded >= 0.90 and r.seconds < 1800
    record(5, ok, f"seed 0 clean {clean:.4f} (>= 0.95), occluded {occluded:.4f} (>= 0.90), "
                  f"{r.seconds:.0f}s (< 1800s); other seeds clean/occluded {others}")


@pytest.mark.slow
def test_criterion_6_ablation_ordering(sweep):
    m = {v: ablation.mean_acc(sweep.results, "occluded", v) for v in ablation.VARIANTS}
    ok = m["full"] >= m["no_drop"] >= m["backbone"] and m["full"] - m["backbone"] >= 0.03
    detail = ", ".join(f"{v} {a:.4f}" for v, a in m.items())
    record(6, ok, f"occluded mean acc over {len(SWEEP_SEEDS)} seeds: {detail}; need full >= no_drop >= "
                  f"backbone and full - backbone >= 0.03 (got {m['full'] - m['backbone']:+.4f})")


@pytest.mark.slow
def test_criterion_7_lanet_count(sweep):
    m = {n: ablation.mean_acc(sweep.results, "occluded", ablation.LANET_VARIANT, n) for n in ablation.LANET_COUNTS}
    gap = m[2] - m[1]
    detail = ", ".join(f"N={n} {a:.4f}" for n, a in m.items())
    record(7, gap >= 0.05, f"occluded mean acc {detail}; N=2 - N=1 = {gap:+.4f} (>= 0.05)")


# ---------------------------------------------------------------------------
# 8. Metrics
# ---------------------------------------------------------------------------


def test_criterion_8_metric_oracle():
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        preds, labels = rng.integers(0, 2, n).tolist(), rng.integers(0, 2, n).tolist()
        tp = sum(p == 1 and y == 1 for p, y in zip(preds, labels))
        fp = sum(p == 1 and y == 0 for p, y in zip(preds, labels))
        fn = sum(p == 0 and y == 1 for p, y in zip(preds, labels))
        tn = n - tp - fp - fn
        if tp == 0:
            f1 = 0.0
        else:
            precision, recall = tp / (tp + fp), tp / (tp + fn)
            f1 = 2 * precision * recall / (precision + recall)
        mismatches += accuracy(preds, labels) != (tp + tn) / n or f1_score(preds, labels) != f1
    labels = [0] * 5508 + [1] * 4492
    degenerate = (accuracy([0] * 10_000, labels), f1_score([0] * 10_000, labels))
    ok = mismatches == 0 and degenerate == (0.5508, 0.0)
    record(8, ok, f"{mismatches} mismatches in 1000 cases; all-negative row acc={degenerate[0]} f1={degenerate[1]}")


# ---------------------------------------------------------------------------
# 9. Bit-exact I/O
# ---------------------------------------------------------------------------


def test_criterion_9_bit_exact_io(tmp_path):
    rng = np.random.default_rng(9)
    arrays = [rng.normal(size=s) for s in [(), (7,), (3, 4), (2, 3, 5), (1, 48, 48)]]
    arrays.append(np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 5e-324]))
    maft_ok = all(decode_tensor(encode_tensor(a)).data.tobytes() == a.tobytes() for a in arrays)
    save_tensor(tmp_path / "t.maft", arrays[3])
    maft_ok &= load_tensor(tmp_path / "t.maft").data.tobytes() == arrays[3].tobytes()

    cfg = MafConfig()
    params = perturbed(init_params(cfg, 9), 9)
    save_checkpoint(tmp_path / "ck", cfg, params)
    cfg2, loaded = load_checkpoint(tmp_path / "ck")
    x = Tensor(rng.uniform(size=(5, 1, 48, 48)))
    logits_ok = (cfg2 == cfg and maf_forward(x, params, cfg, None, EVAL)[0].data.tobytes()
                 == maf_forward(x, loaded, cfg2, None, EVAL)[0].data.tobytes())

    blob = encode_ppm(overlay(x.data[0, 0], rng.uniform(size=(6, 6))))
    ppm_ok = blob[:13] == b"P6\n48 48\n255\n" and len(blob) == 13 + 48 * 48 * 3
    record(9, maft_ok and logits_ok and ppm_ok,
           f"MAFT round trip {maft_ok}, checkpoint logits bit-identical {logits_ok}, PPM header exact {ppm_ok}")
