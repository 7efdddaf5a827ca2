"""Acceptance gate. Each test checks one criterion at its stated tolerance and
records a PASS/FAIL line that is printed in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py -v`` (criteria 2 and 8
train real models and take minutes).
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, random_model, zero_model
from oracles import naive_bleu, naive_cider, random_corpus
from test_decoder import exhaustive_best
from test_encoder import encoder_output, permute_within_segments, swap_segments
from tslstm import nn
from tslstm.cli import main
from tslstm.data import load_dataset
from tslstm.decoder import beam_search_ranked, greedy_decode, teacher_forced_loss
from tslstm.encoder import segment_bounds, temporal_pool
from tslstm.metrics import bleu, cider
from tslstm.model import context
from tslstm.nn import LstmParams
from tslstm.tensor import mean_columns
from tslstm.training import Checkpoint, GradCheckConfig, gradient_check
from tslstm.vocab import BOS, EOS, decode_tokens


def record(n, ok, detail):
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    assert ok, ACCEPTANCE[n]


def test_criterion_1_gradient_oracle(monkeypatch):
    t0 = time.perf_counter()
    worst = {}
    for n_e in (1, 2, 3):
        rep = gradient_check(GradCheckConfig(n_e=n_e))
        worst[n_e] = max(rep.errors.values())
    elapsed = time.perf_counter() - t0
    real = nn._gate_backward
    monkeypatch.setattr(nn, "_gate_backward", lambda dh, dc, c: (real(dh, dc, c)[0], np.zeros_like(dc)))
    mutant = gradient_check(GradCheckConfig(n_e=3))
    ok = all(w < 1e-4 for w in worst.values()) and elapsed < 60 and not mutant.passed
    record(1, ok, "max rel err " + ", ".join(f"N_e={k}: {v:.1e}" for k, v in worst.items())
           + f"; {elapsed:.1f}s; mutant max err {max(mutant.errors.values()):.1e}")


OVERFIT = {
    "seed": 0,
    "synth": {"n_videos": 10, "events_per_video": [2, 2], "noise_std": 0.02, "split_scheme": "all"},
    "train": {"batch_size": 2, "max_epochs": 2000, "patience": 2000, "n_e": 2, "encoder_hidden": 64,
              "embed_dim": 64, "word_hidden": 64, "mm_hidden": 64, "min_count": 0, "lr_scale": 1.0,
              "stop_perplexity": 1.05},
    "decode": {"beam_width": 1, "max_len": 30, "split": "train"},
}


@pytest.mark.slow
def test_criterion_2_overfit(tmp_path):
    cfg = tmp_path / "overfit.json"
    cfg.write_text(json.dumps(OVERFIT))
    d, run = str(tmp_path / "data"), str(tmp_path / "run")
    t0 = time.perf_counter()
    assert main(["synth", "--config", str(cfg), "--out", d]) == 0
    assert main(["train", "--config", str(cfg), "--data", d, "--out", run]) == 0
    epochs = json.loads((tmp_path / "run" / "train_log.json").read_text())["epochs"]
    ppl = min(e["val_perplexity"] for e in epochs)
    # greedy decoding straight from the checkpoint
    ck = Checkpoint.load(tmp_path / "run" / "checkpoint.json")
    ds = load_dataset(tmp_path / "data" / "manifest.json")
    exact = 0
    for s in ds.split("train"):
        toks = greedy_decode(context(s.features, 2, ck.model), ck.model, 30)
        exact += decode_tokens(toks, ck.vocab) == s.captions[0]
    assert main(["caption", "--config", str(cfg), "--data", d, "--out", run]) == 0
    assert main(["eval", "--config", str(cfg), "--data", d, "--out", run,
                 "--captions", run + "/captions_train.json"]) == 0
    elapsed = time.perf_counter() - t0
    m = json.loads((tmp_path / "run" / "report_train.json").read_text())["metrics"]
    ok = ppl < 1.05 and len(epochs) <= 2000 and exact == 10 and m["bleu4"] > 0.99 and m["cider"] > 9.5 \
        and elapsed < 600
    record(2, ok, f"ppl {ppl:.4f} after {len(epochs)} epochs; greedy exact {exact}/10; "
           f"BLEU@4 {m['bleu4']:.4f}; CIDEr {m['cider']:.3f}; {elapsed:.0f}s")


def test_criterion_3_pooling_identities():
    rng = np.random.default_rng(0)
    bad = 0
    for n_v in range(1, 101):
        v = rng.normal(size=(5, n_v))
        bad += not np.array_equal(temporal_pool(v, n_v), v)
        bad += not np.array_equal(temporal_pool(v, 1)[:, 0], mean_columns(v))
    record(3, bad == 0, f"{200 - bad}/200 identities exact for N_v = 1..100")


def test_criterion_4_segment_invariance():
    rng = np.random.default_rng(4)
    same = changed = 0
    for _ in range(100):
        n_e = int(rng.integers(2, 7))
        n_v = n_e * int(rng.integers(2, 8))
        d = int(rng.integers(2, 6))
        enc = LstmParams(rng.uniform(-0.5, 0.5, (12, d)), rng.uniform(-0.5, 0.5, (12, 3)),
                         rng.uniform(-0.5, 0.5, 12))
        v = rng.normal(size=(d, n_v))
        base = encoder_output(v, n_e, enc)
        same += np.max(np.abs(encoder_output(permute_within_segments(v, n_e, rng), n_e, enc) - base)) == 0.0
        i, j = rng.choice(n_e, size=2, replace=False)
        means = temporal_pool(v, n_e)
        assert not np.array_equal(means[:, i], means[:, j])
        diff = np.max(np.abs(encoder_output(swap_segments(v, n_e, i, j), n_e, enc) - base))
        changed += diff > 1e-8
    record(4, same == 100 and changed == 100,
           f"within-segment permutation exact 0 on {same}/100; segment swap > 1e-8 on {changed}/100")


def test_criterion_5_beam_correctness():
    match = 0
    for seed in range(50):
        params = random_model(seed, vocab=7, scale=1.5)
        y = np.random.default_rng(seed + 1000).normal(size=9)
        hyp = beam_search_ranked(y, params, width=64, max_len=3)[0]
        neg, _, toks = exhaustive_best(y, params, 3)
        match += hyp.tokens == toks and abs(hyp.log_prob + neg) < 1e-12
    greedy = 0
    for seed in range(100):
        params = random_model(seed, vocab=10, scale=1.0)
        y = np.random.default_rng(seed + 2000).normal(size=9)
        g = greedy_decode(y, params, 10)
        greedy += beam_search_ranked(y, params, width=1, max_len=10)[0].tokens == g
    record(5, match == 50 and greedy == 100,
           f"beam(64) == exhaustive on {match}/50; beam(1) == greedy on {greedy}/100")


def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(6)
    worst_b = worst_c = 0.0
    for _ in range(200):
        cands, refs = random_corpus(rng)
        worst_b = max(worst_b, max(abs(a - b) for a, b in zip(bleu(cands, refs), naive_bleu(cands, refs))))
        worst_c = max(worst_c, abs(cider(cands, refs) - naive_cider(cands, refs)))
    clip = bleu([["the"] * 4], [[["the", "cat"]]])[0]
    ok = worst_b < 1e-12 and worst_c < 1e-12 and clip == 0.25
    record(6, ok, f"max |BLEU - oracle| {worst_b:.1e}; max |CIDEr - oracle| {worst_c:.1e}; clipped B@1 {clip}")


def test_criterion_7_uniform_loss():
    worst = 0.0
    for V, n in itertools.product((4, 7, 8, 50, 1000), (0, 1, 5, 30)):
        params = zero_model(vocab=V)
        loss = teacher_forced_loss([BOS] + [3] * n + [EOS], np.ones(9), params).loss
        worst = max(worst, abs(loss - math.log(V)))
    record(7, worst < 1e-12, f"max |loss - ln V| {worst:.1e}")


ABLATION = {
    "seed": 0,
    "synth": {"n_videos": 200},
    "train": {"batch_size": 16, "max_epochs": 150, "patience": 10, "encoder_hidden": 64, "embed_dim": 64,
              "word_hidden": 64, "mm_hidden": 64},
    "decode": {"beam_width": 5, "max_len": 30, "split": "test"},
    "ablation": {"values": [1, 3, 30]},
}


@pytest.mark.slow
def test_criterion_8_ablation(tmp_path):
    cfg = tmp_path / "ablate.json"
    cfg.write_text(json.dumps(ABLATION))
    d, out = str(tmp_path / "data"), tmp_path / "run"
    t0 = time.perf_counter()
    assert main(["synth", "--config", str(cfg), "--out", d]) == 0
    assert main(["ablate-ne", "--config", str(cfg), "--data", d, "--out", str(out)]) == 0
    elapsed = time.perf_counter() - t0
    rows = json.loads((out / "ablation.json").read_text())["rows"]
    head = (out / "ablation.txt").read_text().splitlines()[0]
    finite = all(math.isfinite(r[k]) for r in rows for k in ("bleu1", "bleu2", "bleu3", "bleu4", "cider"))
    ok = [r["n_e"] for r in rows] == [1, 3, 30] and finite and elapsed < 1800 \
        and [c.strip() for c in head.split("|")] == ["model", "B@1", "B@2", "B@3", "B@4", "M", "C"]
    summary = "; ".join(f"N_e={r['n_e']} B@4 {100 * r['bleu4']:.1f} C {100 * r['cider']:.1f}" for r in rows)
    record(8, ok, f"{summary}; {elapsed:.0f}s")


def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "synth": {"n_videos": 20, "feature_dim": 8},
        "train": {"batch_size": 4, "max_epochs": 3, "encoder_hidden": 8, "embed_dim": 8, "word_hidden": 8,
                  "mm_hidden": 8, "min_count": 0}}))
    d = str(tmp_path / "data")
    assert main(["synth", "--config", str(cfg), "--out", d]) == 0
    blobs = []
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--data", d, "--out", str(tmp_path / name)]) == 0
        blobs.append((tmp_path / name / "checkpoint.json").read_bytes())
    record(9, blobs[0] == blobs[1], f"checkpoints byte-identical: {blobs[0] == blobs[1]} ({len(blobs[0])} bytes)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
