"""Acceptance criteria 1-10, one test each, each printing a PASS/FAIL line.

Run under pytest, or directly with ``python3 tests/test_acceptance.py``.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from multifuse.audio import AudioSignal, delta, hann_window, mfcc, stft  # noqa: E402
from multifuse.autodiff import Tensor  # noqa: E402
from multifuse.chat import clean_utterance, read_chat  # noqa: E402
from multifuse.checkpoint import load_model, save_model  # noqa: E402
from multifuse.encoders import EncoderConfig  # noqa: E402
from multifuse.fusion import FusionKind, crossmodal_attention, gmu_fuse, init_fusion_model, model_forward  # noqa: E402
from multifuse.gradsuite import run_suite  # noqa: E402
from multifuse.harness import (  # noqa: E402
    PlateauSchedule, RunConfig, evaluate_metrics, predict, split_train_val, synth_dataset, train,
)
from oracles import naive_mfcc, naive_stft, scalar_gmu, triple_loop_crossattention  # noqa: E402
from test_chat import EXPECTED, FIXTURES  # noqa: E402
from test_harness import hand_schedule  # noqa: E402

SEEDS = range(5)


@pytest.fixture
def report(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(number, ok, detail, started):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail} ({time.perf_counter() - started:.1f}s)"
        if capman is not None:
            with capman.global_and_fixture_disabled():
                print("\n" + line)
        else:
            print(line)
        assert ok, line

    return emit


def test_01_dsp_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(120):
        n = int(rng.integers(1, 65))
        frame_len = int(rng.choice([4, 8, 16, 32]))
        hop = int(rng.integers(1, frame_len + 1))
        x = rng.uniform(-1, 1, n)
        w = hann_window(frame_len)
        worst = max(worst, float(np.max(np.abs(stft(AudioSignal(x, 8000), frame_len, hop, w) - naive_stft(x, frame_len, hop, w)))))
    x = rng.uniform(-1, 1, 8000)
    mfcc_err = float(np.max(np.abs(mfcc(AudioSignal(x, 8000)).values - naive_mfcc(x, 8000))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and mfcc_err <= 1e-9 and elapsed < 10
    report(1, ok, f"STFT max err {worst:.1e} over 120 signals, MFCC max err {mfcc_err:.1e}", t0)


def test_02_delta_exactness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    ok = True
    for _ in range(500):
        frames, bands, width = int(rng.integers(1, 40)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
        c, slope = rng.uniform(-10, 10), rng.uniform(-5, 5)
        ok &= bool(np.all(delta(np.full((bands, frames), c), width) == 0))
        ramp = c + slope * np.tile(np.arange(frames, dtype=float), (bands, 1))
        inner = delta(ramp, width)[:, width:frames - width]
        ok &= inner.size == 0 or float(np.max(np.abs(inner - slope))) <= 1e-12
    report(2, ok, "constant -> 0 and ramp -> slope on 500 random shapes", t0)


def test_03_gradient_suite(report):
    t0 = time.perf_counter()
    results = run_suite(range(20), tol=1e-4)
    failed = sorted({(r.group, r.name) for r in results if not r.report.passed})
    worst = max(r.report.max_rel_error for r in results)
    elapsed = time.perf_counter() - t0
    groups = {r.group for r in results}
    ok = not failed and elapsed < 120 and groups == {"op", "encoder", "fusion"}
    report(3, ok, f"{len(results)} checks (20 seeds each), worst rel err {worst:.1e}, failed {failed}", t0)


def test_04_fusion_oracles(report):
    t0 = time.perf_counter()
    gmu_err = cm_err = row_err = single_err = 0.0
    bounds = convex = True
    for seed in range(120):
        rng = np.random.default_rng(seed)
        dt, dv, g = (int(v) for v in rng.integers(1, 5, size=3))
        raw = {"w_t": rng.standard_normal((g, dt)), "w_v": rng.standard_normal((g, dv)),
               "w_z": rng.standard_normal((g, dt + dv)), "b_t": rng.standard_normal(g),
               "b_v": rng.standard_normal(g), "b_z": rng.standard_normal(g)}
        ft, fv = rng.standard_normal((1, dt)), rng.standard_normal((1, dv))
        h, z = gmu_fuse(Tensor(ft), Tensor(fv), {f"fusion.gmu.{k}": Tensor(v) for k, v in raw.items()})
        oh, oz = scalar_gmu(ft[0], fv[0], *(raw[k] for k in ("w_t", "w_v", "w_z", "b_t", "b_v", "b_z")))
        gmu_err = max(gmu_err, float(np.max(np.abs(h.data[0] - oh))), float(np.max(np.abs(z.data[0] - oz))))
        bounds &= bool(np.all((z.data > 0) & (z.data < 1)))
        ht = np.tanh(ft @ raw["w_t"].T + raw["b_t"])
        hv = np.tanh(fv @ raw["w_v"].T + raw["b_v"])
        convex &= bool(np.all(h.data >= np.minimum(ht, hv) - 1e-12) and np.all(h.data <= np.maximum(ht, hv) + 1e-12))

        d, tq, tk = (int(v) for v in rng.integers(1, 5, size=3))
        wq, wk, wv = (rng.standard_normal((d, d)) for _ in range(3))
        xq, xk = rng.standard_normal((1, tq, d)), rng.standard_normal((1, tk, d))
        mask = (rng.random((1, tk)) < 0.7).astype(int)
        mask[0, 0] = 1
        y, s = crossmodal_attention(Tensor(xq), Tensor(xk), mask, Tensor(wq), Tensor(wk), Tensor(wv), return_scores=True)
        oy, os_ = triple_loop_crossattention(xq[0], xk[0], mask[0], wq, wk, wv)
        cm_err = max(cm_err, float(np.max(np.abs(y.data[0] - oy))), float(np.max(np.abs(s.data[0] - os_))))
        row_err = max(row_err, float(np.max(np.abs(s.data.sum(axis=-1) - 1))))
        y1 = crossmodal_attention(Tensor(xq), Tensor(xk[:, :1]), None, Tensor(wq), Tensor(wk), Tensor(wv)).data
        single_err = max(single_err, float(np.max(np.abs(y1 - xk[:, :1] @ wv))))
    ok = gmu_err <= 1e-6 and cm_err <= 1e-6 and bounds and convex and row_err <= 1e-12 and single_err <= 1e-12
    report(4, ok, f"120 instances: GMU err {gmu_err:.1e}, attention err {cm_err:.1e}, "
                  f"row-sum err {row_err:.1e}, single-key err {single_err:.1e}, bounds {bounds}, convex {convex}", t0)


def test_05_scheduler(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    traces = [[1.0] * 12, [3, 2, 2, 2, 2, 1, 1, 1, 1, 1, 1, 1], [5, 4, 3, 3, 3, 3, 2, 2, 2, 2, 2, 2, 2]]
    traces += [list(np.round(rng.uniform(0, 1, 40).cumsum() % 1.5, 2)) for _ in range(300)]
    mismatches = 0
    for trace in traces:
        s = PlateauSchedule(1e-3, 0.1, 3, 6)
        used, stop = [], None
        for loss in trace:
            used.append(s.lr)
            if s.step(loss).stop:
                stop = len(used)
                break
        want_used, want_stop = hand_schedule(trace, 1e-3)
        if stop != want_stop or not np.allclose(used, want_used, rtol=1e-15, atol=0):
            mismatches += 1
    report(5, mismatches == 0, f"{len(traces)} scripted traces, {mismatches} mismatches", t0)


def test_06_metrics(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        truth, pred = rng.integers(0, 2, n), rng.integers(0, 2, n)
        tp = int(np.sum((pred == 1) & (truth == 1)))
        fp = int(np.sum((pred == 1) & (truth == 0)))
        tn = int(np.sum((pred == 0) & (truth == 0)))
        fn = int(np.sum((pred == 0) & (truth == 1)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        want = {"accuracy": (tp + tn) / n, "precision": p, "recall": r,
                "f1": 2 * p * r / (p + r) if p + r else 0.0,
                "specificity": tn / (tn + fp) if tn + fp else 0.0}
        bad += evaluate_metrics(pred, truth).as_dict() != want
    report(6, bad == 0, f"1000 random pairs, {bad} mismatches", t0)


def _desk_config(ds):
    return RunConfig(text=EncoderConfig(patch=0, vocab_size=ds.vocab_size, max_positions=ds.max_len))


def test_07_desk_learning(report):
    t0 = time.perf_counter()
    ds = synth_dataset(200, snr_text=2, snr_audio=2, seed=0)
    cfg = _desk_config(ds)
    lines, ok = [], True
    for kind in FusionKind:
        val_accs, train_accs = [], []
        for seed in SEEDS:
            tr, va = split_train_val(ds, 0.35, seed)
            cfg.train.seed = seed
            best, _ = train(cfg.build_model(kind, seed), tr, va, cfg.train)
            val_accs.append(float(np.mean(predict(best, va)[0].argmax(1) == va.labels)))
            train_accs.append(float(np.mean(predict(best, tr)[0].argmax(1) == tr.labels)))
        hits = sum(a >= 0.9 for a in val_accs)
        ok &= hits >= 4
        lines.append(f"{kind.value} {hits}/5 (val {min(val_accs):.2f}-{max(val_accs):.2f}, train min {min(train_accs):.2f})")
    elapsed = time.perf_counter() - t0
    report(7, ok and elapsed < 600, "; ".join(lines), t0)


def test_08_gate_informativeness(report):
    t0 = time.perf_counter()
    ds = synth_dataset(200, snr_text=2, snr_audio=0, seed=0)
    cfg = _desk_config(ds)
    means = []
    for seed in SEEDS:
        tr, va = split_train_val(ds, 0.35, seed)
        cfg.train.seed = seed
        best, _ = train(cfg.build_model("gmu", seed), tr, va, cfg.train)
        means.append(float(predict(best, va, with_gate=True)[2].mean()))
    hits = sum(m > 0.5 for m in means)
    report(8, hits >= 4, f"mean gate on text per seed {[round(m, 3) for m in means]}, {hits}/5 above 0.5", t0)


def test_09_chat_fixtures(report):
    t0 = time.perf_counter()
    files = sorted(FIXTURES.glob("*.cha"))
    exact = all(list(read_chat(FIXTURES / f"{n}.cha").utterances) == EXPECTED[n]["PAR"]
                and list(read_chat(FIXTURES / f"{n}.cha", {"PAR", "INV"}).utterances) == EXPECTED[n]["ALL"]
                for n in EXPECTED)
    lines = [ln.split("\t", 1)[-1] for p in files for ln in p.read_text().splitlines()]
    idem = all(clean_utterance(clean_utterance(s)) == clean_utterance(s) for s in lines)
    ok = len(files) >= 5 and set(EXPECTED) == {p.stem for p in files} and exact and idem
    report(9, ok, f"{len(files)} fixtures exact={exact}, idempotent on {len(lines)} lines={idem}", t0)


def test_10_checkpoint_roundtrip(report, tmp_path):
    t0 = time.perf_counter()
    ds = synth_dataset(6, 1, 1, seed=0)
    text = EncoderConfig(patch=0, vocab_size=ds.vocab_size, max_positions=ds.max_len)
    same = {}
    for kind in FusionKind:
        model = init_fusion_model(kind, EncoderConfig(), text, seed=11)
        path = tmp_path / f"{kind.value}.ckpt"
        save_model(model, path)
        back = load_model(path)
        a = model_forward(model, ds.images, ds.token_ids, ds.masks).logits.data
        b = model_forward(back, ds.images, ds.token_ids, ds.masks).logits.data
        same[kind.value] = a.dtype == np.float32 and a.tobytes() == b.tobytes()
    report(10, all(same.values()), f"bitwise identical logits {same}", t0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
