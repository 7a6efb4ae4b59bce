import json
import math

import numpy as np
import pytest

from multifuse.checkpoint import load_model, load_tensors, save_model, save_tensors
from multifuse.encoders import EncoderConfig
from multifuse.fusion import FusionKind, init_fusion_model, model_forward
from multifuse.harness import (
    METRIC_NAMES, Dataset, PlateauSchedule, RunConfig, TrainConfig, aggregate, evaluate_metrics,
    format_table, load_dataset, predict, run_experiment, save_dataset, split_train_val, synth_dataset,
    token_counts, train,
)


def _toy_dataset(n, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.array([0, 1] * (n // 2))
    return Dataset([f"s{i}" for i in range(n)], np.zeros((n, 3, 4, 4), np.float32),
                   rng.integers(4, 8, (n, 5)), np.ones((n, 5), np.int64), labels, 8)


def _small_cfg(ds, **train):
    return RunConfig(
        vision=EncoderConfig(depth=1, width=8, heads=2, mlp_dim=8, patch=8, side=ds.side),
        text=EncoderConfig(depth=1, width=8, heads=2, mlp_dim=8, patch=0, max_positions=ds.max_len,
                           vocab_size=ds.vocab_size),
        train=TrainConfig(**{"max_epochs": 3, "batch_size": 8, **train}),
        gmu_dim=6, hidden=12,
    )


# ---------------------------------------------------------------- split

def test_split_reference_counts():
    ds = _toy_dataset(108)
    tr, va = split_train_val(ds, 0.35, seed=0)
    assert (len(tr), len(va)) == (70, 38)
    assert abs(int(tr.labels.sum()) - 35) <= 1 and abs(int(va.labels.sum()) - 19) <= 1
    assert sorted(tr.ids + va.ids) == sorted(ds.ids)
    assert not set(tr.ids) & set(va.ids)


def test_split_symmetric_case():
    tr, va = split_train_val(_toy_dataset(10), 0.5, seed=3)
    assert len(tr) == len(va) == 5
    assert abs(int(tr.labels.sum()) - int(va.labels.sum())) <= 1


def test_split_is_deterministic_and_seeded():
    ds = _toy_dataset(40)
    a, _ = split_train_val(ds, 0.35, seed=7)
    b, _ = split_train_val(ds, 0.35, seed=7)
    c, _ = split_train_val(ds, 0.35, seed=8)
    assert a.ids == b.ids and a.ids != c.ids


def test_split_rejects_single_class():
    ds = _toy_dataset(6)
    ds.labels[:] = 1
    with pytest.raises(ValueError):
        split_train_val(ds)
    with pytest.raises(ValueError):
        split_train_val(_toy_dataset(6), 1.0)


# ---------------------------------------------------------------- metrics

def test_metrics_hand_confusion_matrix():
    truth = [1, 1, 1, 1, 0, 0, 0, 0]
    pred = [1, 1, 1, 0, 1, 0, 0, 0]
    m = evaluate_metrics(pred, truth)
    assert (m.tp, m.fn, m.fp, m.tn) == (3, 1, 1, 3)
    for name in METRIC_NAMES:
        assert getattr(m, name) == 0.75


def test_metrics_perfect_and_degenerate():
    truth = [0, 1, 1, 0, 1]
    assert all(v == 1.0 for v in evaluate_metrics(truth, truth).as_dict().values())
    m = evaluate_metrics([0] * 5, truth)
    assert m.recall == 0 and m.specificity == 1 and m.precision == 0
    assert "precision" in m.undefined and "f1" in m.undefined
    with pytest.raises(ValueError):
        evaluate_metrics([0, 1], [0, 1, 1])


def test_metrics_match_direct_counting():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(1, 30))
        truth, pred = rng.integers(0, 2, n), rng.integers(0, 2, n)
        m = evaluate_metrics(pred, truth)
        tp = sum(1 for p, t in zip(pred, truth) if p == 1 and t == 1)
        fp = sum(1 for p, t in zip(pred, truth) if p == 1 and t == 0)
        tn = sum(1 for p, t in zip(pred, truth) if p == 0 and t == 0)
        fn = n - tp - fp - tn
        assert m.accuracy == (tp + tn) / n
        assert m.precision == (tp / (tp + fp) if tp + fp else 0.0)
        assert m.recall == (tp / (tp + fn) if tp + fn else 0.0)
        assert m.specificity == (tn / (tn + fp) if tn + fp else 0.0)
        if m.precision + m.recall > 0:
            assert m.f1 == 2 * m.precision * m.recall / (m.precision + m.recall)


# ---------------------------------------------------------------- schedule

def hand_schedule(losses, lr, factor=0.1, plateau=3, stop=6, min_delta=1e-6):
    """Reference: count epochs since the last improvement, read decisions off that count."""
    best, since, used = math.inf, 0, []
    reductions = 0
    for loss in losses:
        used.append(lr * factor ** reductions)
        if loss < best - min_delta:
            best, since = loss, 0
        else:
            since += 1
            if since % plateau == 0:
                reductions += 1
            if since == stop:
                return used, len(used)
    return used, None


def run_schedule(losses, lr):
    s = PlateauSchedule(lr)
    used = []
    for loss in losses:
        used.append(s.lr)
        if s.step(loss).stop:
            return used, len(used)
    return used, None


@pytest.mark.parametrize("trace", [
    [1.0] * 10,
    [1.0, 0.9, 0.9, 0.9, 0.9, 0.8, 0.8],
    [5, 4, 3, 3, 3, 3, 2, 2, 2, 2, 2, 2, 2],
    [1.0, 1.0 - 5e-7, 1.0 - 9e-7, 1.0, 1.0, 1.0, 1.0],
])
def test_schedule_matches_hand_simulation(trace):
    used, stop = run_schedule(trace, 1e-3)
    want_used, want_stop = hand_schedule(trace, 1e-3)
    assert stop == want_stop
    np.testing.assert_allclose(used, want_used, rtol=1e-15)


def test_schedule_reference_trace():
    used, stop = run_schedule([1.0, 2, 2, 2, 2, 2, 2, 2], 1.0)
    assert used == [1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1]
    assert stop == 7


def test_schedule_random_traces():
    rng = np.random.default_rng(1)
    for _ in range(200):
        trace = list(np.round(rng.uniform(0, 1, 30).cumsum() % 1.3, 2))
        (used, stop), (want_used, want_stop) = run_schedule(trace, 0.5), hand_schedule(trace, 0.5)
        assert stop == want_stop
        np.testing.assert_allclose(used, want_used, rtol=1e-15)


@pytest.fixture(scope="module")
def tiny():
    ds = synth_dataset(24, snr_text=2, snr_audio=2, seed=0, side=16, max_len=8, n_words=12, words_per_sample=6)
    return ds, _small_cfg(ds)


def test_frozen_model_stops_at_epoch_seven(tiny):
    ds, cfg = tiny
    tr, va = split_train_val(ds, 0.35, 0)
    model = cfg.build_model("concat", 0)
    best, hist = train(model, tr, va, TrainConfig(lr=0.0, max_epochs=50))
    assert hist.stopped_early and len(hist.epochs) == 7
    assert hist.best_epoch == 1
    assert all(b.tobytes() == m.tobytes() for b, m in zip(best.params.values(), model.params.values()))


@pytest.mark.parametrize("kind", list(FusionKind))
def test_training_is_deterministic(tiny, kind):
    ds, cfg = tiny
    tr, va = split_train_val(ds, 0.35, 0)
    runs = [train(cfg.build_model(kind, 1), tr, va, TrainConfig(max_epochs=2, seed=4)) for _ in range(2)]
    assert runs[0][1].as_dict() == runs[1][1].as_dict()
    for k in runs[0][0].params:
        assert runs[0][0].params[k].tobytes() == runs[1][0].params[k].tobytes()
    assert all(np.isfinite(e.train_loss) for e in runs[0][1].epochs)


def test_history_records_rate_per_epoch(tiny):
    ds, cfg = tiny
    tr, va = split_train_val(ds, 0.35, 0)
    _, hist = train(cfg.build_model("gmu", 0), tr, va, TrainConfig(lr=0.0, max_epochs=5, early_stop_patience=50))
    assert hist.lrs == [0.0] * 5
    assert [e.epoch for e in hist.epochs] == [1, 2, 3, 4, 5]


# ---------------------------------------------------------------- experiments

def test_aggregate_population_std():
    runs = [{"kind": "gmu", **{m: v for m in METRIC_NAMES}} for v in (0.8, 0.9)]
    rep = aggregate(runs, [FusionKind.GMU])
    assert rep["gmu"]["accuracy"]["mean"] == pytest.approx(0.85, abs=1e-15)
    assert rep["gmu"]["accuracy"]["std"] == pytest.approx(0.05, abs=1e-15)
    single = aggregate(runs[:1], [FusionKind.GMU])
    assert all(single["gmu"][m]["std"] == 0 for m in METRIC_NAMES)


def test_run_experiment_report_shape(tiny):
    ds, cfg = tiny
    cfg.train.repetitions = 2
    cfg.train.max_epochs = 1
    rep = run_experiment(cfg, ds, ["concat", "gmu"])
    assert set(rep) == {"concat", "gmu", "per_run"}
    for kind in ("concat", "gmu"):
        assert set(rep[kind]) == set(METRIC_NAMES)
        rows = [r for r in rep["per_run"] if r["kind"] == kind]
        assert [r["seed"] for r in rows] == [0, 1]
        for m in METRIC_NAMES:
            vals = [r[m] for r in rows]
            assert rep[kind][m]["mean"] == float(np.mean(vals))
            assert rep[kind][m]["std"] == float(np.std(vals))
    json.dumps(rep)
    table = format_table(rep)
    assert "Gated Multimodal Unit" in table and "±" in table


# ---------------------------------------------------------------- synthetic data

def test_synth_balance_and_errors():
    ds = synth_dataset(100, 1, 1, side=8, max_len=8)
    assert int(ds.labels.sum()) == 50
    assert ds.images.shape == (100, 3, 8, 8) and ds.images.min() >= -1 and ds.images.max() <= 1
    with pytest.raises(ValueError):
        synth_dataset(7, 1, 1)


def _logistic_probe(x_tr, y_tr, x_va, y_va, steps=500, lr=0.5):
    mu, sd = x_tr.mean(0), x_tr.std(0) + 1e-9
    x_tr, x_va = (x_tr - mu) / sd, (x_va - mu) / sd
    w, b = np.zeros(x_tr.shape[1]), 0.0
    for _ in range(steps):
        p = 1 / (1 + np.exp(-(x_tr @ w + b)))
        w -= lr * (x_tr.T @ (p - y_tr) / len(y_tr) + 1e-3 * w)
        b -= lr * float(np.mean(p - y_tr))
    return float(np.mean(((x_va @ w + b) > 0) == y_va))


def test_text_probe_separates_text_only_signal():
    ds = synth_dataset(200, snr_text=2, snr_audio=0, seed=1, side=8)
    tr, va = split_train_val(ds, 0.35, 0)
    assert _logistic_probe(token_counts(tr), tr.labels, token_counts(va), va.labels) >= 0.9


def test_no_signal_probe_is_near_chance():
    accs = []
    for seed in range(5):
        ds = synth_dataset(200, snr_text=0, snr_audio=0, seed=seed, side=8)
        tr, va = split_train_val(ds, 0.35, 0)
        accs.append(_logistic_probe(token_counts(tr), tr.labels, token_counts(va), va.labels))
    assert abs(np.mean(accs) - 0.5) < 0.1


def test_dataset_directory_roundtrip(tmp_path, tiny):
    ds, _ = tiny
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.ids == sorted(ds.ids)
    order = [ds.ids.index(i) for i in back.ids]
    np.testing.assert_array_equal(back.images, ds.images[order])
    np.testing.assert_array_equal(back.token_ids, ds.token_ids[order])
    np.testing.assert_array_equal(back.labels, ds.labels[order])


# ---------------------------------------------------------------- checkpoints

def test_tensor_file_layout(tmp_path):
    path = tmp_path / "t.ckpt"
    save_tensors({"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.float32([1.5])}, path)
    raw = path.read_bytes()
    assert raw[:4] == b"ADMM" and len(raw) == 12 + (4 + 1 + 1 + 8 + 24) + (4 + 1 + 1 + 4 + 4)
    back = load_tensors(path)
    np.testing.assert_array_equal(back["a"], np.arange(6).reshape(2, 3))
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_tensors(path)


@pytest.mark.parametrize("kind", list(FusionKind))
def test_checkpoint_roundtrip_is_bitwise(tmp_path, tiny, kind):
    ds, cfg = tiny
    model = cfg.build_model(kind, 3)
    save_model(model, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    assert back.kind is model.kind and back.vision == model.vision and back.text == model.text
    a = model_forward(model, ds.images[:5], ds.token_ids[:5], ds.masks[:5]).logits.data
    b = model_forward(back, ds.images[:5], ds.token_ids[:5], ds.masks[:5]).logits.data
    assert a.dtype == np.float32 and a.tobytes() == b.tobytes()


def test_predict_returns_gate_for_gmu(tiny):
    ds, cfg = tiny
    logits, loss, gate = predict(cfg.build_model("gmu", 0), ds, with_gate=True)
    assert logits.shape == (len(ds), 2) and gate.shape == (len(ds), 6) and loss > 0
    assert predict(cfg.build_model("concat", 0), ds, with_gate=True)[2] is None
