"""Datasets, training schedule, metrics and multi-run experiments."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .audio import FeatureImage, load_fimg, normalize_image
from .chat import CLS, PAD, SEP, TokenSequence, build_vocab, read_tokens_jsonl, tokenize
from .encoders import EncoderConfig
from .fusion import FusionKind, FusionModel, fused_forward, init_fusion_model, wrap_params

log = logging.getLogger(__name__)

METRIC_NAMES = ("precision", "recall", "f1", "accuracy", "specificity")


# ---------------------------------------------------------------- data

@dataclass(frozen=True)
class Sample:
    id: str
    image: FeatureImage
    tokens: TokenSequence
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"sample {self.id}: label must be 0 or 1")


@dataclass
class Dataset:
    """Column store of samples; label 1 is dementia (AD)."""

    ids: list[str]
    images: np.ndarray  # [N, 3, S, S] float32
    token_ids: np.ndarray  # [N, T] int64
    masks: np.ndarray  # [N, T] int64
    labels: np.ndarray  # [N] int64
    vocab_size: int
    vocab: dict[str, int] | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            self.ids[i],
            FeatureImage(self.images[i]),
            TokenSequence(self.token_ids[i], self.masks[i], self.vocab_size),
            int(self.labels[i]),
        )

    def subset(self, index: Sequence[int]) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            [self.ids[i] for i in index],
            self.images[index],
            self.token_ids[index],
            self.masks[index],
            self.labels[index],
            self.vocab_size,
            self.vocab,
        )

    @classmethod
    def from_samples(cls, samples: Iterable[Sample]) -> "Dataset":
        samples = list(samples)
        if not samples:
            raise ValueError("empty dataset")
        return cls(
            [s.id for s in samples],
            np.stack([s.image.channels for s in samples]).astype(np.float32),
            np.stack([s.tokens.ids for s in samples]).astype(np.int64),
            np.stack([s.tokens.attention_mask for s in samples]).astype(np.int64),
            np.array([s.label for s in samples], dtype=np.int64),
            max(s.tokens.vocab_size for s in samples),
        )

    @property
    def side(self) -> int:
        return self.images.shape[-1]

    @property
    def max_len(self) -> int:
        return self.token_ids.shape[1]


def load_dataset(data_dir, kind: str = "mel", vocab_size: int | None = None) -> Dataset:
    """Read ``labels.csv`` (id,label), ``tokens.jsonl`` and ``<id>.<kind>.fimg`` files."""
    data_dir = Path(data_dir)
    labels = {}
    for line in (data_dir / "labels.csv").read_text().splitlines():
        if not line.strip() or line.startswith("id,"):
            continue
        sid, lab = line.split(",")
        labels[sid.strip()] = int(lab)
    if vocab_size is None:
        vocab_path = data_dir / "vocab.json"
        vocab_size = max(json.loads(vocab_path.read_text()).values()) + 1
    tokens = read_tokens_jsonl(data_dir / "tokens.jsonl", vocab_size)
    samples = [
        Sample(sid, load_fimg(data_dir / f"{sid}.{kind}.fimg"), tokens[sid], lab)
        for sid, lab in sorted(labels.items())
    ]
    return Dataset.from_samples(samples)


def save_dataset(ds: Dataset, data_dir, kind: str = "mel") -> None:
    from .audio import save_fimg

    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    lines = ["id,label"]
    with open(data_dir / "tokens.jsonl", "w") as fh:
        for s in ds:
            save_fimg(s.image, data_dir / f"{s.id}.{kind}.fimg")
            fh.write(json.dumps({"id": s.id, "ids": s.tokens.ids.tolist(),
                                 "mask": s.tokens.attention_mask.tolist()}) + "\n")
            lines.append(f"{s.id},{s.label}")
    (data_dir / "labels.csv").write_text("\n".join(lines) + "\n")
    vocab = ds.vocab or {f"[{i}]": i for i in range(ds.vocab_size)}
    (data_dir / "vocab.json").write_text(json.dumps(vocab, indent=1))


def split_train_val(ds: Dataset, val_fraction: float = 0.35, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified, seeded split.

    The train size is round((1 - val_fraction) * n); each class contributes
    the floor of its share, and leftover slots go to the classes with the
    largest fractional remainders.
    """
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    classes = np.unique(ds.labels)
    if len(classes) < 2:
        raise ValueError("split_train_val: dataset needs both classes")
    rng = np.random.default_rng(seed)
    n = len(ds)
    n_train = int(math.floor((1 - val_fraction) * n + 0.5))
    members = {c: rng.permutation(np.flatnonzero(ds.labels == c)) for c in classes}
    shares = {c: (1 - val_fraction) * len(members[c]) for c in classes}
    take = {c: int(math.floor(shares[c])) for c in classes}
    leftover = n_train - sum(take.values())
    for c in sorted(classes, key=lambda c: (-(shares[c] - take[c]), c))[:leftover]:
        take[c] += 1
    train_idx = np.concatenate([members[c][: take[c]] for c in classes])
    val_idx = np.concatenate([members[c][take[c]:] for c in classes])
    return ds.subset(rng.permutation(train_idx)), ds.subset(rng.permutation(val_idx))


# ---------------------------------------------------------------- metrics

@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    specificity: float
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    undefined: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def _ratio(num: int, den: int, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def evaluate_metrics(predictions, truth) -> Metrics:
    """Binary metrics with dementia (label 1) as the positive class.

    Ratios with a zero denominator are reported as 0 and listed in
    ``Metrics.undefined``.
    """
    pred = np.asarray(predictions).astype(np.int64)
    true = np.asarray(truth).astype(np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError(f"evaluate_metrics: shapes {pred.shape} and {true.shape} differ")
    if pred.size == 0:
        raise ValueError("evaluate_metrics: empty input")
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    undefined: list[str] = []
    precision = _ratio(tp, tp + fp, "precision", undefined)
    recall = _ratio(tp, tp + fn, "recall", undefined)
    specificity = _ratio(tn, tn + fp, "specificity", undefined)
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        undefined.append("f1")
    accuracy = (tp + tn) / pred.size
    return Metrics(accuracy, precision, recall, f1, specificity, tp, fp, tn, fn, tuple(undefined))


# ---------------------------------------------------------------- schedule

@dataclass
class TrainConfig:
    lr: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    early_stop_patience: int = 6
    min_delta: float = 1e-6
    max_epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    val_fraction: float = 0.35
    repetitions: int = 5

    REFERENCE_LR = 1e-5

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.repetitions < 1:
            raise ValueError("batch_size, max_epochs and repetitions must be >= 1")

    @classmethod
    def reference_rate(cls, **overrides) -> "TrainConfig":
        return cls(**{"lr": cls.REFERENCE_LR, **overrides})


@dataclass
class ScheduleStep:
    improved: bool
    lr_reduced: bool
    stop: bool
    lr: float  # rate for the next epoch


class PlateauSchedule:
    """Reduce-on-plateau plus early stopping, both keyed on validation loss.

    An epoch improves when its loss is below the best so far by more than
    ``min_delta``. After ``plateau_patience`` consecutive non-improving epochs
    the rate is multiplied by ``factor`` and that counter restarts; after
    ``early_stop_patience`` consecutive non-improving epochs training stops.
    """

    def __init__(self, lr: float, factor: float = 0.1, plateau_patience: int = 3,
                 early_stop_patience: int = 6, min_delta: float = 1e-6):
        self.lr = lr
        self.factor = factor
        self.plateau_patience = plateau_patience
        self.early_stop_patience = early_stop_patience
        self.min_delta = min_delta
        self.best = math.inf
        self.plateau_wait = 0
        self.stop_wait = 0

    def step(self, val_loss: float) -> ScheduleStep:
        improved = val_loss < self.best - self.min_delta
        reduced = False
        if improved:
            self.best = val_loss
            self.plateau_wait = 0
            self.stop_wait = 0
        else:
            self.plateau_wait += 1
            self.stop_wait += 1
            if self.plateau_wait >= self.plateau_patience:
                self.lr *= self.factor
                self.plateau_wait = 0
                reduced = True
        stop = self.stop_wait >= self.early_stop_patience
        return ScheduleStep(improved, reduced, stop, self.lr)


# ---------------------------------------------------------------- training

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    lr: float  # rate used during this epoch
    train_loss: float
    val_loss: float
    val_accuracy: float
    improved: bool


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def lrs(self) -> list[float]:
        return [e.lr for e in self.epochs]

    @property
    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]

    def as_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs], "best_epoch": self.best_epoch,
                "stopped_early": self.stopped_early}


def _batches(n: int, batch_size: int, rng: np.random.Generator | None) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def loss_and_grads(model: FusionModel, ds: Dataset, index: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    leaves = wrap_params(model.params, requires_grad=True)
    res = fused_forward(model.kind, model.vision, model.text, leaves,
                        ds.images[index], ds.token_ids[index], ds.masks[index])
    loss = ad.cross_entropy(res.logits, ds.labels[index])
    loss.backward()
    grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
    return float(loss.data), grads


def predict(model: FusionModel, ds: Dataset, batch_size: int = 32, with_gate: bool = False):
    """Return (logits [N, 2], mean loss) and, for GMU models, the gate [N, g]."""
    params = wrap_params(model.params)
    logits, gates = [], []
    total = 0.0
    for index in _batches(len(ds), batch_size, None):
        res = fused_forward(model.kind, model.vision, model.text, params,
                            ds.images[index], ds.token_ids[index], ds.masks[index])
        total += float(ad.cross_entropy(res.logits, ds.labels[index]).data) * len(index)
        logits.append(res.logits.data)
        if with_gate and "gate" in res.aux:
            gates.append(res.aux["gate"].data)
    out = (np.concatenate(logits), total / len(ds))
    if with_gate:
        return out + (np.concatenate(gates) if gates else None,)
    return out


def evaluate_model(model: FusionModel, ds: Dataset) -> Metrics:
    logits, _ = predict(model, ds)
    return evaluate_metrics(logits.argmax(axis=1), ds.labels)


def train(model: FusionModel, train_ds: Dataset, val_ds: Dataset,
          cfg: TrainConfig = TrainConfig()) -> tuple[FusionModel, History]:
    """Adam on cross-entropy under the plateau/early-stop schedule.

    Returns a copy of the model at its best validation loss and the history.
    """
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    schedule = PlateauSchedule(cfg.lr, cfg.plateau_factor, cfg.plateau_patience,
                               cfg.early_stop_patience, cfg.min_delta)
    state = ad.AdamState()
    history = History()
    best = model.copy()

    for epoch in range(1, cfg.max_epochs + 1):
        lr = schedule.lr
        total, seen = 0.0, 0
        for index in _batches(len(train_ds), cfg.batch_size, rng):
            try:
                loss, grads = loss_and_grads(model, train_ds, index)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch}: loss {loss}")
            ad.adam_step(model.params, grads, state, lr)
            total += loss * len(index)
            seen += len(index)
        val_logits, val_loss = predict(model, val_ds)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"epoch {epoch}: validation loss {val_loss}")
        val_acc = float(np.mean(val_logits.argmax(axis=1) == val_ds.labels))
        step = schedule.step(val_loss)
        history.epochs.append(EpochRecord(epoch, lr, total / seen, val_loss, val_acc, step.improved))
        log.debug("epoch %d lr %.2e train %.4f val %.4f acc %.3f", epoch, lr, total / seen, val_loss, val_acc)
        if step.improved:
            best = model.copy()
            history.best_epoch = epoch
        if step.stop:
            history.stopped_early = True
            break
    return best, history


# ---------------------------------------------------------------- experiments

@dataclass
class RunConfig:
    vision: EncoderConfig = field(default_factory=EncoderConfig)
    text: EncoderConfig = field(default_factory=lambda: EncoderConfig(patch=0, vocab_size=64))
    train: TrainConfig = field(default_factory=TrainConfig)
    gmu_dim: int = 128
    hidden: int = 512

    def build_model(self, kind, seed: int) -> FusionModel:
        return init_fusion_model(kind, self.vision, self.text, seed, self.gmu_dim, self.hidden)


def _run_one(cfg: RunConfig, kind: FusionKind, seed: int, train_ds, val_ds, test_ds):
    from dataclasses import replace

    t0 = time.perf_counter()
    model = cfg.build_model(kind, seed)
    best, history = train(model, train_ds, val_ds, replace(cfg.train, seed=seed))
    metrics = evaluate_model(best, test_ds)
    return {
        "kind": kind.value,
        "seed": seed,
        "epochs": len(history.epochs),
        "best_epoch": history.best_epoch,
        "seconds": round(time.perf_counter() - t0, 3),
        **metrics.as_dict(),
    }


def aggregate(per_run: list[dict], kinds: Sequence[FusionKind]) -> dict:
    """Mean and population std per (kind, metric)."""
    report: dict = {}
    for kind in kinds:
        rows = [r for r in per_run if r["kind"] == kind.value]
        report[kind.value] = {
            m: {"mean": float(np.mean([r[m] for r in rows])), "std": float(np.std([r[m] for r in rows]))}
            for m in METRIC_NAMES
        }
    report["per_run"] = per_run
    return report


def run_experiment(cfg: RunConfig, dataset: Dataset, kinds: Sequence = tuple(FusionKind),
                   test: Dataset | None = None) -> dict:
    """Train every kind ``repetitions`` times (seeds seed .. seed+r-1).

    The train/val split is fixed by ``cfg.train.seed``. Metrics are measured
    on ``test`` when given, otherwise on the validation split.
    """
    kinds = [FusionKind.parse(k) for k in kinds]
    train_ds, val_ds = split_train_val(dataset, cfg.train.val_fraction, cfg.train.seed)
    target = test if test is not None else val_ds
    per_run = []
    for kind in kinds:
        for r in range(cfg.train.repetitions):
            per_run.append(_run_one(cfg, kind, cfg.train.seed + r, train_ds, val_ds, target))
    return aggregate(per_run, kinds)


_TITLES = {"concat": "Concatenation", "gmu": "Gated Multimodal Unit", "crossattn": "Crossmodal Attention"}


def format_table(report: dict) -> str:
    """Percent table: one value row and one +/- std row per architecture."""
    cols = ("Precision", "Recall", "F1-score", "Accuracy", "Specificity")
    width = max(len(t) for t in _TITLES.values()) + 2
    lines = ["Architecture".ljust(width) + "".join(c.rjust(13) for c in cols)]
    lines.append("-" * len(lines[0]))
    for kind, stats in report.items():
        if kind == "per_run":
            continue
        lines.append(_TITLES.get(kind, kind).ljust(width)
                     + "".join(f"{100 * stats[m]['mean']:13.2f}" for m in METRIC_NAMES))
        lines.append(" " * width + "".join(f"{'±%.2f' % (100 * stats[m]['std']):>13}" for m in METRIC_NAMES))
    return "\n".join(lines)


# ---------------------------------------------------------------- synthetic data

def _low_freq_pattern(rng: np.random.Generator, side: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side), indexing="ij")
    pattern = np.zeros((3, side, side))
    for c in range(3):
        fy, fx = rng.integers(1, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        pattern[c] = np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return pattern


def synth_vocab(n_words: int) -> dict[str, int]:
    return build_vocab([" ".join(f"w{i:03d}" for i in range(n_words))])


def synth_dataset(n: int, snr_text: float, snr_audio: float, seed: int = 0, side: int = 64,
                  max_len: int = 32, n_words: int = 40, words_per_sample: int = 24) -> Dataset:
    """Balanced two-class data with a controllable signal in each modality.

    Images are ``snr_audio * (+/-pattern) + N(0, 1)`` per class, min-max
    normalized like real feature images. Text draws words from
    softmax(snr_text * s_class) over a fixed vocabulary, where the two
    classes use opposite random sign vectors.
    """
    if n % 2:
        raise ValueError("synth_dataset: n must be even")
    rng = np.random.default_rng(seed)
    # the class structure is shared across seeds; only the draws vary
    world = np.random.default_rng(12345)
    pattern = _low_freq_pattern(world, side)
    signs = world.choice([-1.0, 1.0], size=n_words)
    vocab = synth_vocab(n_words)
    names = [f"w{i:03d}" for i in range(n_words)]

    labels = np.array([0, 1] * (n // 2))
    rng.shuffle(labels)
    samples = []
    for i, y in enumerate(labels):
        cls_sign = 1.0 if y == 1 else -1.0
        raw = snr_audio * cls_sign * pattern + rng.standard_normal((3, side, side))
        img, degenerate = normalize_image(raw)
        logits = snr_text * cls_sign * signs
        p = np.exp(logits - logits.max())
        p /= p.sum()
        picks = rng.choice(n_words, size=words_per_sample, p=p)
        text = " ".join(names[j] for j in picks)
        samples.append(Sample(f"s{i:04d}", FeatureImage(img.astype(np.float32), {"degenerate": degenerate}),
                              tokenize(text, vocab, max_len), int(y)))
    ds = Dataset.from_samples(samples)
    ds.vocab = vocab
    return ds


def token_counts(ds: Dataset) -> np.ndarray:
    """Bag-of-words counts [N, vocab] over non-special, unmasked tokens."""
    counts = np.zeros((len(ds), ds.vocab_size))
    for i in range(len(ds)):
        ids = ds.token_ids[i][ds.masks[i] == 1]
        ids = ids[(ids != CLS) & (ids != SEP) & (ids != PAD)]
        np.add.at(counts[i], ids, 1)
    return counts
