"""
Watching the gate pick the informative modality
================================================

With all class signal in the text and none in the images, a trained gated
unit should lean toward its text branch.
"""

import numpy as np

from multifuse.encoders import EncoderConfig
from multifuse.harness import RunConfig, TrainConfig, evaluate_model, predict, split_train_val, synth_dataset, train

ds = synth_dataset(200, snr_text=0.3, snr_audio=0.0, seed=0)
tr, va = split_train_val(ds, val_fraction=0.35, seed=0)
print(f"{len(tr)} train / {len(va)} validation samples")

cfg = RunConfig(text=EncoderConfig(patch=0, vocab_size=ds.vocab_size, max_positions=ds.max_len),
                train=TrainConfig(max_epochs=40))
model = cfg.build_model("gmu", seed=0)
print(f"{model.parameter_count()} parameters")

best, history = train(model, tr, va, cfg.train)
for e in history.epochs[:: max(1, len(history.epochs) // 8)]:
    print(f"epoch {e.epoch:3d}  lr {e.lr:.0e}  train {e.train_loss:.3f}  val {e.val_loss:.3f}  acc {e.val_accuracy:.2f}")

metrics = evaluate_model(best, va)
gate = predict(best, va, with_gate=True)[2]
print(f"best epoch {history.best_epoch}, validation accuracy {metrics.accuracy:.3f}")
print(f"mean gate weight on text: {gate.mean():.3f} (0.5 would be indifferent)")
print("per-unit means:", np.round(gate.mean(axis=0)[:8], 3), "...")
