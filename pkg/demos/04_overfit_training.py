"""Overfit the desk-scale network on a handful of synthetic samples, then
close the loop: predict masks and score them against the ground truth.

This is the slowest demo (a few minutes of numpy number crunching).

Run with:  python demos/04_overfit_training.py
"""

import tempfile

from c2fnet.datagen import SynthConfig, read_manifest, write_dataset
from c2fnet.metrics import evaluate_dataset, pair_from_uint8
from c2fnet.png_io import read_png
from c2fnet.trainer import TrainConfig, predict, train

with tempfile.TemporaryDirectory() as tmp:
    manifest = write_dataset(SynthConfig(seed=5, count=8, coverage=(0.2, 0.3)), f"{tmp}/data")

    cfg = TrainConfig(
        base_lr=1e-3,
        decay_epoch=1000,  # keep the rate flat for this short run
        epochs=25,         # 8 samples / batch 2 -> 100 steps
        batch_size=2,
        input_size=64,
        seed=1,
        checkpoint_every=0,
    )
    result = train(cfg, manifest, f"{tmp}/run")
    print(f"steps: {len(result.trace)}")
    print(f"loss: {result.trace[0].loss_total:.4f} -> {result.trace[-1].loss_total:.4f}")
    scales = [r.scale for r in result.trace]
    print("multi-scale draws:", {s: scales.count(s) for s in sorted(set(scales))})

    predict(result.final_checkpoint, manifest, f"{tmp}/preds")
    pairs = []
    for sid, _, mask_path, _ in read_manifest(manifest):
        pairs.append(pair_from_uint8(read_png(f"{tmp}/preds/{sid}.png"), read_png(mask_path), name=sid))
    report = evaluate_dataset(pairs)
    print("\nper-sample and mean metrics:")
    print(report.to_tsv())
