"""Generate a small labelled set, train briefly, and evaluate with uncertainty.

This is a few-minute walk through the whole pipeline on a deliberately tiny
budget: 120 samples of 32x32, 40 epochs of phase 2 and a short phase 3.  The
numbers it prints are far from the acceptance run's; the point is to show
the calls and the shape of their outputs.

    python3 demos/train_and_evaluate.py
"""

import logging
import tempfile

import numpy as np

from permtensor.dataset import generate_dataset
from permtensor.evaluation import (BootConfig, UqConfig, bootstrap_table, calibration,
                                   diag_r2, evaluate_predictions, mc_dropout, tta_predict)
from permtensor.model import load_checkpoint
from permtensor.training import TrainConfig, run_phase

logging.basicConfig(level=logging.WARNING)

ds = generate_dataset(120, seed=11, splits={"train": 0.7, "val": 0.15, "test": 0.15})
train, val, test = ds.split("train"), ds.split("val"), ds.split("test")
print(f"dataset: {len(train)} train / {len(val)} val / {len(test)} test, "
      f"{len(ds.manifest['skipped'])} candidates skipped")

with tempfile.TemporaryDirectory() as out:
    p2 = run_phase(train, val, 2, TrainConfig.for_phase(2, epochs=40), seed=0, out_dir=f"{out}/p2")
    print(f"phase 2: best epoch {p2.best_epoch}, val R^2 {p2.best_metric:.3f}")
    p3 = run_phase(train, val, 3, TrainConfig.for_phase(3, epochs=20), seed=0,
                   init_checkpoint=f"{out}/p2/best", out_dir=f"{out}/p3")
    print(f"phase 3: best epoch {p3.best_epoch}, val R^2 {p3.best_metric:.3f}")
    model, _ = load_checkpoint(f"{out}/p3/best")

pred = model.predict(test.images, test.porosity)
agg = evaluate_predictions(pred, test.labels)["aggregate"]
print("test:", {k: float(f"{agg[k]:.3g}") for k in ("r2_diag", "eps_sym_mean", "positivity_fraction")})

# averaging over the eight symmetric views, each mapped back to the input frame
tta = tta_predict(model, test.images, test.porosity)
print(f"TTA diagonal R^2 {diag_r2(tta, test.labels):.4f}")

rows = bootstrap_table(pred, test.labels, {"r2_diag": diag_r2}, BootConfig(B=500))
r = rows[0]
print(f"bootstrap 95% interval for diagonal R^2: [{r['ci_lo']:.3f}, {r['ci_hi']:.3f}]")

uq = mc_dropout(model, test.images, test.porosity, UqConfig(T=30, seed=0))
cal = calibration(uq["mean"], uq["sd"], test.labels)
print("MC-dropout mean sigma per component:", np.round(uq["sd"].mean(axis=0), 4))
print("calibration (nominal -> observed):", [(n, round(e, 3)) for n, e in cal["curve"] if n in (0.5, 0.9, 0.95)],
      f"MCE {cal['mce']:.3f}")
