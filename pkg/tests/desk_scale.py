"""The desk-scale learning experiment shared by the acceptance suite.

Synthetic 4-class data (V=15, T_raw=64, 200 samples per class, one person),
split 150/50 per class into train and held-out sets, both centred on the
training split's mean pose; a tiny model (base 24, SCR 2:5:2, k=3, T=64)
trained with the default recipe on a 30-epoch schedule
(2 warm-up epochs, batch 32). Every run stops as soon as eval-mode training
accuracy reaches 95%, so all mechanisms share the same stopping rule and cap.
"""

import time
from dataclasses import dataclass

import numpy as np

from tsgcnext.data import center_pose, mean_pose, synth_dataset, to_arrays
from tsgcnext.network import ModelConfig, build_model
from tsgcnext.training import TrainConfig, evaluate, train

CLASSES, PER_CLASS, V, T_RAW = 4, 200, 15, 64
HELD_OUT_PER_CLASS = 50
EPOCHS, WARMUP, BATCH = 30, 2, 32
TRAIN_TARGET = 0.95


@dataclass
class RunResult:
    mechanism: str
    seed: int
    train_accuracy: float
    held_out_accuracy: float
    epochs: int
    seconds: float


def split_dataset(seed: int):
    X, y = to_arrays(synth_dataset(CLASSES, PER_CLASS, V, T_RAW, M=1, seed=seed, noise=0.1))
    rng = np.random.default_rng([seed, 17])
    test = np.zeros(len(y), dtype=bool)
    for c in range(CLASSES):
        idx = np.flatnonzero(y == c)
        test[rng.choice(idx, HELD_OUT_PER_CLASS, replace=False)] = True
    pose = mean_pose(X[~test])
    return (center_pose(X[~test], pose), y[~test]), (center_pose(X[test], pose), y[test])


def run(mechanism: str, seed: int, epochs: int = EPOCHS, progress=None) -> RunResult:
    (Xtr, ytr), (Xte, yte) = split_dataset(seed)
    cfg = ModelConfig(base_channels=24, scr=(2, 5, 2), k_temporal=3, T=T_RAW, V=V, M=1,
                      num_classes=CLASSES, mechanism=mechanism)
    tcfg = TrainConfig(epochs=epochs, warmup_epochs=WARMUP, batch_size=BATCH, seed=seed, eval_ema=False,
                       stop_at_train_accuracy=TRAIN_TARGET)
    start = time.perf_counter()
    result = train(build_model(cfg, seed), (Xtr, ytr), tcfg, callbacks=[progress] if progress else ())
    train_acc = evaluate(result.model, (Xtr, ytr)).accuracy
    test_acc = evaluate(result.model, (Xte, yte)).accuracy
    return RunResult(mechanism, seed, train_acc, test_acc, result.epochs_run, time.perf_counter() - start)


if __name__ == "__main__":
    import json
    import sys

    out = []
    for seed in range(3):
        for mech in ("ds-smg", "smg", "none"):
            r = run(mech, seed, progress=lambda e, res: print(mech, seed, e, res.log[-1], flush=True))
            out.append(r.__dict__)
            print(json.dumps(r.__dict__), flush=True)
    if len(sys.argv) > 1:
        with open(sys.argv[1], "w") as fh:
            json.dump(out, fh, indent=1)
