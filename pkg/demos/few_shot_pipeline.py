"""Generate slides, train a few-shot classifier, then reload and evaluate it.

Run with ``python demos/few_shot_pipeline.py [out_dir]``.  The model is
deliberately small so the whole script finishes in well under a minute.
"""

import os
import sys
import tempfile

from granular_ot import (
    GeneratorConfig,
    TrainConfig,
    evaluate,
    generate_dataset,
    load_checkpoint,
    save_checkpoint,
    train,
    write_dataset,
)


def main(out_dir):
    gen = GeneratorConfig(grid=6, d_v=16, train_per_class=12, test_per_class=10, seed=1)
    data = os.path.join(out_dir, "data")
    write_dataset(generate_dataset(gen), data, gen.classes)
    print(f"dataset: {2 * (gen.train_per_class + gen.test_per_class)} slides in {data}")

    cfg = TrainConfig(shots=8, epochs=20, lr=1e-3, folds=2, M=2, N_p=8, K=8, context_len=8, token_dim=8)
    result = train(cfg, data)
    print("per-fold test metrics")
    print(result.metrics.to_csv(), end="")

    fold = result.folds[0]
    print(f"fold 0 picked epoch {fold.checkpoint.best_epoch}; last trajectory rows:")
    print("\n".join(fold.trajectory_csv().splitlines()[-2:]))

    path = os.path.join(out_dir, "fold0.ckpt")
    save_checkpoint(fold.checkpoint, path)
    again = evaluate(load_checkpoint(path), data)
    print(f"reloaded checkpoint: auc {again.auc:.3f} f1 {again.f1:.3f} acc {again.acc:.3f}")
    assert again == fold.test


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(sys.argv[1])
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(tmp)
