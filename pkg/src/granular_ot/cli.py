"""Command-line entry point: ``granular-ot {gen,train,eval,ot,bench}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.
"""

import argparse
import os
import sys
import time

import numpy as np

from .config import format_config, read_config
from .errors import ConfigError, DataError, GranularOTError, InputError
from .ot import SinkhornConfig, cost_matrix, ot_distance, solve
from .synthetic import GeneratorConfig, generate_dataset, write_dataset
from .tensor_io import MAGIC, load_tensor
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train


def _cmd_gen(args):
    cfg, _ = read_config(args.config, GeneratorConfig)
    bags = generate_dataset(cfg)
    write_dataset(bags, args.out, cfg.classes)
    print(f"wrote {len(bags)} slides to {args.out}")


def _cmd_train(args):
    cfg, _ = read_config(args.config, TrainConfig)
    os.makedirs(args.out, exist_ok=True)
    result = train(cfg, args.data)
    for fold in result.folds:
        save_checkpoint(fold.checkpoint, os.path.join(args.out, f"fold{fold.checkpoint.fold}.ckpt"))
        with open(os.path.join(args.out, f"trajectory_fold{fold.checkpoint.fold}.csv"), "w") as fh:
            fh.write(fold.trajectory_csv())
    metrics = result.metrics.to_csv()
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write(metrics)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(format_config(cfg))
    sys.stdout.write(metrics)


def _cmd_eval(args):
    report = evaluate(load_checkpoint(args.ckpt), args.data)
    print("auc,f1,acc")
    print(",".join(repr(float(x)) for x in report.row()))


def _read_cost(path):
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise DataError(f"cannot read cost file {path}: {exc.strerror}") from None
    if head == MAGIC:
        C = load_tensor(path)
    else:
        try:
            C = np.loadtxt(path, delimiter="," if path.endswith(".csv") else None, ndmin=2)
        except ValueError as exc:
            raise DataError(f"cannot parse cost matrix {path}: {exc}") from None
    if C.ndim != 2 or not np.all(np.isfinite(C)):
        raise DataError(f"cost must be a finite 2-D matrix, got shape {C.shape}")
    return C


def _parse_uot(text):
    try:
        rho1, rho2 = (float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--uot expects 'rho1,rho2', got {text!r}") from None
    return rho1, rho2


def _cmd_ot(args):
    C = _read_cost(args.cost)
    uot = _parse_uot(args.uot) if args.uot else None
    try:
        cfg = SinkhornConfig(args.lam, args.iters, uot)
    except InputError as exc:
        raise ConfigError(str(exc)) from None
    plan = solve(C, cfg=cfg)
    print(f"distance {ot_distance(plan, C)!r}")
    print(f"mass {plan.mass!r}")
    print(f"marginal_violation {plan.marginal_violation!r}")
    if args.plan:
        np.savetxt(sys.stdout, plan.T, fmt="%.10g")


def _timed(fn, repeat):
    fn()
    start = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - start) / repeat


def _cmd_bench(args):
    from .model import forward_slide
    from .trainer import build_model, slide_loss
    from .autodiff import GradTape

    rng = np.random.default_rng(0)
    C = np.stack([cost_matrix(rng.normal(size=(4, 48)), rng.normal(size=(16, 48))).data for _ in range(4)])
    ot_t = _timed(lambda: solve(C, cfg=SinkhornConfig()), 50)
    uot_t = _timed(lambda: solve(C, cfg=SinkhornConfig(uot=(1.0, 1.0))), 50)
    print(f"sinkhorn 4x(4x16) t=100      {ot_t * 1e3:8.3f} ms")
    print(f"unbalanced 4x(4x16) t=100    {uot_t * 1e3:8.3f} ms  ({uot_t / ot_t:.2f}x)")

    gcfg = GeneratorConfig(train_per_class=1, test_per_class=1)
    bag = generate_dataset(gcfg)[0]
    model = build_model(TrainConfig(), gcfg.classes, gcfg.d_v)
    prep = model.prepare(bag)
    fwd = _timed(lambda: forward_slide(model, prep), 20)

    def step():
        tape = GradTape()
        P = {k: tape.watch(v, name=k) for k, v in model.params.items()}
        loss, _, _ = slide_loss(model, prep, bag.label, P)
        tape.backward(loss)

    print(f"slide forward (144+576 patches) {fwd * 1e3:8.3f} ms")
    print(f"slide forward+backward          {_timed(step, 20) * 1e3:8.3f} ms")


def build_parser():
    parser = argparse.ArgumentParser(prog="granular-ot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic slide dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="few-shot training over folds")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ot", help="solve one transport problem from a cost file")
    p.add_argument("--cost", required=True, help="TNS1 tensor or whitespace/CSV text matrix")
    p.add_argument("--uot", help="rho1,rho2 for the unbalanced solver")
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--plan", action="store_true", help="also print the transport plan")
    p.set_defaults(func=_cmd_ot)

    p = sub.add_parser("bench", help="time the solver and one training step")
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except GranularOTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
