"""Command-line entry point.

Subcommands: gen-data, train, attack, eval, ablate, uap, report. Every run
writes a resolved-config snapshot next to its outputs. Exit codes: 0 ok,
1 configuration error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import data, harness, zoo
from .attacks import AttackConfig, AttackTask, SupHighParams, run_baseline_attack
from .engine import ConfigurationError, Model
from .finetune import FinetuneConfig, finetune
from .harness import ExperimentPlan
from .zoo import FormatError, TrainingError

_PLAN_KEYS = {f for f in ExperimentPlan.__dataclass_fields__}
_ATTACK_KEYS = {f for f in AttackConfig.__dataclass_fields__}
_FT_KEYS = {f for f in FinetuneConfig.__dataclass_fields__}


def _global_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("FEATFT_SEED")
    return int(env) if env else 0


def load_plan(path: str) -> ExperimentPlan:
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise IOError(f"cannot read plan: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"plan {path} is not valid JSON: {e}") from e
    unknown = set(raw) - _PLAN_KEYS
    if unknown:
        raise ConfigurationError(f"unknown plan keys: {sorted(unknown)}")
    kw = dict(raw)
    for key, keys, cls in (("attack_cfg", _ATTACK_KEYS, AttackConfig),
                           ("ft_cfg", _FT_KEYS, FinetuneConfig),
                           ("suphigh", set(SupHighParams.__dataclass_fields__),
                            SupHighParams)):
        if key in kw:
            bad = set(kw[key]) - keys
            if bad:
                raise ConfigurationError(f"unknown {key} keys: {sorted(bad)}")
            kw[key] = cls(**kw[key])
    return ExperimentPlan(**kw)


def _snapshot(out_dir: str, command: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{command}.config.json"), "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True, default=str)


def _load_models(ckpt_dir: str) -> dict[str, Model]:
    models = {}
    for spec in zoo.build_zoo():
        path = os.path.join(ckpt_dir, f"{spec.name}.ftw")
        if not os.path.exists(path):
            raise ConfigurationError(f"missing checkpoint {path}")
        models[spec.name] = zoo.load_model(spec, zoo.load_checkpoint(path))
    return models


def cmd_gen_data(args) -> int:
    seed = _global_seed(args)
    ds = data.gen_synthetic_dataset(seed, args.per_class)
    root = os.path.join(args.out, "data")
    data.save_dataset(ds, root)
    _snapshot(args.out, "gen-data", {"seed": seed, "per_class": args.per_class,
                                     "images": len(ds), "root": root})
    print(f"wrote {len(ds)} images under {root}")
    return 0


def cmd_train(args) -> int:
    ds = data.load_dataset(args.data)
    seed = _global_seed(args)
    cfg = zoo.TrainConfig(epochs=args.epochs, learning_rate=args.lr,
                          batch_size=args.batch_size, seed=seed)
    ckpt_dir = os.path.join(args.out, "ckpt")
    os.makedirs(ckpt_dir, exist_ok=True)
    accs = {}
    for spec in zoo.build_zoo():
        cp = zoo.train(spec, ds, cfg)
        zoo.save_checkpoint(cp, os.path.join(ckpt_dir, f"{spec.name}.ftw"))
        accs[spec.name] = cp.accuracy
        print(f"{spec.name}: heldout accuracy {cp.accuracy:.3f}")
    _snapshot(args.out, "train", {"cfg": asdict(cfg), "accuracy": accs})
    return 0


def cmd_attack(args) -> int:
    models = _load_models(args.ckpt_dir)
    if args.source not in models:
        raise ConfigurationError(f"unknown source model {args.source!r}")
    model = models[args.source]
    seed = _global_seed(args)
    cfg = AttackConfig(epsilon=args.eps, step_alpha=args.alpha,
                       iters_N=args.iters, loss=args.loss, seed=seed)
    ft_cfg = FinetuneConfig(iters_Nft=args.ft_iters, beta=args.beta,
                            tap=args.tap, mask_kind=args.mask, seed=seed)
    image = data.read_ppm(args.image)
    y_o = args.label if args.label is not None else zoo.predict(model, image)
    y_t = args.target
    if y_t == y_o:
        raise ConfigurationError("target label equals original label")
    sup = SupHighParams() if args.loss == "suphigh" else None
    task = AttackTask(image, y_o, y_t, model)
    adv = run_baseline_attack(task, cfg, suphigh=sup,
                              rng=np.random.default_rng([seed, 0]))
    if args.ft and ft_cfg.iters_Nft > 0:
        adv = finetune(adv, image, y_t, y_o, model, ft_cfg, cfg)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, args.output_name)
    data.write_ppm(out_path, adv)
    pred = zoo.predict(model, data.read_ppm(out_path))
    _snapshot(args.out, "attack", {"cfg": asdict(cfg), "ft": args.ft,
                                   "ft_cfg": asdict(ft_cfg), "y_o": y_o,
                                   "y_t": y_t, "source": args.source,
                                   "prediction": pred})
    print(f"wrote {out_path} (source model now predicts {pred}, target {y_t})")
    return 0


def _run_plan(args, plan: ExperimentPlan, name: str) -> int:
    models = _load_models(args.ckpt_dir)
    ds = data.load_dataset(args.data)
    report = harness.run_transfer_experiment(plan, models, ds, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, f"{name}.csv")
    harness.emit_report(report, "csv", csv_path)
    if args.svg:
        harness.emit_report(report, "svg_plot", os.path.join(args.out, f"{name}.svg"))
    _snapshot(args.out, name, {"plan": asdict(plan),
                               "config_digest": report.config_digest,
                               "metadata": report.metadata})
    print(f"wrote {csv_path} ({len(report.rows)} rows)")
    return 0


def cmd_eval(args) -> int:
    plan = load_plan(args.plan)
    if args.seed is not None:
        plan = replace(plan, seed=args.seed)
    if args.tasks is not None:
        plan = replace(plan, task_count=args.tasks)
    return _run_plan(args, plan, "eval")


def cmd_ablate(args) -> int:
    if args.plan:
        plan = load_plan(args.plan)
    else:
        plan = ExperimentPlan(scenario=f"ablation_{args.which}",
                              attacks=["ce"], ft=[True],
                              task_count=args.tasks or 50,
                              seed=_global_seed(args))
    if plan.scenario != f"ablation_{args.which}":
        raise ConfigurationError(
            f"plan scenario {plan.scenario!r} does not match 'ablate {args.which}'")
    return _run_plan(args, plan, f"ablate-{args.which}")


def cmd_uap(args) -> int:
    models = _load_models(args.ckpt_dir)
    if args.source not in models:
        raise ConfigurationError(f"unknown source model {args.source!r}")
    model = models[args.source]
    ds = data.load_dataset(args.data)
    ex, ey = ds.subset("attack_eval")
    eval_ds = data.Dataset(ex, ey, np.asarray(["attack_eval"] * len(ey)))
    seed = _global_seed(args)
    cfg = AttackConfig(iters_N=args.iters, loss=args.loss, seed=seed)
    ft_cfg = FinetuneConfig(seed=seed) if args.ft else None
    os.makedirs(args.out, exist_ok=True)
    rows = []
    nc = model.spec.class_count
    targets = range(nc) if args.target is None else [args.target]
    for y_t in targets:
        _, rate = harness.run_uap_datafree(
            model, y_t, cfg, ft_cfg, eval_ds,
            iters_with_ft=args.ft_base_iters if args.ft else None)
        rows.append((y_t, rate))
        print(f"target {y_t}: rate {rate:.4f}")
    with open(os.path.join(args.out, "uap.csv"), "w") as f:
        f.write("target,rate\n")
        for y_t, rate in rows:
            f.write(f"{y_t},{harness.format_rate(rate)}\n")
    mean = sum(r for _, r in rows) / len(rows)
    _snapshot(args.out, "uap", {"source": args.source, "loss": args.loss,
                                "ft": args.ft, "seed": seed,
                                "mean_rate": mean})
    print(f"mean rate over {len(rows)} targets: {mean:.4f}")
    return 0


def cmd_report(args) -> int:
    rows = harness.parse_report_csv(args.input)
    report = harness.TransferReport(rows, "reparsed", 0)
    harness.emit_report(report, "svg_plot", args.output)
    print(f"wrote {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="featft",
                                description="targeted transfer attack toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False, dataset=False):
        sp.add_argument("--out", default="out", help="output root directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="global seed (falls back to FEATFT_SEED)")
        if ckpt:
            sp.add_argument("--ckpt-dir", default="out/ckpt")
        if dataset:
            sp.add_argument("--data", default="out/data")

    sp = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(sp)
    sp.add_argument("--per-class", type=int, default=100)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train all three zoo models")
    common(sp, dataset=True)
    sp.add_argument("--epochs", type=int, default=25)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("attack", help="craft one adversarial example")
    common(sp, ckpt=True)
    sp.add_argument("--image", required=True, help="input PPM")
    sp.add_argument("--label", type=int, default=None,
                    help="original label (default: source prediction)")
    sp.add_argument("--target", type=int, required=True)
    sp.add_argument("--source", default="mini_residual")
    sp.add_argument("--loss", choices=["ce", "logit", "suphigh"], default="ce")
    ftg = sp.add_mutually_exclusive_group()
    ftg.add_argument("--ft", dest="ft", action="store_true", default=False)
    ftg.add_argument("--no-ft", dest="ft", action="store_false")
    sp.add_argument("--eps", type=float, default=16 / 255)
    sp.add_argument("--alpha", type=float, default=2 / 255)
    sp.add_argument("--iters", type=int, default=200)
    sp.add_argument("--ft-iters", type=int, default=10)
    sp.add_argument("--beta", type=float, default=0.2)
    sp.add_argument("--tap", type=int, default=None)
    sp.add_argument("--mask", choices=["pixel", "patch"], default="pixel")
    sp.add_argument("--output-name", default="adv.ppm")
    sp.set_defaults(fn=cmd_attack)

    sp = sub.add_parser("eval", help="run an experiment plan")
    common(sp, ckpt=True, dataset=True)
    sp.add_argument("--plan", required=True)
    sp.add_argument("--tasks", type=int, default=None)
    sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    sp.add_argument("--svg", action="store_true")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="fine-tune iteration / layer sweeps")
    common(sp, ckpt=True, dataset=True)
    sp.add_argument("which", choices=["nft", "layer"])
    sp.add_argument("--plan", default=None)
    sp.add_argument("--tasks", type=int, default=None)
    sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    sp.add_argument("--svg", action="store_true")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("uap", help="data-free universal perturbations")
    common(sp, ckpt=True, dataset=True)
    sp.add_argument("--source", default="mini_residual")
    sp.add_argument("--loss", choices=["ce", "logit", "suphigh"], default="ce")
    sp.add_argument("--target", type=int, default=None,
                    help="single target class (default: all classes)")
    sp.add_argument("--iters", type=int, default=200)
    sp.add_argument("--ft", action="store_true")
    sp.add_argument("--ft-base-iters", type=int, default=160)
    sp.set_defaults(fn=cmd_uap)

    sp = sub.add_parser("report", help="re-plot an emitted CSV report")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.set_defaults(fn=cmd_report)
    return p


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigurationError, TrainingError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 1
    except (FormatError, data.DataError, IOError, OSError) as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
