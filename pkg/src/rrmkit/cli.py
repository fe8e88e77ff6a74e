"""Command-line entry point: train, attack, robustify and lambda sweeps.

Every command writes a manifest (resolved config, seed, artifact hashes)
into the output directory so runs can be reproduced bit-for-bit.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import bench, data, models, robustify, trainers
from .attacks import AdversaryBudget
from .errors import ConfigurationError, ContractError, RRMKitError
from .objectives import RepLossKind

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        raise SystemExit(self.prog + ": error: " + message)


def parse_epsilon(value) -> float:
    """Accept a float or an exact fraction string like "8/255"."""
    if isinstance(value, (int, float)):
        eps = float(value)
    else:
        try:
            eps = float(Fraction(str(value)))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigurationError(f"cannot parse epsilon {value!r}") from exc
    if eps < 0:
        raise ConfigurationError(f"epsilon must be non-negative, got {eps}")
    return eps


def infer_pixel_box(inputs: np.ndarray) -> tuple[float, float]:
    """Unit box for image-range data, else a box comfortably beyond the data.

    The box must never truncate legal perturbations of in-range inputs; for
    unbounded (e.g. Gaussian) features a clamp at [0, 1] would silently
    destroy the epsilon-ball contract.
    """
    lo, hi = float(np.min(inputs)), float(np.max(inputs))
    if 0.0 <= lo and hi <= 1.0:
        return (0.0, 1.0)
    span = max(hi - lo, 1.0)
    return (lo - span, hi + span)


def _auto_box(budget: AdversaryBudget, section: dict, inputs: np.ndarray) -> AdversaryBudget:
    if "pixel_box" in section:
        return budget
    return replace(budget, pixel_box=infer_pixel_box(inputs))


def _budget_from_dict(d: dict) -> AdversaryBudget:
    return AdversaryBudget(
        norm=d.get("norm", "linf"),
        epsilon=parse_epsilon(d.get("eps", d.get("epsilon", 8 / 255))),
        step_size=d.get("step_size"),
        steps=int(d.get("steps", 7)),
        restarts=int(d.get("restarts", 1)),
        pixel_box=tuple(d.get("pixel_box", (0.0, 1.0))),
    )


def _arch_from_dict(d: dict) -> models.ArchDescriptor:
    kind = d.get("kind", "mlp")
    if kind == "mlp":
        return models.mlp_descriptor(
            input_dim=int(d.get("input_dim", 55)),
            hidden=tuple(d.get("hidden", (64, 64))),
            num_classes=int(d.get("num_classes", 2)),
        )
    if kind == "cnn2":
        return models.cnn2_descriptor(
            input_shape=tuple(d.get("input_shape", (3, 32, 32))),
            channels=tuple(d.get("channels", (8, 16))),
            penultimate_dim=int(d.get("penultimate_dim", 64)),
            num_classes=int(d.get("num_classes", 10)),
        )
    if kind == "cnn4":
        return models.cnn4_descriptor(
            input_shape=tuple(d.get("input_shape", (3, 32, 32))),
            channels=tuple(d.get("channels", (8, 8, 16, 16))),
            penultimate_dim=int(d.get("penultimate_dim", 128)),
            num_classes=int(d.get("num_classes", 10)),
        )
    raise ConfigurationError(f"unknown model kind {kind!r}; valid: mlp, cnn2, cnn4")


def load_config(path) -> tuple[trainers.TrainConfig, dict]:
    """Parse a TOML config file into a TrainConfig plus the raw document."""
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    method = doc.get("method", "erm")
    if method not in trainers.METHODS:
        raise ConfigurationError(f"unknown method {method!r}; valid: {', '.join(trainers.METHODS)}")
    schedule_doc = doc.get("schedule", {})
    schedule = trainers.ScheduleSpec(
        kind=schedule_doc.get("kind", "constant"),
        milestones=tuple(schedule_doc.get("milestones", ())),
        factor=float(schedule_doc.get("factor", 0.1)),
        max_lr=schedule_doc.get("max_lr"),
    )
    seed = int(os.environ.get("RRM_SEED", doc.get("seed", 0)))
    config = trainers.TrainConfig(
        method=method,
        arch=_arch_from_dict(doc.get("model", {})),
        lam=float(doc.get("lambda", 5e-3)),
        alpha=float(doc.get("alpha", 1.0)),
        temperature=float(doc.get("temperature", 30.0)),
        replay_m=int(doc.get("replay_m", 8)),
        budget=_budget_from_dict(doc.get("budget", {})),
        schedule=schedule,
        epochs=int(doc.get("epochs", 10)),
        batch_size=int(doc.get("batch_size", 128)),
        learning_rate=float(doc.get("learning_rate", 0.1)),
        seed=seed,
        rep_loss=RepLossKind(doc.get("rep_loss", "cosine")),
        fast_step_scale=float(doc.get("fast_step_scale", 1.25)),
        momentum=float(doc.get("momentum", 0.0)),
        weight_decay=float(doc.get("weight_decay", 0.0)),
        kl_direction=doc.get("kl_direction", "teacher_to_student"),
    )
    return config, doc


def _load_data(path: str | None, doc: dict, seed: int) -> data.Dataset:
    if path:
        if str(path).endswith(".bin"):
            return data.load_binary_images(path)
        return data.load_dataset(path)
    section = doc.get("data", {})
    spec = data.SyntheticSpec(
        n=int(section.get("n", 2000)),
        d_robust=int(section.get("d_robust", 5)),
        d_nonrobust=int(section.get("d_nonrobust", 50)),
        robust_margin=float(section.get("robust_margin", 2.0)),
        nonrobust_margin=float(section.get("nonrobust_margin", 0.2)),
        noise=float(section.get("noise", 1.0)),
        flip_budget=float(section.get("flip_budget", 0.5)),
    )
    return data.generate_synthetic(spec, np.random.default_rng(seed + 1))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, config_path, resolved: dict, seed: int, artifacts: dict) -> None:
    manifest = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "resolved_config": resolved,
        "seed": seed,
        "out_dir": str(out_dir),
        "artifacts": {name: {"path": str(p), "sha256": _sha256(Path(p))} for name, p in artifacts.items()},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_teacher(path) -> models.Model:
    teacher = models.load_checkpoint(path)
    teacher.frozen = True
    return teacher


def cmd_train(args) -> int:
    config, doc = load_config(args.config)
    dataset = _load_data(args.data, doc, config.seed)
    config = replace(config, budget=_auto_box(config.budget, doc.get("budget", {}), dataset.inputs))
    teacher = _load_teacher(args.teacher) if args.teacher else None
    if config.method in ("rrm", "kd") and teacher is None:
        raise ConfigurationError(f"method {config.method!r} requires --teacher")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, report = trainers.train(config, dataset, teacher)
    if args.teacher_time is not None:
        report.teacher_time = args.teacher_time
    eval_doc = doc.get("eval")
    if eval_doc is not None:
        eval_budget = _auto_box(_budget_from_dict(eval_doc), eval_doc, dataset.inputs)
        natural, adv = bench.evaluate(model, dataset, eval_budget, np.random.default_rng(config.seed + 2))
    else:
        natural, adv = bench.evaluate(model, dataset)
    report.natural_acc, report.adv_acc = natural, adv
    ckpt = out_dir / "checkpoint.ckpt"
    models.save_checkpoint(model, ckpt)
    bench.emit_report(report, out_dir / "report.csv", "csv")
    bench.emit_report(report, out_dir / "report.json", "structured")
    _write_manifest(
        out_dir, "train", args.config, trainers.config_to_dict(config), config.seed,
        {"checkpoint": ckpt, "report_csv": out_dir / "report.csv", "report_json": out_dir / "report.json"},
    )
    print(f"trained {config.method}: natural_acc={natural:.4f}"
          + (f" adv_acc={adv:.4f}" if adv is not None else ""))
    return EXIT_OK


def cmd_attack(args) -> int:
    model = models.load_checkpoint(args.checkpoint)
    if args.logit_temperature is not None:
        model = models.TemperatureScaled(model, args.logit_temperature)
    dataset = _load_data(args.data, {}, args.seed)
    budget = AdversaryBudget(
        norm=args.norm,
        epsilon=parse_epsilon(args.eps),
        step_size=args.step_size,
        steps=args.steps,
        restarts=args.restarts,
        pixel_box=tuple(args.pixel_box) if args.pixel_box else infer_pixel_box(dataset.inputs),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    natural, adv = bench.evaluate(model, dataset, budget, np.random.default_rng(args.seed))
    result = {
        "natural_acc": natural,
        "adv_acc": adv,
        "budget": {"norm": budget.norm, "epsilon": budget.epsilon, "steps": budget.steps,
                   "restarts": budget.restarts},
        "logit_temperature": args.logit_temperature,
        "seed": args.seed,
    }
    report_path = out_dir / "evaluation.json"
    report_path.write_text(json.dumps(result, indent=2, sort_keys=True))
    _write_manifest(out_dir, "attack", None, result, args.seed, {"evaluation": report_path})
    print(f"natural_acc={natural:.4f} adv_acc={adv:.4f}")
    return EXIT_OK


def cmd_robustify(args) -> int:
    teacher = _load_teacher(args.teacher)
    dataset = _load_data(args.data, {}, args.seed)
    cfg = robustify.RobustifyConfig(
        steps=args.steps,
        step_size=args.step_size,
        clamp_box=(0.0, 1.0) if args.clamp else None,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    robust = robustify.robustify_dataset(teacher, dataset, cfg, rng)
    out_path = out_dir / "robustified.npz"
    data.save_dataset(robust, out_path)
    _write_manifest(
        out_dir, "robustify", None,
        {"steps": cfg.steps, "step_size": cfg.step_size, "clamp": args.clamp}, args.seed,
        {"dataset": out_path},
    )
    info = robust.metadata["robustified"]
    print(f"robustified {len(robust)} samples: objective "
          f"{info['mean_initial_objective']:.4f} -> {info['mean_final_objective']:.4f}")
    return EXIT_OK


def cmd_sweep_lambda(args) -> int:
    config, doc = load_config(args.config)
    if config.method != "rrm":
        raise ConfigurationError("lambda sweeps only apply to method = 'rrm'")
    dataset = _load_data(args.data, doc, config.seed)
    config = replace(config, budget=_auto_box(config.budget, doc.get("budget", {}), dataset.inputs))
    teacher = _load_teacher(args.teacher)
    eval_doc = doc.get("eval", {"steps": 20, "restarts": 5})
    eval_budget = _auto_box(_budget_from_dict(eval_doc), eval_doc, dataset.inputs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lambdas = sorted(float(v) for v in args.lambdas.split(","))
    rows = []
    for lam in lambdas:
        if lam <= 0:
            rows.append((lam, "", "", "rejected: lambda must be non-zero"))
            print(f"lambda={lam}: rejected (must be non-zero)", file=sys.stderr)
            continue
        run_cfg = replace(config, lam=lam)
        model, _ = trainers.train(run_cfg, dataset, teacher)
        natural, adv = bench.evaluate(model, dataset, eval_budget, np.random.default_rng(config.seed + 2))
        rows.append((lam, repr(natural), repr(adv), ""))
        print(f"lambda={lam}: natural_acc={natural:.4f} adv_acc={adv:.4f}")
    sweep_path = out_dir / "sweep.csv"
    with open(sweep_path, "w") as fh:
        fh.write("lambda,natural_acc,adv_acc,note\n")
        for lam, nat, adv, note in rows:
            fh.write(f"{lam!r},{nat},{adv},{note}\n")
    _write_manifest(out_dir, "sweep-lambda", args.config, trainers.config_to_dict(config),
                    config.seed, {"sweep": sweep_path})
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="rrmkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model per a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="dataset path (.npz container or .bin image records); synthetic if omitted")
    p.add_argument("--teacher", help="frozen teacher checkpoint (required for rrm/kd)")
    p.add_argument("--teacher-time", type=float, default=None,
                   help="teacher training time in seconds, echoed into the report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="evaluate a checkpoint under an attack budget")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--norm", choices=("linf", "l2"), default="linf")
    p.add_argument("--eps", default="8/255")
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--pixel-box", type=float, nargs=2, default=None,
                   help="clamp box for attacked inputs; inferred from the data if omitted")
    p.add_argument("--logit-temperature", type=float, default=None,
                   help="attack through temperature-scaled logits")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("robustify", help="generate a robustified dataset from a frozen teacher")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--step-size", type=float, default=0.1)
    p.add_argument("--clamp", action="store_true", help="clamp outputs to [0, 1]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_robustify)

    p = sub.add_parser("sweep-lambda", help="train rrm at several lambda values and aggregate accuracy")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--teacher", required=True)
    p.add_argument("--lambdas", required=True, help="comma-separated lambda values")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_lambda)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # raised by _Parser.error
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return EXIT_USAGE
        return EXIT_USAGE if exc.code else EXIT_OK
    except (ConfigurationError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RRMKitError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
