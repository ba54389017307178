"""
Command line entry point.

    csunet synth     --out DIR --count N --extent E --seed S --ground-glass-fraction F
    csunet train     --config FILE --data DIR [--fold K] [--output DIR] [--seed S] [--max-epochs N]
    csunet eval      --model CKPT --data DIR [--output FILE]
    csunet predict   --model CKPT --input VOL --output MASK
    csunet gradcheck [--tol T]
    csunet ablate    --config FILE --data DIR [--seeds S ...] [--output DIR]

Exit codes: 0 success, 1 verification or metric failure, 2 usage or configuration error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing  import List, Optional

import numpy as np
from pydantic import ValidationError

from cellini.csunet.data      import (
    build_manifest, generate_phantom, load_checkpoint, load_dataset, read_volume, save_checkpoint, write_json,
    write_volume,
)
from cellini.csunet.gradcheck import run_battery
from cellini.csunet.losses    import predict_labels
from cellini.csunet.model     import build
from cellini.csunet.tensor    import Tensor, no_grad
from cellini.csunet.training  import ablate, cross_validate, evaluate, fit, kfold_split
from cellini.csunet.types     import GROUND_GLASS_CONTRAST, SOLID_CONTRAST, PhantomSpec, RunConfig
from cellini.csunet.utils     import CSUNetError, GradCheckError, TrainingDiverged

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(CSUNetError):
    pass


def _load_config(args: argparse.Namespace) -> RunConfig:
    """ file values first, then flag overrides; validated as a whole """
    config = RunConfig.model_validate_json(Path(args.config).read_text())
    update = config.model_dump()
    if getattr(args, "seed", None) is not None:
        update["network"]["seed"] = update["train"]["seed"] = args.seed
    if getattr(args, "max_epochs", None) is not None:
        update["train"]["max_epochs"] = args.max_epochs
    if getattr(args, "output", None) is not None:
        update["output_dir"] = str(args.output)
    config = RunConfig.model_validate(update)
    if config.output_dir is None:
        raise UsageError("no output directory: pass --output or set output_dir in the configuration")
    return config


def cmd_synth(args: argparse.Namespace) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be positive, got {args.count}")
    if not 0.0 <= args.ground_glass_fraction <= 1.0:
        raise UsageError(f"--ground-glass-fraction must lie in [0, 1], got {args.ground_glass_fraction}")
    rng = np.random.default_rng(args.seed)
    ground_glass = set(rng.permutation(args.count)[: int(round(args.ground_glass_fraction * args.count))].tolist())
    largest = min(args.extent / 4, args.radius_max)

    out = Path(args.out)
    metadata = {}
    for i in range(args.count):
        sample_id = f"phantom_{i:04d}"
        contrast = GROUND_GLASS_CONTRAST if i in ground_glass else SOLID_CONTRAST
        spec = PhantomSpec(extent=args.extent, nodule_radius_vox=float(rng.uniform(2.0, largest)),
                           contrast=contrast, noise_sigma=args.noise, seed=int(rng.integers(2 ** 31)))
        image, mask = generate_phantom(spec)
        write_volume(out / f"{sample_id}_image.csuv", image)
        write_volume(out / f"{sample_id}_mask.csuv", mask)
        metadata[sample_id] = {"contrast": contrast}
    build_manifest(out, screening=f"synthetic phantoms, seed {args.seed}", metadata=metadata)
    print(f"wrote {args.count} phantoms to {out}")
    return EXIT_OK


def _check_min_dsc(config: RunConfig, dsc: float) -> int:
    if config.min_dsc is not None and dsc < config.min_dsc:
        logger.error("final DSC %.4f is below the required %.4f", dsc, config.min_dsc)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data)
    out = Path(config.output_dir)

    if args.fold is None:
        networks = []
        report = cross_validate(dataset, config.network, config.train, config.loss, checkpoints=networks)
        write_json(out / "config.json", config.model_dump_json(indent=2))
        for fold, net in enumerate(networks):
            save_checkpoint(net, out / f"fold_{fold}.csuc")
        for row in report.folds:
            write_json(out / f"fold_{row.fold}_history.json",
                       json.dumps([record.model_dump() for record in row.history], indent=2))
        write_json(out / "report.json", report.model_dump_json(indent=2))
        print(json.dumps({"mean": report.mean.model_dump(), "std": report.std.model_dump()}, indent=2))
        return _check_min_dsc(config, report.mean.dsc)

    if not 0 <= args.fold < config.train.folds:
        raise UsageError(f"--fold must lie in [0, {config.train.folds - 1}], got {args.fold}")
    by_id = {sample.id: sample for sample in dataset}
    train_ids, val_ids = kfold_split(list(by_id), config.train.folds, config.train.seed)[args.fold]
    net = build(config.network)
    val_set = [by_id[i] for i in val_ids]
    result = fit(net, [by_id[i] for i in train_ids], val_set, config.train, config.loss)
    final = evaluate(net, val_set, config.loss, config.train.batch_size).report

    write_json(out / "config.json", config.model_dump_json(indent=2))
    save_checkpoint(net, out / "model.csuc")
    write_json(out / "history.json", json.dumps([record.model_dump() for record in result.history], indent=2))
    print(final.model_dump_json(indent=2))
    return _check_min_dsc(config, final.dsc)


def cmd_eval(args: argparse.Namespace) -> int:
    net = load_checkpoint(args.model)
    result = evaluate(net, load_dataset(args.data))
    payload = result.report.model_dump_json(indent=2)
    if args.output is not None:
        write_json(args.output, payload)
    print(payload)
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    net = load_checkpoint(args.model)
    volume = read_volume(args.input)
    with no_grad():
        logits = net.forward(Tensor(volume.data[None], dtype=net.head.weight.dtype), mode="eval")
    labels = predict_labels(logits)[0].astype(np.uint8)
    write_volume(args.output, labels[None])
    logger.info("foreground fraction %.4f", float(np.mean(labels > 0)))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    reports = run_battery(args.tol)
    for report in reports:
        print(f"{report.name:28s} {report.max_rel_err:.3e} {'ok' if report.passed else 'FAILED'}")
    failed = [report.name for report in reports if not report.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    report = ablate(load_dataset(args.data), config.network, config.train, config.loss, seeds=args.seeds)
    out = Path(config.output_dir)
    write_json(out / "config.json", config.model_dump_json(indent=2))
    write_json(out / "ablation.json", report.model_dump_json(indent=2))
    for row in report.rows:
        print(f"seed {row.seed} {row.variant.value:9s} dsc {row.dsc:.4f}")
    print(f"expected ordering held in {report.ordered_groups}/{report.groups} seed groups")
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csunet", description="Channel squeeze U-structure 3D segmentation.")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log per-step details")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="log warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate synthetic nodule phantoms")
    synth.add_argument("--out", type=Path, required=True)
    synth.add_argument("--count", type=int, required=True)
    synth.add_argument("--extent", type=int, default=32)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--ground-glass-fraction", dest="ground_glass_fraction", type=float, default=0.0)
    synth.add_argument("--noise", type=float, default=0.1, help="noise standard deviation")
    synth.add_argument("--radius-max", dest="radius_max", type=float, default=np.inf,
                       help="largest nodule radius in voxels (capped at extent/4)")
    synth.set_defaults(handler=cmd_synth)

    for name, handler, help in (("train", cmd_train, "train with k-fold cross-validation or on one fold"),
                                ("ablate", cmd_ablate, "cross-validate base_cr, base_res and base_u per seed")):
        command = commands.add_parser(name, help=help)
        command.add_argument("--config", type=Path, required=True)
        command.add_argument("--data", type=Path, required=True)
        command.add_argument("--output", type=Path)
        command.add_argument("--max-epochs", dest="max_epochs", type=int)
        command.set_defaults(handler=handler)
        if name == "train":
            command.add_argument("--fold", type=int)
            command.add_argument("--seed", type=int)
        else:
            command.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])

    evaluate_ = commands.add_parser("eval", help="score a checkpoint on a dataset")
    evaluate_.add_argument("--model", type=Path, required=True)
    evaluate_.add_argument("--data", type=Path, required=True)
    evaluate_.add_argument("--output", type=Path)
    evaluate_.set_defaults(handler=cmd_eval)

    predict = commands.add_parser("predict", help="write the argmax mask of a volume")
    predict.add_argument("--model", type=Path, required=True)
    predict.add_argument("--input", type=Path, required=True)
    predict.add_argument("--output", type=Path, required=True)
    predict.set_defaults(handler=cmd_predict)

    gradcheck = commands.add_parser("gradcheck", help="run the finite-difference gradient battery")
    gradcheck.add_argument("--tol", type=float, default=1e-4)
    gradcheck.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return args.handler(args)
    except ValidationError as e:
        print(f"invalid configuration:\n{e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, GradCheckError) as e:
        logger.error("%s", e)
        return EXIT_FAILURE
    except (CSUNetError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
