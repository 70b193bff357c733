"""Command-line entry point: ``ptx {gen,bank,train,eval,ablate,gradcheck,params}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .config import VARIANTS, ModelConfig, variant as variant_by_name
from .container import ContainerError
from .model import VariantMismatch, load_checkpoint
from .scenes import (
    SHAPES,
    DatasetError,
    SceneError,
    SceneSpec,
    benchmark_spec,
    class_counts,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .textbank import TextBank, TextBankError, build_synthetic, import_bank

EXIT_OK, EXIT_USAGE, EXIT_NAN, EXIT_IO = 0, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"

log = logging.getLogger("ptx")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    outputs: list[str]
    duration_s: float = 0.0
    versions: dict = field(default_factory=dict)

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_NAME
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
        return path


def _versions() -> dict:
    return {"ptx": __version__, "numpy": np.__version__, "python": platform.python_version(),
            "precision": np.dtype(ad.get_dtype()).name}


def _finish(args, out: Path, config: dict, seed, outputs, t0: float) -> None:
    RunManifest(args.command, config, seed, sorted(outputs), round(time.time() - t0, 3), _versions()).write(out)


def _load_json(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from None


def _model_config(path) -> ModelConfig:
    return ModelConfig.from_dict(_load_json(path, "model config")) if path else ModelConfig()


def _resolve_bank(arg, d_t: int = 64, seed: int = 0) -> TextBank:
    if arg == "synthetic":
        return build_synthetic(list(SHAPES), d_t, seed=seed)
    p = Path(arg)
    if not p.exists():
        raise UsageError(f"text bank not found: {arg}")
    return import_bank(p)


# ----------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    t0 = time.time()
    spec = SceneSpec.from_dict(_load_json(args.spec, "scene spec")) if args.spec else benchmark_spec()
    ds = generate_dataset(spec, args.count, seed=args.seed, k=args.points, mode=args.mode)
    out = Path(args.out)
    tmp = out.with_name(out.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    write_dataset(ds, tmp)
    cfg = {"spec": spec.to_dict(), "count": args.count, "points": args.points, "mode": args.mode}
    _finish(args, tmp, cfg, args.seed, ["scenes.jsonl", "images/", "masks/"], t0)
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)
    print(f"wrote {len(ds.scenes)} scenes / {len(ds)} samples to {out}")
    for cls, n in sorted(class_counts(ds).items()):
        print(f"  {cls:<10} {n} instances")
    return EXIT_OK


def cmd_bank(args) -> int:
    t0 = time.time()
    classes = args.classes.split(",") if args.classes else list(SHAPES)
    bank = build_synthetic(classes, args.dim, seed=args.seed)
    out = bank.save(args.out)
    _finish(args, out, {"classes": classes, "d_t": args.dim}, args.seed, ["manifest.json", "embeddings.ptx"], t0)
    print(f"wrote {len(bank)} embeddings (d_t={bank.dim}) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import TrainConfig, build_model, resume, train

    t0 = time.time()
    raw = _load_json(args.config, "train config") if args.config else {}
    model_raw = raw.pop("model", None)
    if args.variant:
        raw["variant"] = args.variant
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    cfg = TrainConfig.from_dict(raw)
    spec = cfg.variant_spec
    if not spec.uses_text and args.bank:
        raise UsageError(f"variant {cfg.variant!r} takes no text; refusing --bank")
    if spec.uses_text and not args.bank:
        raise UsageError(f"variant {cfg.variant!r} needs a text bank (--bank PATH or --bank synthetic)")
    mcfg = ModelConfig.from_dict(model_raw) if model_raw else _model_config(args.model_config)
    bank = _resolve_bank(args.bank, mcfg.text_dim) if spec.uses_text else None
    ds = read_dataset(args.data)
    if bank is not None:
        missing = sorted(set(ds.classes()) - set(bank.names))
        if missing:
            raise UsageError(f"text bank has no embedding for classes {missing}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    every = max(1, len(ds) // 4)

    def progress(step, loss):
        if step % every == 0:
            print(f"step {step} loss {loss:.5f}", flush=True)

    if args.resume:
        if not (Path(args.resume) / "manifest.json").is_file():
            raise UsageError(f"no checkpoint at {args.resume}")
        res = resume(args.resume, ds, bank, cfg, out_dir=out, max_steps=args.max_steps)
    else:
        model = build_model(mcfg, spec, seed=cfg.seed, bank=bank)
        res = train(ds, model, bank, cfg, out_dir=out, max_steps=args.max_steps, callback=progress)
    outputs = ["checkpoint/", "loss.csv"]
    if bank is not None:
        bank.save(out / "bank")
        outputs.append("bank/")
    p = res.model.partition
    print(f"variant {cfg.variant}: {res.state.step} steps, mean loss {res.state.mean_loss:.5f}, "
          f"trainable {p.trainable_count}/{p.total_count}")
    _finish(args, out, {"train": cfg.to_dict(), "model": res.model.cfg.to_dict(), "data": str(args.data),
                        "bank": args.bank}, cfg.seed, outputs, t0)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalsuite import evaluate

    t0 = time.time()
    ck_path = Path(args.checkpoint)
    if not (ck_path / "manifest.json").is_file():
        raise UsageError(f"no checkpoint at {ck_path}")
    model = load_checkpoint(ck_path).model
    bank = None
    if model.variant.uses_text:
        if args.bank:
            bank = _resolve_bank(args.bank, model.cfg.text_dim)
        elif (ck_path.parent / "bank" / "manifest.json").is_file():
            bank = import_bank(ck_path.parent / "bank")
        else:
            raise UsageError("text variant checkpoint needs a text bank (--bank)")
    ds = read_dataset(args.data)
    res = evaluate(model, ds, bank, threshold=args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"mIoU {res.miou:.2f}  MAE {res.mae:.4f}  samples {res.count}  skipped {res.skipped}")
    _finish(args, out, {"checkpoint": str(ck_path), "data": str(args.data), "threshold": args.threshold},
            None, ["metrics.json"], t0)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import evalsuite as ev
    from .trainer import NumericalAbort

    t0 = time.time()
    bench = ev.ambiguous_benchmark(args.train_scenes, args.test_scenes, args.epochs, args.lr,
                                   seed=args.data_seed, cfg=_model_config(args.model_config))
    seeds = list(args.seeds)
    out = Path(args.out)
    say = lambda s: print(s, flush=True)  # noqa: E731
    if args.study == "categories":
        bench.check_splits()
        models = {}
        for s in seeds:
            base = ev.train_and_eval(bench, "parallel", s)
            text = ev.train_and_eval(bench, "parallel_text", s)
            if base.model is None or text.model is None:
                raise NumericalAbort(f"training aborted for seed {s}")
            models[s] = (base.model, text.model)
            say(f"categories: seed {s} trained")
        table = ev.category_tests(models, bench.test, bench.bank)
        table["budget"] = bench.budget(seeds)
        out.mkdir(parents=True, exist_ok=True)
        (out / "categories.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
        text = ev.category_table_text(table)
        (out / "categories.txt").write_text(text)
        print(text, end="")
        files = ["categories.json", "categories.txt"]
    else:
        runner = {"table1": ev.run_table1, "injection": ev.run_injection_ablation,
                  "placement": ev.run_placement_ablation}[args.study]
        report, _ = runner(bench, seeds, progress=say)
        report.write(out)
        print(report.to_text(), end="")
        files = [f"{args.study}.json", f"{args.study}.txt"]
    _finish(args, out, {"study": args.study, **bench.budget(seeds)}, None, files, t0)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .trainer import gradcheck_model

    t0 = time.time()
    errs = gradcheck_model(args.variant, _model_config(args.model_config), seed=args.seed,
                           coords_per_tensor=args.coords, step=args.step)
    worst_name = max(errs, key=errs.get)
    worst = errs[worst_name]
    print(f"checked {len(errs)} trainable tensors, {args.coords} coordinates each (64-bit)")
    print(f"worst relative error {worst:.3e} ({worst_name})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps({"worst": worst, "worst_tensor": worst_name,
                                                        "per_tensor": errs}, indent=2, sort_keys=True) + "\n")
        _finish(args, out, {"variant": args.variant, "coords": args.coords, "step": args.step}, args.seed,
                ["gradcheck.json"], t0)
    if worst > args.tol:
        print(f"FAILED: {worst:.3e} > {args.tol:.0e}", file=sys.stderr)
        return 1
    return EXIT_OK


def cmd_params(args) -> int:
    from .model import SegModel, init_base

    t0 = time.time()
    cfg = _model_config(args.model_config)
    model = SegModel.build(cfg, variant_by_name(args.variant), init_base(cfg, 0), 0)
    p = model.partition
    info = {"variant": args.variant, **p.counts()}
    print(f"variant {args.variant}: trainable {p.trainable_count}, frozen {p.frozen_count}, "
          f"fraction {p.trainable_fraction:.4f}")
    if args.verbose:
        for name, t in sorted(p.trainable.items()):
            print(f"  {name:<36} {t.data.size}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "params.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        _finish(args, out, {"variant": args.variant, "model": cfg.to_dict()}, None, ["params.json"], t0)
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ptx", description=__doc__)
    ap.add_argument("--version", action="version", version=f"ptx {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    variants = sorted(VARIANTS)

    p = sub.add_parser("gen", help="generate a synthetic scene dataset")
    p.add_argument("--spec", help="scene spec JSON (default: the ambiguous benchmark spec)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--points", type=int, default=5, help="prompt points per sample")
    p.add_argument("--mode", default="interior", choices=["interior", "edge", "mixed", "partial_instances"])
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("bank", help="build and save a seeded synthetic text bank")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", help="comma-separated class names (default: all shapes)")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("train", help="fine-tune one variant")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="train config JSON (TrainConfig fields, optional 'model' block)")
    p.add_argument("--model-config", help="model config JSON")
    p.add_argument("--variant", choices=variants)
    p.add_argument("--out", required=True)
    p.add_argument("--bank", help="bank directory / JSON file, or 'synthetic'")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bank")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a comparison study on the ambiguous benchmark")
    p.add_argument("study", choices=["table1", "injection", "placement", "categories"])
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--train-scenes", type=int, default=200)
    p.add_argument("--test-scenes", type=int, default=50)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--model-config")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model at 64-bit")
    p.add_argument("--variant", default="parallel_text", choices=variants)
    p.add_argument("--coords", type=int, default=32)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="trainable / frozen parameter counts")
    p.add_argument("--variant", default="parallel_text", choices=variants)
    p.add_argument("--model-config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_params)
    return ap


def main(argv=None) -> int:
    from .trainer import NumericalAbort, ResumeMismatch

    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NAN
    except ContainerError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, SceneError, DatasetError, TextBankError, ResumeMismatch, VariantMismatch,
            ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
