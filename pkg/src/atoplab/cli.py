"""Command-line driver: one subcommand per stage, all artifacts under one run directory.

    atoplab <subcommand> [--config FILE] [--seed N] [--out-dir DIR] [--device cpu]
                         [--set section.key=value ...]

The run directory is ``<out-dir>/<config hash>-seed<seed>``; ``--out-dir``
defaults to ``$ATOPLAB_OUT`` or ``./runs``. Any config change gives a new run
directory, so stages after training accept ``--from-run DIR`` to reuse the
checkpoints of an earlier run. Exit status: 0 success, 1 runtime
failure, 2 config/schema error, 3 missing prerequisite. Failures print a JSON
error record on stderr (and to ``error.json`` in the run directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import traceback
from dataclasses import asdict
from pathlib import Path

import torch

from .attacks import attack_suite, run_attack, save_adversarial_set
from .config import ConfigError, ExperimentConfig, apply_overrides, config_from_dict, load_config, parse_attack
from .data import (DatasetError, SeededRng, SyntheticSpec, load_image_dataset, make_synthetic_dataset,
                   sample_eval_subset)
from .evaluation import BenchmarkConfig, run_benchmark, standard_accuracy, tradeoff_sweep
from .models import Pipeline, load_checkpoint, save_checkpoint
from .render import render_grid
from .training import (AtopConfig, OptimizerConfig, PretrainConfig, finetune_atop, pretrain_purifier,
                       train_classifier, write_log_csv)
from .transforms import apply_transform

log = logging.getLogger("atoplab")

SUBCOMMANDS = ("train-classifier", "pretrain-purifier", "finetune-atop", "attack", "evaluate", "sweep",
               "render-grid")
OUT_ENV = "ATOPLAB_OUT"


class MissingPrerequisite(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _require(*paths: Path):
    for p in paths:
        if not Path(p).exists():
            raise MissingPrerequisite(f"missing prerequisite: {p}")


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))
    return path


def load_data(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds.source == "directory":
        try:
            return load_image_dataset(ds.train_path, "train"), load_image_dataset(ds.test_path, "test")
        except DatasetError as err:
            if "does not exist" in str(err):
                raise MissingPrerequisite(str(err)) from None
            raise
    master = SeededRng(cfg.seed)
    spec = SyntheticSpec(C=ds.num_classes, H=ds.size, W=ds.size, n_per_class=ds.n_per_class,
                         channels=ds.channels, texture_amp=ds.texture_amp)
    train = make_synthetic_dataset(master.spawn("data", "train"), spec, "train")
    test_spec = SyntheticSpec(**{**asdict(spec), "n_per_class": ds.n_test_per_class})
    test = make_synthetic_dataset(master.spawn("data", "test"), test_spec, "test")
    return train, test


def eval_subset(cfg: ExperimentConfig, test):
    n = min(cfg.eval.subset_size, len(test))
    return sample_eval_subset(test, n, SeededRng(cfg.seed).spawn("subset"))


def _paths(run: Path, kind: str, atop: bool = False) -> dict:
    tag = f"{kind}_atop" if atop else kind
    return {"purifier": run / f"purifier_{tag}.ckpt", "discriminator": run / f"discriminator_{tag}.ckpt",
            "log": run / f"{'atop' if atop else 'pretrain'}_{kind}_log.csv"}


def _src(run: Path, args) -> Path:
    """Where prerequisite checkpoints are read from: ``--from-run`` or the run itself."""
    return Path(args.from_run) if getattr(args, "from_run", None) else run


def _pipeline(cfg: ExperimentConfig, run: Path, kind: str, atop: bool) -> Pipeline:
    f_path = run / "classifier.ckpt"
    _require(f_path)
    f = load_checkpoint(f_path)
    g = None
    if kind != "none":
        g_path = _paths(run, kind, atop)["purifier"]
        _require(g_path)
        g = load_checkpoint(g_path)
    return Pipeline(f, g, cfg.transform_config(kind)).eval()


# ---------------------------------------------------------------------------
# stages


def cmd_train_classifier(cfg, run, args):
    train, test = load_data(cfg)
    c = cfg.classifier
    opt = OptimizerConfig(lr=c.lr, schedule="cosine")
    f = train_classifier(train, SeededRng(cfg.seed).spawn("classifier"), c.epochs, c.batch_size, opt, c.width)
    path = save_checkpoint(f, run / "classifier.ckpt", seed=cfg.seed)
    acc = standard_accuracy(Pipeline(f), eval_subset(cfg, test), SeededRng(cfg.seed), repeats=1)
    summary = _write_json(run / "classifier_eval.json", {"seed": cfg.seed, "clean_accuracy": acc.mean,
                                                         "subset_size": min(cfg.eval.subset_size, len(test))})
    return [path, summary]


def cmd_pretrain_purifier(cfg, run, args):
    train, _ = load_data(cfg)
    p = cfg.purifier
    out = []
    for kind in p.kinds:
        pcfg = PretrainConfig(variant=p.variant, transform=cfg.transform_config(kind), epochs=p.epochs,
                              batch_size=p.batch_size, optimizer=OptimizerConfig(lr=p.lr),
                              d_optimizer=OptimizerConfig(lr=p.d_lr), d_clip=p.d_clip, width=p.width,
                              residual=kind in p.residual_kinds)
        res = pretrain_purifier(pcfg, train, SeededRng(cfg.seed).spawn("pretrain", kind),
                                checkpoint_dir=run / "epochs" / f"pretrain_{kind}")
        paths = _paths(run, kind)
        out.append(save_checkpoint(res.purifier, paths["purifier"], seed=cfg.seed))
        if res.discriminator is not None:
            out.append(save_checkpoint(res.discriminator, paths["discriminator"], seed=cfg.seed))
        out.append(write_log_csv(res.log, paths["log"]))
    return out


def cmd_finetune_atop(cfg, run, args):
    a = cfg.atop
    f_path = _src(run, args) / "classifier.ckpt"
    prereq = [f_path]
    for kind in a.kinds:
        paths = _paths(_src(run, args), kind)
        prereq.append(paths["purifier"])
        if cfg.purifier.variant == "gan":
            prereq.append(paths["discriminator"])
    _require(*prereq)
    train, _ = load_data(cfg)
    f = load_checkpoint(f_path)
    out = []
    for kind in a.kinds:
        paths = _paths(_src(run, args), kind)
        g = load_checkpoint(paths["purifier"])
        d = load_checkpoint(paths["discriminator"]) if cfg.purifier.variant == "gan" else None
        acfg = AtopConfig(lam=a.lam, epochs=a.epochs, attack_for_ft=parse_attack(a.attack),
                          optimizer=OptimizerConfig(lr=a.lr), d_optimizer=OptimizerConfig(lr=a.d_lr),
                          purifier_variant=cfg.purifier.variant, transform=cfg.transform_config(kind),
                          train_with=a.train_with, attack_mode=a.attack_mode,
                          freeze_discriminator=a.freeze_discriminator, d_clip=cfg.purifier.d_clip,
                          batch_size=a.batch_size)
        res = finetune_atop(acfg, g, d, f, train, SeededRng(cfg.seed).spawn("atop", kind),
                            checkpoint_dir=run / "epochs" / f"atop_{kind}")
        tuned = _paths(run, kind, atop=True)
        out.append(save_checkpoint(res.purifier, tuned["purifier"], seed=cfg.seed))
        if res.discriminator is not None:
            out.append(save_checkpoint(res.discriminator, tuned["discriminator"], seed=cfg.seed))
        out.append(write_log_csv(res.log, tuned["log"]))
    return out


def cmd_attack(cfg, run, args):
    kind = args.kind or cfg.transform["kind"]
    pipe = _pipeline(cfg, _src(run, args), kind, args.atop)
    _, test = load_data(cfg)
    subset = eval_subset(cfg, test)
    sets = attack_suite(pipe, subset, cfg.attack_configs(), SeededRng(cfg.seed), cfg.eval.batch_size)
    base = run / "attacks" / (f"{kind}_atop" if args.atop else kind)
    out = []
    for attack_id, adv in sets.items():
        path = save_adversarial_set(adv, base / attack_id)
        sidecar = json.loads((path / "attack.json").read_text())
        sidecar.update(master_seed=cfg.seed, transform=cfg.transform_config(kind).to_dict(), atop=args.atop)
        _write_json(path / "attack.json", sidecar)
        out.append(path)
    return out


def cmd_evaluate(cfg, run, args):
    purifiers, prereq = {}, [_src(run, args) / "classifier.ckpt"]
    for kind in cfg.eval.kinds:
        purifiers[kind] = str(_paths(_src(run, args), kind)["purifier"])
        prereq.append(Path(purifiers[kind]))
        if kind in cfg.atop.kinds:
            purifiers[f"{kind}+atop"] = str(_paths(_src(run, args), kind, atop=True)["purifier"])
            prereq.append(Path(purifiers[f"{kind}+atop"]))
    _require(*prereq)
    _, test = load_data(cfg)
    bench = BenchmarkConfig(classifier=str(_src(run, args) / "classifier.ckpt"), purifiers=purifiers, dataset=test,
                            transform=cfg.transform_config(), kinds=tuple(cfg.eval.kinds),
                            attacks=cfg.attack_configs(), subset_size=cfg.eval.subset_size,
                            repeats=cfg.eval.repeats, seed=cfg.seed, out_dir=str(run / "reports"),
                            batch_size=cfg.eval.batch_size)
    report = run_benchmark(bench)
    stem = f"report_seed{cfg.seed}_{bench.fingerprint()}"
    for row in report.rows:
        log.info("%s atop=%s %s standard %.2f robust %s", row["transform"], row["atop"], row["attack"],
                 row["standard"], row["robust"])
    return [run / "reports" / f"{stem}.csv", run / "reports" / f"{stem}.json"]


def cmd_sweep(cfg, run, args):
    kind = args.kind or cfg.transform["kind"]
    pipe = _pipeline(cfg, _src(run, args), kind, args.atop)
    _, test = load_data(cfg)
    subset = eval_subset(cfg, test)
    s = cfg.sweep
    attack = parse_attack(s.attack) if s.attack is not None else None
    tag = f"{kind}{'_atop' if args.atop else ''}_{s.param}"
    csv_path = run / f"sweep_{tag}.csv"
    records = tradeoff_sweep(s.param, s.values, pipe, subset, SeededRng(cfg.seed).spawn("sweep"), attack,
                             max(2, cfg.eval.repeats), csv_path, cfg.eval.batch_size)
    meta = _write_json(run / f"sweep_{tag}.json", {"seed": cfg.seed, "param": s.param, "values": s.values,
                                                   "transform": cfg.transform_config(kind).to_dict(),
                                                   "attack": attack.to_dict() if attack else None,
                                                   "records": records})
    return [csv_path, meta]


def cmd_render_grid(cfg, run, args):
    kind = args.kind or cfg.transform["kind"]
    pipe = _pipeline(cfg, _src(run, args), kind, args.atop)
    _, test = load_data(cfg)
    r = cfg.render
    subset = eval_subset(cfg, test).subset(range(min(r.n_examples, cfg.eval.subset_size, len(test))))
    x, y = subset.images, subset.labels
    stages = list(r.stages)
    rng = SeededRng(cfg.seed).spawn("render")
    columns = {"clean": x}
    if {"adversarial", "purified_adversarial"} & set(stages):
        columns["adversarial"] = run_attack(pipe, x, y, parse_attack(r.attack), rng.spawn("attack"))
    with torch.no_grad():
        if "transformed" in stages:
            columns["transformed"] = apply_transform(x, pipe.transform, rng.spawn("transform")).views[0]
        if "purified" in stages:
            columns["purified"] = pipe.purify(x, rng.spawn("purify"))
        if "purified_adversarial" in stages:
            # same transform draw as the clean column, so the two purified images are comparable
            columns["purified_adversarial"] = pipe.purify(columns["adversarial"], rng.spawn("purify"))
    examples = [{s: columns[s][i] for s in stages if s in columns} for i in range(len(y))]
    path = render_grid(examples, stages, run / f"grid_{kind}{'_atop' if args.atop else ''}.png", r.scale,
                       row_labels=[str(int(v)) for v in y])
    return [path]


COMMANDS = {"train-classifier": cmd_train_classifier, "pretrain-purifier": cmd_pretrain_purifier,
            "finetune-atop": cmd_finetune_atop, "attack": cmd_attack, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep, "render-grid": cmd_render_grid}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atoplab", description="Random-transform purification laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="master seed (overrides seeds.master)")
        p.add_argument("--out-dir", help=f"output root (default ${OUT_ENV} or ./runs)")
        p.add_argument("--device", default="cpu", help="compute device (only cpu is supported)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        if name != "train-classifier" and name != "pretrain-purifier":
            p.add_argument("--from-run", metavar="DIR",
                           help="read prerequisite checkpoints from another run directory")
        if name in ("attack", "sweep", "render-grid"):
            p.add_argument("--kind", choices=["none", "RT1", "RT2", "RT3"],
                           help="transform kind of the target pipeline (default transform.kind)")
            p.add_argument("--atop", action="store_true", help="use the fine-tuned purifier")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seeds.master={args.seed}")
    return apply_overrides(cfg, overrides) if overrides else cfg


def _error_record(code: int, err: BaseException, command: str | None) -> dict:
    return {"status": "error", "exit_code": code, "error_type": type(err).__name__, "message": str(err),
            "command": command}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    run = None
    try:
        try:
            cfg = resolve_config(args)
        except FileNotFoundError as err:
            raise MissingPrerequisite(str(err)) from None
        if args.device != "cpu":
            raise ConfigError(f"device {args.device!r} is not supported; this build runs on cpu only")
        root = Path(args.out_dir or os.environ.get(OUT_ENV, "runs"))
        run = cfg.run_dir(root)
        run.mkdir(parents=True, exist_ok=True)
        (run / "config.resolved.yaml").write_text(cfg.to_yaml())
        _write_json(run / "seeds.json", {"master": cfg.seed, "config_hash": cfg.config_hash(),
                                         "from_run": getattr(args, "from_run", None)})
        start = time.time()
        artifacts = COMMANDS[args.command](cfg, run, args)
        record = {"status": "ok", "command": args.command, "run_dir": str(run), "seed": cfg.seed,
                  "seconds": round(time.time() - start, 3), "artifacts": [str(a) for a in artifacts]}
        _write_json(run / f"{args.command}.done.json", record)
        print(json.dumps(record, sort_keys=True))
        return 0
    except ConfigError as err:
        code, error = 2, err
    except MissingPrerequisite as err:
        code, error = 3, err
    except Exception as err:  # noqa: BLE001 - top-level guard turns failures into exit codes
        code, error = 1, err
        log.debug("%s", traceback.format_exc())
    record = _error_record(code, error, args.command)
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    if run is not None:
        _write_json(run / "error.json", record)
    return code


if __name__ == "__main__":
    sys.exit(main())
