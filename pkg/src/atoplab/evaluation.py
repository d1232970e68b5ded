"""Standard / robust accuracy of stochastic pipelines, benchmark matrices and
transform-strength sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .attacks import AttackConfig, run_attack
from .data import LabeledDataset, SeededRng, as_rng, batches, sample_eval_subset
from .models import Pipeline, load_checkpoint
from .transforms import TransformConfig, TransformError


class EvaluationError(ValueError):
    pass


@dataclass
class Accuracy:
    mean: float
    stderr: float
    per_repeat: list[float]

    def __str__(self):
        return f"{self.mean:.2f} +- {self.stderr:.2f}"


def _summarise(values: list[float]) -> Accuracy:
    n = len(values)
    mean = sum(values) / n
    if n < 2:
        return Accuracy(mean, 0.0, values)
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return Accuracy(mean, math.sqrt(var / n), values)


def standard_accuracy(pipeline: Pipeline, dataset: LabeledDataset, rng, repeats: int = 2,
                      batch_size: int = 256) -> Accuracy:
    """Percent correct through the pipeline, one stochastic pass per repeat.

    The transform randomness comes from ``rng.spawn("eval")`` so that any
    dataset evaluated with the same ``rng`` sees the same transform draws.
    """
    if len(dataset) == 0:
        raise EvaluationError("cannot evaluate an empty dataset")
    if repeats < 1:
        raise EvaluationError("repeats must be >= 1")
    if repeats < 2 and not pipeline.deterministic:
        raise EvaluationError("stochastic pipelines need repeats >= 2")
    erng = as_rng(rng).spawn("eval")
    values = []
    with torch.no_grad():
        for _ in range(repeats):
            correct = 0
            for batch in batches(dataset, batch_size):
                correct += int((pipeline(batch.x, erng).argmax(1) == batch.y).sum())
            values.append(100.0 * correct / len(dataset))
    return _summarise(values)


def adversarial_dataset(pipeline: Pipeline, attack: AttackConfig, dataset: LabeledDataset, rng,
                        batch_size: int = 256) -> LabeledDataset:
    arng = as_rng(rng).spawn("attack", attack.id)
    advs = [run_attack(pipeline, b.x, b.y, attack, arng) for b in batches(dataset, batch_size)]
    return LabeledDataset(torch.cat(advs), dataset.labels.clone(), dict(dataset.metadata))


def robust_accuracy(pipeline: Pipeline, attack: AttackConfig, dataset: LabeledDataset, rng,
                    repeats: int = 2, batch_size: int = 256) -> Accuracy:
    """Attack adaptively (attack stream), then score like :func:`standard_accuracy`.

    Attack and evaluation draws come from separate child streams of ``rng``.
    """
    if len(dataset) == 0:
        raise EvaluationError("cannot evaluate an empty dataset")
    adv = adversarial_dataset(pipeline, attack, dataset, rng, batch_size)
    return standard_accuracy(pipeline, adv, rng, repeats, batch_size)


# ---------------------------------------------------------------------------
# reports


REPORT_FIELDS = ["transform", "atop", "attack", "standard", "standard_se", "robust", "robust_se",
                 "seconds"]


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def get(self, transform: str, atop: bool, attack: str = "clean") -> dict:
        for row in self.rows:
            if row["transform"] == transform and row["atop"] == atop and row["attack"] == attack:
                return row
        raise KeyError((transform, atop, attack))

    def validate(self):
        for row in self.rows:
            for key in ("standard", "robust"):
                v = row.get(key)
                if v not in (None, "") and not 0 <= v <= 100:
                    raise EvaluationError(f"accuracy {v} outside [0, 100] in row {row}")

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "provenance": self.provenance}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["rows"], d["provenance"])

    def write(self, out_dir, stem: str) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(self.rows)
        json_path.write_text(self.to_json())
        return csv_path, json_path


@dataclass
class BenchmarkConfig:
    """Checkpoint paths keyed by ``"<kind>"`` (frozen purifier) or ``"<kind>+atop"``."""

    classifier: str
    purifiers: dict[str, str]
    dataset: LabeledDataset
    transform: TransformConfig = field(default_factory=TransformConfig)
    kinds: tuple[str, ...] = ("RT1", "RT2", "RT3")
    attacks: list[AttackConfig] = field(default_factory=list)
    subset_size: int = 512
    repeats: int = 2
    seed: int = 0
    out_dir: str | None = None
    batch_size: int = 256

    def fingerprint(self) -> str:
        d = {"classifier": self.classifier, "purifiers": self.purifiers,
             "transform": asdict(self.transform), "kinds": list(self.kinds),
             "attacks": [a.to_dict() for a in self.attacks], "subset_size": self.subset_size,
             "repeats": self.repeats, "seed": self.seed, "dataset": self.dataset.metadata.get("name"),
             "n": len(self.dataset)}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def run_benchmark(cfg: BenchmarkConfig) -> EvalReport:
    """{kinds} x {AToP off, on} x attacks; rows flushed as they complete.

    A ``.RESUMABLE`` marker next to the partial JSON signals an interrupted
    run; rerunning with the same config reuses the finished rows.
    """
    for key, path in [("classifier", cfg.classifier), *cfg.purifiers.items()]:
        if not Path(path).exists():
            raise EvaluationError(f"missing checkpoint for {key}: {path}")
    master = SeededRng(cfg.seed)
    subset = sample_eval_subset(cfg.dataset, min(cfg.subset_size, len(cfg.dataset)), master.spawn("subset"))
    f = load_checkpoint(cfg.classifier)
    stem = f"report_seed{cfg.seed}_{cfg.fingerprint()}"
    provenance = {
        "seed": cfg.seed, "subset_size": len(subset), "subset_indices_seed": master.spawn("subset").seed,
        "repeats": cfg.repeats, "transform": asdict(cfg.transform),
        "attacks": [a.to_dict() for a in cfg.attacks], "classifier": cfg.classifier,
        "purifiers": cfg.purifiers, "config_hash": cfg.fingerprint(),
    }
    report = EvalReport([], provenance)
    done = {}
    marker = partial = None
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        partial, marker = out / f"{stem}.partial.json", out / f"{stem}.RESUMABLE"
        if partial.exists() and marker.exists():
            for row in EvalReport.from_json(partial.read_text()).rows:
                done[(row["transform"], row["atop"], row["attack"])] = row

    def flush():
        if partial is not None:
            partial.write_text(report.to_json())

    start = time.time()
    try:
        for kind in cfg.kinds:
            t_cfg = cfg.transform.replace(kind=kind)
            for atop in (False, True):
                key = f"{kind}+atop" if atop else kind
                if key not in cfg.purifiers:
                    continue
                g = load_checkpoint(cfg.purifiers[key])
                pipe = Pipeline(f, g, t_cfg).eval()
                cell_rng = master.spawn("cell", kind)
                for attack in [None, *cfg.attacks]:
                    attack_id = "clean" if attack is None else attack.id
                    if (kind, atop, attack_id) in done:
                        report.rows.append(done[(kind, atop, attack_id)])
                        continue
                    t0 = time.time()
                    std = standard_accuracy(pipe, subset, cell_rng, cfg.repeats, cfg.batch_size)
                    row = {"transform": kind, "atop": atop, "attack": attack_id,
                           "standard": std.mean, "standard_se": std.stderr, "robust": "", "robust_se": ""}
                    if attack is not None:
                        rob = robust_accuracy(pipe, attack, subset, cell_rng, cfg.repeats, cfg.batch_size)
                        row.update(robust=rob.mean, robust_se=rob.stderr)
                    row["seconds"] = round(time.time() - t0, 3)
                    report.rows.append(row)
                    flush()
    except BaseException:
        if marker is not None:
            flush()
            marker.write_text("partial results; rerun the same config to resume\n")
        raise
    report.provenance["wall_clock_seconds"] = round(time.time() - start, 3)
    report.validate()
    if cfg.out_dir:
        report.write(cfg.out_dir, stem)
        for p in (partial, marker):
            if p is not None and p.exists():
                p.unlink()
    return report


# ---------------------------------------------------------------------------
# trade-off sweep


SWEEP_PARAMS = ("sigma", "rate", "n_masks")


def tradeoff_sweep(param: str, values: list, pipeline: Pipeline, dataset: LabeledDataset, rng,
                   attack: AttackConfig | None = None, repeats: int = 2, out_csv=None,
                   batch_size: int = 256) -> list[dict]:
    """Standard (and optionally robust) accuracy for each transform setting."""
    if param not in SWEEP_PARAMS:
        raise EvaluationError(f"cannot sweep {param!r}; choose one of {SWEEP_PARAMS}")
    if not values:
        raise EvaluationError("sweep needs at least one value")
    _, h, w = dataset.image_shape
    configs = []
    for v in values:
        try:
            t_cfg = pipeline.transform.replace(**{param: v})
            t_cfg.validate_for(h, w)
        except TransformError as err:
            raise EvaluationError(f"invalid {param}={v}: {err}") from None
        configs.append(t_cfg)
    records = []
    for v, t_cfg in zip(values, configs):
        pipe = pipeline.with_transform(t_cfg)
        reps = repeats if not pipe.deterministic else max(1, repeats)
        std = standard_accuracy(pipe, dataset, rng, reps, batch_size)
        rec = {"param": param, "value": v, "standard": std.mean, "standard_se": std.stderr,
               "robust": "", "robust_se": ""}
        if attack is not None:
            rob = robust_accuracy(pipe, attack, dataset, rng, reps, batch_size)
            rec.update(robust=rob.mean, robust_se=rob.stderr)
        records.append(rec)
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(records[0]))
            writer.writeheader()
            writer.writerows(records)
    return records
