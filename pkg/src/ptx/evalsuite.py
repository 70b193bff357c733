"""Metrics, ablation runners and the prompt-quality behaviour checks."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import sigmoid_np
from .config import ModelConfig
from .model import SegModel, forward, resample_nearest
from .scenes import Dataset, Sample, benchmark_spec, generate_dataset, sample_prompts
from .textbank import TextBank
from .trainer import NumericalAbort, TrainConfig, build_model, train

log = logging.getLogger(__name__)

TABLE1_VARIANTS = ("none", "decoder_only", "parallel", "parallel_text")
TABLE1_LABELS = {
    "none": "No fine-tuning",
    "decoder_only": "Decoder-only",
    "parallel": "Parallel",
    "parallel_text": "Parallel-Text",
}
INJECTION_VARIANTS = ("inject_prompt", "parallel_text", "inject_decoder")
INJECTION_LABELS = {
    "inject_prompt": "Prompt Encoder only",
    "parallel_text": "Image Encoder",
    "inject_decoder": "Mask Decoder",
}
PLACEMENT_VARIANTS = ("parallel_text", "text_mlp_mhsa")
PLACEMENT_LABELS = {"parallel_text": "MLP-only", "text_mlp_mhsa": "MLP + MHSA"}

# published mIoU values, kept for the report footers
REFERENCE_TABLE1 = {
    "COCO 1_512": {"No fine-tuning": 62.09, "Decoder-only": 67.29, "Parallel": 67.35, "Parallel-Text": 67.77},
    "ADE20K 1_64": {"No fine-tuning": 65.14, "Decoder-only": 70.32, "Parallel": 71.29, "Parallel-Text": 71.38},
}
REFERENCE_TABLE2 = {"Prompt Encoder only": 71.11, "Image Encoder": 71.38, "Mask Decoder": 70.82}
REFERENCE_TABLE3 = {"MLP-only": 71.38, "MLP + MHSA": 71.25}


class MetricError(ValueError):
    pass


# ----------------------------------------------------------------------------
# metrics


def _as_binary(x, what: str) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise MetricError(f"{what} must be binary")
    return a.astype(bool)


def iou(pred_binary, gt_binary) -> float:
    """|pred & gt| / |pred | gt|, with IoU(empty, empty) = 1."""
    p = _as_binary(pred_binary, "prediction")
    g = _as_binary(gt_binary, "ground truth")
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch {p.shape} vs {g.shape}")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def mae(pred_prob, gt_binary) -> float:
    p = np.asarray(pred_prob, dtype=np.float64)
    g = _as_binary(gt_binary, "ground truth")
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch {p.shape} vs {g.shape}")
    if p.size and (p.min() < 0 or p.max() > 1 or not np.isfinite(p).all()):
        raise MetricError("predicted probabilities must lie in [0, 1]")
    # exactly rounded sum, so the value does not depend on summation order
    return math.fsum(np.abs(p - g).ravel().tolist()) / p.size


@dataclass
class MetricResult:
    ious: list[float]
    maes: list[float]
    skipped: int = 0

    @property
    def count(self) -> int:
        return len(self.ious)

    @property
    def miou(self) -> float:
        return 100.0 * float(np.mean(self.ious)) if self.ious else float("nan")

    @property
    def mae(self) -> float:
        return float(np.mean(self.maes)) if self.maes else float("nan")

    def to_dict(self) -> dict:
        return {"miou": self.miou, "mae": self.mae, "count": self.count, "skipped": self.skipped,
                "ious": list(self.ious)}


def predict_prob(model: SegModel, sample: Sample, bank: TextBank | None) -> np.ndarray:
    logits, _ = forward(model, sample, bank)
    return sigmoid_np(logits.data.astype(np.float64))


def evaluate(model: SegModel, dataset: Dataset, bank: TextBank | None = None, threshold: float = 0.5) -> MetricResult:
    """Binary IoU and MAE per sample at the loss resolution."""
    ious, maes, skipped = [], [], 0
    for smp in dataset.samples:
        if model.variant.uses_text and (bank is None or smp.target_class not in bank):
            log.warning("class %r missing from the text bank; sample skipped", smp.target_class)
            skipped += 1
            continue
        prob = predict_prob(model, smp, bank)
        gt = resample_nearest(smp.gt_mask, prob.shape[0])
        ious.append(iou(prob >= threshold, gt))
        maes.append(mae(prob, gt))
    return MetricResult(ious, maes, skipped)


def unprompted_recall(prob: np.ndarray, sample: Sample, threshold: float = 0.5) -> float | None:
    """Fraction of unprompted target-instance pixels predicted positive (None if every instance is prompted)."""
    hit = set(sample.prompted_instances())
    size = prob.shape[0]
    region = np.zeros((size, size), dtype=bool)
    for i, inst in enumerate(sample.scene.instances):
        if inst.class_name == sample.target_class and i not in hit:
            region |= resample_nearest(inst.mask, size)
    area = np.count_nonzero(region)
    if area == 0:
        return None
    return np.count_nonzero((prob >= threshold) & region) / area


# ----------------------------------------------------------------------------
# reports


def format_delta(value: float, baseline: float) -> str:
    return f"{value - baseline:+.2f}"


def _r(x: float, nd: int = 4):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else round(float(x), nd)


@dataclass
class AblationReport:
    study: str
    rows: list[dict]
    baseline: str
    budget: dict
    reference: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def row(self, label: str) -> dict:
        for r in self.rows:
            if r["label"] == label:
                return r
        raise KeyError(label)

    @property
    def deltas(self) -> dict[str, float]:
        base = self.row(self.baseline)["miou"]
        return {r["label"]: _r(r["miou"] - base) for r in self.rows
                if r["label"] != self.baseline and r["miou"] is not None and base is not None}

    @property
    def winner(self) -> str | None:
        ok = [r for r in self.rows if r["miou"] is not None]
        return max(ok, key=lambda r: r["miou"])["label"] if ok else None

    def to_dict(self) -> dict:
        return {
            "study": self.study,
            "rows": self.rows,
            "baseline": self.baseline,
            "deltas": self.deltas,
            "winner": self.winner,
            "budget": self.budget,
            "reference": self.reference,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        head = ("variant", "mIoU", "std", "MAE", "trainable", "delta", "status")
        base = self.row(self.baseline)["miou"]
        body = []
        for r in self.rows:
            m = r["miou"]
            body.append((
                r["label"],
                "-" if m is None else f"{m:.2f}",
                "-" if r.get("miou_std") is None else f"{r['miou_std']:.2f}",
                "-" if r["mae"] is None else f"{r['mae']:.4f}",
                str(r["trainable_params"]),
                "baseline" if r["label"] == self.baseline else ("-" if m is None or base is None else format_delta(m, base)),
                r.get("status", "ok"),
            ))
        widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(head)]
        fmt = "  ".join("{:<%d}" % w for w in widths)
        lines = [f"# {self.study}", fmt.format(*head), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*b) for b in body]
        lines.append("")
        lines.append("seeds: " + ", ".join(str(s) for s in self.budget.get("seeds", [])))
        lines.append("budget: " + ", ".join(f"{k}={v}" for k, v in sorted(self.budget.items()) if k != "seeds"))
        if self.winner:
            lines.append(f"winner: {self.winner}")
        for name, ref in sorted(self.reference.items()):
            vals = ", ".join(f"{k} {v:.2f}" for k, v in ref.items())
            lines.append(f"reference ({name}): {vals}")
        lines += self.notes
        return "\n".join(lines) + "\n"

    def write(self, directory, stem: str | None = None) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or self.study
        jp, tp = directory / f"{stem}.json", directory / f"{stem}.txt"
        jp.write_text(self.to_json())
        tp.write_text(self.to_text())
        return jp, tp


# ----------------------------------------------------------------------------
# experiment plumbing


@dataclass
class Benchmark:
    train: Dataset
    test: Dataset
    bank: TextBank
    model_config: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 20
    lr: float = 3e-4
    name: str = "benchmark"

    def check_splits(self) -> None:
        overlap = self.train.scene_seeds & self.test.scene_seeds
        if overlap:
            raise ValueError(f"train/test scene seeds overlap: {sorted(overlap)[:5]}")

    def budget(self, seeds: Sequence[int]) -> dict:
        return {
            "epochs": self.epochs,
            "lr": self.lr,
            "train_samples": len(self.train),
            "test_samples": len(self.test),
            "train_scenes": len(self.train.scenes),
            "test_scenes": len(self.test.scenes),
            "seeds": list(seeds),
            "benchmark": self.name,
        }


def ambiguous_benchmark(n_train: int = 200, n_test: int = 50, epochs: int = 20, lr: float = 3e-4,
                        seed: int = 1, k: int = 5, cfg: ModelConfig | None = None,
                        palette_mode: str = "ambiguous") -> Benchmark:
    """Shared-colour shape scenes where only some same-class instances carry prompts."""
    from .scenes import SHAPES
    from .textbank import build_synthetic

    spec = benchmark_spec(palette_mode)
    train_ds = generate_dataset(spec, n_train, seed=seed, k=k, mode="partial_instances")
    test_ds = generate_dataset(spec, n_test, seed=seed + 1, k=k, mode="partial_instances")
    cfg = cfg or ModelConfig()
    bank = build_synthetic(list(SHAPES), cfg.text_dim, seed=0)
    return Benchmark(train_ds, test_ds, bank, cfg, epochs, lr, name=f"{palette_mode}-partial")


@dataclass
class RunRecord:
    variant: str
    seed: int
    model: SegModel | None
    metrics: MetricResult | None
    status: str = "ok"
    fingerprint_start: str = ""
    fingerprint_end: str = ""
    losses: list = field(default_factory=list)


def train_and_eval(bench: Benchmark, variant_name: str, seed: int) -> RunRecord:
    bank = bench.bank
    model = build_model(bench.model_config, variant_name, seed=seed, bank=bank)
    tc = TrainConfig(lr=bench.lr, epochs=bench.epochs, seed=seed, variant=variant_name)
    fp0 = fp1 = ""
    losses = []
    try:
        if model.partition.trainable:
            res = train(bench.train, model, bank, tc)
            fp0, fp1, losses = res.fingerprint_start, res.fingerprint_end, res.losses
        metrics = evaluate(model, bench.test, bank)
    except NumericalAbort as exc:
        log.error("%s seed %d aborted: %s", variant_name, seed, exc)
        return RunRecord(variant_name, seed, None, None, status=f"failed: {exc}")
    return RunRecord(variant_name, seed, model, metrics, "ok", fp0, fp1, losses)


def _rows(records: Mapping[str, list[RunRecord]], labels: Mapping[str, str], seeds) -> list[dict]:
    rows = []
    for v, recs in records.items():
        good = [r for r in recs if r.metrics is not None]
        mious = [r.metrics.miou for r in good]
        trainable = next((r.model.partition.trainable_count for r in good), 0)
        rows.append({
            "label": labels[v],
            "variant": v,
            "miou": _r(np.mean(mious)) if mious else None,
            "miou_std": _r(np.std(mious)) if mious else None,
            "per_seed_miou": [_r(m) for m in mious],
            "mae": _r(np.mean([r.metrics.mae for r in good]), 6) if good else None,
            "trainable_params": int(trainable),
            "seeds": list(seeds),
            "status": "ok" if len(good) == len(recs) else "failed",
        })
    return rows


def _run_study(study: str, bench: Benchmark, variants, labels, baseline: str, seeds, reference,
               progress: Callable[[str], None] | None = None):
    seeds = list(seeds)
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    bench.check_splits()
    records: dict[str, list[RunRecord]] = {v: [] for v in variants}
    for s in seeds:
        for v in variants:
            rec = train_and_eval(bench, v, s)
            records[v].append(rec)
            if progress:
                m = rec.metrics.miou if rec.metrics else float("nan")
                progress(f"{study}: {v} seed {s} mIoU {m:.2f}")
    report = AblationReport(study, _rows(records, labels, seeds), labels[baseline], bench.budget(seeds), reference)
    return report, records


def run_table1(bench: Benchmark, seeds: Sequence[int] = (0, 1, 2), progress=None):
    """No fine-tuning / Decoder-only / Parallel / Parallel-Text on identical splits."""
    report, records = _run_study("table1", bench, TABLE1_VARIANTS, TABLE1_LABELS, "parallel", seeds,
                                 REFERENCE_TABLE1, progress)
    text, plain = report.row("Parallel-Text")["miou"], report.row("Parallel")["miou"]
    if text is not None and plain is not None:
        report.notes.append(f"Parallel-Text - Parallel: {format_delta(text, plain)}")
    return report, records


def run_injection_ablation(bench: Benchmark, seeds: Sequence[int] = (0, 1, 2), progress=None):
    report, records = _run_study("injection", bench, INJECTION_VARIANTS, INJECTION_LABELS, "parallel_text",
                                 seeds, {"ADE20K 1_64": REFERENCE_TABLE2}, progress)
    return report, records


def run_placement_ablation(bench: Benchmark, seeds: Sequence[int] = (0, 1, 2), progress=None):
    report, records = _run_study("placement", bench, PLACEMENT_VARIANTS, PLACEMENT_LABELS, "parallel_text",
                                 seeds, {"ADE20K 1_64": REFERENCE_TABLE3}, progress)
    return report, records


# ----------------------------------------------------------------------------
# prompt-quality categories

CATEGORIES = (
    ("cat1_edge", "edge", "iou"),
    ("cat2_interior", "interior", "iou"),
    ("cat3_mixed", "mixed", "iou"),
    ("cat4_unprompted", "partial_instances", "recall"),
)


def category_samples(test: Dataset, mode: str, k: int = 5, prompt_seed: int = 0) -> list[Sample]:
    out = []
    for sc in test.scenes:
        for ci, cls in enumerate(sc.classes_present()):
            n_inst = sum(i.class_name == cls for i in sc.instances)
            if mode == "partial_instances" and n_inst < 2:
                continue
            pts = sample_prompts(sc, cls, k, mode, seed=prompt_seed * 1_000_003 + sc.seed * 31 + ci)
            out.append(Sample(sc, cls, pts, mode))
    return out


def _category_score(model: SegModel, samples: Sequence[Sample], bank, metric: str) -> float:
    vals = []
    for smp in samples:
        prob = predict_prob(model, smp, bank)
        if metric == "iou":
            vals.append(iou(prob >= 0.5, resample_nearest(smp.gt_mask, prob.shape[0])))
        else:
            r = unprompted_recall(prob, smp)
            if r is not None:
                vals.append(r)
    return float(np.mean(vals)) if vals else float("nan")


def category_tests(models: Mapping[int, tuple[SegModel, SegModel]], test: Dataset, bank: TextBank,
                   k: int = 5) -> dict:
    """Score (baseline, text) model pairs per seed on the four prompt categories.

    ``models`` maps seed -> (parallel model, parallel_text model). Prompts are
    re-drawn per seed from the seed value.
    """
    rows = []
    for cat, mode, metric in CATEGORIES:
        base_scores, text_scores = [], []
        for seed, (base_m, text_m) in sorted(models.items()):
            samples = category_samples(test, mode, k, prompt_seed=seed)
            base_scores.append(_category_score(base_m, samples, bank, metric))
            text_scores.append(_category_score(text_m, samples, bank, metric))
        b, t = float(np.mean(base_scores)), float(np.mean(text_scores))
        delta = t - b
        rows.append({
            "category": cat,
            "prompt_mode": mode,
            "metric": metric,
            "baseline": _r(b, 6),
            "text": _r(t, 6),
            "delta": _r(delta, 6),
            "baseline_per_seed": [_r(x, 6) for x in base_scores],
            "text_per_seed": [_r(x, 6) for x in text_scores],
            "pass": bool(delta > 0) if cat == "cat4_unprompted" else bool(delta >= 0),
        })
    return {"study": "categories", "seeds": sorted(models), "rows": rows}


def category_table_text(table: dict) -> str:
    head = ("category", "metric", "parallel", "parallel_text", "delta", "pass")
    body = [(r["category"], r["metric"], f"{r['baseline']:.4f}", f"{r['text']:.4f}", f"{r['delta']:+.4f}",
             "PASS" if r["pass"] else "FAIL") for r in table["rows"]]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(head)]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    lines = ["# categories", fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*b) for b in body]
    lines.append("seeds: " + ", ".join(str(s) for s in table["seeds"]))
    return "\n".join(lines) + "\n"
