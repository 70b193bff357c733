"""Supervised fine-tuning: Adam over the trainable partition, checkpoints, resume."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .adapters import fingerprint
from .config import ModelConfig, VariantSpec, variant as variant_by_name, variant_name
from .model import SegModel, forward, init_base, load_checkpoint, save_checkpoint
from .scenes import Dataset, SceneSpec, generate_dataset
from .textbank import TextBank

log = logging.getLogger(__name__)

REFERENCE_LR = 1e-5
REFERENCE_EPOCHS = 30
PRETRAIN_STEPS = 300
PRETRAIN_LR = 1e-3
PRETRAIN_SEED = 0


class NumericalAbort(RuntimeError):
    pass


class ResumeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 1
    seed: int = 0
    variant: str = "parallel_text"
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        variant_by_name(self.variant)

    @property
    def variant_spec(self) -> VariantSpec:
        return variant_by_name(self.variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    loss_sum: float = 0.0
    loss_count: int = 0
    frozen_fingerprint: str = ""

    @property
    def mean_loss(self) -> float:
        return self.loss_sum / self.loss_count if self.loss_count else float("nan")


def adam_step(state: TrainState, params: dict, cfg: TrainConfig) -> TrainState:
    """One bias-corrected Adam update of ``params`` (name -> Tensor) from their ``.grad``."""
    b1, b2 = cfg.betas
    t = state.step + 1
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise NumericalAbort(f"no gradient buffer for trainable tensor {name!r} at step {t}")
        if not np.isfinite(g).all():
            raise NumericalAbort(f"non-finite gradient in {name!r} at step {t}")
        dt = p.data.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = dt(b1) * m + dt(1.0 - b1) * g
        v = dt(b2) * v + dt(1.0 - b2) * (g * g)
        mhat = m / dt(1.0 - b1 ** t)
        vhat = v / dt(1.0 - b2 ** t)
        p.data -= dt(cfg.lr) * mhat / (np.sqrt(vhat) + dt(cfg.eps))
        state.m[name] = m
        state.v[name] = v
    state.step = t
    return state


def frozen_fingerprint(model: SegModel, bank: TextBank | None = None) -> str:
    tensors = dict(model.partition.frozen)
    if bank is not None:
        tensors.update(bank.tensors())
    return fingerprint(tensors)


# ----------------------------------------------------------------------------
# backbone warm-up


def pretrain_spec(image_size: int = 64) -> SceneSpec:
    return SceneSpec(classes=("disk", "square", "triangle", "cross", "ring"), instances_per_class=(1, 1),
                     image_size=image_size, palette_mode="distinct", radius=(7.0, 11.0), classes_per_scene=1)


def pretrain_base(cfg: ModelConfig, steps: int = PRETRAIN_STEPS, seed: int = PRETRAIN_SEED,
                  lr: float = PRETRAIN_LR) -> dict[str, np.ndarray]:
    """Warm up the plain network on easy single-object scenes with every weight trainable.

    The result plays the role of the pretrained segmenter whose encoder and
    prompt encoder are frozen during fine-tuning. Cached per process.
    """
    base = _pretrain_cached(cfg, steps, seed, lr, np.dtype(ad.get_dtype()).name)
    return {k: v.copy() for k, v in base.items()}


@lru_cache(maxsize=8)
def _pretrain_cached(cfg, steps, seed, lr, dtype_name):
    model = SegModel.build(cfg, variant_by_name("none"), init_base(cfg, seed), seed)
    params = model.params
    for t in params.values():
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    ds = generate_dataset(pretrain_spec(cfg.image_size), count=max(steps, 1), seed=10_000 + seed)
    tc = TrainConfig(lr=lr, epochs=1, seed=seed, variant="none")
    state = TrainState()
    for step in range(steps):
        smp = ds.samples[step % len(ds.samples)]
        for t in params.values():
            t.grad[...] = 0
        with ad.Tape() as tape:
            _, loss = model.forward(smp.image, smp.prompts, smp.gt_mask)
        tape.backward(loss)
        adam_step(state, params, tc)
    return {k: t.data.copy() for k, t in params.items()}


def build_model(cfg: ModelConfig, variant: VariantSpec | str, seed: int = 0,
                bank: TextBank | None = None) -> SegModel:
    """Warmed-up base plus freshly initialised adapters for ``variant``."""
    if isinstance(variant, str):
        variant = variant_by_name(variant)
    if bank is not None and variant.uses_text and bank.dim != cfg.text_dim:
        from dataclasses import replace

        cfg = replace(cfg, text_dim=bank.dim)
    return SegModel.build(cfg, variant, pretrain_base(cfg), seed)


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: SegModel
    losses: list[tuple[int, float]]
    state: TrainState
    fingerprint_start: str
    fingerprint_end: str
    checkpoint: Path | None = None

    def loss_csv(self) -> str:
        return "step,loss\n" + "".join(f"{s},{l!r}\n" for s, l in self.losses)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _meta(cfg: TrainConfig, state: TrainState, model: SegModel) -> dict:
    return {
        "step": state.step,
        "train_config": cfg.to_dict(),
        "variant_name": variant_name(model.variant),
        "frozen_fingerprint": state.frozen_fingerprint,
        "loss_sum": state.loss_sum,
        "loss_count": state.loss_count,
        "reference_lr": REFERENCE_LR,
    }


def _save(path, model: SegModel, state: TrainState, cfg: TrainConfig) -> Path:
    extra = {}
    for name in model.partition.trainable:
        if name in state.m:
            extra[f"adam.m.{name}"] = state.m[name]
            extra[f"adam.v.{name}"] = state.v[name]
    return save_checkpoint(path, model, extra, _meta(cfg, state, model))


def train(dataset: Dataset, model: SegModel, bank: TextBank | None, cfg: TrainConfig, out_dir=None,
          max_steps: int | None = None, state: TrainState | None = None,
          callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Fine-tune ``model`` in place. Writes loss.csv and a final checkpoint when ``out_dir`` is given."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if variant_by_name(cfg.variant).to_dict() != model.variant.to_dict():
        raise ValueError(f"train config variant {cfg.variant!r} does not match the model's variant")
    if model.variant.uses_text and bank is None:
        raise ValueError("text variants need a text bank")
    out_dir = Path(out_dir) if out_dir is not None else None
    n = len(dataset.samples)
    total = cfg.epochs * n if max_steps is None else max_steps
    state = state or TrainState()
    fp0 = frozen_fingerprint(model, bank)
    if not state.frozen_fingerprint:
        state.frozen_fingerprint = fp0
    elif state.frozen_fingerprint != fp0:
        raise ResumeMismatch("frozen tensors differ from the fingerprint recorded at step 0")
    params = model.partition.trainable
    losses: list[tuple[int, float]] = []
    last_good: Path | None = None
    order, order_epoch = None, -1
    while state.step < total:
        epoch = state.step // n
        if epoch != order_epoch:
            order, order_epoch = epoch_order(n, cfg.seed, epoch), epoch
        smp = dataset.samples[order[state.step % n]]
        model.zero_grad()
        with ad.Tape() as tape:
            _, loss = forward(model, smp, bank)
        lv = float(loss.data)
        if not math.isfinite(lv):
            where = f"; last good checkpoint at {last_good}" if last_good else ""
            raise NumericalAbort(f"non-finite loss at step {state.step + 1}{where}")
        if params:
            tape.backward(loss)
            adam_step(state, params, cfg)
        else:
            state.step += 1
        state.loss_sum += lv
        state.loss_count += 1
        losses.append((state.step, lv))
        if callback:
            callback(state.step, lv)
        if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            last_good = _save(out_dir / f"step_{state.step:06d}", model, state, cfg)
    fp1 = frozen_fingerprint(model, bank)
    ckpt = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = _save(out_dir / "checkpoint", model, state, cfg)
        (out_dir / "loss.csv").write_text(TrainResult(model, losses, state, fp0, fp1).loss_csv())
    return TrainResult(model, losses, state, fp0, fp1, ckpt)


def load_state(path) -> tuple[SegModel, TrainState, dict]:
    ck = load_checkpoint(path)
    model, meta = ck.model, ck.meta
    state = TrainState(step=int(meta.get("step", 0)), loss_sum=float(meta.get("loss_sum", 0.0)),
                       loss_count=int(meta.get("loss_count", 0)),
                       frozen_fingerprint=meta.get("frozen_fingerprint", ""))
    dtype = model.dtype
    for key, arr in ck.state.items():
        if key.startswith("adam.m."):
            state.m[key[len("adam.m."):]] = arr.astype(dtype)
        elif key.startswith("adam.v."):
            state.v[key[len("adam.v."):]] = arr.astype(dtype)
    return model, state, meta


RESUME_KEYS = ("variant", "lr", "betas", "eps", "batch_size", "seed")


def resume(checkpoint, dataset: Dataset, bank: TextBank | None, cfg: TrainConfig, out_dir=None,
           max_steps: int | None = None) -> TrainResult:
    """Continue training from ``checkpoint`` up to ``max_steps`` (or cfg.epochs) total steps."""
    model, state, meta = load_state(checkpoint)
    saved = meta.get("train_config", {})
    want = cfg.to_dict()
    diff = {k: (saved.get(k), want[k]) for k in RESUME_KEYS if saved.get(k) != want[k]}
    if variant_by_name(cfg.variant).to_dict() != model.variant.to_dict():
        diff.setdefault("variant", (meta.get("variant_name"), cfg.variant))
    if diff:
        lines = ", ".join(f"{k}: checkpoint={a!r} requested={b!r}" for k, (a, b) in diff.items())
        raise ResumeMismatch(f"checkpoint is incompatible with the requested run ({lines})")
    if state.frozen_fingerprint and frozen_fingerprint(model, bank) != state.frozen_fingerprint:
        raise ResumeMismatch("frozen tensors in the checkpoint do not match its recorded fingerprint")
    return train(dataset, model, bank, cfg, out_dir=out_dir, max_steps=max_steps, state=state)


# ----------------------------------------------------------------------------
# whole-model gradient check


def gradcheck_model(variant: VariantSpec | str = "parallel_text", cfg: ModelConfig | None = None, seed: int = 0,
                    coords_per_tensor: int = 32, step: float = 1e-4, floor: float = 1e-8) -> dict[str, float]:
    """Per-tensor worst relative error of the BCE loss gradient at 64-bit.

    Uses a freshly initialised model. Zero-initialised up-projections are
    given small random values first; otherwise every path behind them has an
    exactly zero gradient and the check would be vacuous.
    """
    cfg = cfg or ModelConfig()
    if isinstance(variant, str):
        variant = variant_by_name(variant)
    rng = np.random.default_rng([seed, 7])
    with ad.precision("f64"):
        model = SegModel.build(cfg, variant, init_base(cfg, seed), seed)
        for name, t in model.partition.trainable.items():
            if not t.data.any():
                t.data[...] = rng.uniform(-0.1, 0.1, t.shape)
        ds = generate_dataset(pretrain_spec(cfg.image_size), 1, seed=seed)
        smp = ds.samples[0]
        t_emb = None
        if variant.uses_text:
            v = rng.standard_normal(cfg.text_dim)
            t_emb = ad.Tensor(v / np.linalg.norm(v))

        def loss():
            return model.forward(smp.image, smp.prompts, smp.gt_mask, t_emb)[1]

        return {name: ad.grad_check(loss, [t], step=step, coords_per_tensor=coords_per_tensor,
                                    seed=seed, floor=floor)
                for name, t in model.partition.trainable.items()}
