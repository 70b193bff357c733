"""Promptable segmentation network: micro-ViT encoder with adapters, point encoder, mask decoder."""

from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import (
    ParallelAdapter,
    TextAdapter,
    init_parallel_adapter,
    init_text_adapter,
    parallel_adapter_forward,
    partition,
    project_text,
    text_adapter_forward,
)
from .autodiff import Tensor
from .config import ModelConfig, VariantSpec
from .container import read_tensor, write_tensor


class VariantMismatch(ValueError):
    """Text supplied to (or withheld from) a variant that does not match it."""


@dataclass(frozen=True)
class PointPrompt:
    x: int
    y: int
    polarity: str = "foreground"

    def __post_init__(self):
        if self.polarity != "foreground":
            raise ValueError("only foreground points are supported")


# ----------------------------------------------------------------------------
# fixed features


def sinusoid_features(u: np.ndarray, v: np.ndarray, dim: int, grid: int) -> np.ndarray:
    """[len(u), dim] sin/cos features of normalized coordinates in [0, 1]."""
    if dim % 4:
        raise ValueError(f"positional feature width must be divisible by 4, got {dim}")
    n = dim // 4
    freqs = 2.0 * math.pi * np.geomspace(0.5, float(grid), n)
    au = np.outer(u, freqs)
    av = np.outer(v, freqs)
    return np.concatenate([np.sin(au), np.cos(au), np.sin(av), np.cos(av)], axis=1)


def grid_features(grid: int, dim: int) -> np.ndarray:
    """Positional features of token-grid cell centres, row-major."""
    c = (np.arange(grid) + 0.5) / grid
    vv, uu = np.meshgrid(c, c, indexing="ij")
    return sinusoid_features(uu.ravel(), vv.ravel(), dim, grid)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    h, w, c = image.shape
    g = h // patch
    p = image.reshape(g, patch, g, patch, c).transpose(0, 2, 1, 3, 4)
    return p.reshape(g * g, patch * patch * c)


def resample_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of a square binary mask to ``size`` x ``size``."""
    n = mask.shape[0]
    idx = np.minimum(((np.arange(size) + 0.5) * n / size).astype(int), n - 1)
    return mask[np.ix_(idx, idx)]


# ----------------------------------------------------------------------------
# parameter construction


def _uniform(rng, fan_in, shape):
    b = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-b, b, size=shape)


def init_base(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Randomly initialised plain network (no adapters, no text projections)."""
    rng = np.random.default_rng(seed)
    d, dd, P = cfg.embed_dim, cfg.decoder_dim, cfg.patch_size
    m = d * cfg.mlp_ratio
    pdim = P * P * 3
    p: dict[str, np.ndarray] = {}
    p["patch_embed.w"] = _uniform(rng, pdim, (pdim, d))
    p["patch_embed.b"] = np.zeros(d)
    p["pos_embed"] = 0.5 * grid_features(cfg.grid, d)
    for i in range(cfg.depth):
        b = f"block{i}."
        p[b + "ln1.gamma"] = np.ones(d)
        p[b + "ln1.beta"] = np.zeros(d)
        p[b + "attn.w_qkv"] = _uniform(rng, d, (d, 3 * d))
        p[b + "attn.b_qkv"] = np.zeros(3 * d)
        p[b + "attn.w_o"] = _uniform(rng, d, (d, d)) / math.sqrt(cfg.depth)
        p[b + "attn.b_o"] = np.zeros(d)
        p[b + "ln2.gamma"] = np.ones(d)
        p[b + "ln2.beta"] = np.zeros(d)
        p[b + "mlp.w_1"] = _uniform(rng, d, (d, m))
        p[b + "mlp.b_1"] = np.zeros(m)
        p[b + "mlp.w_2"] = _uniform(rng, m, (m, d)) / math.sqrt(cfg.depth)
        p[b + "mlp.b_2"] = np.zeros(d)
    p["neck.w"] = _uniform(rng, d, (d, dd))
    p["neck.ln.gamma"] = np.ones(dd)
    p["neck.ln.beta"] = np.zeros(dd)
    p["prompt_encoder.fg_embed"] = 0.1 * rng.standard_normal(dd)
    p["decoder.mask_token"] = 0.1 * rng.standard_normal((1, dd))
    p["decoder.ln_tok.gamma"] = np.ones(dd)
    p["decoder.ln_tok.beta"] = np.zeros(dd)
    for k in ("w_q1", "w_k1", "w_v1", "w_q2", "w_k2", "w_v2", "hyper"):
        p[f"decoder.{k}"] = _uniform(rng, dd, (dd, dd))
    p["decoder.ln_img.gamma"] = np.ones(dd)
    p["decoder.ln_img.beta"] = np.zeros(dd)
    return p


def init_additions(cfg: ModelConfig, variant: VariantSpec, seed: int) -> dict[str, np.ndarray]:
    """Adapter and text-projection tensors a variant adds on top of the base."""
    rng = np.random.default_rng(seed + 7919)
    d, r, dt = cfg.embed_dim, cfg.bottleneck, cfg.text_dim
    out: dict[str, np.ndarray] = {}
    if variant.adapters_enabled:
        text_enc = variant.injection_site == "image_encoder"
        text_attn = text_enc and variant.text_placement == "mlp_and_mhsa"
        for i in range(cfg.depth):
            for slot, with_text in (("attn_adapter", text_attn), ("mlp_adapter", text_enc)):
                key = f"block{i}.{slot}."
                if with_text:
                    a = init_text_adapter(dt, d, r, rng)
                else:
                    a = init_parallel_adapter(d, r, rng)
                for n, t in a.tensors().items():
                    out[key + n] = t.data.astype(np.float64)
    if variant.injection_site == "prompt_encoder":
        out["prompt_encoder.text_proj.w_t"] = _uniform(rng, dt, (dt, cfg.decoder_dim))
    elif variant.injection_site == "mask_decoder":
        out["decoder.text_proj.w_t"] = _uniform(rng, dt, (dt, cfg.decoder_dim))
    return out


# ----------------------------------------------------------------------------
# network


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return ad.transpose(ad.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (n, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    return _merge_heads(ad.softmax_attention(_split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)))


class SegModel:
    """Plain parameters plus the wiring for one :class:`VariantSpec`."""

    def __init__(self, cfg: ModelConfig, variant: VariantSpec, params: Mapping[str, Tensor]):
        self.cfg = cfg
        self.variant = variant
        self.params: dict[str, Tensor] = dict(params)
        for name, t in self.params.items():
            t.name = name
        self.partition = partition(self.params, variant)
        self._dense_pe = grid_features(cfg.grid, cfg.decoder_dim)

    @classmethod
    def build(cls, cfg: ModelConfig, variant: VariantSpec, base: Mapping[str, np.ndarray], seed: int = 0):
        dtype = ad.get_dtype()
        arrays = {k: np.array(v, dtype=dtype) for k, v in base.items()}
        for k, v in init_additions(cfg, variant, seed).items():
            arrays[k] = v.astype(dtype)
        return cls(cfg, variant, {k: Tensor(v, name=k) for k, v in arrays.items()})

    # -- bookkeeping --------------------------------------------------------

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def astype(self, dtype) -> "SegModel":
        params = {k: Tensor(t.data.astype(dtype), dtype=dtype) for k, t in self.params.items()}
        return SegModel(self.cfg, self.variant, params)

    def copy(self) -> "SegModel":
        return self.astype(self.dtype)

    def trainable(self) -> dict[str, Tensor]:
        return self.partition.trainable

    def zero_grad(self) -> None:
        for t in self.partition.trainable.values():
            t.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _check_text(self, t, site: str) -> Tensor | None:
        wants = self.variant.injection_site != "none"
        if t is None:
            if wants:
                raise VariantMismatch(f"variant injects text at {self.variant.injection_site} but no embedding was given")
            return None
        if not wants:
            raise VariantMismatch("text embedding supplied to a text-free variant")
        t = t if isinstance(t, Tensor) else Tensor(t, dtype=self.dtype)
        if t.shape != (self.cfg.text_dim,):
            raise ValueError(f"text embedding must have shape ({self.cfg.text_dim},), got {t.shape}")
        return t if self.variant.injection_site == site else None

    def _adapter(self, key: str):
        p = self.params
        if key + "w_t" in p:
            return TextAdapter(p[key + "w_t"], p[key + "w_1"], p[key + "w_2"])
        if key + "w_down" in p:
            return ParallelAdapter(p[key + "w_down"], p[key + "w_up"])
        return None

    # -- image encoder ------------------------------------------------------

    def _branch(self, x: Tensor, adapter, t: Tensor | None) -> Tensor:
        """Residual stream x plus adapter contribution (parallel adapters carry x themselves)."""
        if adapter is None:
            return x
        if isinstance(adapter, TextAdapter):
            return ad.add(x, text_adapter_forward(x, t, adapter))
        return parallel_adapter_forward(x, adapter)

    def _block(self, i: int, x: Tensor, t: Tensor | None) -> Tensor:
        cfg, P = self.cfg, self._p
        b = f"block{i}."
        h = ad.layer_norm(x, P(b + "ln1.gamma"), P(b + "ln1.beta"), cfg.ln_eps)
        qkv = ad.add(ad.matmul(h, P(b + "attn.w_qkv")), P(b + "attn.b_qkv"))
        d = cfg.embed_dim
        q, k, v = ad.take(qkv, (slice(None), slice(0, d))), ad.take(qkv, (slice(None), slice(d, 2 * d))), \
            ad.take(qkv, (slice(None), slice(2 * d, 3 * d)))
        attn = ad.add(ad.matmul(_attend(q, k, v, cfg.heads), P(b + "attn.w_o")), P(b + "attn.b_o"))
        y = ad.add(self._branch(x, self._adapter(b + "attn_adapter."), t), attn)
        h2 = ad.layer_norm(y, P(b + "ln2.gamma"), P(b + "ln2.beta"), cfg.ln_eps)
        mlp = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h2, P(b + "mlp.w_1")), P(b + "mlp.b_1"))),
                               P(b + "mlp.w_2")), P(b + "mlp.b_2"))
        return ad.add(self._branch(y, self._adapter(b + "mlp_adapter."), t), mlp)

    def encode_image(self, image: np.ndarray, t=None) -> Tensor:
        """[image_size, image_size, 3] -> image tokens [grid*grid, decoder_dim]."""
        return self.neck(self.encode_backbone(image, t))

    def encode_backbone(self, image: np.ndarray, t=None) -> Tensor:
        """Residual-stream tokens [grid*grid, embed_dim] before the neck."""
        cfg = self.cfg
        if image.shape != (cfg.image_size, cfg.image_size, 3):
            raise ValueError(f"image must be {(cfg.image_size, cfg.image_size, 3)}, got {image.shape}")
        t = self._check_text(t, "image_encoder")
        x = Tensor(patchify(np.asarray(image, dtype=self.dtype), cfg.patch_size), dtype=self.dtype)
        x = ad.add(ad.add(ad.matmul(x, self._p("patch_embed.w")), self._p("patch_embed.b")), self._p("pos_embed"))
        for i in range(cfg.depth):
            x = self._block(i, x, t)
        return x

    def neck(self, x: Tensor) -> Tensor:
        return ad.layer_norm(ad.matmul(x, self._p("neck.w")), self._p("neck.ln.gamma"),
                             self._p("neck.ln.beta"), self.cfg.ln_eps)

    # -- prompt encoder -----------------------------------------------------

    def encode_prompts(self, points: Sequence[PointPrompt], t=None) -> Tensor:
        """Sparse prompt tokens [K, decoder_dim]."""
        cfg = self.cfg
        if len(points) < 1:
            raise ValueError("at least one point prompt is required")
        for pt in points:
            if not (0 <= pt.x < cfg.image_size and 0 <= pt.y < cfg.image_size):
                raise ValueError(f"point ({pt.x}, {pt.y}) outside the {cfg.image_size}px image")
        t = self._check_text(t, "prompt_encoder")
        u = (np.array([pt.x for pt in points]) + 0.5) / cfg.image_size
        v = (np.array([pt.y for pt in points]) + 0.5) / cfg.image_size
        feats = Tensor(sinusoid_features(u, v, cfg.decoder_dim, cfg.grid), dtype=self.dtype)
        tok = ad.add(feats, self._p("prompt_encoder.fg_embed"))
        if t is not None:
            tok = ad.add(tok, project_text(t, self._p("prompt_encoder.text_proj.w_t")))
        return tok

    # -- mask decoder -------------------------------------------------------

    def decode_mask(self, image_tokens: Tensor, prompt_tokens: Tensor, t=None) -> Tensor:
        """Logits at the loss resolution, [2*grid, 2*grid]."""
        cfg, P = self.cfg, self._p
        dd = cfg.decoder_dim
        if image_tokens.shape != (cfg.grid * cfg.grid, dd) or prompt_tokens.ndim != 2 or prompt_tokens.shape[1] != dd:
            raise ValueError(f"decoder token shapes {image_tokens.shape}, {prompt_tokens.shape} do not match width {dd}")
        t = self._check_text(t, "mask_decoder")
        pe = Tensor(self._dense_pe, dtype=self.dtype)
        tok = ad.concat([P("decoder.mask_token"), prompt_tokens], axis=0)
        if t is not None:
            tok = ad.add(tok, project_text(t, P("decoder.text_proj.w_t")))
        img = image_tokens
        # tokens attend jointly to themselves and the image
        tn = ad.layer_norm(tok, P("decoder.ln_tok.gamma"), P("decoder.ln_tok.beta"), cfg.ln_eps)
        keys = ad.concat([tn, ad.add(img, pe)], axis=0)
        vals = ad.concat([tn, img], axis=0)
        tok = ad.add(tok, _attend(ad.matmul(tn, P("decoder.w_q1")), ad.matmul(keys, P("decoder.w_k1")),
                                  ad.matmul(vals, P("decoder.w_v1")), cfg.heads))
        # image attends to the tokens
        inorm = ad.add(ad.layer_norm(img, P("decoder.ln_img.gamma"), P("decoder.ln_img.beta"), cfg.ln_eps), pe)
        img = ad.add(img, _attend(ad.matmul(inorm, P("decoder.w_q2")), ad.matmul(tok, P("decoder.w_k2")),
                                  ad.matmul(tok, P("decoder.w_v2")), cfg.heads))
        mvec = ad.matmul(ad.take(tok, 0), P("decoder.hyper"))
        logits = ad.scale(ad.matmul(img, ad.reshape(mvec, (dd, 1))), 1.0 / math.sqrt(dd))
        return ad.bilinear_upsample2x(ad.reshape(logits, (cfg.grid, cfg.grid)))

    # -- end to end ---------------------------------------------------------

    def predict(self, image: np.ndarray, points: Sequence[PointPrompt], t=None) -> Tensor:
        if t is not None and not isinstance(t, Tensor):
            t = Tensor(t, dtype=self.dtype)
        return self.decode_mask(self.encode_image(image, t), self.encode_prompts(points, t), t)

    def forward(self, image: np.ndarray, points: Sequence[PointPrompt], gt_mask: np.ndarray, t=None):
        """(logits, BCE loss). ``gt_mask`` may be at image or loss resolution."""
        logits = self.predict(image, points, t)
        gt = np.asarray(gt_mask)
        if gt.shape != logits.shape:
            gt = resample_nearest(gt, logits.shape[0])
        return logits, ad.bce_loss(logits, gt.astype(self.dtype))


def forward(model: SegModel, sample, bank=None):
    """Run one :class:`~ptx.scenes.Sample`-like object through ``model``.

    The text embedding is looked up only for text variants.
    """
    t = None
    if model.variant.uses_text:
        if bank is None:
            raise VariantMismatch("text variant needs a text bank")
        t = bank.lookup(sample.target_class)
    return model.forward(sample.image, sample.prompts, sample.gt_mask, t)


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: SegModel, extra: Mapping[str, np.ndarray] | None = None,
                    meta: Mapping | None = None) -> Path:
    """Directory checkpoint: manifest.json plus one PTX1 file per tensor.

    ``extra`` tensors (optimizer moments) are stored alongside, marked with
    ``"kind": "state"``. The directory is written to a temp sibling and
    renamed into place.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    frozen = model.partition.frozen
    entries = {}
    for name, t in model.params.items():
        fn = name + ".ptx"
        write_tensor(tmp / fn, t.data)
        entries[name] = {"file": fn, "frozen": name in frozen, "shape": list(t.shape), "kind": "param"}
    for name, arr in (extra or {}).items():
        fn = name + ".ptx"
        write_tensor(tmp / fn, arr)
        entries[name] = {"file": fn, "frozen": True, "shape": list(np.shape(arr)), "kind": "state"}
    manifest = {
        "format": "ptx-checkpoint/1",
        "config": model.cfg.to_dict(),
        "variant": model.variant.to_dict(),
        "tensors": entries,
        "meta": dict(meta or {}),
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    model: SegModel
    state: dict[str, np.ndarray]
    meta: dict
    manifest: dict


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    cfg = ModelConfig.from_dict(manifest["config"])
    variant = VariantSpec.from_dict(manifest["variant"])
    dtype = ad.get_dtype()
    params, state = {}, {}
    for name, e in manifest["tensors"].items():
        arr = read_tensor(path / e["file"])
        if list(arr.shape) != e["shape"]:
            raise ValueError(f"{path / e['file']}: shape {arr.shape} disagrees with manifest {e['shape']}")
        if e.get("kind", "param") == "state":
            state[name] = arr
        else:
            params[name] = Tensor(arr, dtype=dtype)
    model = SegModel(cfg, variant, params)
    for name, e in manifest["tensors"].items():
        if e.get("kind", "param") == "param" and e["frozen"] != (name in model.partition.frozen):
            raise ValueError(f"checkpoint frozen flag for {name!r} disagrees with the variant partition")
    return Checkpoint(model, state, manifest.get("meta", {}), manifest)
