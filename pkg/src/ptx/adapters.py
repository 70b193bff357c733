"""Parallel adapters and the text-conditioned variant, plus the frozen/trainable split."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import VariantSpec

ADAPTER_KEYS = (".attn_adapter.", ".mlp_adapter.")


@dataclass
class ParallelAdapter:
    w_down: Tensor  # [d, r]
    w_up: Tensor  # [r, d]

    def __post_init__(self):
        d, r = self.w_down.shape
        if self.w_up.shape != (r, d):
            raise ValueError(f"w_up must be {(r, d)}, got {self.w_up.shape}")
        if not r < d:
            raise ValueError(f"bottleneck r={r} must be smaller than d={d}")

    @property
    def dim(self) -> int:
        return self.w_down.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_down": self.w_down, "w_up": self.w_up}


@dataclass
class TextAdapter:
    w_t: Tensor  # [d_t, d]
    w_1: Tensor  # [d, r]
    w_2: Tensor  # [r, d]
    act: str = field(default="gelu")

    def __post_init__(self):
        d_t, d = self.w_t.shape
        if self.w_1.shape[0] != d or self.w_2.shape != (self.w_1.shape[1], d):
            raise ValueError(
                f"inconsistent TextAdapter shapes w_t{self.w_t.shape} w_1{self.w_1.shape} w_2{self.w_2.shape}"
            )
        if self.act != "gelu":
            raise ValueError("only the GELU activation is supported")

    @property
    def dim(self) -> int:
        return self.w_t.shape[1]

    @property
    def text_dim(self) -> int:
        return self.w_t.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_t": self.w_t, "w_1": self.w_1, "w_2": self.w_2}


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_parallel_adapter(d: int, r: int, rng: np.random.Generator) -> ParallelAdapter:
    return ParallelAdapter(
        w_down=Tensor(_uniform(rng, d, (d, r)), requires_grad=True),
        w_up=Tensor(np.zeros((r, d)), requires_grad=True),
    )


def init_text_adapter(d_t: int, d: int, r: int, rng: np.random.Generator) -> TextAdapter:
    return TextAdapter(
        w_t=Tensor(_uniform(rng, d_t, (d_t, d)), requires_grad=True),
        w_1=Tensor(_uniform(rng, d, (d, r)), requires_grad=True),
        w_2=Tensor(np.zeros((r, d)), requires_grad=True),
    )


def parallel_adapter_forward(x: Tensor, a: ParallelAdapter) -> Tensor:
    """x + W_up GELU(W_down x), applied per row."""
    if x.shape[-1] != a.dim:
        raise ValueError(f"adapter expects last extent {a.dim}, got {x.shape}")
    return ad.add(x, ad.matmul(ad.gelu(ad.matmul(x, a.w_down)), a.w_up))


def project_text(t: Tensor, a: TextAdapter | Tensor) -> Tensor:
    """GELU(t W_t) in the visual token width. Accepts an adapter or a bare [d_t, d] projection."""
    w_t = a.w_t if isinstance(a, TextAdapter) else a
    if t.shape != (w_t.shape[0],):
        raise ValueError(f"text embedding must have shape {(w_t.shape[0],)}, got {t.shape}")
    return ad.gelu(ad.matmul(t, w_t))


def text_adapter_forward(x: Tensor, t: Tensor, a: TextAdapter) -> Tensor:
    """W_2 GELU(W_1 (x + t~)) per token, with no residual term of its own."""
    if x.shape[-1] != a.dim:
        raise ValueError(f"text adapter expects last extent {a.dim}, got {x.shape}")
    x_shift = ad.add(x, project_text(t, a))
    return ad.matmul(ad.gelu(ad.matmul(x_shift, a.w_1)), a.w_2)


def bottleneck_forward(x: Tensor, w_1: Tensor, w_2: Tensor) -> Tensor:
    """Plain W_2 GELU(W_1 x); the text adapter with its text input removed."""
    return ad.matmul(ad.gelu(ad.matmul(x, w_1)), w_2)


# ----------------------------------------------------------------------------
# parameter partition


def fingerprint(tensors: Mapping[str, Tensor | np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class ParamPartition:
    trainable: dict[str, Tensor]
    frozen: dict[str, Tensor]

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.frozen)

    @property
    def trainable_count(self) -> int:
        return sum(t.data.size for t in self.trainable.values())

    @property
    def frozen_count(self) -> int:
        return sum(t.data.size for t in self.frozen.values())

    @property
    def total_count(self) -> int:
        return self.trainable_count + self.frozen_count

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_count / self.total_count

    def counts(self) -> dict:
        return {
            "trainable": self.trainable_count,
            "frozen": self.frozen_count,
            "total": self.total_count,
            "trainable_fraction": self.trainable_fraction,
        }


def is_trainable(name: str, variant: VariantSpec) -> bool:
    if name.startswith("textbank."):
        return False
    if any(k in name for k in ADAPTER_KEYS):
        return variant.adapters_enabled
    if ".text_proj." in name:
        return True
    if name.startswith("decoder."):
        return variant.decoder_trainable
    return False


def partition(tensors: Mapping[str, Tensor], variant: VariantSpec, apply: bool = True) -> ParamPartition:
    """Split named tensors; with ``apply`` the requires_grad flags are set to match.

    Frozen tensors lose their gradient buffer entirely.
    """
    trainable, frozen = {}, {}
    for name, t in tensors.items():
        if not name or not isinstance(name, str):
            raise ValueError(f"every tensor needs a hierarchical name, got {name!r}")
        if is_trainable(name, variant):
            trainable[name] = t
        else:
            frozen[name] = t
        if apply:
            want = name in trainable
            if want and not t.requires_grad:
                t.requires_grad = True
                t.grad = np.zeros_like(t.data)
            elif not want:
                t.requires_grad = False
                t.grad = None
    return ParamPartition(trainable, frozen)
