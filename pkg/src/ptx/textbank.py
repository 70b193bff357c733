"""Frozen per-class text embeddings."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, get_dtype
from .container import read_tensor, write_tensor


class TextBankError(ValueError):
    pass


class TextBank:
    """Immutable class-name -> unit-norm embedding table."""

    def __init__(self, names: Sequence[str], matrix: np.ndarray, source: str, template: str | None = None):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(names):
            raise TextBankError(f"embedding matrix {matrix.shape} does not match {len(names)} class names")
        if len(set(names)) != len(names):
            raise TextBankError("duplicate class names")
        self.names = tuple(names)
        self.index = {n: i for i, n in enumerate(self.names)}
        self.source = source
        self.template = template
        self._matrix = matrix.astype(np.float32)
        self._matrix.setflags(write=False)
        self._cache: dict[tuple[str, str], Tensor] = {}

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.index

    def lookup(self, class_name: str) -> Tensor:
        if class_name not in self.index:
            raise KeyError(f"unknown class {class_name!r}; known classes: {', '.join(self.names)}")
        dtype = get_dtype()
        key = (class_name, np.dtype(dtype).name)
        t = self._cache.get(key)
        if t is None:
            t = Tensor(self._matrix[self.index[class_name]], dtype=dtype, name=f"textbank.{class_name}")
            t.data.setflags(write=False)
            self._cache[key] = t
        return t

    def tensors(self) -> dict[str, Tensor]:
        """Named view for partition bookkeeping; never trainable."""
        return {"textbank.embeddings": Tensor(self._matrix, dtype=np.float32)}

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        write_tensor(path / "embeddings.ptx", self._matrix)
        manifest = {
            "classes": {n: i for i, n in enumerate(self.names)},
            "d_t": self.dim,
            "source": self.source,
            "template": self.template,
            "tensor": "embeddings.ptx",
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path


def _normalize(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _renormalize(rows: np.ndarray) -> np.ndarray:
    # rows already on the unit sphere stay bit-identical across save/import
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return np.where(np.abs(norms - 1.0) <= 1e-6, rows, rows / norms)


def max_abs_cosine(matrix: np.ndarray) -> float:
    m = _normalize(np.asarray(matrix, dtype=np.float64))
    c = np.abs(m @ m.T)
    np.fill_diagonal(c, 0.0)
    return float(c.max()) if len(m) > 1 else 0.0


def build_synthetic(class_names: Sequence[str], d_t: int = 64, seed: int = 0,
                    max_cosine: float = 0.6, max_reseeds: int = 100) -> TextBank:
    """Seeded Gaussian directions, one per class, normalised to unit length.

    If some pair is more aligned than ``max_cosine`` the draw is repeated with
    the next sub-seed (deterministically).
    """
    names = list(class_names)
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise TextBankError(f"duplicate class names: {dup}")
    if d_t < 8:
        raise TextBankError(f"d_t must be at least 8, got {d_t}")
    for sub in range(max_reseeds):
        rng = np.random.default_rng([seed, sub])
        m = _normalize(rng.standard_normal((len(names), d_t)))
        if max_abs_cosine(m) < max_cosine:
            return TextBank(names, m, source="synthetic-seeded")
    raise TextBankError(f"could not draw {len(names)} embeddings with |cos| < {max_cosine} at d_t={d_t}")


def import_bank(path) -> TextBank:
    """Load a bank and re-normalise its rows.

    ``path`` is either a bank directory (manifest.json + PTX1 matrix) or a JSON
    file ``{"template": ..., "embeddings": {class: [floats]}}`` as produced by an
    offline text encoder.
    """
    path = Path(path)
    if path.is_file():
        raw = json.loads(path.read_text())
        vectors = raw.get("embeddings", raw)
        return bank_from_vectors(vectors, template=raw.get("template") if "embeddings" in raw else None)
    manifest = json.loads((path / "manifest.json").read_text())
    classes: dict[str, int] = manifest["classes"]
    matrix = read_tensor(path / manifest.get("tensor", "embeddings.ptx")).astype(np.float64)
    if matrix.ndim != 2:
        raise TextBankError(f"{path}: embedding tensor must be 2-D, got shape {matrix.shape}")
    d_t = int(manifest.get("d_t", matrix.shape[1]))
    if matrix.shape[1] != d_t:
        raise TextBankError(f"{path}: manifest d_t={d_t} but tensor rows have {matrix.shape[1]} values")
    names = [None] * len(classes)
    for name, i in classes.items():
        if not 0 <= i < matrix.shape[0]:
            raise TextBankError(f"{path}: class {name!r} points at missing row {i}")
        names[i] = name
    if any(n is None for n in names) or matrix.shape[0] != len(names):
        raise TextBankError(f"{path}: class index does not cover all {matrix.shape[0]} rows")
    for name, i in classes.items():
        row = matrix[i]
        if not np.isfinite(row).all():
            raise TextBankError(f"{path}: non-finite values in embedding for class {name!r}")
        if np.linalg.norm(row) == 0:
            raise TextBankError(f"{path}: zero embedding for class {name!r}")
    return TextBank(names, _renormalize(matrix), source="imported", template=manifest.get("template"))


def bank_from_vectors(vectors: dict[str, Sequence[float]], template: str | None = None) -> TextBank:
    """Build an imported-style bank from raw vectors (e.g. computed offline)."""
    names = list(vectors)
    dims = {n: len(v) for n, v in vectors.items()}
    d = dims[names[0]] if names else 0
    for n in names:
        if dims[n] != d:
            raise TextBankError(f"class {n!r} has dimension {dims[n]}, expected {d}")
        if not np.isfinite(np.asarray(vectors[n], dtype=float)).all():
            raise TextBankError(f"non-finite values in embedding for class {n!r}")
    m = np.array([vectors[n] for n in names], dtype=np.float64)
    return TextBank(names, _renormalize(m), source="imported", template=template)
