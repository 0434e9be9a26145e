"""Image/text feature provision: synthetic bundles, cache files, projection.

A FeatureBundle holds four levels: per-stimulus low (256-d), high (1024-d) and
final (1024-d) image features, plus per-class text features (1024-d). Final
and text vectors are L2-normalized at load because retrieval scores them by
cosine; low and high stay raw since trainable projectors follow.

Providers are deterministic: the same id always yields the same vector.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import (CacheError, MissingLevelError, NumericError,
                     ShapeMismatchError)

LEVELS = ("low", "high", "final", "text")


def _normalize_rows(m: np.ndarray, tag: str) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        row = int(np.argwhere(norms[:, 0] == 0)[0])
        raise NumericError(f"cannot normalize {tag}: row {row} has zero norm")
    return m / norms


@dataclass
class FeatureTable:
    """One level: a row matrix plus an id -> row index."""

    ids: list[str]
    matrix: np.ndarray  # (n, d) float32

    def __post_init__(self):
        if len(self.ids) != self.matrix.shape[0]:
            raise ShapeMismatchError(
                f"{len(self.ids)} ids vs {self.matrix.shape[0]} rows")
        self._row = {i: r for r, i in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def vector(self, id_: str) -> np.ndarray:
        return self.matrix[self._row[id_]]

    def rows(self, ids) -> np.ndarray:
        try:
            idx = np.fromiter((self._row[i] for i in ids), dtype=np.int64, count=len(ids))
        except KeyError as exc:
            raise KeyError(f"feature table has no id {exc.args[0]!r}") from None
        return self.matrix[idx]

    def has(self, id_: str) -> bool:
        return id_ in self._row


@dataclass
class FeatureBundle:
    """All four feature levels plus provenance metadata."""

    low: FeatureTable
    high: FeatureTable
    final: FeatureTable
    text: FeatureTable
    meta: dict = field(default_factory=dict)

    def level(self, name: str) -> FeatureTable:
        if name not in LEVELS:
            raise MissingLevelError(f"unknown feature level {name!r}")
        return getattr(self, name)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in LEVELS:
            t = self.level(name)
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.matrix).tobytes())
            h.update("\x00".join(t.ids).encode())
        return h.hexdigest()


def _unit_sphere(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _hash_seeded_vector(seed: int, key: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    sub = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
    v = sub.standard_normal(dim)
    return v / np.linalg.norm(v)


def class_id(c: int) -> str:
    return f"class{c:03d}"


def stimulus_id(c: int, i: int) -> str:
    return f"class{c:03d}_img{i:02d}"


def synthetic_features(n_classes: int, images_per_class: int, seed: int,
                       d_low: int = 256, d_sem: int = 1024,
                       sigma_inst: float = 0.3, sigma_high: float = 0.1) -> FeatureBundle:
    """Desk-scale stand-in for the frozen image/text backbone.

    Class vectors are uniform on the unit sphere. Each image's final feature is
    the class vector plus sigma_inst times a unit instance direction,
    renormalized, so within-class cosine similarity exceeds between-class
    similarity in expectation. The text feature is the class vector itself.
    High features perturb the final feature with an independent sigma_high
    direction. Low features are hash-seeded per-stimulus unit vectors,
    uncorrelated with class identity.
    """
    if n_classes < 1 or images_per_class < 1:
        raise ValueError("n_classes and images_per_class must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    class_vecs = _unit_sphere(rng, n_classes, d_sem)

    class_ids = [class_id(c) for c in range(n_classes)]
    stim_ids, finals, highs, lows = [], [], [], []
    for c in range(n_classes):
        for i in range(images_per_class):
            sid = stimulus_id(c, i)
            stim_ids.append(sid)
            if sigma_inst > 0:
                inst = _unit_sphere(rng, 1, d_sem)[0]
                f = class_vecs[c] + sigma_inst * inst
                f = f / np.linalg.norm(f)
            else:
                rng.standard_normal(d_sem)  # keep the stream aligned across sigma settings
                f = class_vecs[c].copy()
            if sigma_high > 0:
                h = f + sigma_high * _unit_sphere(rng, 1, d_sem)[0]
                h = h / np.linalg.norm(h)
            else:
                rng.standard_normal(d_sem)
                h = f.copy()
            finals.append(f)
            highs.append(h)
            lows.append(_hash_seeded_vector(seed, sid, d_low))

    meta = {"provider": "synthetic", "seed": seed, "n_classes": n_classes,
            "images_per_class": images_per_class, "d_low": d_low, "d_sem": d_sem,
            "sigma_inst": sigma_inst, "sigma_high": sigma_high,
            "text_template": "{label}"}
    return FeatureBundle(
        low=FeatureTable(stim_ids, np.asarray(lows, dtype=np.float32)),
        high=FeatureTable(stim_ids, np.asarray(highs, dtype=np.float32)),
        final=FeatureTable(stim_ids,
                           _normalize_rows(np.asarray(finals, dtype=np.float32), "final")),
        text=FeatureTable(class_ids,
                          _normalize_rows(class_vecs.astype(np.float32), "text")),
        meta=meta,
    )


# -- cache files -------------------------------------------------------------

def write_cache(bundle: FeatureBundle, out_dir: str | Path) -> None:
    """One container file + one JSON sidecar index per level."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in LEVELS:
        t = bundle.level(name)
        container.write_array(out_dir / f"{name}.bin", t.matrix.astype(np.float32), name)
        container.write_index(out_dir / f"{name}.index.json", t.ids)


def load_cached_features(cache_dir: str | Path,
                         expected_dims: dict[str, int] | None = None) -> FeatureBundle:
    """Load and validate a cache directory written by write_cache.

    Final and text levels are re-normalized at load; low and high stay raw.
    """
    cache_dir = Path(cache_dir)
    tables = {}
    for name in LEVELS:
        path = cache_dir / f"{name}.bin"
        if not path.is_file():
            raise MissingLevelError(f"feature cache is missing level {name!r} ({path})")
        expect_dim = (expected_dims or {}).get(name)
        matrix, _ = container.read_array(path, expect_level=name, expect_dim=expect_dim)
        index = container.read_index(cache_dir / f"{name}.index.json")
        if len(index) != matrix.shape[0]:
            raise CacheError(f"{name}: index has {len(index)} ids for "
                             f"{matrix.shape[0]} rows")
        ids = [None] * matrix.shape[0]
        for id_, row in index.items():
            ids[row] = id_
        tables[name] = FeatureTable(ids, matrix.astype(np.float32))
    for name in ("final", "text"):
        tables[name] = FeatureTable(tables[name].ids,
                                    _normalize_rows(tables[name].matrix, name))
    return FeatureBundle(**tables, meta={"provider": "cache", "path": str(cache_dir)})
