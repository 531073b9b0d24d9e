"""Manifest loading, P x K identity sampling and training-batch assembly."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import (
    IlluminationConfig,
    ManifestError,
    SampleRecord,
    derive_seed,
    diff_image,
    load_image,
    make_illuminated,
    read_manifest,
)


def num_workers() -> int:
    return int(os.environ.get("ILLUMID_NUM_WORKERS", "0") or 0)


@dataclass
class Dataset:
    records: list[SampleRecord]
    root: Path
    n_illu: int
    prerendered: bool = False
    index_by_person: dict[int, list[int]] = field(init=False)
    label_of: dict[int, int] = field(init=False)
    _cache: dict[int, np.ndarray] = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self.index_by_person = {}
        for i, rec in enumerate(self.records):
            if rec.split == "train":
                self.index_by_person.setdefault(rec.person_id, []).append(i)
        # contiguous class labels for the identity classifier
        self.label_of = {pid: k for k, pid in enumerate(sorted(self.index_by_person))}

    @property
    def n_person(self) -> int:
        return len(self.index_by_person)

    @property
    def person_ids(self) -> list[int]:
        return sorted(self.index_by_person)

    def split_indices(self, split: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == split]

    def image(self, index: int) -> np.ndarray:
        """The stored image for a record (cached; callers must not mutate it)."""
        img = self._cache.get(index)
        if img is None:
            img = load_image(self.root / self.records[index].image_path)
            img.setflags(write=False)
            self._cache[index] = img
        return img


def load_manifest(
    path: str | os.PathLike,
    root: str | os.PathLike | None = None,
    cfg: IlluminationConfig | None = None,
    prerendered: bool = False,
) -> Dataset:
    """Read a JSONL manifest; image paths resolve against ``root`` (default: the manifest's directory).

    With ``prerendered`` the image files already carry their illumination and
    are used as-is at evaluation time.
    """
    path = Path(path)
    records = read_manifest(path)
    root = Path(root) if root is not None else path.parent
    for rec in records:
        p = root / rec.image_path
        if not p.is_file():
            raise FileNotFoundError(f"image not found: {p}")
    cfg = cfg or IlluminationConfig()
    return Dataset(records, root, cfg.n_illu, prerendered)


def pk_sample(ds: Dataset, num_ids: int, per_id: int, rng: np.random.Generator) -> list[int]:
    """Draw ``num_ids`` distinct identities and ``per_id`` train records for each.

    Records are drawn with replacement only for identities with fewer than
    ``per_id`` records.
    """
    if num_ids > ds.n_person:
        raise ValueError(f"cannot draw {num_ids} identities from {ds.n_person}")
    if num_ids < 1 or per_id < 1:
        raise ValueError("num_ids and per_id must be positive")
    pids = ds.person_ids
    chosen = rng.choice(len(pids), size=num_ids, replace=False)
    indices = []
    for c in chosen:
        pool = ds.index_by_person[pids[c]]
        picks = rng.choice(len(pool), size=per_id, replace=len(pool) < per_id)
        indices.extend(pool[p] for p in picks)
    return indices


@dataclass
class Batch:
    i_random: np.ndarray
    i_origin: np.ndarray
    i_diff: np.ndarray
    person_labels: np.ndarray
    illum_labels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.person_labels)


def _render_sample(ds: Dataset, index: int, cfg: IlluminationConfig, epoch: int, global_seed: int, step: int):
    rng = np.random.default_rng(derive_seed(global_seed, index, epoch, step))
    level = int(rng.integers(cfg.n_illu))
    noise_seed = int(rng.integers(2**32))
    origin = ds.image(index)
    altered, _ = make_illuminated(origin, level, cfg, noise_seed)
    return origin, altered, level


def make_batch(
    ds: Dataset,
    indices: Sequence[int],
    cfg: IlluminationConfig,
    epoch: int,
    global_seed: int,
    step: int = 0,
) -> Batch:
    """Online illumination augmentation for a list of record indices.

    The level and noise for each sample come from a seed derived from
    ``(global_seed, index, epoch, step)`` only.
    """
    workers = num_workers()
    if workers > 0:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(lambda i: _render_sample(ds, i, cfg, epoch, global_seed, step), indices))
    else:
        samples = [_render_sample(ds, i, cfg, epoch, global_seed, step) for i in indices]

    origin = np.stack([s[0] for s in samples]).astype(np.float32)
    altered = np.stack([s[1] for s in samples]).astype(np.float32)
    return Batch(
        i_random=altered,
        i_origin=origin,
        i_diff=diff_image(altered, origin).astype(np.float32),
        person_labels=np.array([ds.label_of.get(ds.records[i].person_id, -1) for i in indices], dtype=np.int64),
        illum_labels=np.array([s[2] for s in samples], dtype=np.int64),
    )


def render_records(ds: Dataset, indices: Sequence[int], cfg: IlluminationConfig, seed: int) -> np.ndarray:
    """Images for evaluation under each record's frozen illumination level."""
    out = []
    for i in indices:
        rec = ds.records[i]
        img = ds.image(i)
        if not ds.prerendered:
            if rec.illum_class >= cfg.n_illu or cfg.gamma_levels[rec.illum_class] != rec.gamma:
                raise ManifestError(
                    f"record {i} ({rec.image_path}): illum_class {rec.illum_class} / gamma {rec.gamma} "
                    f"does not match gamma levels {cfg.gamma_levels}"
                )
            img, _ = make_illuminated(img, rec.illum_class, cfg, derive_seed(seed, i))
        out.append(img)
    return np.stack(out).astype(np.float32)


__all__ = ["Batch", "Dataset", "load_manifest", "make_batch", "num_workers", "pk_sample", "render_records"]
