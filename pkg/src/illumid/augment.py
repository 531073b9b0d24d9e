"""Illumination augmentation and toy-corpus generation.

Images are handled as float numpy arrays of shape (H, W, C) with values in
[0, 1]. Everything here is a pure function of its arguments and seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

DEFAULT_GAMMAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0, 1.5)
SPLITS = ("train", "query", "gallery")
MANIFEST_KEYS = ("image_path", "person_id", "camera_id", "split", "illum_class", "gamma")


@dataclass(frozen=True)
class IlluminationConfig:
    gamma_levels: tuple[float, ...] = DEFAULT_GAMMAS
    poisson_scale: float = 255.0
    poisson_enabled: bool = True

    def __post_init__(self):
        levels = tuple(float(g) for g in self.gamma_levels)
        object.__setattr__(self, "gamma_levels", levels)
        if not levels:
            raise ValueError("gamma_levels must not be empty")
        if any(not np.isfinite(g) or g <= 0 for g in levels):
            raise ValueError(f"gamma levels must be positive, got {levels}")
        if self.poisson_scale <= 0:
            raise ValueError(f"poisson_scale must be positive, got {self.poisson_scale}")

    @property
    def n_illu(self) -> int:
        return len(self.gamma_levels)

    @property
    def neutral_class(self) -> int | None:
        """Index of the gamma=1 level, or None if the set has no neutral level."""
        for i, g in enumerate(self.gamma_levels):
            if g == 1.0:
                return i
        return None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma_levels"] = list(self.gamma_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IlluminationConfig":
        return cls(
            gamma_levels=tuple(d["gamma_levels"]),
            poisson_scale=float(d["poisson_scale"]),
            poisson_enabled=bool(d["poisson_enabled"]),
        )


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    person_id: int
    camera_id: int
    split: str
    illum_class: int
    gamma: float

    def __post_init__(self):
        if self.person_id < 0:
            raise ValueError(f"person_id must be >= 0, got {self.person_id}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.illum_class < 0:
            raise ValueError(f"illum_class must be >= 0, got {self.illum_class}")

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in MANIFEST_KEYS})

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        if set(d) != set(MANIFEST_KEYS):
            raise ValueError(f"manifest record must have keys {sorted(MANIFEST_KEYS)}, got {sorted(d)}")
        return cls(
            image_path=str(d["image_path"]),
            person_id=int(d["person_id"]),
            camera_id=int(d["camera_id"]),
            split=str(d["split"]),
            illum_class=int(d["illum_class"]),
            gamma=float(d["gamma"]),
        )


Manifest = list[SampleRecord]


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] not in (1, 3) or min(img.shape[:2]) <= 0:
        raise ValueError(f"expected an HxWxC image with C in (1, 3), got shape {img.shape}")
    return img


def gamma_correct(img: np.ndarray, gamma: float) -> np.ndarray:
    """Power-law relighting ``out = img ** (1 / gamma)``; gamma < 1 darkens."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    img = check_image(img)
    if gamma == 1.0:
        return img.copy()
    return np.clip(np.power(img, 1.0 / gamma), 0.0, 1.0)


def poisson_noise(img: np.ndarray, scale: float, seed: int) -> np.ndarray:
    """Shot noise: treat ``img * scale`` as an expected photon count."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    img = check_image(img)
    rng = np.random.default_rng(seed)
    counts = rng.poisson(np.clip(img, 0.0, 1.0) * scale)
    return np.clip(counts / scale, 0.0, 1.0).astype(img.dtype, copy=False)


def make_illuminated(img: np.ndarray, level: int, cfg: IlluminationConfig, seed: int) -> tuple[np.ndarray, int]:
    if not 0 <= level < cfg.n_illu:
        raise ValueError(f"illumination level {level} out of range [0, {cfg.n_illu})")
    out = gamma_correct(img, cfg.gamma_levels[level])
    if cfg.poisson_enabled:
        out = poisson_noise(out, cfg.poisson_scale, seed)
    return out, level


def diff_image(altered: np.ndarray, original: np.ndarray) -> np.ndarray:
    """Signed difference remapped from [-1, 1] to [0, 1]."""
    altered, original = np.asarray(altered), np.asarray(original)
    if altered.shape != original.shape:
        raise ValueError(f"shape mismatch: {altered.shape} vs {original.shape}")
    return (altered - original + 1.0) / 2.0


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def build_augmented_manifest(
    src: Sequence[SampleRecord], cfg: IlluminationConfig, seed: int, mode: str = "expand_all"
) -> Manifest:
    """Attach illumination levels to every record.

    ``expand_all`` emits one record per level for each source record.
    ``assign_random`` draws a single level per record, uniformly.
    """
    if not src:
        raise ValueError("source manifest is empty")
    if mode == "expand_all":
        return [
            replace(rec, illum_class=level, gamma=g)
            for rec in src
            for level, g in enumerate(cfg.gamma_levels)
        ]
    if mode == "assign_random":
        rng = np.random.default_rng(seed)
        levels = rng.integers(0, cfg.n_illu, size=len(src))
        return [
            replace(rec, illum_class=int(lv), gamma=cfg.gamma_levels[lv])
            for rec, lv in zip(src, levels)
        ]
    raise ValueError(f"unknown mode {mode!r}; expected expand_all or assign_random")


# -- manifest and image IO --------------------------------------------------

def write_manifest(records: Iterable[SampleRecord], path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


def read_manifest(path: str | os.PathLike) -> Manifest:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(SampleRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from e
    if not records:
        raise ManifestError(f"{path}: manifest is empty")
    return records


class ManifestError(ValueError):
    pass


def load_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    img = check_image(img)
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def materialize(
    records: Sequence[SampleRecord], cfg: IlluminationConfig, seed: int, src_root: Path, out_dir: Path
) -> Manifest:
    """Render each record's illumination to disk; returned paths are relative to ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "images").mkdir(exist_ok=True)
    rendered = []
    for idx, rec in enumerate(records):
        img = load_image(src_root / rec.image_path)
        out, _ = make_illuminated(img, rec.illum_class, cfg, derive_seed(seed, idx))
        stem = Path(rec.image_path).stem
        rel = f"images/{stem}_L{rec.illum_class}_{idx:06d}.png"
        save_image(out, out_dir / rel)
        rendered.append(replace(rec, image_path=rel))
    return rendered


# -- procedural toy corpus ----------------------------------------------------

@dataclass
class _Identity:
    skin: np.ndarray
    hair: np.ndarray
    torso: np.ndarray
    legs: np.ndarray
    torso_w: float
    leg_gap: float
    waist: float
    stripe: bool
    stripe_color: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _random_identity(rng: np.random.Generator) -> _Identity:
    def color():
        return rng.uniform(0.05, 0.95, size=3)

    return _Identity(
        skin=rng.uniform([0.45, 0.3, 0.2], [0.95, 0.8, 0.7]),
        hair=rng.uniform(0.0, 0.6, size=3),
        torso=color(),
        legs=color(),
        torso_w=rng.uniform(0.26, 0.42),
        leg_gap=rng.uniform(0.02, 0.10),
        waist=rng.uniform(0.50, 0.60),
        stripe=bool(rng.random() < 0.5),
        stripe_color=color(),
    )


def _render_person(ident: _Identity, side: int, cam_bg: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / side
    bg = cam_bg + rng.normal(0.0, 0.03, size=3)
    img = np.empty((side, side, 3))
    img[:] = np.clip(bg, 0.0, 1.0)
    img += 0.08 * (yy[..., None] - 0.5) * rng.choice([-1.0, 1.0])

    cx = 0.5 + rng.uniform(-0.06, 0.06)
    top = 0.06 + rng.uniform(-0.03, 0.03)
    scale = rng.uniform(0.92, 1.04)
    tint = 1.0 + rng.normal(0.0, 0.04, size=3)

    def paint(mask, c):
        img[mask] = np.clip(c * tint, 0.0, 1.0)

    head_r = 0.09 * scale
    head_cy = top + head_r
    paint((xx - cx) ** 2 + (yy - head_cy) ** 2 < head_r**2, ident.skin)
    paint(((xx - cx) ** 2 + (yy - head_cy + 0.4 * head_r) ** 2 < head_r**2) & (yy < head_cy - 0.3 * head_r), ident.hair)

    torso_top = head_cy + head_r
    waist = top + ident.waist * scale
    half_w = ident.torso_w * scale / 2
    torso = (np.abs(xx - cx) < half_w) & (yy >= torso_top) & (yy < waist)
    paint(torso, ident.torso)
    if ident.stripe:
        mid = (torso_top + waist) / 2
        paint(torso & (np.abs(yy - mid) < 0.04 * scale), ident.stripe_color)

    feet = min(top + 0.94 * scale, 0.99)
    leg_w = half_w * 0.8
    for sgn in (-1.0, 1.0):
        lx = cx + sgn * (ident.leg_gap / 2 + leg_w / 2)
        paint((np.abs(xx - lx) < leg_w / 2) & (yy >= waist) & (yy < feet), ident.legs)

    return np.clip(img, 0.0, 1.0)


def synth_toy_dataset(
    num_ids: int, imgs_per_id: int, side: int, num_cameras: int, seed: int, out_dir: str | os.PathLike
) -> Manifest:
    """Write a procedural pedestrian corpus and its ``manifest.jsonl``.

    Each identity gets a fixed appearance signature (clothing colours, body
    proportions); each image adds pose jitter, a mild colour cast and a
    camera-specific background. Per identity, images are split so there is
    at least one query and one gallery image on a different camera.
    """
    if num_ids < 2:
        raise ValueError("num_ids must be >= 2 (ranking needs at least two identities)")
    if imgs_per_id < 4:
        raise ValueError("imgs_per_id must be >= 4")
    if num_cameras < 2:
        raise ValueError("num_cameras must be >= 2")
    if side < 8:
        raise ValueError("side must be >= 8")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    cam_bgs = rng.uniform(0.15, 0.85, size=(num_cameras, 3))
    n_query = max(1, imgs_per_id // 5)
    n_gallery = max(1, (3 * imgs_per_id) // 10)

    records = []
    for pid in range(num_ids):
        ident = _random_identity(np.random.default_rng(derive_seed(seed, 1, pid)))
        cam_offset = pid % num_cameras
        for j in range(imgs_per_id):
            cam = (cam_offset + j) % num_cameras
            img_rng = np.random.default_rng(derive_seed(seed, 2, pid, j))
            img = _render_person(ident, side, cam_bgs[cam], img_rng)
            # j=0 is the query; consecutive j alternate cameras, so gallery j=1 is cross-camera
            if j < n_query:
                split = "query"
            elif j < n_query + n_gallery:
                split = "gallery"
            else:
                split = "train"
            rel = f"images/{pid:04d}_c{cam}_{j:03d}.png"
            save_image(img, out_dir / rel)
            records.append(SampleRecord(rel, pid, cam, split, 0, 1.0))

    # originals are labelled with the neutral level of the default set
    neutral = IlluminationConfig().neutral_class
    records = [replace(r, illum_class=neutral) for r in records]
    write_manifest(records, out_dir / "manifest.jsonl")
    return records


__all__ = [
    "DEFAULT_GAMMAS",
    "IlluminationConfig",
    "Manifest",
    "ManifestError",
    "SampleRecord",
    "build_augmented_manifest",
    "derive_seed",
    "diff_image",
    "gamma_correct",
    "load_image",
    "make_illuminated",
    "materialize",
    "poisson_noise",
    "read_manifest",
    "save_image",
    "synth_toy_dataset",
    "write_manifest",
]
