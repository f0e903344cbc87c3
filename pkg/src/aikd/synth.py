"""Procedural stand-in for a face corpus.

Every identity is a constellation of Gaussian blobs attached to its own
five-point face geometry. Each image shows that constellation under a random
pose, blurred by a known Gaussian sigma, with additive noise. The pseudo
quality label is the blur sigma mapped linearly onto [1, 0].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import rng as rngmod
from .align import ARCFACE_112, SimilarityTransform
from .data import DatasetManifest, PairProtocol, SampleRecord, save_image, write_text_atomic


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings. Lengths (radii, offsets, shifts, jitter) are in
    pixels of a 96-px frame and scale with ``image_size``."""

    n_identities: int = 4
    images_per_identity: int = 500
    image_size: int = 96
    sigma_min: float = 0.0
    sigma_max: float = 7.0
    n_blobs: int = 8
    blob_radius: tuple[float, float] = (1.8, 3.2)
    blob_offset: float = 10.0
    dipole_separation: float = 4.0
    blob_amplitude: tuple[float, float] = (0.35, 0.8)
    noise_std: float = 0.04
    max_rotation_deg: float = 10.0
    scale_jitter: float = 0.08
    max_shift: float = 6.0
    geometry_jitter: float = 3.0
    pairs_per_class: int | None = None

    def validate(self) -> None:
        if self.n_identities < 2:
            raise SynthConfigError("need at least 2 identities")
        if self.images_per_identity < 2:
            raise SynthConfigError("need at least 2 images per identity")
        if self.image_size < 16:
            raise SynthConfigError("image_size must be at least 16")
        if not self.sigma_max > self.sigma_min or self.sigma_min < 0:
            raise SynthConfigError("blur range needs 0 <= sigma_min < sigma_max")
        if not 0 < self.blob_radius[0] <= self.blob_radius[1]:
            raise SynthConfigError("blob_radius must be an ordered positive range")
        if self.n_blobs < 3:
            raise SynthConfigError("identities need at least 3 blobs")
        if self.noise_std < 0:
            raise SynthConfigError("noise_std must be non-negative")
        if self.pairs_per_class is not None and self.pairs_per_class < 1:
            raise SynthConfigError("pairs_per_class must be positive")


@dataclass
class SynthDataset:
    manifest: DatasetManifest
    pairs: PairProtocol
    images: np.ndarray  # (N, H, W), 8-bit quantized, in [0, 1]
    identities: np.ndarray
    sigmas: np.ndarray


def blur_to_quality(sigma, sigma_min: float, sigma_max: float):
    return 1.0 - (np.asarray(sigma, dtype=np.float64) - sigma_min) / (sigma_max - sigma_min)


@dataclass(frozen=True)
class _Identity:
    geometry: np.ndarray  # (5, 2) canonical landmark positions
    centers: np.ndarray   # (2 * n_blobs, 2) blob centres, dipoles interleaved
    radii: np.ndarray
    amps: np.ndarray


# shared facial structure: dark eyes, bright nose, dark lip corners
_BASE_AMPS = np.array([-0.5, -0.5, 0.35, -0.3, -0.3])


def _unit(cfg: SynthConfig) -> float:
    return cfg.image_size / 96.0


def _make_identities(cfg: SynthConfig, gen: np.random.Generator) -> list[_Identity]:
    base = ARCFACE_112 * (cfg.image_size / 112.0)
    u = _unit(cfg)
    out = []
    for _ in range(cfg.n_identities):
        geometry = base + gen.normal(0.0, cfg.geometry_jitter * u, size=(5, 2))
        anchors = np.arange(cfg.n_blobs) % 5
        off = cfg.blob_offset * u
        centres = geometry[anchors] + gen.uniform(-off, off, size=(cfg.n_blobs, 2))
        angle = gen.uniform(0.0, 2 * np.pi, size=cfg.n_blobs)
        half = 0.5 * cfg.dipole_separation * u * np.column_stack([np.cos(angle), np.sin(angle)])
        radii = u * gen.uniform(*cfg.blob_radius, size=cfg.n_blobs)
        amps = gen.uniform(*cfg.blob_amplitude, size=cfg.n_blobs)
        # each identity feature is a +/- blob pair: it carries detail but no mean intensity
        out.append(_Identity(
            geometry=geometry,
            centers=np.stack([centres + half, centres - half], axis=1).reshape(-1, 2),
            radii=np.repeat(radii, 2),
            amps=np.stack([amps, -amps], axis=1).reshape(-1),
        ))
    return out


def _render(ident: _Identity, pose: SimilarityTransform, cfg: SynthConfig) -> np.ndarray:
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.full((n, n), 0.45)
    face_c = pose.apply(ident.geometry.mean(axis=0, keepdims=True))[0]
    rad = 0.42 * n * pose.scale
    img += 0.15 * np.exp(-((xx - face_c[0]) ** 2 + (yy - face_c[1]) ** 2) / (2 * rad**2))
    base_r = cfg.image_size / 24.0 * pose.scale
    for (cx, cy), a in zip(pose.apply(ident.geometry), _BASE_AMPS):
        img += 0.5 * a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * base_r**2))
    for (cx, cy), r, a in zip(pose.apply(ident.centers), ident.radii * pose.scale, ident.amps):
        img += 0.5 * a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r**2))
    return img


def generate_synthetic_dataset(config: SynthConfig, rng_seed: int, split: str = "train") -> SynthDataset:
    """Build images, labels, landmarks and a balanced pair protocol in memory.

    Identities depend only on ``rng_seed``; ``split`` selects an independent
    draw of images for the same identities.
    """
    config.validate()
    ids = _make_identities(config, rngmod.stream(rng_seed, "identity"))
    gen = rngmod.stream(rng_seed, f"data/{split}")
    n = config.image_size
    centre = np.array([n / 2.0, n / 2.0])

    images, landmarks, identities, sigmas, records = [], [], [], [], []
    for i, ident in enumerate(ids):
        for j in range(config.images_per_identity):
            theta = math.radians(gen.uniform(-config.max_rotation_deg, config.max_rotation_deg))
            scale = 1.0 + gen.uniform(-config.scale_jitter, config.scale_jitter)
            shift = gen.uniform(-1.0, 1.0, size=2) * (config.max_shift * _unit(config))
            # rotate/scale about the frame centre, then shift
            rot = SimilarityTransform(scale, theta, 0.0, 0.0)
            t = centre + shift - rot.apply(centre[None])[0]
            pose = SimilarityTransform(scale, theta, float(t[0]), float(t[1]))
            sigma = gen.uniform(config.sigma_min, config.sigma_max)
            img = _render(ident, pose, config)
            if sigma > 0:
                img = gaussian_filter(img, sigma, mode="nearest")
            img = img + gen.normal(0.0, config.noise_std, size=img.shape)
            img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
            k = pose.apply(ident.geometry)
            images.append(img)
            landmarks.append(k)
            identities.append(i)
            sigmas.append(sigma)
            records.append(SampleRecord(f"images/id{i:03d}_{j:05d}.png", k,
                                        float(blur_to_quality(sigma, config.sigma_min, config.sigma_max))))

    identities = np.array(identities)
    pairs = _balanced_pairs(identities, config.pairs_per_class, gen)
    manifest = DatasetManifest(records)
    return SynthDataset(manifest, pairs, np.stack(images), identities, np.array(sigmas))


def _balanced_pairs(identities: np.ndarray, per_class: int | None, gen: np.random.Generator) -> PairProtocol:
    n = len(identities)
    per_class = per_class or n
    a = gen.integers(0, n, size=4 * per_class + 16)
    mated_a, mated_b, non_a, non_b = [], [], [], []
    by_id = {i: np.flatnonzero(identities == i) for i in np.unique(identities)}
    for x in a:
        if len(mated_a) >= per_class:
            break
        pool = by_id[identities[x]]
        y = pool[gen.integers(0, len(pool))]
        if y != x:
            mated_a.append(int(x))
            mated_b.append(int(y))
    while len(non_a) < per_class:
        x, y = gen.integers(0, n, size=2)
        if identities[x] != identities[y]:
            non_a.append(int(x))
            non_b.append(int(y))
    while len(mated_a) < per_class:
        x = int(gen.integers(0, n))
        pool = by_id[identities[x]]
        y = int(pool[gen.integers(0, len(pool))])
        if y != x:
            mated_a.append(x)
            mated_b.append(y)
    return PairProtocol(mated_a + non_a, mated_b + non_b, [True] * per_class + [False] * per_class)


def write_synthetic_dataset(ds: SynthDataset, root) -> None:
    """Write images, ``manifest.csv``, ``pairs.csv`` and ``truth.csv`` under ``root``."""
    root = Path(root)
    for rec, img in zip(ds.manifest.records, ds.images):
        save_image(img, root / rec.image_path)
    ds.manifest.root = root
    ds.manifest.save(root / "manifest.csv")
    ds.pairs.save(root / "pairs.csv")
    rows = ["image_path,identity,blur_sigma"]
    rows += [f"{r.image_path},{int(i)},{float(s)!r}"
             for r, i, s in zip(ds.manifest.records, ds.identities, ds.sigmas)]
    write_text_atomic(root / "truth.csv", "\n".join(rows) + "\n")


def load_identities(path, manifest: DatasetManifest) -> np.ndarray:
    """Identity per manifest record from a ``truth.csv``-style file."""
    import csv
    with open(path, newline="") as fh:
        table = {row["image_path"]: int(row["identity"]) for row in csv.DictReader(fh)}
    try:
        return np.array([table[r.image_path] for r in manifest.records])
    except KeyError as exc:
        raise ValueError(f"{path}: no identity for image {exc.args[0]}") from exc
