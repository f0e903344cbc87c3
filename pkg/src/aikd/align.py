"""Five-point similarity alignment, bilinear warping and landmark perturbation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernels import warp_bilinear, warp_bilinear_batch

# left eye, right eye, nose tip, left lip corner, right lip corner
ARCFACE_112 = np.array(
    [
        [38.2946, 51.6963],
        [73.5318, 51.5014],
        [56.0252, 71.7366],
        [41.5493, 92.3655],
        [70.7299, 92.2041],
    ]
)


class DegenerateGeometryError(ValueError):
    """Landmarks too close to collinear for a stable similarity fit."""


def as_landmarks(points) -> np.ndarray:
    """Coerce to a (5, 2) float64 landmark array and check finiteness."""
    k = np.asarray(points, dtype=np.float64).reshape(5, 2)
    if not np.all(np.isfinite(k)):
        raise ValueError("landmark coordinates must be finite")
    return k


@dataclass(frozen=True)
class AlignmentTemplate:
    points: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        pts = as_landmarks(self.points)
        object.__setattr__(self, "points", pts)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("template frame must have positive size")
        inside = (pts[:, 0] >= 0) & (pts[:, 0] < self.width) & (pts[:, 1] >= 0) & (pts[:, 1] < self.height)
        if not inside.all():
            raise ValueError("template points must lie strictly inside the output frame")

    @classmethod
    def default(cls) -> "AlignmentTemplate":
        return cls(ARCFACE_112.copy(), 112, 112)

    def resized(self, width: int, height: int) -> "AlignmentTemplate":
        """Same template rescaled to a ``width`` x ``height`` frame."""
        scale = np.array([width / self.width, height / self.height])
        return AlignmentTemplate(self.points * scale, width, height)

    @classmethod
    def load(cls, path) -> "AlignmentTemplate":
        """Read a template file: a ``W,H`` line followed by five ``x,y`` rows."""
        lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
        if len(lines) != 6:
            raise ValueError(f"{path}: template file needs 1 size line and 5 point lines, got {len(lines)}")
        try:
            w, h = (int(v) for v in lines[0].split(","))
            pts = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
        except ValueError as exc:
            raise ValueError(f"{path}: malformed template file: {exc}") from exc
        if any(len(p) != 2 for p in pts):
            raise ValueError(f"{path}: each point row needs exactly x,y")
        return cls(np.array(pts), w, h)

    def save(self, path) -> None:
        rows = [f"{self.width},{self.height}"] + [f"{float(x)!r},{float(y)!r}" for x, y in self.points]
        Path(path).write_text("\n".join(rows) + "\n")


@dataclass(frozen=True)
class SimilarityTransform:
    """Maps ``p`` to ``scale * R(theta) @ p + (tx, ty)``."""

    scale: float
    theta: float
    tx: float
    ty: float

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError("similarity scale must be finite and positive")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_matrix(cls, m) -> "SimilarityTransform":
        m = np.asarray(m, dtype=np.float64)
        a, b = m[0, 0], m[1, 0]
        return cls(float(math.hypot(a, b)), float(math.atan2(b, a)), float(m[0, 2]), float(m[1, 2]))

    @property
    def matrix(self) -> np.ndarray:
        c = self.scale * math.cos(self.theta)
        s = self.scale * math.sin(self.theta)
        return np.array([[c, -s, self.tx], [s, c, self.ty]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        m = self.matrix
        return pts @ m[:, :2].T + m[:, 2]

    def inverse(self) -> "SimilarityTransform":
        m = self.matrix
        rinv = m[:, :2].T / self.scale**2
        t = -rinv @ m[:, 2]
        return SimilarityTransform(1.0 / self.scale, -self.theta, float(t[0]), float(t[1]))

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ other``: apply ``other`` first."""
        a, b = self.matrix, other.matrix
        lin = a[:, :2] @ b[:, :2]
        t = a[:, :2] @ b[:, 2] + a[:, 2]
        return SimilarityTransform.from_matrix(np.column_stack([lin, t]))


def estimate_similarity(src, template: AlignmentTemplate) -> SimilarityTransform:
    """Least-squares similarity taking ``src`` landmarks onto the template.

    Closed-form Umeyama fit with reflections excluded.
    """
    src = as_landmarks(src)
    dst = template.points
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d

    sv_src = np.linalg.svd(sc.T @ sc / len(src), compute_uv=False)
    if sv_src[-1] < 1e-9 * sv_src[0] or sv_src[0] == 0.0:
        raise DegenerateGeometryError("source landmarks are (nearly) collinear")

    cov = dc.T @ sc / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[-1] = -1.0
    rot = u @ np.diag(sign) @ vt
    var_s = (sc**2).sum() / len(src)
    scale = float((d * sign).sum() / var_s)
    t = mu_d - scale * rot @ mu_s
    theta = math.atan2(rot[1, 0], rot[0, 0])
    return SimilarityTransform(scale, theta, float(t[0]), float(t[1]))


def _as_hwc(img) -> tuple[np.ndarray, bool]:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr[:, :, None], True
    return arr, False


def warp_image(img, transform: SimilarityTransform, template: AlignmentTemplate) -> np.ndarray:
    """Resample ``img`` into the template frame.

    Output pixel ``o`` takes the bilinear sample of ``img`` at ``T^-1(o)``;
    taps outside the source are zero. Grayscale in, grayscale out.
    """
    arr, squeeze = _as_hwc(img)
    out = warp_bilinear(arr, transform.inverse().matrix, template.height, template.width)
    return out[:, :, 0] if squeeze else out


def perturb_landmarks(k, p: float, rng: np.random.Generator, integer: bool = False) -> np.ndarray:
    """Offset each of the ten coordinates by an independent draw from U[-p, p].

    ``integer=True`` truncates the offsets toward zero (ablation variant).
    """
    if p < 0:
        raise ValueError(f"perturbation radius must be non-negative, got {p}")
    k = as_landmarks(k)
    delta = rng.uniform(-p, p, size=k.shape)
    if integer:
        delta = np.trunc(delta)
    return k + delta


def align_sample(img, k, template: AlignmentTemplate) -> np.ndarray:
    return warp_image(img, estimate_similarity(k, template), template)


def align_batch(imgs, landmarks, template: AlignmentTemplate) -> np.ndarray:
    """Align a stack of equally sized images, shape (N, H, W[, C]).

    Gives the same result per image as :func:`align_sample`.
    """
    imgs = np.asarray(imgs, dtype=np.float64)
    squeeze = imgs.ndim == 3
    if squeeze:
        imgs = imgs[..., None]
    invs = np.stack(
        [estimate_similarity(k, template).inverse().matrix for k in landmarks]
    )
    out = warp_bilinear_batch(imgs, invs, template.height, template.width)
    return out[..., 0] if squeeze else out
