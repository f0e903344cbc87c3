"""Dataset manifests, verification-pair protocols, images and score files."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath

import numpy as np
from PIL import Image as PILImage

MANIFEST_HEADER = ["image_path", "x1", "y1", "x2", "y2", "x3", "y3", "x4", "y4", "x5", "y5", "quality"]
PAIRS_HEADER = ["index_a", "index_b", "mated"]
SCORES_HEADER = ["image_path", "score"]


class ManifestError(ValueError):
    """Malformed manifest, pairs or score file; message carries the location."""


def _fmt(x: float) -> str:
    return repr(float(x))


def write_text_atomic(path, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- images


def load_image(path) -> np.ndarray:
    """Read an 8-bit PGM/PNG as float64 in [0, 1]; (H, W) or (H, W, 3)."""
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
        arr = np.asarray(im, dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def image_bytes(img, fmt: str = "PNG") -> bytes:
    arr = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ValueError("image intensities must be finite and inside [0, 1]")
    u8 = np.round(arr * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(u8, mode="L" if u8.ndim == 2 else "RGB").save(buf, format=fmt)
    return buf.getvalue()


def save_image(img, path) -> None:
    fmt = "PPM" if Path(path).suffix.lower() in (".pgm", ".ppm") else "PNG"
    write_bytes_atomic(path, image_bytes(img, fmt))


# ---------------------------------------------------------------- manifests


@dataclass
class SampleRecord:
    image_path: str
    landmarks: np.ndarray
    quality: float | None = None


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    root: Path = field(default_factory=lambda: Path("."))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def landmarks(self) -> np.ndarray:
        return np.stack([r.landmarks for r in self.records]) if self.records else np.zeros((0, 5, 2))

    @property
    def qualities(self) -> np.ndarray:
        return np.array([np.nan if r.quality is None else r.quality for r in self.records])

    @property
    def labeled(self) -> bool:
        return all(r.quality is not None for r in self.records)

    def image_file(self, i: int) -> Path:
        return self.root / self.records[i].image_path

    def load_image(self, i: int) -> np.ndarray:
        img = load_image(self.image_file(i))
        h, w = img.shape[:2]
        k = self.records[i].landmarks
        if (k[:, 0] < 0).any() or (k[:, 0] > w).any() or (k[:, 1] < 0).any() or (k[:, 1] > h).any():
            raise ManifestError(f"record {i} ({self.records[i].image_path}): landmarks outside {w}x{h} image")
        return img

    def load_images(self) -> np.ndarray:
        """Stack every image; all images must share one size."""
        imgs = [self.load_image(i) for i in range(len(self))]
        shapes = {im.shape for im in imgs}
        if len(shapes) > 1:
            raise ManifestError(f"images differ in size: {sorted(shapes)}")
        return np.stack(imgs)

    def with_qualities(self, qualities) -> "DatasetManifest":
        qs = list(qualities)
        if len(qs) != len(self):
            raise ValueError("one quality per record is required")
        recs = [
            SampleRecord(r.image_path, r.landmarks.copy(), None if q is None else float(q))
            for r, q in zip(self.records, qs)
        ]
        return DatasetManifest(recs, self.root)

    def with_landmarks(self, landmarks) -> "DatasetManifest":
        recs = [SampleRecord(r.image_path, np.asarray(k, dtype=np.float64).copy(), r.quality)
                for r, k in zip(self.records, landmarks)]
        return DatasetManifest(recs, self.root)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in self.records:
            q = "" if r.quality is None else _fmt(r.quality)
            w.writerow([r.image_path, *(_fmt(v) for v in r.landmarks.ravel()), q])
        return out.getvalue()

    def save(self, path) -> None:
        write_text_atomic(path, self.to_csv())


def _check_rel_path(p: str, lineno: int, path) -> str:
    pp = PurePosixPath(p.replace("\\", "/"))
    if not p or pp.is_absolute() or ".." in pp.parts:
        raise ManifestError(f"{path}:{lineno}: image path {p!r} must be relative and stay under the root")
    return p


def load_manifest(path, root=None) -> DatasetManifest:
    """Parse a manifest CSV; image paths resolve under ``root`` (default: the file's folder)."""
    path = Path(path)
    text = path.read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != MANIFEST_HEADER:
        raise ManifestError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            raise ManifestError(f"{path}:{lineno}: empty row")
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        img = _check_rel_path(row[0].strip(), lineno, path)
        try:
            coords = np.array([float(v) for v in row[1:11]], dtype=np.float64)
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: non-numeric landmark coordinate ({exc})") from exc
        if not np.all(np.isfinite(coords)):
            raise ManifestError(f"{path}:{lineno}: landmark coordinates must be finite")
        qtxt = row[11].strip()
        quality = None
        if qtxt:
            try:
                quality = float(qtxt)
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: non-numeric quality {qtxt!r}") from exc
            if not 0.0 <= quality <= 1.0:
                raise ManifestError(f"{path}:{lineno}: quality {quality} outside [0, 1]")
        records.append(SampleRecord(img, coords.reshape(5, 2), quality))
    return DatasetManifest(records, Path(root) if root is not None else path.parent)


# ---------------------------------------------------------------- pairs


@dataclass
class PairProtocol:
    index_a: np.ndarray
    index_b: np.ndarray
    mated: np.ndarray

    def __post_init__(self):
        self.index_a = np.asarray(self.index_a, dtype=np.int64)
        self.index_b = np.asarray(self.index_b, dtype=np.int64)
        self.mated = np.asarray(self.mated, dtype=bool)

    def __len__(self) -> int:
        return len(self.mated)

    @property
    def n_mated(self) -> int:
        return int(self.mated.sum())

    @property
    def n_nonmated(self) -> int:
        return int((~self.mated).sum())

    def validate(self, n_records: int) -> None:
        for row, (a, b, m) in enumerate(zip(self.index_a, self.index_b, self.mated), start=1):
            if not (0 <= a < n_records and 0 <= b < n_records):
                raise ManifestError(f"pair {row}: index out of range for {n_records}-record manifest")
            if not m and a == b:
                raise ManifestError(f"pair {row}: non-mated pair compares image {a} with itself")
        if self.n_mated == 0 or self.n_nonmated == 0:
            raise ManifestError("protocol must contain ≥1 mated and ≥1 non-mated pair")

    def to_csv(self) -> str:
        lines = [",".join(PAIRS_HEADER)]
        lines += [f"{a},{b},{int(m)}" for a, b, m in zip(self.index_a, self.index_b, self.mated)]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        write_text_atomic(path, self.to_csv())


def load_pairs(path, manifest: DatasetManifest) -> PairProtocol:
    """Parse a pairs CSV; the header row is optional, duplicates are kept."""
    path = Path(path)
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    start = 0
    if rows and [c.strip() for c in rows[0]] == PAIRS_HEADER:
        start = 1
    a_idx, b_idx, mated = [], [], []
    for lineno, row in enumerate(rows[start:], start=start + 1):
        if not row:
            continue
        if len(row) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        try:
            a, b, m = (int(v) for v in row)
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: non-integer field ({exc})") from exc
        if m not in (0, 1):
            raise ManifestError(f"{path}:{lineno}: mated flag must be 0 or 1")
        n = len(manifest)
        if not (0 <= a < n and 0 <= b < n):
            raise ManifestError(f"{path}:{lineno}: index out of range for {n}-record manifest")
        if m == 0 and a == b:
            raise ManifestError(f"{path}:{lineno}: non-mated pair compares image {a} with itself")
        a_idx.append(a)
        b_idx.append(b)
        mated.append(bool(m))
    proto = PairProtocol(a_idx, b_idx, mated)
    if proto.n_mated == 0 or proto.n_nonmated == 0:
        raise ManifestError(f"{path}: protocol must contain ≥1 mated and ≥1 non-mated pair")
    return proto


# ---------------------------------------------------------------- quality scores


def load_quality_scores(path, manifest: DatasetManifest) -> np.ndarray:
    """Read an ``image_path,score`` CSV and order the scores like the manifest."""
    path = Path(path)
    rows = list(csv.reader(io.StringIO(path.read_text())))
    if not rows or [c.strip() for c in rows[0]] != SCORES_HEADER:
        raise ManifestError(f"{path}:1: expected header {','.join(SCORES_HEADER)}")
    scores = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise ManifestError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
        try:
            s = float(row[1])
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: non-numeric score {row[1]!r}") from exc
        if not np.isfinite(s):
            raise ManifestError(f"{path}:{lineno}: score must be finite")
        scores[row[0].strip()] = s
    out = np.empty(len(manifest))
    for i, rec in enumerate(manifest.records):
        if rec.image_path not in scores:
            raise ManifestError(f"{path}: no score for image {rec.image_path}")
        out[i] = scores[rec.image_path]
    return out


def quality_scores_csv(manifest: DatasetManifest, scores) -> str:
    lines = [",".join(SCORES_HEADER)]
    lines += [f"{r.image_path},{_fmt(s)}" for r, s in zip(manifest.records, scores)]
    return "\n".join(lines) + "\n"
