"""Verification scoring and error-versus-discard analysis.

The decision threshold is fixed once from all non-mated scores at the target
false match rate. Images are then discarded in ascending order of quality
(ties by manifest index), and FNMR is recomputed over the mated pairs whose
two images both survive. The partial area under this curve, divided by
``r_max * FNMR(0)``, is the normalized pAUC: about 1 for a quality measure
that carries no information, lower is better.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .align import AlignmentTemplate, align_batch
from .data import DatasetManifest, PairProtocol
from .distill import to_inputs
from .network import ModelParams, forward

log = logging.getLogger(__name__)


class ProtocolError(ValueError):
    pass


class UndefinedNormalizationError(ValueError):
    def __init__(self, raw: float):
        super().__init__(f"FNMR at 0% discard is zero; normalized pAUC undefined (raw pAUC {raw!r})")
        self.raw = raw


@dataclass
class ScoreSet:
    mated: np.ndarray
    nonmated: np.ndarray

    def __post_init__(self):
        self.mated = np.asarray(self.mated, dtype=np.float64)
        self.nonmated = np.asarray(self.nonmated, dtype=np.float64)
        if self.mated.size == 0 or self.nonmated.size == 0:
            raise ProtocolError("score set needs mated and non-mated scores")
        if not (np.isfinite(self.mated).all() and np.isfinite(self.nonmated).all()):
            raise ProtocolError("scores must be finite")


@dataclass
class Scoring:
    pair_scores: np.ndarray  # NaN where a pair was excluded
    qualities: np.ndarray
    embeddings: np.ndarray
    scores: ScoreSet


@dataclass
class EdcCurve:
    discard_rates: np.ndarray
    fnmr_values: np.ndarray
    threshold: float
    fnmr0: float
    fmr_target: float
    r_max: float


@dataclass
class PaucReport:
    raw: float
    normalized: float
    r_max: float
    fmr_target: float


# ---------------------------------------------------------------- scoring


def predict(model: ModelParams, inputs, chunk: int = 512):
    """Embeddings and head qualities for a stack of network inputs."""
    embs, quals = [], []
    for s in range(0, len(inputs), chunk):
        e, q, _ = forward(model, inputs[s:s + chunk])
        embs.append(e)
        quals.append(q)
    return np.concatenate(embs), np.concatenate(quals)


def cosine_pair_scores(embeddings, pairs: PairProtocol) -> np.ndarray:
    norms = np.linalg.norm(embeddings, axis=1)
    na, nb = norms[pairs.index_a], norms[pairs.index_b]
    dots = np.einsum("ij,ij->i", embeddings[pairs.index_a], embeddings[pairs.index_b])
    bad = (na <= 0) | (nb <= 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = dots / (na * nb)
    scores[bad] = np.nan
    if bad.any():
        log.warning("excluded %d pair(s) with a degenerate embedding", int(bad.sum()))
    return scores


def score_set(pair_scores, pairs: PairProtocol) -> ScoreSet:
    ok = np.isfinite(pair_scores)
    return ScoreSet(pair_scores[ok & pairs.mated], pair_scores[ok & ~pairs.mated])


def embed_and_score(model: ModelParams, manifest: DatasetManifest, pairs: PairProtocol,
                    template: AlignmentTemplate, images=None, landmarks=None) -> Scoring:
    """Align every image, run the model, and score each pair by cosine similarity.

    ``landmarks`` overrides the manifest landmarks (e.g. perturbed ones).
    """
    if images is None:
        images = manifest.load_images()
    if landmarks is None:
        landmarks = manifest.landmarks
    inputs = to_inputs(align_batch(images, landmarks, template))
    emb, qual = predict(model, inputs)
    ps = cosine_pair_scores(emb, pairs)
    return Scoring(ps, qual, emb, score_set(ps, pairs))


# ---------------------------------------------------------------- rates


def fmr_threshold(nonmated_scores, fmr_target: float = 1e-3) -> float:
    """Smallest threshold ``t`` with ``#{s >= t} / N <= fmr_target``.

    The threshold is a score value, or the next float above the largest
    score when even that one alone exceeds the target.
    """
    s = np.sort(np.asarray(nonmated_scores, dtype=np.float64))
    n = s.size
    if n == 0:
        raise ProtocolError("need at least one non-mated score")
    if not 0 < fmr_target <= 1:
        raise ValueError("fmr_target must lie in (0, 1]")
    if math.floor(fmr_target * n) >= n:
        log.info("FMR target %g admits every non-mated score; threshold is the minimum", fmr_target)
        return float(s[0])
    uniq = np.unique(s)
    count_ge = n - np.searchsorted(s, uniq, side="left")
    ok = count_ge / n <= fmr_target
    if not ok.any():
        return float(np.nextafter(s[-1], np.inf))
    return float(uniq[np.argmax(ok)])


def fmr_at(nonmated_scores, threshold: float) -> float:
    s = np.asarray(nonmated_scores, dtype=np.float64)
    return float(np.count_nonzero(s >= threshold) / s.size)


def fnmr_at(mated_scores, threshold: float) -> float:
    s = np.asarray(mated_scores, dtype=np.float64)
    if s.size == 0:
        raise ProtocolError("need at least one mated score")
    return float(np.count_nonzero(s < threshold) / s.size)


# ---------------------------------------------------------------- EDC / pAUC


def discard_grid(grid_step: float = 0.01, r_max: float = 0.3) -> np.ndarray:
    if not (0 < grid_step and 0 < r_max <= 1):
        raise ValueError("need grid_step > 0 and 0 < r_max <= 1")
    steps = round(r_max / grid_step)
    if steps < 1 or abs(steps * grid_step - r_max) > 1e-9:
        raise ValueError("r_max must be a whole number of grid steps")
    rates = np.round(np.arange(steps + 1) * grid_step, 12)
    rates[-1] = r_max
    return rates


def discard_order(qualities) -> np.ndarray:
    """Image indices, lowest quality first; ties by ascending index."""
    q = np.asarray(qualities, dtype=np.float64)
    return np.lexsort((np.arange(q.size), q))


def edc_curve(qualities, pairs: PairProtocol, pair_scores, fmr_target: float = 1e-3,
              grid_step: float = 0.01, r_max: float = 0.3) -> EdcCurve:
    qualities = np.asarray(qualities, dtype=np.float64)
    pair_scores = np.asarray(pair_scores, dtype=np.float64)
    n_img = qualities.size
    if len(pair_scores) != len(pairs):
        raise ProtocolError("one score per pair is required")
    if not np.isfinite(qualities).all():
        raise ProtocolError("qualities must be finite")
    valid = np.isfinite(pair_scores)
    mated = valid & pairs.mated
    nonmated = valid & ~pairs.mated
    if not mated.any():
        raise ProtocolError("no mated pairs to evaluate at 0% discard")
    threshold = fmr_threshold(pair_scores[nonmated], fmr_target)

    rank = np.empty(n_img, dtype=np.int64)
    rank[discard_order(qualities)] = np.arange(n_img)
    m_scores = pair_scores[mated]
    # a pair is gone once either image has been discarded
    gone_at = np.minimum(rank[pairs.index_a[mated]], rank[pairs.index_b[mated]])
    errors = m_scores < threshold

    rates = discard_grid(grid_step, r_max)
    fnmr = np.empty_like(rates)
    last = None
    for i, r in enumerate(rates):
        n_drop = math.floor(r * n_img + 1e-9)
        alive = gone_at >= n_drop
        if alive.any():
            last = float(np.count_nonzero(errors & alive) / np.count_nonzero(alive))
        else:
            log.warning("no mated pairs survive at discard rate %g; carrying FNMR forward", r)
        fnmr[i] = last
    return EdcCurve(rates, fnmr, threshold, float(fnmr[0]), fmr_target, r_max)


def pauc(curve: EdcCurve) -> PaucReport:
    """Trapezoidal area under the EDC curve over [0, r_max], raw and normalized."""
    x = np.asarray(curve.discard_rates, dtype=np.float64)
    y = np.asarray(curve.fnmr_values, dtype=np.float64)
    keep = x <= curve.r_max
    x, y = x[keep], y[keep]
    dx = np.diff(x)
    raw = math.fsum(dx * (y[1:] + y[:-1]) / 2.0)
    if curve.fnmr0 <= 0:
        raise UndefinedNormalizationError(raw)
    yn = y / curve.fnmr0
    normalized = math.fsum(dx * (yn[1:] + yn[:-1]) / 2.0) / curve.r_max
    return PaucReport(raw, normalized, curve.r_max, curve.fmr_target)


@dataclass
class MethodResult:
    name: str
    rank: int
    pauc: PaucReport
    curve: EdcCurve


def oracle_margin_qualities(pairs: PairProtocol, pair_scores, n_images: int) -> np.ndarray:
    """Per-image quality equal to the lowest mated score the image takes part in.

    Images in no (finite) mated pair get a value above every score, so they
    are discarded last.
    """
    s = np.asarray(pair_scores, dtype=np.float64)
    sel = pairs.mated & np.isfinite(s)
    q = np.full(n_images, np.inf)
    np.minimum.at(q, pairs.index_a[sel], s[sel])
    np.minimum.at(q, pairs.index_b[sel], s[sel])
    top = float(np.max(s[sel])) + 1.0 if sel.any() else 1.0
    q[np.isinf(q)] = top
    return q


def compare_methods(methods, pairs: PairProtocol, pair_scores, fmr_target: float = 1e-3,
                    r_max: float = 0.3, grid_step: float = 0.01) -> list[MethodResult]:
    """Rank quality methods by normalized pAUC (ascending, name breaks ties)."""
    rows = []
    for name, qual in methods:
        curve = edc_curve(qual, pairs, pair_scores, fmr_target, grid_step, r_max)
        rows.append((name, curve, pauc(curve)))
    rows.sort(key=lambda r: (r[2].normalized, r[0]))
    return [MethodResult(name, i + 1, rep, curve) for i, (name, curve, rep) in enumerate(rows)]


# ---------------------------------------------------------------- files


def edc_csv(curve: EdcCurve) -> str:
    lines = ["discard_rate,fnmr"] + [f"{r!r},{f!r}" for r, f in zip(curve.discard_rates.tolist(), curve.fnmr_values.tolist())]
    return "\n".join(lines) + "\n"


def summary_csv(curve: EdcCurve, report: PaucReport | None) -> str:
    raw = report.raw if report else float("nan")
    norm = report.normalized if report else float("nan")
    return f"pAUC_raw,pAUC_norm,threshold,fnmr0\n{raw!r},{norm!r},{curve.threshold!r},{curve.fnmr0!r}\n"


def comparison_csv(results: list[MethodResult]) -> str:
    lines = ["rank,method,pAUC_norm,pAUC_raw,fnmr0"]
    lines += [f"{r.rank},{r.name},{r.pauc.normalized!r},{r.pauc.raw!r},{r.curve.fnmr0!r}" for r in results]
    return "\n".join(lines) + "\n"


def read_edc_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]
