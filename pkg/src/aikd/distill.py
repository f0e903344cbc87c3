"""Alignment-invariant distillation of a quality-regression student.

Each visit to a training sample builds two crops of the raw image: one
aligned with the stored landmarks (fed to the frozen teacher) and one
aligned with a freshly perturbed copy of them (fed to the student). The
student minimises the mean of a cosine representation loss against the
teacher embedding and an L1 loss against the quality label.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import rng as rngmod
from .align import AlignmentTemplate, align_batch, perturb_landmarks
from .data import DatasetManifest, SampleRecord
from .network import (
    ArchitectureSpec,
    ContractError,
    ModelParams,
    SwaState,
    backward,
    embed,
    forward,
    init_params,
    sgd_step,
    swa_finalize,
    swa_update,
)

log = logging.getLogger(__name__)

_NORM_EPS = 1e-12


class DegenerateEmbeddingError(ValueError):
    pass


class DistillConfigError(ValueError):
    pass


class DegenerateLabelsError(ValueError):
    pass


# ---------------------------------------------------------------- losses


def cosine_loss(e, e_hat) -> float:
    e = np.asarray(e, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    ne, nh = np.linalg.norm(e), np.linalg.norm(e_hat)
    if ne <= 0 or nh <= 0:
        raise DegenerateEmbeddingError("cosine loss is undefined for a zero-norm embedding")
    return float(1.0 - np.dot(e, e_hat) / (ne * nh))


def quality_loss(q, q_hat) -> float:
    return abs(float(q) - float(q_hat))


def distill_objective(e, e_hat, q, q_hat) -> float:
    return (cosine_loss(e, e_hat) + quality_loss(q, q_hat)) / 2.0


def objective_terms(e, e_hat, q, q_hat):
    """Per-sample losses and their partials w.r.t. the student outputs.

    Batched form of :func:`distill_objective`. The teacher embedding ``e`` is
    a constant target. Returns ``(l_cos, l_1, d_e_hat, d_q_hat)`` where the
    partials are of the per-sample objective ``(l_cos + l_1) / 2``.
    """
    e = np.atleast_2d(e)
    e_hat = np.atleast_2d(e_hat)
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    q_hat = np.atleast_1d(np.asarray(q_hat, dtype=np.float64))
    ne = np.linalg.norm(e, axis=1)
    nh = np.linalg.norm(e_hat, axis=1)
    if (ne <= 0).any() or (nh <= 0).any():
        raise DegenerateEmbeddingError("cosine loss is undefined for a zero-norm embedding")
    dot = np.einsum("ij,ij->i", e, e_hat)
    cos = dot / (ne * nh)
    l_cos = 1.0 - cos
    l_1 = np.abs(q - q_hat)
    d_e_hat = -0.5 * (e / (ne * nh)[:, None] - (dot / (ne * nh**3))[:, None] * e_hat)
    d_q_hat = 0.5 * np.sign(q_hat - q)
    return l_cos, l_1, d_e_hat, d_q_hat


# ---------------------------------------------------------------- labels


def normalize_labels(manifest: DatasetManifest) -> tuple[DatasetManifest, tuple[float, float]]:
    """Min-max map the labels onto [0, 1]; returns the manifest and (min, max)."""
    q = manifest.qualities
    if np.isnan(q).any():
        raise DistillConfigError("every record needs a label before normalization")
    lo, hi = float(q.min()), float(q.max())
    if not hi > lo:
        raise DegenerateLabelsError("labels are all equal; min-max normalization is undefined")
    mapped = (q - lo) / (hi - lo)
    return manifest.with_qualities(mapped), (lo, hi)


# ---------------------------------------------------------------- config


@dataclass
class DistillConfig:
    p: float = 3.0
    lr: float = 0.05
    epochs: int = 10
    batch_size: int = 32
    swa_warmup: float = 0.5
    seed: int = 0
    template: AlignmentTemplate = field(default_factory=lambda: AlignmentTemplate.default().resized(32, 32))
    integer_perturbation: bool = False

    def validate(self) -> None:
        if self.p < 0:
            raise DistillConfigError("p must be non-negative")
        if not self.lr >= 0:
            raise DistillConfigError("lr must be non-negative")
        if self.epochs < 1:
            raise DistillConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise DistillConfigError("batch_size must be at least 1")
        if not 0.0 <= self.swa_warmup < 1.0:
            raise DistillConfigError("swa_warmup must lie in [0, 1)")


@dataclass
class EpochStats:
    epoch: int
    mean_cos: float
    mean_l1: float
    mean_obj: float
    seen: int
    skipped: int


class StepResult(NamedTuple):
    l_cos: np.ndarray
    l_1: np.ndarray
    objective: np.ndarray
    skipped: int


class TrainResult(NamedTuple):
    student: ModelParams
    swa_student: ModelParams
    stats: list[EpochStats]
    swa_state: SwaState


def epoch_stats_csv(stats: list[EpochStats]) -> str:
    lines = ["epoch,mean_cos,mean_l1,mean_obj,skipped"]
    lines += [f"{s.epoch},{s.mean_cos!r},{s.mean_l1!r},{s.mean_obj!r},{s.skipped}" for s in stats]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- views and steps


def to_inputs(crops) -> np.ndarray:
    """Flatten aligned crops (N, H, W[, C]) into network inputs in [-1, 1], row-major."""
    crops = np.asarray(crops, dtype=np.float64)
    return (crops.reshape(crops.shape[0], -1) - 0.5) / 0.5


def sample_views(images, landmarks, config: DistillConfig, rng: np.random.Generator):
    """Aligned and misaligned crops for a batch of raw images.

    Draws one perturbation per sample, in order, from ``rng``.
    """
    perturbed = [perturb_landmarks(k, config.p, rng, integer=config.integer_perturbation) for k in landmarks]
    x = align_batch(images, landmarks, config.template)
    x_hat = align_batch(images, perturbed, config.template)
    return x, x_hat


def distill_loss(student: ModelParams, x_hat, teacher_emb, q):
    """Mean objective over a batch and its exact parameter gradient.

    Suitable as the ``loss_fn`` of :func:`aikd.network.grad_check`.
    """
    e_hat, q_hat, tape = forward(student, np.atleast_2d(x_hat))
    l_cos, l_1, d_e, d_q = objective_terms(teacher_emb, e_hat, q, q_hat)
    n = len(l_cos)
    loss = float(np.mean((l_cos + l_1) / 2.0))
    return loss, backward(student, tape, d_e / n, d_q / n)


def _check_pair(teacher: ModelParams, student: ModelParams) -> None:
    if not teacher.frozen:
        raise ContractError("the teacher must be frozen")
    if teacher.spec.input_dim != student.spec.input_dim or teacher.spec.embedding_dim != student.spec.embedding_dim:
        raise ContractError("teacher and student must share input and embedding sizes")


def distill_batch(student: ModelParams, teacher_emb, x_hat, q, lr: float) -> StepResult:
    """One SGD step on the mean objective over the non-degenerate samples."""
    teacher_emb = np.atleast_2d(teacher_emb)
    x_hat = np.atleast_2d(x_hat)
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    e_hat, q_hat, tape = forward(student, x_hat)
    ok = (np.linalg.norm(teacher_emb, axis=1) > _NORM_EPS) & (np.linalg.norm(e_hat, axis=1) > _NORM_EPS)
    skipped = int((~ok).sum())
    if skipped:
        log.warning("skipping %d sample(s) with a degenerate embedding", skipped)
    if not ok.any():
        empty = np.zeros(0)
        return StepResult(empty, empty, empty, skipped)
    l_cos, l_1, d_e, d_q = objective_terms(teacher_emb[ok], e_hat[ok], q[ok], q_hat[ok])
    n_ok = int(ok.sum())
    d_e_full = np.zeros_like(e_hat)
    d_q_full = np.zeros_like(q_hat)
    d_e_full[ok] = d_e / n_ok
    d_q_full[ok] = d_q / n_ok
    grads = backward(student, tape, d_e_full, d_q_full)
    sgd_step(student, grads, lr)
    return StepResult(l_cos, l_1, (l_cos + l_1) / 2.0, skipped)


def train_step(teacher: ModelParams, student: ModelParams, sample: SampleRecord, image,
               config: DistillConfig, rng: np.random.Generator) -> StepResult:
    """Distil a single raw sample into the student (batch of one)."""
    _check_pair(teacher, student)
    if sample.quality is None:
        raise DistillConfigError("training samples need a quality label")
    x, x_hat = sample_views(np.asarray(image)[None], [sample.landmarks], config, rng)
    e = embed(teacher, to_inputs(x))
    return distill_batch(student, e, to_inputs(x_hat), [sample.quality], config.lr)


def train(teacher: ModelParams, student: ModelParams, manifest: DatasetManifest,
          config: DistillConfig, images=None) -> TrainResult:
    """Run the full distillation schedule and return raw and SWA students.

    ``student`` is updated in place. ``images`` may be given as an (N, H, W)
    stack to skip loading from ``manifest.root``.
    """
    config.validate()
    _check_pair(teacher, student)
    if not manifest.labeled:
        raise DistillConfigError("every training record needs a quality label")
    labels = manifest.qualities
    if labels.min() < 0 or labels.max() > 1:
        raise DistillConfigError("labels must lie in [0, 1]; normalize them first")
    if images is None:
        images = manifest.load_images()
    images = np.asarray(images, dtype=np.float64)
    landmarks = manifest.landmarks
    n = len(manifest)

    # aligned views and teacher targets never change
    teacher_emb = embed(teacher, to_inputs(align_batch(images, landmarks, config.template)))

    shuffle_rng = rngmod.stream(config.seed, "shuffle")
    perturb_rng = rngmod.stream(config.seed, "perturb")
    swa_start = int(config.swa_warmup * config.epochs)
    swa = SwaState()
    history = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        cos_sum = l1_sum = obj_sum = 0.0
        seen = skipped = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            _, x_hat = sample_views(images[idx], landmarks[idx], config, perturb_rng)
            res = distill_batch(student, teacher_emb[idx], to_inputs(x_hat), labels[idx], config.lr)
            cos_sum += float(res.l_cos.sum())
            l1_sum += float(res.l_1.sum())
            obj_sum += float(res.objective.sum())
            seen += len(res.objective)
            skipped += res.skipped
        denom = max(seen, 1)
        history.append(EpochStats(epoch, cos_sum / denom, l1_sum / denom, obj_sum / denom, seen, skipped))
        log.info("epoch %d: cos=%.5f l1=%.5f obj=%.5f", epoch, cos_sum / denom, l1_sum / denom, obj_sum / denom)
        if epoch > swa_start:
            swa_update(swa, student)
    return TrainResult(student, swa_finalize(swa), history, swa)


# ---------------------------------------------------------------- teacher


def prefit_teacher(spec: ArchitectureSpec, images, landmarks, identities, template: AlignmentTemplate,
                   seed: int, epochs: int = 20, lr: float = 0.05, batch_size: int = 32,
                   scale: float = 16.0, margin: float = 0.2, augment_p: float = 3.0) -> ModelParams:
    """Train a backbone on an identity proxy task and return it frozen.

    Uses a normalized-softmax classifier with an additive cosine margin over
    the embedding, then discards the classifier. The quality head keeps its
    random initialization.
    """
    model = init_params(spec, seed)
    classes, y = np.unique(np.asarray(identities), return_inverse=True)
    gen = rngmod.stream(seed, "prefit")
    d = spec.embedding_dim
    w_cls = gen.normal(0.0, 1.0, size=(d, len(classes)))
    images = np.asarray(images, dtype=np.float64)
    landmarks = np.asarray(landmarks, dtype=np.float64)
    x_all = to_inputs(align_batch(images, landmarks, template)) if augment_p == 0 else None
    n = len(y)
    for _ in range(epochs):
        order = gen.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if x_all is None:
                k = [perturb_landmarks(lm, augment_p, gen) for lm in landmarks[idx]]
                x = to_inputs(align_batch(images[idx], k, template))
            else:
                x = x_all[idx]
            e, _, tape = forward(model, x)
            ne = np.maximum(np.linalg.norm(e, axis=1, keepdims=True), _NORM_EPS)
            nw = np.linalg.norm(w_cls, axis=0, keepdims=True)
            eu, wu = e / ne, w_cls / nw
            logits = scale * (eu @ wu)
            logits[np.arange(len(idx)), y[idx]] -= scale * margin
            logits -= logits.max(axis=1, keepdims=True)
            prob = np.exp(logits)
            prob /= prob.sum(axis=1, keepdims=True)
            g = prob
            g[np.arange(len(idx)), y[idx]] -= 1.0
            g /= len(idx)
            d_eu = scale * g @ wu.T
            d_wu = scale * eu.T @ g
            d_e = (d_eu - eu * (d_eu * eu).sum(axis=1, keepdims=True)) / ne
            d_w = (d_wu - wu * (d_wu * wu).sum(axis=0, keepdims=True)) / nw
            grads = backward(model, tape, d_e, np.zeros(len(idx)))
            sgd_step(model, grads, lr)
            w_cls -= lr * d_w
    return model.freeze()


def student_from_teacher(teacher: ModelParams, seed: int) -> ModelParams:
    """Copy the teacher backbone into a trainable student with a fresh head."""
    fresh = init_params(teacher.spec, seed, stream="init/head")
    nb = teacher.n_backbone
    student = teacher.copy(frozen=False)
    for i in range(nb, len(student.weights)):
        student.weights[i] = fresh.weights[i].copy()
        student.biases[i] = fresh.biases[i].copy()
    return student
