"""Dense embedding backbone plus quality-regression head, trained in float64.

Parameters are stored as a list of ``(W, b)`` pairs with ``W`` of shape
``(fan_in, fan_out)`` so that a batch ``X @ W + b`` is one matmul. The
backbone's last layer is linear and yields the embedding; the head's last
layer yields a single logit that is squashed by the logistic function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import rng as rngmod


class ContractError(ValueError):
    """Shapes or arguments that violate an operation's contract."""


class NumericError(ArithmeticError):
    pass


class FrozenModelError(RuntimeError):
    pass


class EmptyAverageError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    input_shape: tuple[int, int, int] = (32, 32, 1)
    backbone: tuple[int, ...] = (256, 128, 64)
    head: tuple[int, ...] = (32, 1)
    quality_activation: str = "logistic"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "backbone", tuple(int(v) for v in self.backbone))
        object.__setattr__(self, "head", tuple(int(v) for v in self.head))
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ContractError("input_shape must be three positive integers (W, H, C)")
        if not self.backbone or min(self.backbone) <= 0:
            raise ContractError("backbone needs at least one positive layer width")
        if self.embedding_dim < 2:
            raise ContractError("embedding dimension must be at least 2")
        if not self.head or min(self.head) <= 0 or self.head[-1] != 1:
            raise ContractError("head widths must be positive and end in 1")
        if self.quality_activation not in ("logistic", "identity"):
            raise ContractError(f"unknown quality activation {self.quality_activation!r}")

    @property
    def input_dim(self) -> int:
        w, h, c = self.input_shape
        return w * h * c

    @property
    def embedding_dim(self) -> int:
        return self.backbone[-1]

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.backbone]
        out = list(zip(dims[:-1], dims[1:]))
        hdims = [self.embedding_dim, *self.head]
        return out + list(zip(hdims[:-1], hdims[1:]))

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        for fan_in, fan_out in self.layer_dims():
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "backbone": list(self.backbone),
            "head": list(self.head),
            "quality_activation": self.quality_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(tuple(d["input_shape"]), tuple(d["backbone"]), tuple(d["head"]),
                   d.get("quality_activation", "logistic"))


@dataclass
class ModelParams:
    spec: ArchitectureSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    frozen: bool = False

    def __post_init__(self):
        shapes = self.spec.param_shapes()
        arrays = self.arrays()
        if len(arrays) != len(shapes) or any(a.shape != s for a, s in zip(arrays, shapes)):
            raise ContractError("parameter shapes do not match the architecture")
        if self.frozen:
            self.freeze()

    @property
    def n_backbone(self) -> int:
        return len(self.spec.backbone)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def freeze(self) -> "ModelParams":
        """Mark frozen and make every array read-only."""
        self.frozen = True
        for a in self.arrays():
            a.flags.writeable = False
        return self

    def copy(self, frozen: bool = False) -> "ModelParams":
        return ModelParams(self.spec, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], frozen=frozen)

    @classmethod
    def from_arrays(cls, spec: ArchitectureSpec, arrays, frozen: bool = False) -> "ModelParams":
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        return cls(spec, arrays[0::2], arrays[1::2], frozen=frozen)

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays())


Gradients = list  # list[np.ndarray], same order and shapes as ModelParams.arrays()


def init_params(spec: ArchitectureSpec, rng_seed: int, stream: str = "init") -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    gen = rngmod.stream(rng_seed, stream)
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_dims():
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(gen.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(spec, weights, biases)


@dataclass
class Tape:
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    quality: np.ndarray | None = None
    batched: bool = True


def _check_input(model: ModelParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    x2 = x if batched else x.reshape(1, -1)
    if x2.ndim != 2 or x2.shape[1] != model.spec.input_dim:
        raise ContractError(f"expected input length {model.spec.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x2)):
        raise NumericError("non-finite input to forward")
    return x2, batched


def embed(model: ModelParams, x) -> np.ndarray:
    """Backbone only; returns embeddings (B, d) or (d,)."""
    a, batched = _check_input(model, x)
    nb = model.n_backbone
    for i in range(nb):
        z = a @ model.weights[i] + model.biases[i]
        a = np.maximum(z, 0.0) if i < nb - 1 else z
    return a if batched else a[0]


def forward(model: ModelParams, x):
    """Run backbone and head.

    ``x`` is one flattened image or a batch of them. Returns
    ``(embedding, quality, tape)``; the tape is what :func:`backward` needs.
    """
    a, batched = _check_input(model, x)
    tape = Tape(batched=batched)
    nb = model.n_backbone
    nl = len(model.weights)
    emb = None
    for i in range(nl):
        tape.inputs.append(a)
        z = a @ model.weights[i] + model.biases[i]
        tape.preacts.append(z)
        last_backbone = i == nb - 1
        last = i == nl - 1
        if last:
            a = expit(z) if model.spec.quality_activation == "logistic" else z
        elif last_backbone:
            a = z
            emb = z
        else:
            a = np.maximum(z, 0.0)
    q = a[:, 0]
    tape.quality = q
    if batched:
        return emb, q, tape
    return emb[0], float(q[0]), tape


def backward(model: ModelParams, tape: Tape, d_embedding, d_quality) -> Gradients:
    """Parameter gradients of a scalar loss given its partials w.r.t. the outputs.

    For a batch, the supplied partials are per-sample and the returned
    gradient is their sum over the batch.
    """
    nb = model.n_backbone
    nl = len(model.weights)
    if len(tape.inputs) != nl:
        raise ContractError("tape does not come from a forward pass of this model")
    bsz = tape.inputs[0].shape[0]
    d_e = np.asarray(d_embedding, dtype=np.float64).reshape(bsz, -1)
    d_q = np.asarray(d_quality, dtype=np.float64).reshape(bsz)
    if d_e.shape[1] != model.spec.embedding_dim:
        raise ContractError("embedding gradient has the wrong dimension")

    grads_w = [None] * nl
    grads_b = [None] * nl
    q = tape.quality
    if model.spec.quality_activation == "logistic":
        dz = (d_q * q * (1.0 - q))[:, None]
    else:
        dz = d_q[:, None]
    for i in range(nl - 1, -1, -1):
        grads_w[i] = tape.inputs[i].T @ dz
        grads_b[i] = dz.sum(axis=0)
        if i == 0:
            break
        da = dz @ model.weights[i].T
        if i == nb:
            da = da + d_e
            dz = da  # embedding layer is linear
        else:
            dz = da * (tape.preacts[i - 1] > 0)
    out = []
    for gw, gb in zip(grads_w, grads_b):
        out += [gw, gb]
    return out


def grad_check(model: ModelParams, sample, loss_fn, eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(model, sample)`` must return ``(loss, gradients)``. The error
    denominator is at least ``floor``: with 64-bit losses of order one the
    central difference carries roughly 1e-11 of round-off, so components far
    below ``floor`` have no meaningful relative error.
    """
    work = model.copy()
    _, analytic = loss_fn(work, sample)
    worst = 0.0
    for arr, g in zip(work.arrays(), analytic):
        flat = arr.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            lp, _ = loss_fn(work, sample)
            flat[j] = orig - eps
            lm, _ = loss_fn(work, sample)
            flat[j] = orig
            fd = (lp - lm) / (2 * eps)
            err = abs(gflat[j] - fd) / max(floor, abs(gflat[j]) + abs(fd))
            worst = max(worst, err)
    return worst


def sgd_step(model: ModelParams, grads: Gradients, lr: float) -> None:
    if model.frozen:
        raise FrozenModelError("refusing to update a frozen model")
    arrays = model.arrays()
    if len(grads) != len(arrays) or any(g.shape != a.shape for g, a in zip(grads, arrays)):
        raise ContractError("gradient shapes do not match the model")
    for a, g in zip(arrays, grads):
        a -= lr * g


@dataclass
class SwaState:
    average: list[np.ndarray] | None = None
    count: int = 0
    spec: ArchitectureSpec | None = None


def swa_update(state: SwaState, model: ModelParams) -> SwaState:
    arrays = model.arrays()
    if state.count == 0:
        state.average = [a.astype(np.float64, copy=True) for a in arrays]
        state.spec = model.spec
    else:
        if state.spec != model.spec:
            raise ContractError("SWA snapshot architecture does not match the running average")
        n = state.count
        for avg, a in zip(state.average, arrays):
            avg *= n
            avg += a
            avg /= n + 1
    state.count += 1
    return state


def swa_finalize(state: SwaState) -> ModelParams:
    if state.count == 0:
        raise EmptyAverageError("no SWA snapshots have been taken")
    return ModelParams.from_arrays(state.spec, [a.copy() for a in state.average])
