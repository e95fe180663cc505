"""Depth-specific MLP classifiers with explicit forward/backward passes.

Four affine layers with ReLU in between, softmax output, inverted dropout on
the input features and on every hidden activation. All training arithmetic
is 64-bit so analytic gradients can be checked against central finite
differences at tight tolerances. The per-depth student is trained with SGD
plus momentum and weight decay; the teacher is an exponential moving average
of the student and is the model actually used for pseudo-labels and
evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOGIT_CLIP = 50.0
N_LAYERS = 4


class MlpHead:
    """One classifier head: feature vector in, class probabilities out."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 512, dropout: float = 0.0):
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = hidden
        self.dropout = dropout
        widths = [in_dim] + [hidden] * (N_LAYERS - 1) + [out_dim]
        self.weights = [np.zeros((widths[i], widths[i + 1])) for i in range(N_LAYERS)]
        self.biases = [np.zeros(widths[i + 1]) for i in range(N_LAYERS)]

    def init_params(self, rng: np.random.Generator) -> None:
        """He-uniform fan-in initialization, biases zero."""
        for w in self.weights:
            limit = np.sqrt(6.0 / w.shape[0])
            w[...] = rng.uniform(-limit, limit, w.shape)
        for b in self.biases:
            b[...] = 0.0

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy_from(self, other: "MlpHead") -> None:
        for dst, src in zip(self.parameters(), other.parameters()):
            dst[...] = src

    def clone(self) -> "MlpHead":
        dup = MlpHead(self.in_dim, self.out_dim, self.hidden, self.dropout)
        dup.copy_from(self)
        return dup


def sample_masks(head: MlpHead, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Dropout keep-masks for a batch: input plus each hidden activation."""
    shapes = [(n, head.in_dim)] + [(n, head.hidden)] * (N_LAYERS - 1)
    return [rng.random(shape) >= head.dropout for shape in shapes]


def _softmax_clipped(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    clip_mask = np.abs(logits) < LOGIT_CLIP
    z = np.clip(logits, -LOGIT_CLIP, LOGIT_CLIP)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True), clip_mask


def forward_cached(head: MlpHead, x: np.ndarray, masks: list[np.ndarray] | None) -> dict:
    """Forward pass keeping every intermediate needed for backprop.

    masks=None means evaluation mode (no dropout); in training mode the
    masks are applied with inverted scaling 1/(1 - rate).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    scale = 1.0 / (1.0 - head.dropout) if masks is not None else 1.0
    cache: dict = {"masks": masks, "scale": scale}

    a = x * masks[0] * scale if masks is not None else x
    cache["inputs"] = [a]
    cache["pre_relu"] = []
    for layer in range(N_LAYERS - 1):
        z = a @ head.weights[layer] + head.biases[layer]
        cache["pre_relu"].append(z)
        a = np.maximum(z, 0.0)
        if masks is not None:
            a = a * masks[layer + 1] * scale
        cache["inputs"].append(a)
    logits = a @ head.weights[-1] + head.biases[-1]
    cache["probs"], cache["clip_mask"] = _softmax_clipped(logits)
    return cache


def forward(
    head: MlpHead,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Class probabilities for a batch (or a single vector)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != head.in_dim:
        raise ValueError(f"feature dim {x.shape[1]} != head input dim {head.in_dim}")
    masks = None
    if mode == "train":
        if rng is None:
            raise ValueError("training mode needs a dropout rng")
        masks = sample_masks(head, x.shape[0], rng)
    elif mode != "eval":
        raise ValueError(f"unknown mode {mode!r}")
    probs = forward_cached(head, x, masks)["probs"]
    return probs[0] if single else probs


def backward(head: MlpHead, cache: dict, d_logits: np.ndarray) -> list[np.ndarray]:
    """Gradients w.r.t. all parameters given the loss gradient at the logits."""
    masks, scale = cache["masks"], cache["scale"]
    grads: list[np.ndarray | None] = [None] * (2 * N_LAYERS)
    delta = d_logits * cache["clip_mask"]
    for layer in range(N_LAYERS - 1, -1, -1):
        grads[2 * layer] = cache["inputs"][layer].T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer == 0:
            break
        da = delta @ head.weights[layer].T
        if masks is not None:
            da = da * masks[layer] * scale
        delta = da * (cache["pre_relu"][layer - 1] > 0)
    return grads  # type: ignore[return-value]


def ce_loss_and_grad(
    head: MlpHead,
    x: np.ndarray,
    targets: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    masks: list[np.ndarray] | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Summed soft-target cross-entropy and its parameter gradients.

    `targets` has one row per sample over the head's classes; a row may sum
    to one (a single target), to an integer k (k unit-mass targets merged,
    as when several pseudo-labels supervise the same depth) or to zero (the
    sample contributes nothing at this depth).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[None, :]
    if mode == "train":
        if masks is None:
            if rng is None:
                raise ValueError("training mode needs a dropout rng or frozen masks")
            masks = sample_masks(head, x.shape[0], rng)
    elif mode == "eval":
        masks = None
    else:
        raise ValueError(f"unknown mode {mode!r}")

    cache = forward_cached(head, x, masks)
    p = cache["probs"]
    loss = float(-(targets * np.log(p)).sum())
    d_logits = p * targets.sum(axis=1, keepdims=True) - targets
    return loss, backward(head, cache, d_logits)


def sgd_step(
    params: list[np.ndarray],
    velocities: list[np.ndarray],
    grads: list[np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    scale: float = 1.0,
) -> None:
    """Classic SGD-momentum update, weight decay folded into the gradient.

    v <- mu*v + (scale*g + wd*theta);  theta <- theta - lr*v
    """
    for theta, v, g in zip(params, velocities, grads):
        v *= momentum
        v += scale * g + weight_decay * theta
        theta -= lr * v


def ema_update(teacher: MlpHead, student: MlpHead, momentum: float) -> None:
    """theta_t <- m*theta_t + (1-m)*theta_s, per parameter."""
    for t, s in zip(teacher.parameters(), student.parameters()):
        t *= momentum
        t += (1.0 - momentum) * s


@dataclass
class OptimizerParams:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.001


class DepthHeads:
    """Student/teacher head pairs for every hierarchy depth.

    The teacher starts as a copy of the student and is only ever touched by
    EMA updates; the optimizer state lives here so checkpoints can capture
    the whole training state in one place.
    """

    def __init__(self, hierarchy, feature_dim: int, hidden: int = 512, dropout: float = 0.0):
        self.feature_dim = feature_dim
        self.depths = list(range(1, hierarchy.max_depth + 1))
        self.students = [
            MlpHead(feature_dim, len(hierarchy.depth_space(d)), hidden, dropout) for d in self.depths
        ]
        self.teachers = [head.clone() for head in self.students]
        self.velocities = [[np.zeros_like(p) for p in head.parameters()] for head in self.students]

    def init_params(self, rng: np.random.Generator) -> None:
        for student, teacher in zip(self.students, self.teachers):
            student.init_params(rng)
            teacher.copy_from(student)

    def student(self, d: int) -> MlpHead:
        return self.students[d - 1]

    def teacher(self, d: int) -> MlpHead:
        return self.teachers[d - 1]

    def teacher_forward_all(self, x: np.ndarray) -> list[np.ndarray]:
        """Eval-mode teacher probabilities at every depth."""
        return [forward(t, x, mode="eval") for t in self.teachers]

    def sgd_step(self, d: int, grads: list[np.ndarray], opt: OptimizerParams, scale: float = 1.0) -> None:
        sgd_step(
            self.student(d).parameters(),
            self.velocities[d - 1],
            grads,
            lr=opt.lr,
            momentum=opt.momentum,
            weight_decay=opt.weight_decay,
            scale=scale,
        )

    def ema_update_all(self, momentum: float) -> None:
        for teacher, student in zip(self.teachers, self.students):
            ema_update(teacher, student, momentum)

    def state_dict(self) -> dict:
        return {
            "students": [[p.copy() for p in h.parameters()] for h in self.students],
            "teachers": [[p.copy() for p in h.parameters()] for h in self.teachers],
            "velocities": [[v.copy() for v in vs] for vs in self.velocities],
        }

    def load_state_dict(self, state: dict) -> None:
        for head, params in zip(self.students, state["students"]):
            for dst, src in zip(head.parameters(), params):
                dst[...] = src
        for head, params in zip(self.teachers, state["teachers"]):
            for dst, src in zip(head.parameters(), params):
                dst[...] = src
        for vs, saved in zip(self.velocities, state["velocities"]):
            for dst, src in zip(vs, saved):
                dst[...] = src
