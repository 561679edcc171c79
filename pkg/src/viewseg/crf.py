"""Dense mesh CRF refinement: kernels, energy, mean-field inference, training.

The random field couples every vertex pair through a label-compatibility
matrix times a weighted sum of three kernels evaluated on geodesic distance d
and 6-channel vertex features f = (position, normal):

    near(i, j) = exp(-d(i, j) / sigma_near)          spatial consistency
    far(i, j)  = 1 - exp(-d(i, j) / sigma_far)       long-range disambiguation
    feat(i, j) = exp(-|f(i) - f(j)| / sigma_feat)    feature similarity

The pairwise cost of labels (a, b) at vertices (i, j) is

    compatibility[a, b] * (w_near * near + far_sign * w_far * far + w_feat * feat)

``far_sign`` defaults to -1 (the far kernel is subtracted); the opposite
convention is exposed because the sign only has meaning jointly with the
learned compatibility matrix. Exact minimization of the energy is
intractable, so inference uses mean-field iterations unrolled a fixed number
of times; the same unrolled computation is differentiated to train the
compatibility matrix and the three kernel weights (bandwidths stay fixed).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import cdist

from .aggregate import AggregateResult
from .classifier import AdamState, adam_step, init_adam_state
from .errors import NumericsError, ValidationError
from .fields import ProbabilityField, softmax
from .mesh import Mesh, geodesic_matrix, mesh_diameter, vertex_normals

UNARY_CLAMP = 1e-12


@dataclass
class CrfParams:
    compatibility: np.ndarray  # (L, L), identity at initialization
    weight_near: float = 1.0
    weight_far: float = 1.0
    weight_feat: float = 1.0
    sigma_near: float = 1.0
    sigma_far: float = 1.0
    sigma_feat: float = 1.0
    iterations: int = 5
    far_sign: int = -1
    cutoff: float | None = None

    def __post_init__(self):
        self.compatibility = np.asarray(self.compatibility, dtype=np.float64)
        if self.compatibility.ndim != 2 or \
                self.compatibility.shape[0] != self.compatibility.shape[1]:
            raise ValidationError("compatibility must be a square matrix")
        if min(self.sigma_near, self.sigma_far, self.sigma_feat) <= 0:
            raise ValidationError("kernel bandwidths must be positive")
        if self.iterations < 1:
            raise ValidationError("need at least one mean-field iteration")
        if self.far_sign not in (-1, 1):
            raise ValidationError("far_sign must be -1 or +1")

    @property
    def num_classes(self) -> int:
        return self.compatibility.shape[0]

    def learnable_arrays(self) -> dict[str, np.ndarray]:
        return {
            "compatibility": self.compatibility,
            "weight_near": np.float64(self.weight_near),
            "weight_far": np.float64(self.weight_far),
            "weight_feat": np.float64(self.weight_feat),
        }

    def replace_learnable(self, arrays: dict[str, np.ndarray]) -> "CrfParams":
        return replace(
            self,
            compatibility=arrays["compatibility"],
            weight_near=float(arrays["weight_near"]),
            weight_far=float(arrays["weight_far"]),
            weight_feat=float(arrays["weight_feat"]),
        )


def default_crf_params(
    mesh: Mesh,
    num_classes: int,
    *,
    near_scale: float = 0.05,
    far_scale: float = 0.5,
    feat_scale: float = 0.5,
    iterations: int = 5,
    far_sign: int = -1,
    cutoff: float | None = None,
) -> CrfParams:
    """Identity compatibility, unit weights, bandwidths scaled to the mesh.

    Near/far bandwidths are fractions of the mesh diameter; the feature
    bandwidth is a fraction of the total feature standard deviation.
    """
    diameter = mesh_diameter(mesh)
    features = _mesh_features(mesh)
    feature_std = float(np.sqrt(features.var(axis=0).sum()))
    return CrfParams(
        compatibility=np.eye(num_classes),
        sigma_near=near_scale * diameter,
        sigma_far=far_scale * diameter,
        sigma_feat=max(feat_scale * feature_std, 1e-9),
        iterations=iterations,
        far_sign=far_sign,
        cutoff=cutoff,
    )


@dataclass
class KernelMatrices:
    """Dense pairwise kernels; diagonals keep their natural values
    (near/feat 1, far 0) and are excluded during message passing."""

    near: np.ndarray
    far: np.ndarray
    feat: np.ndarray
    features: np.ndarray  # (N, 6) vertex features used by the feature kernel

    @property
    def num_vertices(self) -> int:
        return self.near.shape[0]


def _mesh_features(mesh: Mesh) -> np.ndarray:
    normals = mesh.normals if mesh.normals is not None else vertex_normals(mesh)
    return np.hstack([mesh.vertices, normals])


def build_kernels(mesh: Mesh, params: CrfParams) -> KernelMatrices:
    """Evaluate the three kernels for every vertex pair.

    Geodesic distances use the mesh edge graph; +inf (disconnected or beyond
    the cutoff) maps to the kernel limits near -> 0, far -> 1.
    """
    distances = geodesic_matrix(mesh, cutoff=params.cutoff)
    features = _mesh_features(mesh)
    with np.errstate(over="ignore"):
        decay_near = np.exp(-distances / params.sigma_near)
        decay_far = np.exp(-distances / params.sigma_far)
    feature_dist = cdist(features, features)
    return KernelMatrices(
        near=decay_near,
        far=1.0 - decay_far,
        feat=np.exp(-feature_dist / params.sigma_feat),
        features=features,
    )


def unary_from_aggregate(agg: AggregateResult) -> np.ndarray:
    """Per-vertex label costs: negative log of the aggregated probabilities."""
    return -np.log(np.maximum(agg.pdf.values, UNARY_CLAMP))


def _combined_kernel(params: CrfParams, kernels: KernelMatrices) -> np.ndarray:
    combined = (
        params.weight_near * kernels.near
        + params.far_sign * params.weight_far * kernels.far
        + params.weight_feat * kernels.feat
    )
    np.fill_diagonal(combined, 0.0)
    return combined


def pairwise_potential(
    label_a: int,
    label_b: int,
    i: int,
    j: int,
    params: CrfParams,
    kernels: KernelMatrices,
) -> float:
    """Joint cost of assigning 1-based labels (label_a, label_b) to (i, j)."""
    if i == j:
        raise ValidationError("pairwise potential is defined for distinct vertices only")
    mix = (
        params.weight_near * kernels.near[i, j]
        + params.far_sign * params.weight_far * kernels.far[i, j]
        + params.weight_feat * kernels.feat[i, j]
    )
    return float(params.compatibility[label_a - 1, label_b - 1] * mix)


def crf_energy(
    labels: np.ndarray,
    unary: np.ndarray,
    params: CrfParams,
    kernels: KernelMatrices,
) -> float:
    """Total energy of a 1-based labeling: unaries plus each unordered pair
    once, the lower vertex index providing the first compatibility argument."""
    labels = np.asarray(labels, dtype=np.int64)
    n, num_classes = unary.shape
    if labels.shape[0] != n:
        raise ValidationError("labeling length does not match unary rows")
    if labels.size and (labels.min() < 1 or labels.max() > num_classes):
        raise ValidationError("labels out of class range")
    energy = float(unary[np.arange(n), labels - 1].sum())
    if n > 1:
        combined = _combined_kernel(params, kernels)
        pair_costs = params.compatibility[labels[:, None] - 1, labels[None, :] - 1] * combined
        energy += float(pair_costs[np.triu_indices(n, k=1)].sum())
    return energy


def _mean_field_forward(unary, params: CrfParams, kernels: KernelMatrices):
    """Run the unrolled updates, keeping per-iteration caches for backprop."""
    combined = _combined_kernel(params, kernels)
    parts = {}
    for name, kernel in (("near", kernels.near), ("far", kernels.far), ("feat", kernels.feat)):
        stripped = kernel.copy()
        np.fill_diagonal(stripped, 0.0)
        parts[name] = stripped
    q = softmax(-unary)
    if not np.isfinite(q).all():
        raise NumericsError("mean-field iteration 0 produced non-finite values")
    history = [{"q": q}]
    for step in range(1, params.iterations + 1):
        per_kernel = {name: parts[name] @ q for name in parts}
        message = (
            params.weight_near * per_kernel["near"]
            + params.far_sign * params.weight_far * per_kernel["far"]
            + params.weight_feat * per_kernel["feat"]
        )
        compat_message = message @ params.compatibility.T
        q = softmax(-unary - compat_message)
        if not np.isfinite(q).all():
            raise NumericsError(f"mean-field iteration {step} produced non-finite values")
        history.append({"q": q, "message": message, "per_kernel": per_kernel})
    return q, combined, history


def mean_field_infer(
    unary: np.ndarray,
    params: CrfParams,
    kernels: KernelMatrices,
) -> ProbabilityField:
    """Approximate the CRF posterior by a fixed number of mean-field updates.

    Starting from the softmax of the negated unaries, each iteration gathers
    kernel-weighted neighbor beliefs (self excluded), mixes them through the
    compatibility matrix, and renormalizes:

        q <- softmax(-unary - (K @ q) @ compatibility^T)
    """
    unary = np.asarray(unary, dtype=np.float64)
    if unary.shape[1] != params.num_classes:
        raise ValidationError("unary columns do not match compatibility size")
    if unary.shape[0] != kernels.num_vertices:
        raise ValidationError("unary rows do not match kernel size")
    q, _, _ = _mean_field_forward(unary, params, kernels)
    return ProbabilityField(values=q)


def map_labeling(q: ProbabilityField) -> np.ndarray:
    """Per-vertex argmax as 1-based labels, ties toward the lower label."""
    return np.argmax(q.values, axis=1).astype(np.int64) + 1


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _softmax_backward(d_q, q):
    row_dot = (d_q * q).sum(axis=1, keepdims=True)
    return q * (d_q - row_dot)


def crf_gradients(
    unary: np.ndarray,
    kernels: KernelMatrices,
    labels: np.ndarray,
    params: CrfParams,
    *,
    with_unary_grad: bool = False,
):
    """Cross-entropy loss of the refined field and its exact gradients.

    Backpropagates through all unrolled iterations with respect to the
    compatibility matrix and the three kernel weights (and optionally the
    unary costs, for joint fine-tuning of the upstream classifier).
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = unary.shape[0]
    q_final, combined, history = _mean_field_forward(unary, params, kernels)
    picked = q_final[np.arange(n), labels - 1]
    loss = float(-np.log(np.maximum(picked, UNARY_CLAMP)).mean())

    # closed-form head gradient (q - onehot)/n: identical to the clamped-loss
    # gradient in the smooth regime, still informative when softmax saturates
    d_logits = q_final.copy()
    d_logits[np.arange(n), labels - 1] -= 1.0
    d_logits /= n

    d_compat = np.zeros_like(params.compatibility)
    d_weights = {"near": 0.0, "far": 0.0, "feat": 0.0}
    d_unary = np.zeros_like(unary)
    for step in range(params.iterations, 0, -1):
        entry = history[step]
        if step < params.iterations:
            d_logits = _softmax_backward(d_q, entry["q"])
        d_unary -= d_logits
        d_message_compat = -d_logits
        d_compat += d_message_compat.T @ entry["message"]
        d_message = d_message_compat @ params.compatibility
        for name, sign in (("near", 1.0), ("far", float(params.far_sign)), ("feat", 1.0)):
            weight_grad = sign * float((d_message * entry["per_kernel"][name]).sum())
            d_weights[name] += weight_grad
        d_q = combined @ d_message  # kernels are symmetric
    d_logits0 = _softmax_backward(d_q, history[0]["q"])
    d_unary -= d_logits0

    grads = {
        "compatibility": d_compat,
        "weight_near": np.float64(d_weights["near"]),
        "weight_far": np.float64(d_weights["far"]),
        "weight_feat": np.float64(d_weights["feat"]),
    }
    if with_unary_grad:
        return loss, grads, d_unary
    return loss, grads


@dataclass
class CrfTrainCase:
    """One training shape: precomputed unaries, kernels and ground truth."""

    unary: np.ndarray
    kernels: KernelMatrices
    labels: np.ndarray


def train_crf(
    cases: list[CrfTrainCase],
    params: CrfParams,
    *,
    steps: int = 100,
    lr: float = 0.001,
    seed: int = 0,
    state: AdamState | None = None,
    on_step=None,
    return_state: bool = False,
):
    """Fit the compatibility matrix and kernel weights by Adam.

    Cases are visited one per step in seeded shuffled passes. Bandwidths,
    iteration count and the far-kernel sign are treated as fixed
    hyperparameters. The input params object is not modified. With
    ``return_state`` the final optimizer state is returned alongside the
    fitted parameters.
    """
    if not cases:
        raise ValidationError("no CRF training cases")
    arrays = params.learnable_arrays()
    if state is None:
        state = init_adam_state(arrays)
    rng = np.random.default_rng(seed)
    order: list[int] = []
    for step in range(steps):
        if not order:
            order = list(rng.permutation(len(cases)))
        case = cases[order.pop(0)]
        current = params.replace_learnable(arrays)
        loss, grads = crf_gradients(case.unary, case.kernels, case.labels, current)
        arrays, state = adam_step(arrays, grads, state, lr=lr)
        if on_step is not None:
            on_step(step, loss)
    fitted = params.replace_learnable(arrays)
    return (fitted, state) if return_state else fitted


def near_affinity(params: CrfParams) -> np.ndarray:
    """Effective short-range attraction between label pairs.

    Negative of the symmetrized compatibility scaled by the near-kernel
    weight: larger values mean the field is happier to see the two labels
    close together. Sign-convention agnostic, since weight and compatibility
    only act through their product.
    """
    sym = 0.5 * (params.compatibility + params.compatibility.T)
    return -params.weight_near * sym
