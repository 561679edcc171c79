"""Per-view vertex classifier: Gaussian-mixture grid convolutions, dense
layers and a softmax head, with exact analytic gradients and Adam.

The convolution generalizes image filtering to the irregular foreground of a
view. Each vertex gathers neighbors within a Chebyshev radius on the scan
grid; neighbor offsets, normalized to [-1, 1]^2, are scored by J learnable
Gaussians. Per Gaussian, the neighborhood signal is averaged with normalized
weights and mixed into output channels:

    out(v) = sum_j M_j^T avg_j(v)
    avg_j(v) = sum_{(y,u)} w_j(u) x(y) / sum_{(y,u)} w_j(u)
    w_j(u) = exp(-0.5 (u - mean_j)^T diag(prec_j) (u - mean_j))

Positive precisions are kept via a softplus reparameterization of stored raw
values. The same parameters are applied to every view (weight sharing), and
everything runs in float64 so gradient checks are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .decompose import View
from .errors import ConfigError, NumericsError, ValidationError
from .fields import ProbabilityField, softmax

PROB_CLAMP = 1e-12


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    return float(y + np.log1p(-np.exp(-y)))


# ---------------------------------------------------------------------------
# Pseudo-coordinates
# ---------------------------------------------------------------------------


@dataclass
class PseudoCoords:
    """Grid neighborhoods of a view, flattened to (center, neighbor) pairs.

    Pairs are sorted by center vertex; ``center_start`` is the CSR-style
    offset array. ``neighbor_order``/``neighbor_start`` provide the same
    segmentation sorted by neighbor, used to scatter gradients back to the
    input signal. Every vertex pairs with itself at offset (0, 0).
    """

    centers: np.ndarray       # (P,)
    neighbors: np.ndarray     # (P,)
    offsets: np.ndarray       # (P, 2) normalized (drow, dcol) / radius
    center_start: np.ndarray  # (N + 1,)
    neighbor_order: np.ndarray
    neighbor_start: np.ndarray
    radius: int

    @property
    def num_vertices(self) -> int:
        return self.center_start.shape[0] - 1

    def pairs_for(self, vertex: int) -> list[tuple[int, tuple[float, float]]]:
        lo, hi = self.center_start[vertex], self.center_start[vertex + 1]
        return [
            (int(self.neighbors[i]), (float(self.offsets[i, 0]), float(self.offsets[i, 1])))
            for i in range(lo, hi)
        ]


def build_pseudo_coords(view: View, radius: int) -> PseudoCoords:
    """Collect grid neighbors within a Chebyshev radius for every view vertex."""
    if view.num_vertices == 0:
        raise ValidationError("cannot build pseudo-coordinates for an empty view")
    if radius < 1:
        raise ValidationError("neighborhood radius must be at least 1")
    rows = view.grid_pos[:, 0]
    cols = view.grid_pos[:, 1]
    n = view.num_vertices
    height = int(rows.max()) + 1
    width = int(cols.max()) + 1
    grid = np.full((height, width), -1, dtype=np.int64)
    grid[rows, cols] = np.arange(n)

    all_centers, all_neighbors, all_offsets = [], [], []
    ids = np.arange(n)
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            nr = rows + dr
            nc = cols + dc
            ok = (nr >= 0) & (nr < height) & (nc >= 0) & (nc < width)
            nb = grid[nr[ok], nc[ok]]
            present = nb >= 0
            count = int(present.sum())
            if count == 0:
                continue
            all_centers.append(ids[ok][present])
            all_neighbors.append(nb[present])
            all_offsets.append(
                np.tile([dr / radius, dc / radius], (count, 1))
            )
    centers = np.concatenate(all_centers)
    neighbors = np.concatenate(all_neighbors)
    offsets = np.vstack(all_offsets)
    order = np.argsort(centers, kind="stable")
    centers = centers[order]
    neighbors = neighbors[order]
    offsets = offsets[order]
    center_start = np.searchsorted(centers, np.arange(n + 1))
    neighbor_order = np.argsort(neighbors, kind="stable")
    neighbor_start = np.searchsorted(neighbors[neighbor_order], np.arange(n + 1))
    return PseudoCoords(
        centers=centers,
        neighbors=neighbors,
        offsets=offsets,
        center_start=center_start,
        neighbor_order=neighbor_order,
        neighbor_start=neighbor_start,
        radius=radius,
    )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class ConvLayer:
    means: np.ndarray          # (J, 2)
    raw_precision: np.ndarray  # (J, 2), softplus -> positive diagonal precision
    mixing: np.ndarray         # (J, C_in, C_out)
    relu: bool = True


@dataclass
class DenseLayer:
    weight: np.ndarray  # (C_in, C_out)
    bias: np.ndarray    # (C_out,)
    relu: bool = True


@dataclass
class ClassifierParams:
    conv_layers: list[ConvLayer] = field(default_factory=list)
    dense_layers: list[DenseLayer] = field(default_factory=list)
    radius: int = 2

    def arrays(self) -> dict[str, np.ndarray]:
        """Named parameter arrays in a stable order."""
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.conv_layers):
            out[f"conv{i}.means"] = layer.means
            out[f"conv{i}.raw_precision"] = layer.raw_precision
            out[f"conv{i}.mixing"] = layer.mixing
        for i, layer in enumerate(self.dense_layers):
            out[f"dense{i}.weight"] = layer.weight
            out[f"dense{i}.bias"] = layer.bias
        return out

    def replace_arrays(self, arrays: dict[str, np.ndarray]) -> "ClassifierParams":
        conv = [
            replace(
                layer,
                means=arrays[f"conv{i}.means"],
                raw_precision=arrays[f"conv{i}.raw_precision"],
                mixing=arrays[f"conv{i}.mixing"],
            )
            for i, layer in enumerate(self.conv_layers)
        ]
        dense = [
            replace(layer, weight=arrays[f"dense{i}.weight"], bias=arrays[f"dense{i}.bias"])
            for i, layer in enumerate(self.dense_layers)
        ]
        return ClassifierParams(conv_layers=conv, dense_layers=dense, radius=self.radius)

    def architecture(self) -> dict:
        return {
            "in_channels": int(self.conv_layers[0].mixing.shape[1]) if self.conv_layers
            else int(self.dense_layers[0].weight.shape[0]),
            "radius": self.radius,
            "conv": [
                {"out_channels": int(l.mixing.shape[2]), "gaussians": int(l.mixing.shape[0])}
                for l in self.conv_layers
            ],
            "dense": [int(l.weight.shape[1]) for l in self.dense_layers],
        }


def parameter_count(params: ClassifierParams) -> int:
    """Exact number of scalar learnables."""
    return int(sum(a.size for a in params.arrays().values()))


def init_params(
    num_classes: int,
    *,
    in_channels: int = 6,
    conv_channels: tuple[int, ...] = (16, 48),
    num_gaussians: int = 8,
    dense_channels: tuple[int, ...] = (128,),
    radius: int = 2,
    seed: int = 0,
) -> ClassifierParams:
    """Seeded initialization of the default architecture family.

    The default (conv 6->16 and 16->48 with 8 Gaussians each, dense 48->128
    and 128->num_classes) has 14,538 learnable scalars for 10 classes.
    """
    if num_classes < 2:
        raise ConfigError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    raw = softplus_inverse(4.0)  # precision 4 <=> Gaussian sigma 0.5 in offset units
    conv_layers = []
    c_in = in_channels
    for c_out in conv_channels:
        conv_layers.append(
            ConvLayer(
                means=rng.uniform(-0.7, 0.7, size=(num_gaussians, 2)),
                raw_precision=np.full((num_gaussians, 2), raw),
                mixing=rng.normal(
                    0.0, np.sqrt(2.0 / (num_gaussians * c_in)),
                    size=(num_gaussians, c_in, c_out),
                ),
                relu=True,
            )
        )
        c_in = c_out
    dense_layers = []
    widths = list(dense_channels) + [num_classes]
    for i, c_out in enumerate(widths):
        last = i == len(widths) - 1
        scale = np.sqrt((1.0 if last else 2.0) / c_in)
        dense_layers.append(
            DenseLayer(
                weight=rng.normal(0.0, scale, size=(c_in, c_out)),
                # small nonzero bias keeps pre-activations off the ReLU kink
                # for vertices whose incoming activations are exactly zero
                bias=0.1 * rng.normal(size=c_out),
                relu=not last,
            )
        )
        c_in = c_out
    return ClassifierParams(conv_layers=conv_layers, dense_layers=dense_layers, radius=radius)


def from_architecture(arch: dict, seed: int = 0) -> ClassifierParams:
    conv = arch.get("conv", [])
    dense = arch["dense"]
    return init_params(
        dense[-1],
        in_channels=arch["in_channels"],
        conv_channels=tuple(l["out_channels"] for l in conv),
        num_gaussians=conv[0]["gaussians"] if conv else 8,
        dense_channels=tuple(dense[:-1]),
        radius=arch["radius"],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _segment_sum(values: np.ndarray, start: np.ndarray) -> np.ndarray:
    # all segments are nonempty (every vertex pairs with itself)
    return np.add.reduceat(values, start[:-1], axis=0)


def _conv_forward_cached(signal: np.ndarray, pc: PseudoCoords, layer: ConvLayer):
    num_gaussians, c_in, _ = layer.mixing.shape
    if signal.shape[1] != c_in:
        raise ConfigError(
            f"conv layer expects {c_in} input channels, got {signal.shape[1]}"
        )
    diff = pc.offsets[:, None, :] - layer.means[None, :, :]          # (P, J, 2)
    precision = softplus(layer.raw_precision)                        # (J, 2)
    weights = np.exp(-0.5 * np.einsum("pjd,jd->pj", diff * diff, precision))
    weight_sum = _segment_sum(weights, pc.center_start)              # (N, J)
    gathered = signal[pc.neighbors]                                  # (P, C_in)
    n = pc.num_vertices
    averages = np.empty((n, num_gaussians, c_in))
    for j in range(num_gaussians):
        averages[:, j, :] = _segment_sum(weights[:, j : j + 1] * gathered, pc.center_start)
    averages /= weight_sum[:, :, None]
    pre = np.einsum("njc,jco->no", averages, layer.mixing)
    out = np.maximum(pre, 0.0) if layer.relu else pre
    cache = {"signal": signal, "weights": weights, "weight_sum": weight_sum,
             "averages": averages, "pre": pre, "precision": precision}
    return out, cache


def conv_forward(signal: np.ndarray, pc: PseudoCoords, layer: ConvLayer) -> np.ndarray:
    """Gaussian-mixture grid convolution of a per-vertex signal."""
    signal = np.asarray(signal, dtype=np.float64)
    return _conv_forward_cached(signal, pc, layer)[0]


def _conv_backward(d_out, pc: PseudoCoords, layer: ConvLayer, cache):
    num_gaussians = layer.mixing.shape[0]
    d_pre = d_out * (cache["pre"] > 0.0) if layer.relu else d_out
    averages = cache["averages"]
    weights = cache["weights"]
    weight_sum = cache["weight_sum"]
    d_mixing = np.einsum("njc,no->jco", averages, d_pre)
    d_avg = np.einsum("no,jco->njc", d_pre, layer.mixing)
    d_total = d_avg / weight_sum[:, :, None]                         # d wrt weighted sums
    d_wsum = -np.einsum("njc,njc->nj", d_avg, averages) / weight_sum
    gathered = cache["signal"][pc.neighbors]
    d_weights = np.empty_like(weights)
    d_signal_pairs = np.zeros_like(gathered)
    for j in range(num_gaussians):
        d_total_j = d_total[:, j, :][pc.centers]                     # (P, C_in)
        d_weights[:, j] = (d_total_j * gathered).sum(axis=1) + d_wsum[pc.centers, j]
        d_signal_pairs += weights[:, j : j + 1] * d_total_j
    d_signal = np.add.reduceat(
        d_signal_pairs[pc.neighbor_order], pc.neighbor_start[:-1], axis=0
    )
    diff = pc.offsets[:, None, :] - layer.means[None, :, :]
    dw_w = d_weights * weights
    d_means = np.einsum("pj,pjd->jd", dw_w, diff) * cache["precision"]
    d_precision = -0.5 * np.einsum("pj,pjd->jd", dw_w, diff * diff)
    d_raw = d_precision * expit(layer.raw_precision)
    grads = {"means": d_means, "raw_precision": d_raw, "mixing": d_mixing}
    return d_signal, grads


def _dense_forward_cached(x: np.ndarray, layer: DenseLayer):
    if x.shape[1] != layer.weight.shape[0]:
        raise ConfigError(
            f"dense layer expects {layer.weight.shape[0]} input channels, got {x.shape[1]}"
        )
    pre = x @ layer.weight + layer.bias
    out = np.maximum(pre, 0.0) if layer.relu else pre
    return out, {"input": x, "pre": pre}


def _dense_backward(d_out, layer: DenseLayer, cache):
    d_pre = d_out * (cache["pre"] > 0.0) if layer.relu else d_out
    grads = {"weight": cache["input"].T @ d_pre, "bias": d_pre.sum(axis=0)}
    return d_pre @ layer.weight.T, grads


def _forward_cached(view: View, params: ClassifierParams, pc: PseudoCoords | None):
    if view.num_vertices == 0:
        raise ValidationError("cannot classify an empty view")
    if pc is None:
        pc = build_pseudo_coords(view, params.radius)
    x = view.signal
    conv_caches = []
    for layer in params.conv_layers:
        x, cache = _conv_forward_cached(x, pc, layer)
        conv_caches.append(cache)
    dense_caches = []
    for layer in params.dense_layers:
        x, cache = _dense_forward_cached(x, layer)
        dense_caches.append(cache)
    probs = softmax(x)
    return probs, pc, conv_caches, dense_caches


def forward(view: View, params: ClassifierParams, pc: PseudoCoords | None = None) -> ProbabilityField:
    """Per-vertex class probabilities for one view.

    Dense layers act per vertex, so vertex order only permutes output rows,
    and identical parameters yield identical rows across views.
    """
    probs, _, _, _ = _forward_cached(view, params, pc)
    return ProbabilityField(values=probs)


def cross_entropy_loss(probabilities, labels: np.ndarray, mask=None) -> float:
    """Mean negative log-probability of the true 1-based labels.

    Probabilities are clamped at 1e-12 before the log. ``mask`` restricts the
    mean to a vertex subset (boolean mask or index array); an empty selection
    is an error.
    """
    values = probabilities.values if isinstance(probabilities, ProbabilityField) else probabilities
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != values.shape[0]:
        raise ValidationError("labels count does not match probability rows")
    if labels.size and (labels.min() < 1 or labels.max() > values.shape[1]):
        raise ValidationError("labels out of class range")
    rows = np.arange(values.shape[0])
    if mask is not None:
        mask = np.asarray(mask)
        rows = rows[mask] if mask.dtype == bool else mask
    if rows.size == 0:
        raise ValidationError("loss mask selects no vertices")
    picked = values[rows, labels[rows] - 1]
    return float(-np.log(np.maximum(picked, PROB_CLAMP)).mean())


def _head_gradient(probs, labels, mask):
    """d loss / d logits of the cross entropy, already mean-scaled.

    Uses the closed form (probs - onehot) / n, which equals the gradient of
    the clamped loss everywhere the clamp is inactive and stays bounded and
    informative when the softmax saturates.
    """
    n = probs.shape[0]
    rows = np.arange(n)
    if mask is not None:
        mask = np.asarray(mask)
        rows = rows[mask] if mask.dtype == bool else mask
    if rows.size == 0:
        raise ValidationError("loss mask selects no vertices")
    d_logits = np.zeros_like(probs)
    d_logits[rows] = probs[rows]
    d_logits[rows, labels[rows] - 1] -= 1.0
    d_logits /= rows.size
    return d_logits


def _backward_through_layers(d_logits, params, pc, conv_caches, dense_caches):
    grads: dict[str, np.ndarray] = {}
    d = d_logits
    for i in range(len(params.dense_layers) - 1, -1, -1):
        d, layer_grads = _dense_backward(d, params.dense_layers[i], dense_caches[i])
        for key, value in layer_grads.items():
            grads[f"dense{i}.{key}"] = value
    for i in range(len(params.conv_layers) - 1, -1, -1):
        d, layer_grads = _conv_backward(d, pc, params.conv_layers[i], conv_caches[i])
        for key, value in layer_grads.items():
            grads[f"conv{i}.{key}"] = value
    return grads, d


def backward(
    view: View,
    params: ClassifierParams,
    labels: np.ndarray,
    mask=None,
    pc: PseudoCoords | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients of the cross entropy for one view.

    Returns ``(loss, grads)`` with gradient arrays named like
    ``ClassifierParams.arrays()``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    probs, pc, conv_caches, dense_caches = _forward_cached(view, params, pc)
    loss = cross_entropy_loss(probs, labels, mask)
    d_logits = _head_gradient(probs, labels, mask)
    grads, _ = _backward_through_layers(d_logits, params, pc, conv_caches, dense_caches)
    return loss, grads


def backward_from_probability_grad(
    view: View,
    params: ClassifierParams,
    d_probs: np.ndarray,
    pc: PseudoCoords | None = None,
) -> dict[str, np.ndarray]:
    """Gradients given an upstream gradient on the output probabilities."""
    probs, pc, conv_caches, dense_caches = _forward_cached(view, params, pc)
    row_dot = (d_probs * probs).sum(axis=1, keepdims=True)
    d_logits = probs * (d_probs - row_dot)
    grads, _ = _backward_through_layers(d_logits, params, pc, conv_caches, dense_caches)
    return grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]


def init_adam_state(arrays: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        step=0,
        first_moment={k: np.zeros_like(v) for k, v in arrays.items()},
        second_moment={k: np.zeros_like(v) for k, v in arrays.items()},
    )


def adam_step(
    arrays: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update over named parameter arrays."""
    if set(arrays) != set(grads):
        missing = set(arrays) ^ set(grads)
        raise ConfigError(f"gradient blocks do not match parameters: {sorted(missing)}")
    step = state.step + 1
    new_arrays: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, value in arrays.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient in parameter block {name!r}")
        m = beta1 * state.first_moment[name] + (1.0 - beta1) * g
        v = beta2 * state.second_moment[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        new_arrays[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_arrays, AdamState(step=step, first_moment=new_m, second_moment=new_v)
