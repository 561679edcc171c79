"""End-to-end orchestration: configuration, training loops and inference.

Training is stage-wise: the per-view classifier is fitted first, then the CRF
parameters are trained on unaries computed from the frozen classifier. An
optional joint phase backpropagates the refined loss through aggregation into
the classifier (the rendering step itself is not differentiable, so gradients
stop at the view signals).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import classifier as cls
from .aggregate import AggregateResult, project_predictions
from .checkpoint import Checkpoint, config_hash
from .crf import (
    CrfParams,
    CrfTrainCase,
    KernelMatrices,
    build_kernels,
    crf_gradients,
    default_crf_params,
    map_labeling,
    mean_field_infer,
    train_crf,
    unary_from_aggregate,
)
from .decompose import View, decompose_shape
from .errors import ConfigError, ValidationError
from .fields import ProbabilityField
from .mesh import Mesh, load_mesh

DEFAULT_LABEL_NAMES = (
    "head", "torso", "right_arm", "right_hand", "right_leg",
    "right_foot", "left_arm", "left_hand", "left_leg", "left_foot",
)


@dataclass
class CrfConfig:
    iterations: int = 5
    sigma_near_scale: float = 0.05
    sigma_far_scale: float = 0.5
    sigma_feat_scale: float = 0.5
    far_sign: int = -1
    cutoff: float | None = None
    steps: int = 150
    learning_rate: float = 0.001
    # optional (steps, lr) phases; overrides steps/learning_rate when set.
    # The identity-initialized field starts badly scaled on dense meshes, so
    # a coarse-to-fine schedule converges far faster than a single rate.
    lr_schedule: tuple[tuple[int, float], ...] | None = None

    def phases(self) -> list[tuple[int, float]]:
        if self.lr_schedule:
            return [(int(s), float(lr)) for s, lr in self.lr_schedule]
        return [(self.steps, self.learning_rate)]

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "sigma_near_scale": self.sigma_near_scale,
            "sigma_far_scale": self.sigma_far_scale,
            "sigma_feat_scale": self.sigma_feat_scale,
            "far_sign": self.far_sign,
            "cutoff": self.cutoff,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "lr_schedule": [list(p) for p in self.lr_schedule] if self.lr_schedule else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CrfConfig":
        data = dict(data)
        schedule = data.pop("lr_schedule", None)
        return cls(
            lr_schedule=tuple((int(s), float(lr)) for s, lr in schedule) if schedule else None,
            **data,
        )


@dataclass
class RunConfig:
    """Hyperparameters of one run. Defaults: 10 views, learning rate 0.001."""

    num_views: int = 10
    grid_width: int = 128
    grid_height: int = 128
    radius: int = 2
    num_gaussians: int = 8
    conv_channels: tuple[int, ...] = (16, 48)
    dense_channels: tuple[int, ...] = (128,)
    learning_rate: float = 0.001
    epochs: int = 30
    num_classes: int = 10
    label_names: tuple[str, ...] = DEFAULT_LABEL_NAMES
    seed: int = 0
    view_axis: tuple[float, float, float] = (0.0, 1.0, 0.0)
    joint_steps: int = 0
    crf: CrfConfig = field(default_factory=CrfConfig)

    def __post_init__(self):
        counts = (
            self.num_views, self.grid_width, self.grid_height, self.radius,
            self.num_gaussians, self.num_classes, self.crf.iterations,
        )
        if min(counts) < 1:
            raise ConfigError("all count parameters must be at least 1")
        if self.learning_rate <= 0 or self.crf.learning_rate <= 0:
            raise ConfigError("learning rates must be positive")
        if len(self.label_names) != self.num_classes:
            raise ConfigError(
                f"{len(self.label_names)} label names for {self.num_classes} classes"
            )

    def to_dict(self) -> dict:
        return {
            "num_views": self.num_views,
            "grid_width": self.grid_width,
            "grid_height": self.grid_height,
            "radius": self.radius,
            "num_gaussians": self.num_gaussians,
            "conv_channels": list(self.conv_channels),
            "dense_channels": list(self.dense_channels),
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "num_classes": self.num_classes,
            "label_names": list(self.label_names),
            "seed": self.seed,
            "view_axis": list(self.view_axis),
            "joint_steps": self.joint_steps,
            "crf": self.crf.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        crf_data = data.pop("crf", {})
        return cls(
            crf=CrfConfig.from_dict(crf_data),
            **{
                key: tuple(value) if key in ("conv_channels", "dense_channels",
                                             "label_names", "view_axis") else value
                for key, value in data.items()
            },
        )

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def init_classifier(config: RunConfig) -> cls.ClassifierParams:
    return cls.init_params(
        config.num_classes,
        conv_channels=config.conv_channels,
        num_gaussians=config.num_gaussians,
        dense_channels=config.dense_channels,
        radius=config.radius,
        seed=config.seed,
    )


def decompose_mesh(mesh: Mesh, config: RunConfig) -> list[View]:
    return decompose_shape(
        mesh, config.num_views, config.grid_width, config.grid_height,
        axis=config.view_axis,
    )


def _map_jobs(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def view_ground_truth(mesh: Mesh, view: View) -> np.ndarray:
    """Transfer source-mesh labels to a view via its correspondence."""
    if mesh.labels is None:
        raise ValidationError("mesh has no labels")
    return mesh.labels[view.correspondence]


def compute_aggregate(
    views: list[View],
    params: cls.ClassifierParams,
    num_vertices: int,
    num_classes: int,
    pcs: list | None = None,
) -> AggregateResult:
    """Classify every nonempty view and pool predictions onto the source mesh."""
    pdfs = []
    used = []
    for i, view in enumerate(views):
        if view.num_vertices == 0:
            continue
        pc = pcs[i] if pcs is not None else None
        pdfs.append(cls.forward(view, params, pc))
        used.append(view)
    return project_predictions(pdfs, used, num_vertices, num_classes)


@dataclass
class PreparedShape:
    mesh: Mesh
    views: list[View]
    pcs: list
    view_labels: list[np.ndarray]


def prepare_shape(mesh: Mesh, config: RunConfig, *, with_labels: bool = True) -> PreparedShape:
    views = decompose_mesh(mesh, config)
    pcs = [
        cls.build_pseudo_coords(view, config.radius) if view.num_vertices else None
        for view in views
    ]
    labels = [
        view_ground_truth(mesh, view) if with_labels and view.num_vertices else None
        for view in views
    ]
    return PreparedShape(mesh=mesh, views=views, pcs=pcs, view_labels=labels)


def train_pipeline(
    meshes: list[Mesh],
    config: RunConfig,
    *,
    resume: Checkpoint | None = None,
    log=None,
    jobs: int = 1,
) -> Checkpoint:
    """Stage-wise training over labeled meshes; returns a full checkpoint.

    With epochs == 0 the returned checkpoint is the bare initialization and
    nothing is logged. ``log`` is called with dicts
    {"epoch", "step", "loss", "stage"}.
    """
    if not meshes:
        raise ValidationError("no training meshes")
    for i, mesh in enumerate(meshes):
        if mesh.labels is None:
            raise ValidationError(f"training mesh {i} has no labels")
        if mesh.labels.max() > config.num_classes:
            raise ValidationError(f"training mesh {i} has labels above num_classes")

    if resume is not None:
        if resume.config_hash != config.hash:
            raise ConfigError("checkpoint was produced with a different configuration")
        params = resume.classifier
        state = resume.classifier_state
        crf_params = resume.crf
        crf_state = resume.crf_state
        step = resume.step_count
    else:
        params = init_classifier(config)
        state = cls.init_adam_state(params.arrays())
        crf_params = None  # sigmas resolved against the first training mesh below
        crf_state = None
        step = 0

    if crf_params is None:
        crf_params = default_crf_params(
            meshes[0],
            config.num_classes,
            near_scale=config.crf.sigma_near_scale,
            far_scale=config.crf.sigma_far_scale,
            feat_scale=config.crf.sigma_feat_scale,
            iterations=config.crf.iterations,
            far_sign=config.crf.far_sign,
            cutoff=config.crf.cutoff,
        )
        crf_state = cls.init_adam_state(crf_params.learnable_arrays())

    if config.epochs == 0:
        return Checkpoint(
            classifier=params, classifier_state=state,
            crf=crf_params, crf_state=crf_state,
            step_count=step, config=config.to_dict(),
        )

    prepared = _map_jobs(lambda m: prepare_shape(m, config), meshes, jobs)
    pairs = [
        (si, vi)
        for si, shape in enumerate(prepared)
        for vi in range(len(shape.views))
        if shape.views[vi].num_vertices > 0
    ]
    if not pairs:
        raise ValidationError("all views are empty; check grid resolution")

    rng = np.random.default_rng(config.seed)
    arrays = params.arrays()
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        for k in order:
            si, vi = pairs[k]
            shape = prepared[si]
            current = params.replace_arrays(arrays)
            loss, grads = cls.backward(
                shape.views[vi], current, shape.view_labels[vi], pc=shape.pcs[vi]
            )
            arrays, state = cls.adam_step(arrays, grads, state, lr=config.learning_rate)
            step += 1
            if log is not None:
                log({"epoch": epoch, "step": step, "loss": loss, "stage": "viewnet"})
    params = params.replace_arrays(arrays)

    cases = []
    phases = [(s, lr) for s, lr in config.crf.phases() if s > 0]
    if phases:
        kernel_list = _map_jobs(
            lambda shape: build_kernels(shape.mesh, crf_params), prepared, jobs
        )
        for shape, kernels in zip(prepared, kernel_list):
            agg = compute_aggregate(
                shape.views, params, shape.mesh.num_vertices, config.num_classes,
                pcs=shape.pcs,
            )
            cases.append(
                CrfTrainCase(
                    unary=unary_from_aggregate(agg),
                    kernels=kernels,
                    labels=shape.mesh.labels,
                )
            )
        crf_step = 0

        def log_crf(_, loss):
            nonlocal step, crf_step
            step += 1
            crf_step += 1
            if log is not None:
                log({
                    "epoch": config.epochs + (crf_step - 1) // len(cases),
                    "step": step, "loss": loss, "stage": "crf",
                })

        for phase_index, (phase_steps, phase_lr) in enumerate(phases):
            # fresh optimizer state per phase: the loss landscape changes
            # scale drastically as the field leaves its saturated start
            crf_params, crf_state = train_crf(
                cases, crf_params, steps=phase_steps, lr=phase_lr,
                seed=config.seed + 1 + phase_index, on_step=log_crf,
                return_state=True,
            )

    if config.joint_steps > 0:
        params, state, crf_params, crf_state, step = _joint_finetune(
            prepared, params, state, crf_params, crf_state, config, step, log,
            kernels_by_shape=[case.kernels for case in cases] if cases else None,
        )

    return Checkpoint(
        classifier=params, classifier_state=state,
        crf=crf_params, crf_state=crf_state,
        step_count=step, config=config.to_dict(),
    )


def _joint_finetune(
    prepared, params, state, crf_params, crf_state, config, step, log,
    *, kernels_by_shape=None,
):
    """Backpropagate the refined loss through aggregation into the classifier."""
    if kernels_by_shape is None:
        kernels_by_shape = [build_kernels(shape.mesh, crf_params) for shape in prepared]
    arrays = params.arrays()
    crf_arrays = crf_params.learnable_arrays()
    rng = np.random.default_rng(config.seed + 2)
    order: list[int] = []
    for local_step in range(config.joint_steps):
        if not order:
            order = list(rng.permutation(len(prepared)))
        si = order.pop(0)
        shape = prepared[si]
        current = params.replace_arrays(arrays)
        current_crf = crf_params.replace_learnable(crf_arrays)
        agg = compute_aggregate(
            shape.views, current, shape.mesh.num_vertices, config.num_classes,
            pcs=shape.pcs,
        )
        unary = unary_from_aggregate(agg)
        loss, crf_grads, d_unary = crf_gradients(
            unary, kernels_by_shape[si], shape.mesh.labels, current_crf,
            with_unary_grad=True,
        )
        g = agg.pdf.values
        d_g = np.where(g > 1e-12, -d_unary / np.maximum(g, 1e-12), 0.0)
        grads_total = None
        for vi, view in enumerate(shape.views):
            if view.num_vertices == 0:
                continue
            d_view = d_g[view.correspondence] / agg.coverage[view.correspondence, None]
            grads = cls.backward_from_probability_grad(
                view, current, d_view, pc=shape.pcs[vi]
            )
            if grads_total is None:
                grads_total = grads
            else:
                grads_total = {k: grads_total[k] + grads[k] for k in grads_total}
        arrays, state = cls.adam_step(arrays, grads_total, state, lr=config.learning_rate)
        crf_arrays, crf_state = cls.adam_step(
            crf_arrays, crf_grads, crf_state, lr=config.crf.learning_rate
        )
        step += 1
        if log is not None:
            log({
                "epoch": config.epochs + local_step // max(len(prepared), 1),
                "step": step, "loss": loss, "stage": "joint",
            })
    return (
        params.replace_arrays(arrays), state,
        crf_params.replace_learnable(crf_arrays), crf_state, step,
    )


@dataclass
class InferenceResult:
    views: list[View]
    aggregate: AggregateResult
    refined: ProbabilityField | None
    labels: np.ndarray

    @property
    def final_pdf(self) -> ProbabilityField:
        return self.refined if self.refined is not None else self.aggregate.pdf


def infer_pipeline(
    mesh: Mesh,
    checkpoint: Checkpoint,
    *,
    use_crf: bool = True,
) -> InferenceResult:
    """Decompose, classify, aggregate and (optionally) refine one mesh."""
    config = RunConfig.from_dict(checkpoint.config)
    views = decompose_mesh(mesh, config)
    agg = compute_aggregate(
        views, checkpoint.classifier, mesh.num_vertices, config.num_classes
    )
    refined = None
    if use_crf:
        kernels = build_kernels(mesh, checkpoint.crf)
        refined = mean_field_infer(unary_from_aggregate(agg), checkpoint.crf, kernels)
    labels = map_labeling(refined if refined is not None else agg.pdf)
    return InferenceResult(views=views, aggregate=agg, refined=refined, labels=labels)


def load_dataset(directory) -> list[tuple[Path, Mesh]]:
    """Load every PLY/OBJ mesh in a directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    paths = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in (".ply", ".obj")
    )
    if not paths:
        raise ValidationError(f"no mesh files found in {directory}")
    return [(p, load_mesh(p)) for p in paths]
