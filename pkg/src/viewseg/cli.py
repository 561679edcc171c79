"""Command-line interface.

Subcommands: synth, decompose, train, infer, eval. Exit codes: 0 success,
2 validation/configuration error, 3 I/O or file-format error. Every command
is reproducible: identical inputs, config and seed give byte-identical
outputs (manifests carry a config hash and no timestamps).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import parameter_count
from .errors import ConfigError, MeshFormatError, ValidationError, ViewsegError
from .mesh import load_mesh, save_mesh, vertex_areas
from .metrics import entropy_map, evaluate
from .pipeline import (
    RunConfig,
    decompose_mesh,
    infer_pipeline,
    load_dataset,
    train_pipeline,
)
from .synth import generate_shape, humanoid_spec, perturb

EXIT_VALIDATION = 2
EXIT_IO = 3

# fixed 10-color palette, indexed by (label - 1) modulo its length
PALETTE = (
    (230, 196, 46),   # yellow
    (60, 160, 75),    # green
    (50, 100, 215),   # blue
    (120, 200, 235),  # light blue
    (240, 130, 40),   # orange
    (150, 90, 30),    # brown
    (215, 45, 40),    # red
    (245, 150, 150),  # light red
    (125, 60, 180),   # purple
    (200, 160, 220),  # light purple
)


def label_colors(labels: np.ndarray) -> np.ndarray:
    palette = np.asarray(PALETTE, dtype=np.uint8)
    return palette[(np.asarray(labels) - 1) % len(palette)]


def entropy_colors(entropy: np.ndarray) -> np.ndarray:
    """Grayscale: dark means high uncertainty."""
    level = np.round(255.0 * (1.0 - np.clip(entropy, 0.0, 1.0))).astype(np.uint8)
    return np.stack([level, level, level], axis=1)


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.from_dict(json.loads(Path(path).read_text()))
    except (TypeError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad config file {path}: {exc}")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _manifest(command: str, config: RunConfig, inputs: list[str], outputs: list[str]) -> dict:
    return {
        "command": command,
        "code_version": __version__,
        "config": config.to_dict(),
        "config_hash": config.hash,
        "inputs": inputs,
        "outputs": outputs,
    }


def _encode_pdf(values: np.ndarray) -> dict:
    return {"shape": list(values.shape), "hex": values.astype("<f8").tobytes().hex()}


def cmd_synth(args) -> int:
    config = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = humanoid_spec(seed=args.seed, density=args.density)
    base = generate_shape(spec)
    outputs = []
    for i in range(args.count):
        mesh = perturb(base, seed=args.seed + i, noise_scale=args.noise)
        name = f"shape_{i:03d}.ply"
        save_mesh(mesh, out / name)
        outputs.append(name)
    (out / "spec.json").write_text(spec.to_json() + "\n")
    _write_json(out / "manifest.json", _manifest("synth", config, [], outputs + ["spec.json"]))
    print(f"wrote {args.count} shapes to {out}")
    return 0


def cmd_decompose(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    mesh = load_mesh(args.mesh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    views = decompose_mesh(mesh, config)
    outputs = []
    for view in views:
        stem = f"view_{view.viewpoint.index:03d}"
        save_mesh(view.mesh, out / f"{stem}.ply")
        _write_json(
            out / f"{stem}.json",
            {
                "t": view.correspondence.tolist(),
                "grid": view.grid_pos.tolist(),
            },
        )
        outputs += [f"{stem}.ply", f"{stem}.json"]
    _write_json(out / "manifest.json", _manifest("decompose", config, [args.mesh], outputs))
    print(f"wrote {len(views)} views to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.epochs is not None:
        config.epochs = args.epochs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(args.data)
    meshes = [mesh for _, mesh in dataset]
    resume = load_checkpoint(args.resume) if args.resume else None
    log_path = out / "train_log.jsonl"
    records: list[dict] = []
    checkpoint = train_pipeline(
        meshes, config, resume=resume, jobs=args.jobs,
        log=lambda record: records.append(record),
    )
    with log_path.open("w") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    save_checkpoint(out / "checkpoint.json", checkpoint)
    _write_json(
        out / "manifest.json",
        _manifest(
            "train", config, [str(p) for p, _ in dataset],
            ["checkpoint.json", "train_log.jsonl"],
        ),
    )
    final = records[-1]["loss"] if records else None
    print(f"trained {checkpoint.step_count} steps; final loss {final}")
    return 0


def cmd_infer(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    if args.config is not None:
        config = _load_config(args.config)
        stored = RunConfig.from_dict(checkpoint.config)
        if config.num_classes != stored.num_classes:
            raise ConfigError(
                f"config has {config.num_classes} classes but checkpoint "
                f"has {stored.num_classes}"
            )
    mesh = load_mesh(args.mesh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = infer_pipeline(mesh, checkpoint, use_crf=not args.no_crf)
    ckpt_hash = checkpoint.config_hash
    _write_json(
        out / "labels.json",
        {
            "labels": result.labels.tolist(),
            "L": int(result.final_pdf.num_classes),
            "config_hash": ckpt_hash,
        },
    )
    _write_json(
        out / "pdf.json",
        {"pdf": _encode_pdf(result.final_pdf.values), "config_hash": ckpt_hash},
    )
    save_mesh(mesh, out / "colored.ply", colors=label_colors(result.labels))
    entropy = entropy_map(result.final_pdf)
    save_mesh(mesh, out / "entropy.ply", colors=entropy_colors(entropy))
    stored = RunConfig.from_dict(checkpoint.config)
    _write_json(
        out / "manifest.json",
        _manifest(
            "infer", stored, [args.mesh, args.checkpoint],
            ["labels.json", "pdf.json", "colored.ply", "entropy.ply"],
        ),
    )
    print(f"wrote labels for {mesh.num_vertices} vertices to {out}")
    return 0


def cmd_eval(args) -> int:
    payload = json.loads(Path(args.pred).read_text())
    pred = np.asarray(payload["labels"], dtype=np.int64)
    num_classes = int(payload.get("L", pred.max()))
    mesh = load_mesh(args.mesh)
    if mesh.labels is None:
        raise ValidationError(f"{args.mesh} carries no ground-truth labels")
    checkpoint = load_checkpoint(args.checkpoint) if args.checkpoint else None
    pred_hash = payload.get("config_hash")
    if checkpoint is not None and pred_hash is not None \
            and pred_hash != checkpoint.config_hash:
        raise ConfigError(
            "prediction and checkpoint come from different configurations"
        )
    report = evaluate(pred, mesh.labels, num_classes, vertex_areas=vertex_areas(mesh))
    output = report.to_dict()
    if checkpoint is not None:
        output["parameter_count"] = parameter_count(checkpoint.classifier)
    text = json.dumps(output, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewseg",
        description="View-based semantic segmentation of triangle meshes",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate labeled toy shapes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--config", default=None, help="JSON config path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("decompose", help="render and export the views of a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("train", help="train classifier and CRF on a labeled dataset")
    p.add_argument("--data", required=True, help="directory of labeled meshes")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment a mesh with a trained checkpoint")
    p.add_argument("--mesh", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--no-crf", action="store_true", help="skip CRF refinement")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted labels against ground truth")
    p.add_argument("--pred", required=True, help="labels JSON file")
    p.add_argument("--mesh", required=True, help="mesh with ground-truth labels")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (MeshFormatError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ConfigError, ViewsegError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
