"""Deterministic labeled toy shapes built from primitive parts.

Shapes are unions of spheres, capsules and axis-aligned boxes. Each part is
watertight on its own and every vertex is labeled by the part that generated
it; when parts overlap, the later part in the list claims vertices of earlier
parts that fall inside its volume, so label boundaries follow part
intersections.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .mesh import Mesh, edge_lengths, vertex_normals


@dataclass
class Part:
    """One primitive: kind is "sphere", "capsule" or "box".

    sphere: center + radius. capsule: start/end segment + radius.
    box: center + size (full extents, axis-aligned).
    """

    kind: str
    label: int
    center: tuple | None = None
    radius: float = 0.0
    start: tuple | None = None
    end: tuple | None = None
    size: tuple | None = None

    def __post_init__(self):
        if self.label < 1:
            raise ValidationError("part labels are 1-based")
        if self.kind == "sphere":
            if self.center is None or self.radius <= 0:
                raise ValidationError("sphere needs center and positive radius")
        elif self.kind == "capsule":
            if self.start is None or self.end is None or self.radius <= 0:
                raise ValidationError("capsule needs start, end and positive radius")
        elif self.kind == "box":
            if self.center is None or self.size is None or min(self.size) <= 0:
                raise ValidationError("box needs center and positive size")
        else:
            raise ValidationError(f"unknown part kind {self.kind!r}")

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of points inside the (optionally inflated) volume."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self.kind == "sphere":
            return np.linalg.norm(p - np.asarray(self.center), axis=1) <= self.radius + margin
        if self.kind == "capsule":
            a = np.asarray(self.start, dtype=np.float64)
            b = np.asarray(self.end, dtype=np.float64)
            axis = b - a
            denom = float(axis @ axis)
            t = np.clip((p - a) @ axis / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(p))
            closest = a + t[:, None] * axis
            return np.linalg.norm(p - closest, axis=1) <= self.radius + margin
        half = np.asarray(self.size, dtype=np.float64) / 2.0 + margin
        return (np.abs(p - np.asarray(self.center)) <= half).all(axis=1)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "label": self.label}
        for key in ("center", "radius", "start", "end", "size"):
            value = getattr(self, key)
            if key == "radius" and self.kind == "box":
                continue
            if value is not None:
                out[key] = list(value) if isinstance(value, (tuple, list)) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Part":
        kwargs = dict(data)
        for key in ("center", "start", "end", "size"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class ShapeSpec:
    seed: int
    parts: list[Part] = field(default_factory=list)
    density: float = 1.0

    def __post_init__(self):
        if len(self.parts) < 2:
            raise ValidationError("a shape spec needs at least 2 parts")
        if len({p.label for p in self.parts}) < 2:
            raise ValidationError("a shape spec needs at least 2 distinct labels")
        if self.density <= 0:
            raise ValidationError("density must be positive")

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "density": self.density,
             "parts": [p.to_dict() for p in self.parts]},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ShapeSpec":
        data = json.loads(text)
        return cls(
            seed=data["seed"],
            density=data.get("density", 1.0),
            parts=[Part.from_dict(p) for p in data["parts"]],
        )


# ---------------------------------------------------------------------------
# Primitive tessellations
# ---------------------------------------------------------------------------


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v, axis=1)[:, None]
    f = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int64,
    )
    return v, f


def _icosphere(center, radius: float, subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    vertices, faces = _icosahedron()
    vertices = [tuple(v) for v in vertices]
    for _ in range(subdivisions):
        midpoint_cache: dict[tuple[int, int], int] = {}
        new_faces = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint_cache:
                m = np.asarray(vertices[i]) + np.asarray(vertices[j])
                m /= np.linalg.norm(m)
                midpoint_cache[key] = len(vertices)
                vertices.append(tuple(m))
            return midpoint_cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.asarray(new_faces, dtype=np.int64)
    out = np.asarray(vertices, dtype=np.float64) * radius + np.asarray(center, dtype=np.float64)
    return out, np.asarray(faces, dtype=np.int64)


def _capsule(start, end, radius: float, segments: int, rings: int) -> tuple[np.ndarray, np.ndarray]:
    """UV capsule around the start-end segment: two hemispheres + cylinder."""
    a = np.asarray(start, dtype=np.float64)
    b = np.asarray(end, dtype=np.float64)
    axis = b - a
    length = float(np.linalg.norm(axis))
    if length < 1e-12:
        raise ValidationError("capsule endpoints coincide")
    z = axis / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)

    vertices = [tuple(a - radius * z)]  # bottom pole
    ring_rows = []
    # ring profile as (ring radius, axial position): bottom hemisphere from
    # near the pole to the equator, cylinder wall, top hemisphere up to (but
    # not including) the top pole
    profile = []
    for i in range(1, rings + 1):
        theta = math.pi / 2 * i / rings
        profile.append((radius * math.sin(theta), -radius * math.cos(theta)))
    for i in range(1, rings):
        profile.append((radius, length * i / rings))
    for i in range(rings):
        theta = math.pi / 2 * i / rings
        profile.append((radius * math.cos(theta), length + radius * math.sin(theta)))
    for r, h in profile:
        row = []
        for s in range(segments):
            ang = 2 * math.pi * s / segments
            p = a + z * h + (x * math.cos(ang) + y * math.sin(ang)) * r
            row.append(len(vertices))
            vertices.append(tuple(p))
        ring_rows.append(row)
    top_pole = len(vertices)
    vertices.append(tuple(b + radius * z))

    # winding chosen so face normals point out of the solid
    faces = []
    first = ring_rows[0]
    for s in range(segments):
        faces.append((0, first[(s + 1) % segments], first[s]))
    for r0, r1 in zip(ring_rows[:-1], ring_rows[1:]):
        for s in range(segments):
            s1 = (s + 1) % segments
            faces.append((r0[s], r1[s1], r1[s]))
            faces.append((r0[s], r0[s1], r1[s1]))
    last = ring_rows[-1]
    for s in range(segments):
        faces.append((last[s], last[(s + 1) % segments], top_pole))
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def _box(center, size, divisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box with each side split into divisions^2 quads, welded."""
    n = max(1, divisions)
    half = np.asarray(size, dtype=np.float64) / 2.0
    center = np.asarray(center, dtype=np.float64)
    index: dict[tuple[int, int, int], int] = {}
    vertices: list[tuple] = []

    def vid(i, j, k):
        key = (i, j, k)
        if key not in index:
            index[key] = len(vertices)
            p = center + half * (2 * np.array([i, j, k], dtype=np.float64) / n - 1.0)
            vertices.append(tuple(p))
        return index[key]

    faces = []

    def emit(grid_fn, flip):
        for u in range(n):
            for v in range(n):
                q = [grid_fn(u, v), grid_fn(u + 1, v), grid_fn(u + 1, v + 1), grid_fn(u, v + 1)]
                tris = [(q[0], q[1], q[2]), (q[0], q[2], q[3])]
                if flip:
                    tris = [(t[0], t[2], t[1]) for t in tris]
                faces.extend(tris)

    emit(lambda u, v: vid(n, u, v), flip=False)   # +x
    emit(lambda u, v: vid(0, u, v), flip=True)    # -x
    emit(lambda u, v: vid(v, n, u), flip=False)   # +y
    emit(lambda u, v: vid(v, 0, u), flip=True)    # -y
    emit(lambda u, v: vid(u, v, n), flip=False)   # +z
    emit(lambda u, v: vid(u, v, 0), flip=True)    # -z
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def _tessellate(part: Part, density: float) -> tuple[np.ndarray, np.ndarray]:
    if part.kind == "sphere":
        subdiv = max(1, round(2 * math.sqrt(density)))
        return _icosphere(part.center, part.radius, subdiv)
    if part.kind == "capsule":
        segments = max(6, round(12 * math.sqrt(density)))
        rings = max(3, round(4 * math.sqrt(density)))
        return _capsule(part.start, part.end, part.radius, segments, rings)
    divisions = max(2, round(3 * math.sqrt(density)))
    return _box(part.center, part.size, divisions)


def generate_shape(spec: ShapeSpec) -> Mesh:
    """Tessellate every part, concatenate, and label vertices by part.

    Later parts claim vertices of earlier parts falling inside their volume.
    Output is deterministic for a given spec.
    """
    all_vertices = []
    all_faces = []
    part_index = []
    offset = 0
    for i, part in enumerate(spec.parts):
        v, f = _tessellate(part, spec.density)
        all_vertices.append(v)
        all_faces.append(f + offset)
        part_index.append(np.full(len(v), i, dtype=np.int64))
        offset += len(v)
    vertices = np.vstack(all_vertices)
    faces = np.vstack(all_faces)
    part_index = np.concatenate(part_index)
    labels = np.array([spec.parts[i].label for i in part_index], dtype=np.int64)
    for j, part in enumerate(spec.parts):
        claim = (part_index < j) & part.contains(vertices)
        labels[claim] = part.label
    mesh = Mesh(vertices=vertices, faces=faces, labels=labels)
    normals = vertex_normals(mesh)
    return Mesh(vertices=vertices, faces=faces, normals=normals, labels=labels)


def perturb(mesh: Mesh, seed: int, noise_scale: float) -> Mesh:
    """Jitter vertices along their normals, preserving labels.

    Displacement magnitude is bounded by noise_scale times the mean edge
    length. Deterministic for a given seed.
    """
    if noise_scale < 0:
        raise ValidationError("noise_scale must be nonnegative")
    if noise_scale == 0:
        return mesh
    normals = mesh.normals if mesh.normals is not None else vertex_normals(mesh)
    bound = noise_scale * float(edge_lengths(mesh).mean())
    rng = np.random.default_rng(seed)
    displacement = rng.uniform(-bound, bound, size=mesh.num_vertices)
    vertices = mesh.vertices + displacement[:, None] * normals
    out = Mesh(vertices=vertices, faces=mesh.faces, labels=mesh.labels)
    return Mesh(
        vertices=vertices, faces=mesh.faces, normals=vertex_normals(out), labels=mesh.labels
    )


HUMANOID_LABEL_NAMES = (
    "head", "torso", "right_arm", "right_hand", "right_leg",
    "right_foot", "left_arm", "left_hand", "left_leg", "left_foot",
)


def humanoid_spec(seed: int = 0, density: float = 1.0) -> ShapeSpec:
    """T-pose figure with 10 labeled parts (right side at negative x)."""
    parts = [
        Part("sphere", 1, center=(0.0, 1.42, 0.0), radius=0.14),
        Part("capsule", 2, start=(0.0, 0.50, 0.0), end=(0.0, 1.15, 0.0), radius=0.16),
        Part("capsule", 3, start=(-0.18, 1.08, 0.0), end=(-0.62, 1.08, 0.0), radius=0.055),
        Part("sphere", 4, center=(-0.70, 1.08, 0.0), radius=0.07),
        Part("capsule", 5, start=(-0.10, 0.52, 0.0), end=(-0.10, 0.08, 0.0), radius=0.065),
        Part("box", 6, center=(-0.10, 0.035, 0.05), size=(0.09, 0.07, 0.22)),
        Part("capsule", 7, start=(0.18, 1.08, 0.0), end=(0.62, 1.08, 0.0), radius=0.055),
        Part("sphere", 8, center=(0.70, 1.08, 0.0), radius=0.07),
        Part("capsule", 9, start=(0.10, 0.52, 0.0), end=(0.10, 0.08, 0.0), radius=0.065),
        Part("box", 10, center=(0.10, 0.035, 0.05), size=(0.09, 0.07, 0.22)),
    ]
    return ShapeSpec(seed=seed, parts=parts, density=density)
