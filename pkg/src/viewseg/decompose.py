"""Decompose a mesh into grid-structured 3D views rendered from a camera ring.

Conventions
-----------
The camera is orthographic. Its frame is (right, up, forward) with
forward = normalize(look_at - position) and up orthogonalized against it.
Depth is measured along forward from the camera position and is nonnegative
for rendered geometry (fragments behind the camera plane are discarded).

Pixels are indexed (row, col) = (v, u) with row 0 at the top of the image
(decreasing camera-plane y). The square frustum is centered on the projection
of the mesh's bounding-sphere center and spans the sphere with a 5% margin;
pixel centers sample the frustum uniformly.

A range scan stores per-pixel depth (+inf background) and the index of the
source vertex with the largest barycentric coordinate at the hit point (ties
broken toward the lowest vertex index). A view lifts the foreground pixels
back to 3D, connects them over 2x2 pixel blocks whose depth spread stays
below a discontinuity threshold, and carries a per-vertex 6-channel signal
(position, unit normal) plus the map back to source-mesh vertices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .mesh import Mesh, bounding_sphere

RING_RADIUS_SCALE = 1.5
FRUSTUM_MARGIN = 1.05
DISCONTINUITY_FACTOR = 5.0
BACKGROUND = -1


@dataclass
class Viewpoint:
    """Camera placement; ``index`` identifies the view within a ring."""

    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    index: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.look_at = np.asarray(self.look_at, dtype=np.float64).reshape(3)
        self.up = np.asarray(self.up, dtype=np.float64).reshape(3)
        direction = self.look_at - self.position
        norm = np.linalg.norm(direction)
        if norm < 1e-12:
            raise ValidationError("viewpoint position coincides with look_at")
        cross = np.cross(direction / norm, self.up)
        if np.linalg.norm(cross) < 1e-9:
            raise ValidationError("up vector is parallel to the viewing direction")


@dataclass
class RangeScan:
    """Depth image plus per-pixel nearest-source-vertex indices."""

    width: int
    height: int
    depth: np.ndarray       # (height, width), +inf where background
    hit_vertex: np.ndarray  # (height, width), BACKGROUND where no hit

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.hit_vertex = np.asarray(self.hit_vertex, dtype=np.int64)
        if self.depth.shape != (self.height, self.width):
            raise ValidationError("depth grid shape does not match width/height")
        if self.hit_vertex.shape != (self.height, self.width):
            raise ValidationError("hit grid shape does not match width/height")
        finite = np.isfinite(self.depth)
        if not (finite == (self.hit_vertex != BACKGROUND)).all():
            raise ValidationError("depth must be finite exactly where a vertex was hit")
        if finite.any() and self.depth[finite].min() < 0:
            raise ValidationError("camera-frame depths must be nonnegative")

    @property
    def foreground(self) -> np.ndarray:
        return self.hit_vertex != BACKGROUND


@dataclass
class View:
    """Grid-connected sub-mesh of one range scan with its source correspondence."""

    mesh: Mesh
    signal: np.ndarray          # (N, 6): position, unit normal
    correspondence: np.ndarray  # (N,) source-mesh vertex index per view vertex
    grid_pos: np.ndarray        # (N, 2) (row, col) pixel of each view vertex
    viewpoint: Viewpoint
    source_vertex_count: int

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float64).reshape(-1, 6)
        self.correspondence = np.asarray(self.correspondence, dtype=np.int64).reshape(-1)
        self.grid_pos = np.asarray(self.grid_pos, dtype=np.int64).reshape(-1, 2)
        n = self.mesh.num_vertices
        if self.signal.shape[0] != n or self.correspondence.shape[0] != n \
                or self.grid_pos.shape[0] != n:
            raise ValidationError("view arrays disagree on vertex count")
        if n:
            if self.correspondence.min() < 0 or self.correspondence.max() >= self.source_vertex_count:
                raise ValidationError("correspondence references a missing source vertex")
            if not np.array_equal(self.signal[:, :3], self.mesh.vertices):
                raise ValidationError("signal position channels must equal view vertex positions")
            norms = np.linalg.norm(self.signal[:, 3:], axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValidationError("signal normal channels must be unit length")

    @property
    def num_vertices(self) -> int:
        return self.mesh.num_vertices


def camera_frame(vp: Viewpoint) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthonormal (right, up, forward) for a viewpoint."""
    forward = vp.look_at - vp.position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, vp.up)
    right = right / np.linalg.norm(right)
    up = np.cross(right, forward)
    return right, up, forward


def generate_viewpoints(mesh: Mesh, num_views: int, *, axis=(0.0, 1.0, 0.0)) -> list[Viewpoint]:
    """Equi-spaced camera ring around the mesh.

    Cameras sit on a circle of radius 1.5x the bounding-sphere radius,
    centered at the vertex centroid, in the plane orthogonal to ``axis``,
    all looking at the centroid. Consecutive azimuths differ by 360/M degrees.
    """
    if num_views < 1:
        raise ValidationError("need at least one viewpoint")
    center, radius = bounding_sphere(mesh)
    if radius < 1e-12:
        raise ValidationError("mesh has zero spatial extent")
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    a1 = helper - (helper @ axis) * axis
    a1 /= np.linalg.norm(a1)
    a2 = np.cross(axis, a1)
    ring_radius = RING_RADIUS_SCALE * radius
    viewpoints = []
    for m in range(num_views):
        azimuth = 2.0 * np.pi * m / num_views
        position = center + ring_radius * (np.cos(azimuth) * a1 + np.sin(azimuth) * a2)
        viewpoints.append(Viewpoint(position=position, look_at=center, up=axis, index=m))
    return viewpoints


def _frustum(mesh: Mesh, vp: Viewpoint, width: int, height: int):
    """Pixel-center coordinates of the orthographic frustum in the camera plane."""
    right, up, forward = camera_frame(vp)
    center, radius = bounding_sphere(mesh)
    half = FRUSTUM_MARGIN * radius
    rel_center = center - vp.position
    cx = float(rel_center @ right)
    cy = float(rel_center @ up)
    du = 2.0 * half / width
    dv = 2.0 * half / height
    x0 = cx - half + 0.5 * du   # camera-plane x of pixel column 0
    y0 = cy + half - 0.5 * dv   # camera-plane y of pixel row 0 (top)
    return right, up, forward, x0, y0, du, dv


def render_range_scan(mesh: Mesh, vp: Viewpoint, width: int, height: int) -> RangeScan:
    """Software z-buffer rasterization of the mesh from one viewpoint.

    Per pixel, the triangle with the strictly smallest camera-space depth
    wins; both triangle windings are rendered. The hit vertex is the corner
    with the largest barycentric coordinate, ties to the lowest vertex index.
    """
    if width < 2 or height < 2:
        raise ValidationError("scan grids need at least 2x2 pixels")
    right, up, forward, x0, y0, du, dv = _frustum(mesh, vp, width, height)
    rel = mesh.vertices - vp.position
    px = rel @ right
    py = rel @ up
    pz = rel @ forward

    depth = np.full((height, width), np.inf)
    hit = np.full((height, width), BACKGROUND, dtype=np.int64)

    for face in mesh.faces:
        ax, ay, az = px[face[0]], py[face[0]], pz[face[0]]
        bx, by, bz = px[face[1]], py[face[1]], pz[face[1]]
        cx, cy, cz = px[face[2]], py[face[2]], pz[face[2]]
        denom = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(denom) < 1e-30:
            continue  # edge-on or degenerate in projection
        u_lo = max(0, int(np.floor((min(ax, bx, cx) - x0) / du)) - 1)
        u_hi = min(width - 1, int(np.ceil((max(ax, bx, cx) - x0) / du)) + 1)
        v_lo = max(0, int(np.floor((y0 - max(ay, by, cy)) / dv)) - 1)
        v_hi = min(height - 1, int(np.ceil((y0 - min(ay, by, cy)) / dv)) + 1)
        if u_lo > u_hi or v_lo > v_hi:
            continue
        us = x0 + du * np.arange(u_lo, u_hi + 1)
        vs = y0 - dv * np.arange(v_lo, v_hi + 1)
        gx, gy = np.meshgrid(us, vs)
        lb = ((gx - ax) * (cy - ay) - (gy - ay) * (cx - ax)) / denom
        lc = ((bx - ax) * (gy - ay) - (by - ay) * (gx - ax)) / denom
        la = 1.0 - lb - lc
        inside = (la >= 0.0) & (lb >= 0.0) & (lc >= 0.0)
        if not inside.any():
            continue
        frag_depth = la * az + lb * bz + lc * cz
        patch = depth[v_lo : v_hi + 1, u_lo : u_hi + 1]
        wins = inside & (frag_depth >= 0.0) & (frag_depth < patch)
        if not wins.any():
            continue
        bary = np.stack([la, lb, lc], axis=-1)
        ids = np.asarray(face, dtype=np.int64)
        best = bary.max(axis=-1, keepdims=True)
        candidates = np.where(bary == best, ids, np.iinfo(np.int64).max)
        winner = candidates.min(axis=-1)
        patch[wins] = frag_depth[wins]
        hit[v_lo : v_hi + 1, u_lo : u_hi + 1][wins] = winner[wins]

    return RangeScan(width=width, height=height, depth=depth, hit_vertex=hit)


def _view_vertex_normals(num_vertices, vertices, faces, forward):
    """Area-weighted normals on the view mesh; isolated vertices face the camera."""
    acc = np.zeros((num_vertices, 3))
    if len(faces):
        corners = vertices[faces]
        cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        for k in range(3):
            np.add.at(acc, faces[:, k], cross)
    norms = np.linalg.norm(acc, axis=1)
    fallback = norms < 1e-300
    normals = np.empty_like(acc)
    normals[fallback] = -forward
    good = ~fallback
    normals[good] = acc[good] / norms[good, None]
    return normals


def build_view(
    scan: RangeScan,
    mesh: Mesh,
    vp: Viewpoint,
    *,
    depth_threshold: float | None = None,
) -> View:
    """Lift a range scan to a grid-connected 3D view.

    One view vertex per foreground pixel, placed at the back-projected hit
    point. Each 2x2 block of foreground pixels yields two triangles unless the
    block's depth spread exceeds the discontinuity threshold (default: 5x the
    median adjacent-pixel foreground depth difference), which suppresses faces
    bridging silhouettes. Output is deterministic.
    """
    right, up, forward, x0, y0, du, dv = _frustum(mesh, vp, scan.width, scan.height)
    fg = scan.foreground
    rows, cols = np.nonzero(fg)
    n = rows.size
    if n and int(scan.hit_vertex[fg].max()) >= mesh.num_vertices:
        raise ValidationError("scan references vertices missing from the mesh")
    index_map = np.full(fg.shape, -1, dtype=np.int64)
    index_map[rows, cols] = np.arange(n)

    d = scan.depth[rows, cols]
    positions = (
        vp.position
        + (x0 + du * cols)[:, None] * right
        + (y0 - dv * rows)[:, None] * up
        + d[:, None] * forward
    )

    if depth_threshold is None:
        diffs = []
        horizontal = fg[:, :-1] & fg[:, 1:]
        vertical = fg[:-1, :] & fg[1:, :]
        if horizontal.any():
            diffs.append(np.abs(scan.depth[:, :-1][horizontal] - scan.depth[:, 1:][horizontal]))
        if vertical.any():
            diffs.append(np.abs(scan.depth[:-1, :][vertical] - scan.depth[1:, :][vertical]))
        if diffs:
            depth_threshold = DISCONTINUITY_FACTOR * float(np.median(np.concatenate(diffs)))
        else:
            depth_threshold = np.inf

    block = fg[:-1, :-1] & fg[:-1, 1:] & fg[1:, :-1] & fg[1:, 1:]
    faces = np.zeros((0, 3), dtype=np.int64)
    if block.any():
        corners = np.stack(
            [scan.depth[:-1, :-1], scan.depth[:-1, 1:], scan.depth[1:, :-1], scan.depth[1:, 1:]]
        )
        with np.errstate(invalid="ignore"):
            spread = corners.max(axis=0) - corners.min(axis=0)
        good = block & (spread <= depth_threshold)
        br_, bc_ = np.nonzero(good)
        if br_.size:
            tl = index_map[br_, bc_]
            tr = index_map[br_, bc_ + 1]
            bl = index_map[br_ + 1, bc_]
            br = index_map[br_ + 1, bc_ + 1]
            # diagonal tl-br; winding keeps view normals facing the camera
            faces = np.stack(
                [np.stack([tl, bl, br], axis=1), np.stack([tl, br, tr], axis=1)], axis=1
            ).reshape(-1, 3)

    normals = _view_vertex_normals(n, positions, faces, forward)
    view_mesh = Mesh(vertices=positions, faces=faces, normals=normals if n else None)
    signal = np.hstack([positions, normals]) if n else np.zeros((0, 6))
    return View(
        mesh=view_mesh,
        signal=signal,
        correspondence=scan.hit_vertex[rows, cols],
        grid_pos=np.stack([rows, cols], axis=1),
        viewpoint=vp,
        source_vertex_count=mesh.num_vertices,
    )


def decompose_shape(
    mesh: Mesh,
    num_views: int,
    width: int,
    height: int,
    *,
    axis=(0.0, 1.0, 0.0),
    depth_threshold: float | None = None,
) -> list[View]:
    """Render and lift all views of the camera ring; exactly M views returned."""
    views = []
    for vp in generate_viewpoints(mesh, num_views, axis=axis):
        scan = render_range_scan(mesh, vp, width, height)
        views.append(build_view(scan, mesh, vp, depth_threshold=depth_threshold))
    return views
