"""Template mesh, coarse/full resolution maps, joint regressor and mesh I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ParseError, ShapeError, ValidationError


@dataclass
class TemplateMesh:
    """Rest-pose mesh at full and coarse resolution.

    ``downsample_map`` (M x M_full) picks each coarse vertex out of the full
    mesh; ``upsample_map`` (M_full x M) assigns every full vertex its nearest
    coarse vertex. ``downsample_map @ upsample_map`` is the identity.
    """

    full_vertices: np.ndarray
    faces: np.ndarray
    coarse_vertices: np.ndarray
    coarse_faces: np.ndarray | None
    downsample_map: np.ndarray
    upsample_map: np.ndarray
    coarse_indices: np.ndarray

    @property
    def n_full(self) -> int:
        return self.full_vertices.shape[0]

    @property
    def n_coarse(self) -> int:
        return self.coarse_vertices.shape[0]

    def validate(self) -> None:
        d = self.downsample_map
        if d.shape != (self.n_coarse, self.n_full):
            raise ShapeError(f"downsample_map shape {d.shape} != ({self.n_coarse}, {self.n_full})")
        if (d < 0).any() or not np.allclose(d.sum(axis=1), 1.0, atol=1e-6):
            raise ValidationError("downsample_map rows must be nonnegative and sum to 1")
        if self.n_coarse > self.n_full:
            raise ValidationError("coarse mesh has more vertices than the full mesh")
        _check_faces(self.faces, self.n_full)
        if self.coarse_faces is not None:
            _check_faces(self.coarse_faces, self.n_coarse)
            if np.setdiff1d(np.arange(self.n_coarse), self.coarse_faces).size:
                raise ValidationError("coarse vertex not referenced by any face")


@dataclass
class JointRegressor:
    """K x M_full matrix whose rows are affine weights over mesh vertices."""

    G: np.ndarray

    def __post_init__(self):
        self.G = np.asarray(self.G, dtype=np.float64)
        if self.G.ndim != 2:
            raise ShapeError(f"regressor must be 2-D, got {self.G.shape}")
        if not np.allclose(self.G.sum(axis=1), 1.0, atol=1e-6):
            raise ValidationError("regressor rows must sum to 1")

    @property
    def n_joints(self) -> int:
        return self.G.shape[0]


def _check_faces(faces: np.ndarray, n: int) -> None:
    if faces.size and (faces.min() < 0 or faces.max() >= n):
        raise ValidationError(f"face index out of range for {n} vertices")


# --------------------------------------------------------------------------
# OBJ

def load_obj(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Read ``v`` and ``f`` records; polygons are fan-triangulated.

    Face tokens may carry ``/vt/vn`` suffixes (ignored). Negative indices
    count back from the last vertex, as in the format definition.
    """
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ParseError("vertex record needs 3 coordinates", lineno)
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise ParseError(f"bad vertex coordinate in {line.strip()!r}", lineno) from None
            elif tag == "f":
                if len(parts) < 4:
                    raise ParseError("face record needs at least 3 vertices", lineno)
                try:
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                except ValueError:
                    raise ParseError(f"bad face index in {line.strip()!r}", lineno) from None
                resolved = []
                for i in idx:
                    if i == 0:
                        raise ParseError("face index 0 is invalid (indices are 1-based)", lineno)
                    resolved.append(i - 1 if i > 0 else len(verts) + i)
                for a, b in zip(resolved[1:-1], resolved[2:]):
                    faces.append((resolved[0], a, b))
            elif tag in ("vt", "vn", "vp", "o", "g", "s", "usemtl", "mtllib", "l"):
                continue
            else:
                raise ParseError(f"unknown record type {tag!r}", lineno)
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    _check_faces(f, len(v))
    return v, f


def save_obj(path: str | os.PathLike, vertices: np.ndarray, faces: np.ndarray | None = None) -> None:
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ShapeError(f"vertices must be (n, 3), got {vertices.shape}")
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    if faces is not None:
        faces = np.asarray(faces)
        _check_faces(faces, len(vertices))
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# regressor CSV

def save_regressor(path: str | os.PathLike, reg: JointRegressor) -> None:
    K, M = reg.G.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#rows={K} cols={M}\n")
        for row in reg.G:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def load_regressor(path: str | os.PathLike) -> JointRegressor:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        try:
            fields = dict(kv.split("=") for kv in header.lstrip("#").split())
            K, M = int(fields["rows"]), int(fields["cols"])
        except (ValueError, KeyError):
            raise ParseError(f"bad regressor header {header!r}", 1) from None
        rows = []
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            try:
                rows.append([float(x) for x in line.split(",")])
            except ValueError:
                raise ParseError("non-numeric regressor entry", lineno) from None
            if len(rows[-1]) != M:
                raise ParseError(f"expected {M} columns, got {len(rows[-1])}", lineno)
    if len(rows) != K:
        raise ParseError(f"expected {K} rows, got {len(rows)}")
    return JointRegressor(np.asarray(rows))


# --------------------------------------------------------------------------
# coarsening

def farthest_point_indices(points: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point order; ties resolve to the lowest index."""
    n = len(points)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(points - points[start], axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def build_coarse(full_vertices: np.ndarray, faces: np.ndarray, target_m: int) -> TemplateMesh:
    """Farthest-point sample ``target_m`` vertices starting from vertex 0.

    Coarse faces come from vertex clustering: each full face is relabelled
    with the nearest coarse vertex of its corners and kept if the three
    labels differ. They are dropped (``None``) if some coarse vertex ends up
    in no face.
    """
    full_vertices = np.asarray(full_vertices, dtype=np.float64)
    n = len(full_vertices)
    if target_m < 4:
        raise ValidationError(f"target_m must be at least 4, got {target_m}")
    if target_m > n:
        raise ValidationError(f"target_m={target_m} exceeds the {n} template vertices")
    idx = farthest_point_indices(full_vertices, target_m)
    down = np.zeros((target_m, n))
    down[np.arange(target_m), idx] = 1.0
    coarse = full_vertices[idx]

    d2 = ((full_vertices[:, None, :] - coarse[None, :, :]) ** 2).sum(-1)
    nearest = np.argmin(d2, axis=1)
    nearest[idx] = np.arange(target_m)
    up = np.zeros((n, target_m))
    up[np.arange(n), nearest] = 1.0

    cf = None
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces):
        lab = nearest[faces]
        keep = (lab[:, 0] != lab[:, 1]) & (lab[:, 1] != lab[:, 2]) & (lab[:, 0] != lab[:, 2])
        lab = lab[keep]
        if len(lab):
            canon = np.sort(lab, axis=1)
            _, first = np.unique(canon, axis=0, return_index=True)
            lab = lab[np.sort(first)]
            if not np.setdiff1d(np.arange(target_m), lab).size:
                cf = lab
    mesh = TemplateMesh(full_vertices, faces, coarse, cf, down, up, idx)
    mesh.validate()
    return mesh


# --------------------------------------------------------------------------

def regress_joints(G, v_full):
    """``G @ V``: joints as affine combinations of mesh vertices.

    Works on plain arrays (``(M_full, 3)`` or batched) and on autodiff
    tensors, in which case the result stays differentiable in ``v_full``.
    """
    if isinstance(G, JointRegressor):
        G = G.G
    if isinstance(v_full, ad.Tensor):
        g = G if isinstance(G, ad.Tensor) else ad.Tensor(np.asarray(G, dtype=v_full.dtype))
        if g.shape[-1] != v_full.shape[-2]:
            raise ShapeError(f"regress_joints: regressor {g.shape} vs vertices {v_full.shape}")
        return ad.matmul(g, v_full)
    G = np.asarray(G)
    v_full = np.asarray(v_full)
    if G.shape[-1] != v_full.shape[-2]:
        raise ShapeError(f"regress_joints: regressor {G.shape} vs vertices {v_full.shape}")
    return G @ v_full
