"""Synthetic ground truth: articulated skeletons, skinned capsule meshes,
weak-perspective 2-D keypoints, image features and the dataset file.

Two presets exist. ``body`` has 14 joints and a ~2.4k-vertex capsule body
coarsened to 431 vertices; ``hand`` has 21 joints and a 1k-vertex mesh
coarsened to 200 vertices.

Dataset file layout (all little-endian)::

    magic     4 bytes  b"MTRD"
    version   u32      1
    meta_len  u32      length of the UTF-8 JSON metadata that follows
    meta      bytes    {"preset", "n", "K", "M_full", "H", "pose_dim",
                        "image_side", "feature_mode", "seed", "p_2d_only",
                        "record_bytes", "fields"}
    records   n * record_bytes, numpy structured dtype given by
              ``record_dtype`` (alpha u1, beta u1, pad u2, then f4 blocks:
              feature[H], pose[K*3], camera[3], aug[3], vertices[M_full*3],
              joints[K*3], joints2d[K*2], image[side*side] if side > 0)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import FormatError, ValidationError
from .mesh import JointRegressor, TemplateMesh, build_coarse

# --------------------------------------------------------------------------
# rotations


def axis_angle_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for ``(..., 3)`` axis-angle vectors."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(theta > 0, theta, 1.0)
    k = aa / safe
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack([zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], axis=-1).reshape(aa.shape[:-1] + (3, 3))
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + s * K + (1 - c) * (K @ K)


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


# --------------------------------------------------------------------------
# skeleton


@dataclass
class Skeleton:
    names: list[str]
    parents: np.ndarray
    offsets: np.ndarray
    angle_limits: np.ndarray

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.angle_limits = np.asarray(self.angle_limits, dtype=np.float64)
        self.order = self._topological_order()

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def _topological_order(self) -> np.ndarray:
        K = len(self.parents)
        roots = [j for j in range(K) if self.parents[j] == j]
        if len(roots) != 1:
            raise ValidationError(f"skeleton needs exactly one root, found {roots}")
        children = {j: [] for j in range(K)}
        for j, p in enumerate(self.parents):
            if p != j:
                if not 0 <= p < K:
                    raise ValidationError(f"joint {j} has invalid parent {p}")
                children[p].append(j)
        order, stack = [], [roots[0]]
        while stack:
            j = stack.pop()
            order.append(j)
            stack.extend(reversed(children[j]))
        if len(order) != K:
            raise ValidationError("parent graph has a cycle or disconnected joints")
        return np.asarray(order)

    @property
    def root(self) -> int:
        return int(self.order[0])

    def sample_angles(self, rng: np.random.Generator) -> np.ndarray:
        axes = rng.standard_normal((self.n_joints, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        mags = rng.uniform(0, 1, self.n_joints) * self.angle_limits
        return axes * mags[:, None]


def forward_kinematics(skel: Skeleton, angles: np.ndarray, return_rotations: bool = False):
    """Joint positions with the root at the origin.

    Each joint sits at its parent's position plus the parent's accumulated
    rotation applied to the rest offset; its own rotation then composes onto
    the parent's for the descendants.
    """
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape != (skel.n_joints, 3):
        raise ValidationError(f"angles must be ({skel.n_joints}, 3), got {angles.shape}")
    local = axis_angle_to_matrix(angles)
    K = skel.n_joints
    pos = np.zeros((K, 3))
    rot = np.zeros((K, 3, 3))
    for j in skel.order:
        p = skel.parents[j]
        if p == j:
            pos[j] = 0.0
            rot[j] = local[j]
        else:
            pos[j] = pos[p] + rot[p] @ skel.offsets[j]
            rot[j] = rot[p] @ local[j]
    return (pos, rot) if return_rotations else pos


def rest_positions(skel: Skeleton) -> np.ndarray:
    return forward_kinematics(skel, np.zeros((skel.n_joints, 3)))


# --------------------------------------------------------------------------
# capsule body


@dataclass
class Segment:
    joint: int                # bone follows this joint's rotation
    start: np.ndarray         # rest-pose endpoints
    end: np.ndarray
    radius: float
    child: int | None = None  # joint at ``end`` (blend target), None for end effectors


@dataclass
class BodyModel:
    """Everything the generator needs for one preset."""

    name: str
    skeleton: Skeleton
    vertices: np.ndarray      # rest pose, M_full x 3
    faces: np.ndarray
    weights: np.ndarray       # M_full x K skinning weights
    regressor: JointRegressor
    coarse_m: int
    _mesh: TemplateMesh | None = field(default=None, repr=False)

    @property
    def mesh(self) -> TemplateMesh:
        if self._mesh is None:
            self._mesh = build_coarse(self.vertices, self.faces, self.coarse_m)
        return self._mesh

    @property
    def joint_names(self) -> list[str]:
        return self.skeleton.names


def _frame(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = direction / np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def build_capsule_body(name: str, skel: Skeleton, segments: list[Segment], n_around: int,
                       n_rings: int, coarse_m: int) -> BodyModel:
    """Tessellate each segment as a closed tube and derive weights and G.

    Ring 0 sits at the segment start and ring ``n_rings - 1`` at its end.
    Vertices in the last 30% of a bone blend up to 50/50 towards the child
    joint. Joint regressor row j averages the end ring of the bone finishing
    at j (the root uses the start ring of its first segment); every vertex
    of such a ring shares the same blend weights and the ring is centred on
    the joint, so ``G @ skinned`` reproduces the kinematic joint exactly.
    """
    K = skel.n_joints
    verts, faces, weights = [], [], []
    ring_at_joint: dict[int, list[int]] = {}
    for seg in segments:
        base = len(verts)
        axis = seg.end - seg.start
        u_dir, v_dir = _frame(axis)
        phis = 2 * np.pi * np.arange(n_around) / n_around
        for r, t in enumerate(np.linspace(0.0, 1.0, n_rings)):
            centre = seg.start + t * axis
            w = np.zeros(K)
            blend = 0.5 * _smoothstep((t - 0.7) / 0.3) if seg.child is not None else 0.0
            w[seg.joint] = 1.0 - blend
            if blend:
                w[seg.child] += blend
            ring = []
            for phi in phis:
                verts.append(centre + seg.radius * (np.cos(phi) * u_dir + np.sin(phi) * v_dir))
                weights.append(w)
                ring.append(len(verts) - 1)
            if r == n_rings - 1 and seg.child is not None:
                ring_at_joint.setdefault(seg.child, ring)
            if r == 0 and seg.joint == skel.root:
                ring_at_joint.setdefault(skel.root, ring)
        unit = axis / np.linalg.norm(axis)
        caps = []
        for centre, t in ((seg.start - 0.5 * seg.radius * unit, 0.0), (seg.end + 0.5 * seg.radius * unit, 1.0)):
            w = np.zeros(K)
            blend = 0.5 if (t == 1.0 and seg.child is not None) else 0.0
            w[seg.joint] = 1.0 - blend
            if blend:
                w[seg.child] += blend
            verts.append(centre)
            weights.append(w)
            caps.append(len(verts) - 1)
        for r in range(n_rings - 1):
            for a in range(n_around):
                b = (a + 1) % n_around
                i0, i1 = base + r * n_around + a, base + r * n_around + b
                j0, j1 = i0 + n_around, i1 + n_around
                faces += [(i0, i1, j1), (i0, j1, j0)]
        last = base + (n_rings - 1) * n_around
        for a in range(n_around):
            b = (a + 1) % n_around
            faces.append((caps[0], base + b, base + a))
            faces.append((caps[1], last + a, last + b))
    missing = sorted(set(range(K)) - set(ring_at_joint))
    if missing:
        raise ValidationError(f"no vertex ring located at joints {missing}")
    M = len(verts)
    G = np.zeros((K, M))
    for j, ring in ring_at_joint.items():
        G[j, ring] = 1.0 / len(ring)
    return BodyModel(name, skel, np.asarray(verts), np.asarray(faces, dtype=np.int64),
                     np.asarray(weights), JointRegressor(G), coarse_m)


BODY_JOINTS = ["pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
               "head", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist"]


def body_preset() -> BodyModel:
    parents = [0, 0, 1, 2, 0, 4, 5, 0, 0, 8, 9, 0, 11, 12]
    offsets = [
        (0, 0, 0),
        (-0.10, -0.06, 0), (0, -0.42, 0.01), (0, -0.40, -0.01),
        (0.10, -0.06, 0), (0, -0.42, 0.01), (0, -0.40, -0.01),
        (0, 0.62, 0),
        (-0.18, 0.48, 0), (-0.27, -0.05, 0), (-0.25, -0.03, 0),
        (0.18, 0.48, 0), (0.27, -0.05, 0), (0.25, -0.03, 0),
    ]
    limits = [0.5, 0.8, 1.2, 0.4, 0.8, 1.2, 0.4, 0.4, 0.9, 1.2, 0.4, 0.9, 1.2, 0.4]
    skel = Skeleton(BODY_JOINTS, parents, offsets, limits)
    rest = rest_positions(skel)
    radius = {1: 0.08, 2: 0.07, 3: 0.055, 4: 0.08, 5: 0.07, 6: 0.055, 7: 0.13,
              8: 0.06, 9: 0.05, 10: 0.04, 11: 0.06, 12: 0.05, 13: 0.04}
    segs = [Segment(skel.parents[j], rest[skel.parents[j]], rest[j], radius[j], child=j)
            for j in (7, 1, 2, 3, 4, 5, 6, 8, 9, 10, 11, 12, 13)]
    effectors = [(7, (0, 0.22, 0), 0.10), (10, (-0.15, 0, 0), 0.035), (13, (0.15, 0, 0), 0.035),
                 (3, (0, -0.05, 0.15), 0.045), (6, (0, -0.05, 0.15), 0.045)]
    segs += [Segment(j, rest[j], rest[j] + np.asarray(off, dtype=float), r) for j, off, r in effectors]
    return build_capsule_body("body", skel, segs, n_around=12, n_rings=11, coarse_m=431)


HAND_FINGERS = ["thumb", "index", "middle", "ring", "pinky"]
HAND_JOINTS = ["wrist"] + [f"{f}_{p}" for f in HAND_FINGERS for p in ("mcp", "pip", "dip", "tip")]


def hand_preset() -> BodyModel:
    parents, offsets, limits = [0], [(0, 0, 0)], [0.6]
    bases = [(-0.035, 0.03, 0.02), (-0.022, 0.09, 0), (0.0, 0.095, 0), (0.02, 0.088, 0), (0.038, 0.078, 0)]
    lengths = [(0.035, 0.03, 0.025), (0.04, 0.025, 0.02), (0.045, 0.028, 0.022),
               (0.042, 0.026, 0.02), (0.032, 0.02, 0.018)]
    dirs = [(-0.6, 0.8, 0.0), (0, 1, 0), (0, 1, 0), (0.08, 1, 0), (0.18, 1, 0)]
    for f in range(5):
        d = np.asarray(dirs[f], dtype=float)
        d /= np.linalg.norm(d)
        parents.append(0)
        offsets.append(bases[f])
        limits.append(0.5)
        for k, length in enumerate(lengths[f]):
            parents.append(len(parents) - 1)
            offsets.append(tuple(d * length))
            limits.append(1.0 if k < 2 else 0.3)
    skel = Skeleton(HAND_JOINTS, parents, offsets, limits)
    rest = rest_positions(skel)
    segs = []
    for j in range(1, 21):
        p = skel.parents[j]
        r = 0.012 if p == 0 else 0.009
        segs.append(Segment(p, rest[p], rest[j], r, child=j))
    return build_capsule_body("hand", skel, segs, n_around=8, n_rings=6, coarse_m=200)


_PRESETS = {"body": body_preset, "hand": hand_preset}
_PRESET_CACHE: dict[str, BodyModel] = {}


def get_preset(name: str) -> BodyModel:
    if name not in _PRESETS:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    if name not in _PRESET_CACHE:
        _PRESET_CACHE[name] = _PRESETS[name]()
    return _PRESET_CACHE[name]


# --------------------------------------------------------------------------
# skinning and projection


def skin_mesh(template: np.ndarray, skel: Skeleton, angles: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Linear blend skinning of the rest-pose ``template`` vertices."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(template), skel.n_joints):
        raise ValidationError(f"weights must be ({len(template)}, {skel.n_joints}), got {weights.shape}")
    if (weights < 0).any() or not np.allclose(weights.sum(axis=1), 1.0, atol=1e-9):
        raise ValidationError("skinning weight rows must be nonnegative and sum to 1")
    if ((weights > 0).sum(axis=1) > 4).any():
        raise ValidationError("at most 4 influences per vertex")
    rest = rest_positions(skel)
    pos, rot = forward_kinematics(skel, angles, return_rotations=True)
    # per-joint transform x -> R_j (x - rest_j) + pos_j, written as a displacement
    # (R_j - I)(x - rest_j) + (pos_j - rest_j) so the rest pose is reproduced exactly
    local = template[:, None, :] - rest[None, :, :]                    # M,K,3
    delta = np.einsum("kab,mkb->mka", rot - np.eye(3), local) + (pos - rest)[None, :, :]
    return template + np.einsum("mk,mka->ma", weights, delta)


def project_points(points3d: np.ndarray, camera: np.ndarray) -> np.ndarray:
    """Weak-perspective projection ``s * xy + t`` (same op order as the loss)."""
    camera = np.asarray(camera)
    return camera[0] * points3d[..., :2] + camera[1:3]


def augment_points(points: np.ndarray, aug: np.ndarray) -> np.ndarray:
    """Apply ``aug = (yaw, roll, scale)``: rotate about the vertical axis, then in-plane, then scale."""
    yaw, roll, s = aug
    R = rot_z(roll) @ rot_y(yaw)
    return s * (points @ R.T)


IDENTITY_AUG = np.array([0.0, 0.0, 1.0])


# --------------------------------------------------------------------------
# features


def rasterize(vertices: np.ndarray, camera: np.ndarray, side: int = 64, extent: float = 1.2) -> np.ndarray:
    """Orthographic point-splat silhouette, 3x3 dilated, values in {0, 1}."""
    uv = project_points(vertices, camera)
    px = np.floor((uv[:, 0] + extent) / (2 * extent) * side).astype(int)
    py = np.floor((extent - uv[:, 1]) / (2 * extent) * side).astype(int)
    img = np.zeros((side + 2, side + 2))
    ok = (px >= 0) & (px < side) & (py >= 0) & (py < side)
    for dx in (0, 1, 2):
        for dy in (0, 1, 2):
            img[py[ok] + dy, px[ok] + dx] = 1.0
    return img[1:-1, 1:-1]


class OracleFeatures:
    """Fixed-seed two-layer tanh embedding of (pose angles, camera, augmentation).

    The output is scaled by ``amplitude`` so the feature block and the 3-D
    template coordinate are of similar size inside each query.
    """

    mode = "oracle_mlp"
    amplitude = 0.2

    def __init__(self, n_joints: int, dim: int, seed: int = 1234):
        self.dim = dim
        rng = np.random.default_rng([seed, n_joints, dim])
        n_in = n_joints * 3 + 3 + 5
        hidden = 2 * dim
        self.w1 = rng.standard_normal((n_in, hidden)) * (2.0 / np.sqrt(n_in))
        self.b1 = rng.uniform(-0.5, 0.5, hidden)
        self.w2 = rng.standard_normal((hidden, dim)) * (1.5 / np.sqrt(hidden))
        self.b2 = rng.uniform(-0.2, 0.2, dim)

    @staticmethod
    def encode_input(angles, camera, aug) -> np.ndarray:
        yaw, roll, s = aug
        return np.concatenate([np.ravel(angles), np.ravel(camera),
                               [np.sin(yaw), np.cos(yaw) - 1, np.sin(roll), np.cos(roll) - 1, s - 1]])

    def __call__(self, angles, camera, aug=IDENTITY_AUG) -> np.ndarray:
        u = self.encode_input(angles, camera, aug)
        return self.amplitude * np.tanh(np.tanh(u @ self.w1 + self.b1) @ self.w2 + self.b2)


class TinyCNN:
    """Three conv + max-pool stages and a global mean pool over a silhouette.

    Parameters are autodiff tensors so the extractor trains with the encoder.
    """

    mode = "tiny_cnn"

    def __init__(self, dim: int, seed: int = 0, dtype=None):
        dtype = dtype or ad.get_default_dtype()
        rng = np.random.default_rng(seed)
        chans = [1, 8, 16, dim]
        self.params: dict[str, ad.Tensor] = {}
        for i in range(3):
            fan_in = chans[i] * 9
            w = rng.standard_normal((chans[i + 1], chans[i], 3, 3)) * np.sqrt(2.0 / fan_in)
            self.params[f"cnn.conv{i}.w"] = ad.Tensor(w, requires_grad=True, dtype=dtype)
            self.params[f"cnn.conv{i}.b"] = ad.Tensor(np.zeros(chans[i + 1]), requires_grad=True, dtype=dtype)
        self.dim = dim

    def forward(self, images: np.ndarray) -> ad.Tensor:
        x = ad.Tensor(np.asarray(images)[:, None, :, :], dtype=self.params["cnn.conv0.w"].dtype)
        for i in range(3):
            x = ad.relu(ad.conv2d(x, self.params[f"cnn.conv{i}.w"], self.params[f"cnn.conv{i}.b"]))
            x = ad.max_pool2d(x, 2)
        B, C, H, W = x.shape
        return ad.mean(ad.reshape(x, (B, C, H * W)), axis=-1)


def make_feature(angles, camera, mode: str = "oracle_mlp", *, dim: int = 64, n_joints: int | None = None,
                 vertices=None, aug=IDENTITY_AUG, extractor=None, image_side: int = 64):
    """Feature vector for one pose.

    ``oracle_mlp`` returns the fixed embedding; ``tiny_cnn`` rasterises
    ``vertices`` and runs ``extractor`` (a :class:`TinyCNN`), returning a
    ``(1, dim)`` tensor.
    """
    if mode == "oracle_mlp":
        extractor = extractor or OracleFeatures(n_joints or len(angles), dim)
        return extractor(angles, camera, aug)
    if mode == "tiny_cnn":
        if vertices is None:
            raise ValidationError("tiny_cnn features need the posed vertices")
        extractor = extractor or TinyCNN(dim)
        img = rasterize(augment_points(vertices, aug), camera, image_side)
        return extractor.forward(img[None])
    raise ValidationError(f"unknown feature mode {mode!r}")


# --------------------------------------------------------------------------
# samples and datasets


@dataclass
class TrainingSample:
    feature: np.ndarray
    vertices: np.ndarray
    joints: np.ndarray
    joints2d: np.ndarray
    alpha: int
    beta: int
    pose: np.ndarray
    camera: np.ndarray
    aug: np.ndarray
    image: np.ndarray | None = None


def record_dtype(H: int, K: int, M_full: int, image_side: int = 0) -> np.dtype:
    fields = [("alpha", "u1"), ("beta", "u1"), ("pad", "<u2"),
              ("feature", "<f4", (H,)), ("pose", "<f4", (K, 3)), ("camera", "<f4", (3,)),
              ("aug", "<f4", (3,)), ("vertices", "<f4", (M_full, 3)), ("joints", "<f4", (K, 3)),
              ("joints2d", "<f4", (K, 2))]
    if image_side:
        fields.append(("image", "<f4", (image_side, image_side)))
    return np.dtype(fields)


DATASET_MAGIC = b"MTRD"
DATASET_VERSION = 1


@dataclass
class Dataset:
    records: np.ndarray
    meta: dict

    def __len__(self) -> int:
        return len(self.records)

    @property
    def preset(self) -> str:
        return self.meta["preset"]

    @property
    def feature_dim(self) -> int:
        return self.meta["H"]

    @property
    def has_images(self) -> bool:
        return self.meta.get("image_side", 0) > 0

    def __getitem__(self, i: int) -> TrainingSample:
        r = self.records[i]
        img = r["image"].astype(np.float64) if self.has_images else None
        return TrainingSample(r["feature"].astype(np.float64), r["vertices"].astype(np.float64),
                              r["joints"].astype(np.float64), r["joints2d"].astype(np.float64),
                              int(r["alpha"]), int(r["beta"]), r["pose"].astype(np.float64),
                              r["camera"].astype(np.float64), r["aug"].astype(np.float64), img)

    def subset(self, indices) -> "Dataset":
        meta = dict(self.meta, n=len(indices))
        return Dataset(self.records[np.asarray(indices, dtype=np.intp)].copy(), meta)

    def save(self, path: str | os.PathLike) -> None:
        meta = dict(self.meta, n=len(self.records), record_bytes=self.records.dtype.itemsize)
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(np.uint32(DATASET_VERSION).astype("<u4").tobytes())
            fh.write(np.uint32(len(blob)).astype("<u4").tobytes())
            fh.write(blob)
            fh.write(self.records.tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Dataset":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != DATASET_MAGIC:
            raise FormatError(f"{path}: not a dataset file (bad magic)")
        version = int(np.frombuffer(raw[4:8], "<u4")[0])
        if version != DATASET_VERSION:
            raise FormatError(f"{path}: unsupported dataset version {version}")
        n_meta = int(np.frombuffer(raw[8:12], "<u4")[0])
        try:
            meta = json.loads(raw[12:12 + n_meta].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise FormatError(f"{path}: corrupt metadata block") from None
        dt = record_dtype(meta["H"], meta["K"], meta["M_full"], meta.get("image_side", 0))
        body = raw[12 + n_meta:]
        if dt.itemsize != meta["record_bytes"] or len(body) != meta["n"] * dt.itemsize:
            raise FormatError(f"{path}: truncated or inconsistent record block")
        return cls(np.frombuffer(body, dtype=dt).copy(), meta)


def synthesize_sample(body: BodyModel, rng: np.random.Generator, aug=IDENTITY_AUG):
    """Pose, camera and posed geometry for one sample (float64)."""
    angles = body.skeleton.sample_angles(rng)
    cam = np.array([rng.uniform(0.8, 1.2), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)])
    verts = skin_mesh(body.vertices, body.skeleton, angles, body.weights)
    joints = forward_kinematics(body.skeleton, angles)
    aug = np.asarray(aug, dtype=np.float64)
    return angles, cam, augment_points(verts, aug), augment_points(joints, aug)


def generate_dataset(n: int, seed: int, preset: str = "body", p_2d_only: float = 0.0, *,
                     feature_dim: int = 64, feature_mode: str = "oracle_mlp", image_side: int = 64,
                     path: str | os.PathLike | None = None) -> Dataset:
    """Generate ``n`` samples; exactly ``floor(p_2d_only * n)`` get alpha=0.

    Sample ``i`` draws from its own stream ``default_rng([seed, i])`` so the
    result does not depend on generation order.
    """
    if n < 1:
        raise ValidationError("n must be at least 1")
    if not 0.0 <= p_2d_only <= 1.0:
        raise ValidationError("p_2d_only must lie in [0, 1]")
    if feature_mode not in ("oracle_mlp", "tiny_cnn"):
        raise ValidationError(f"unknown feature mode {feature_mode!r}")
    body = get_preset(preset)
    K, Mf = body.skeleton.n_joints, len(body.vertices)
    side = image_side if feature_mode == "tiny_cnn" else 0
    recs = np.zeros(n, dtype=record_dtype(feature_dim, K, Mf, side))
    n2d = int(np.floor(p_2d_only * n))
    two_d = np.zeros(n, dtype=bool)
    two_d[np.random.default_rng([seed, n]).permutation(n)[:n2d]] = True
    oracle = OracleFeatures(K, feature_dim) if feature_mode == "oracle_mlp" else None
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        angles, cam, verts, joints = synthesize_sample(body, rng)
        r = recs[i]
        r["alpha"] = 0 if two_d[i] else 1
        r["beta"] = 1
        r["pose"] = angles
        r["camera"] = cam
        r["aug"] = IDENTITY_AUG
        r["vertices"] = verts
        r["joints"] = joints
        j32, c32 = r["joints"], r["camera"]
        r["joints2d"] = project_points(j32, c32)
        if oracle is not None:
            r["feature"] = oracle(angles, cam)
        else:
            r["image"] = rasterize(verts, cam, side)
    meta = {"preset": preset, "n": n, "K": K, "M_full": Mf, "H": feature_dim,
            "pose_dim": K * 3, "image_side": side, "feature_mode": feature_mode,
            "seed": seed, "p_2d_only": p_2d_only, "fields": list(recs.dtype.names)}
    ds = Dataset(recs, meta)
    if path is not None:
        ds.save(path)
    return ds
