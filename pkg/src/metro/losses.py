"""Training objective: vertex, joint, regressed-joint and 2-D reprojection
L1 terms combined under per-sample 3-D/2-D availability flags."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .mesh import regress_joints
from .model import CameraParams, ModelOutput


def loss_vertices(V3D: ad.Tensor, V_gt, weights=None) -> ad.Tensor:
    return ad.l1_mean(V3D, V_gt, weights)


def loss_joints(J3D: ad.Tensor, J_gt, weights=None) -> ad.Tensor:
    return ad.l1_mean(J3D, J_gt, weights)


def loss_joints_reg(G, V3D: ad.Tensor, J_gt, weights=None) -> ad.Tensor:
    """L1 between joints regressed from the predicted mesh and ground truth."""
    return ad.l1_mean(regress_joints(G, V3D), J_gt, weights)


def project_weak_perspective(J3D, cam):
    """``s * (x, y) + (tx, ty)`` for every joint; depth is ignored.

    ``J3D`` is ``(..., K, 3)`` and ``cam`` ``(..., 3)`` ordered (s, tx, ty),
    either as autodiff tensors or plain arrays. A :class:`CameraParams` is
    accepted for a single unbatched pose.
    """
    if isinstance(cam, CameraParams):
        cam = cam.as_array()
    if not isinstance(J3D, ad.Tensor) and not isinstance(cam, ad.Tensor):
        J3D, cam = np.asarray(J3D), np.asarray(cam)
        return cam[..., 0:1, None] * J3D[..., :2] + cam[..., None, 1:3]
    J3D = J3D if isinstance(J3D, ad.Tensor) else ad.Tensor(J3D)
    cam = cam if isinstance(cam, ad.Tensor) else ad.Tensor(cam, dtype=J3D.dtype)
    if J3D.shape[-1] != 3 or cam.shape[-1] != 3 or J3D.shape[:-2] != cam.shape[:-1]:
        raise ShapeError(f"projection: joints {J3D.shape} vs camera {cam.shape}")
    lead = cam.shape[:-1]
    s = ad.reshape(ad.slice_(cam, 0, 1), lead + (1, 1))
    t = ad.reshape(ad.slice_(cam, 1, 3), lead + (1, 2))
    return ad.add(ad.mul(ad.slice_(J3D, 0, 2), s), t)


def loss_joints_proj(J2D: ad.Tensor, J2D_gt, weights=None) -> ad.Tensor:
    return ad.l1_mean(J2D, J2D_gt, weights)


@dataclass
class LossBreakdown:
    """Batch means of each unweighted term plus the flag-weighted total.

    For a single sample ``total == alpha*(l_v + l_j + l_j_reg) + beta*l_j_proj``.
    ``tensor`` holds the differentiable total.
    """

    l_v: float
    l_j: float
    l_j_reg: float
    l_j_proj: float
    total: float
    alpha: np.ndarray
    beta: np.ndarray
    l_v_coarse: float = 0.0
    tensor: ad.Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {"loss_total": self.total, "l_v": self.l_v, "l_j": self.l_j,
                "l_j_reg": self.l_j_reg, "l_j_proj": self.l_j_proj}


def _flags(x, batch_shape):
    return np.broadcast_to(np.asarray(x, dtype=np.float64), batch_shape)


def total_loss(pred: ModelOutput, V_gt, J_gt, J2D_gt, G, alpha=1, beta=1,
               coarse_gt=None) -> LossBreakdown:
    """Flag-weighted sum of the four terms, averaged over the batch.

    ``coarse_gt`` enables the optional coarse-mesh L1 term (weighted by alpha
    like the other 3-D terms); it is off unless given.
    """
    batch = pred.joints3d.shape[:-2]
    a = _flags(alpha, batch)
    b = _flags(beta, batch)
    J2D = project_weak_perspective(pred.joints3d, pred.camera)
    terms = {
        "l_v": loss_vertices(pred.full_vertices3d, V_gt, a),
        "l_j": loss_joints(pred.joints3d, J_gt, a),
        "l_j_reg": loss_joints_reg(G, pred.full_vertices3d, J_gt, a),
        "l_j_proj": loss_joints_proj(J2D, J2D_gt, b),
    }
    if coarse_gt is not None:
        terms["l_v_coarse"] = ad.l1_mean(pred.coarse_vertices3d, coarse_gt, a)
    total = terms["l_v"]
    for name in list(terms)[1:]:
        total = ad.add(total, terms[name])

    def unweighted(p, g):
        return float(np.mean(np.abs(np.asarray(p, dtype=np.float64) - g).sum(-1).mean(-1)))

    Vp = pred.full_vertices3d.data
    report = LossBreakdown(
        l_v=unweighted(Vp, V_gt),
        l_j=unweighted(pred.joints3d.data, J_gt),
        l_j_reg=unweighted(regress_joints(np.asarray(G.G if hasattr(G, "G") else G), Vp.astype(np.float64)), J_gt),
        l_j_proj=unweighted(J2D.data, J2D_gt),
        total=float(total.data),
        alpha=a, beta=b,
        l_v_coarse=unweighted(pred.coarse_vertices3d.data, coarse_gt) if coarse_gt is not None else 0.0,
        tensor=total,
    )
    return report
