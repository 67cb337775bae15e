"""Evaluation metrics (MPJPE, PA-MPJPE, MPVE, F-score), Procrustes alignment
and attention-map aggregation/export.

Coordinates come in meters; every error metric is reported in millimeters.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ShapeError, ValidationError

MM = 1000.0


def procrustes_align(P: np.ndarray, Q: np.ndarray):
    """Similarity transform ``(s, R, t)`` minimising ``||s R P + t - Q||_F``.

    Points are rows. ``R`` is a proper rotation (the reflection a plain SVD
    solution might contain is removed by flipping the smallest singular
    direction). Returns ``(s, R, t, P_aligned)`` with
    ``P_aligned = s * P @ R.T + t``.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape or P.ndim != 2:
        raise ShapeError(f"procrustes: shapes {P.shape} and {Q.shape}")
    if P.shape[0] < 3:
        raise AlignmentError("procrustes needs at least 3 points")
    mu_p, mu_q = P.mean(0), Q.mean(0)
    Pc, Qc = P - mu_p, Q - mu_q
    var_p = (Pc ** 2).sum()
    if var_p <= 1e-300 * P.shape[0]:
        raise AlignmentError("source points coincide; alignment undefined")
    cov = Qc.T @ Pc
    U, S, Vt = np.linalg.svd(cov)
    d = np.ones(P.shape[1])
    d[-1] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = (U * d) @ Vt
    s = float((S * d).sum() / var_p)
    t = mu_q - s * R @ mu_p
    return s, R, t, s * P @ R.T + t


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeError(f"metric inputs must share an (n, 3) shape, got {pred.shape} and {gt.shape}")
    return pred, gt


def mpjpe(pred, gt, root: int | None = None) -> float:
    """Mean Euclidean joint error in mm; ``root`` re-centres both sets first."""
    pred, gt = _check(pred, gt)
    if root is not None:
        pred = pred - pred[..., root:root + 1, :]
        gt = gt - gt[..., root:root + 1, :]
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * MM)


def pa_mpjpe(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    if pred.ndim == 3:
        return float(np.mean([pa_mpjpe(p, g) for p, g in zip(pred, gt)]))
    aligned = procrustes_align(pred, gt)[3]
    return float(np.linalg.norm(aligned - gt, axis=-1).mean() * MM)


def mpve(pred, gt, root_pred=None, root_gt=None) -> float:
    """Mean per-vertex Euclidean error in mm, optionally after subtracting a root point."""
    pred, gt = _check(pred, gt)
    if root_pred is not None:
        pred = pred - np.asarray(root_pred)[..., None, :]
    if root_gt is not None:
        gt = gt - np.asarray(root_gt)[..., None, :]
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * MM)


def nearest_distances(a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Distance from every point of ``a`` to its nearest point in ``b``, and vice versa.

    Candidates come from the expanded form |a|^2 + |b|^2 - 2ab (one BLAS
    product); each reported distance is then recomputed directly from the
    coordinate difference to the chosen neighbour.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = (a * a).sum(1), (b * b).sum(1)
    best_b = np.full(len(b), np.inf)
    arg_b = np.zeros(len(b), dtype=np.intp)
    arg_a = np.empty(len(a), dtype=np.intp)
    for i in range(0, len(a), chunk):
        d2 = na[i:i + chunk, None] + nb[None, :] - 2.0 * (a[i:i + chunk] @ b.T)
        arg_a[i:i + chunk] = d2.argmin(axis=1)
        j = d2.argmin(axis=0)
        col = d2[j, np.arange(len(b))]
        better = col < best_b
        best_b[better] = col[better]
        arg_b[better] = j[better] + i
    d_ab = np.linalg.norm(a - b[arg_a], axis=1)
    d_ba = np.linalg.norm(b - a[arg_b], axis=1)
    return d_ab, d_ba


def _f_from_distances(d_pred, d_gt, threshold_mm: float) -> float:
    if threshold_mm <= 0:
        raise ValidationError("threshold must be positive")
    th = threshold_mm / MM
    precision = float((d_pred < th).mean())
    recall = float((d_gt < th).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f_score(pred, gt, threshold_mm: float) -> float:
    """Harmonic mean of precision and recall at ``threshold_mm``.

    Precision is the share of predicted points whose nearest ground-truth
    point is closer than the threshold; recall is the converse.
    """
    pred, gt = _check(pred, gt)
    return _f_from_distances(*nearest_distances(pred, gt), threshold_mm)


@dataclass
class MetricReport:
    mpjpe: float
    pa_mpjpe: float
    mpve: float
    f_scores: dict[float, float] = field(default_factory=dict)

    def csv_header(self) -> str:
        return ",".join(["mpjpe", "pa_mpjpe", "mpve"] + [f"f@{t:g}" for t in sorted(self.f_scores)])

    def csv_row(self, digits: int = 6) -> str:
        vals = [self.mpjpe, self.pa_mpjpe, self.mpve] + [self.f_scores[t] for t in sorted(self.f_scores)]
        return ",".join(f"{round(v, digits) + 0.0:g}" for v in vals)

    def as_dict(self) -> dict:
        d = {"mpjpe": self.mpjpe, "pa_mpjpe": self.pa_mpjpe, "mpve": self.mpve}
        d.update({f"f@{t:g}": v for t, v in sorted(self.f_scores.items())})
        return d


def evaluate_predictions(pred_joints, gt_joints, pred_vertices, gt_vertices, regressor=None,
                         root: int = 0, thresholds=(5.0, 15.0)) -> MetricReport:
    """Per-sample metrics averaged over a batch ``(B, K, 3)`` / ``(B, M_full, 3)``.

    Joints are root-centred. Vertices are centred on the root joint regressed
    from each mesh when a regressor is given (otherwise on the joint sets'
    roots). F-scores use Procrustes-aligned vertices.
    """
    pj, gj = _check(pred_joints, gt_joints)
    pv, gv = _check(pred_vertices, gt_vertices)
    if regressor is not None:
        G = np.asarray(getattr(regressor, "G", regressor))
        root_p = (G[root] @ pv)
        root_g = (G[root] @ gv)
    else:
        root_p, root_g = pj[:, root], gj[:, root]
    e_j, e_pa, e_v = [], [], []
    fs = {t: [] for t in thresholds}
    for b in range(len(pj)):
        e_j.append(mpjpe(pj[b], gj[b], root=root))
        e_pa.append(pa_mpjpe(pj[b], gj[b]))
        e_v.append(mpve(pv[b], gv[b], root_p[b], root_g[b]))
        if thresholds:
            dists = nearest_distances(procrustes_align(pv[b], gv[b])[3], gv[b])
        for t in thresholds:
            fs[t].append(_f_from_distances(*dists, t))
    return MetricReport(float(np.mean(e_j)), float(np.mean(e_pa)), float(np.mean(e_v)),
                        {float(t): float(np.mean(v)) for t, v in fs.items()})


# --------------------------------------------------------------------------
# attention


def average_attention(maps) -> np.ndarray:
    """Mean over samples and heads of final-layer maps, each ``(heads, N, N)`` or ``(B, heads, N, N)``."""
    total, count = None, 0
    for m in maps:
        m = np.asarray(m, dtype=np.float64)
        if m.ndim == 3:
            m = m[None]
        s = m.sum(axis=(0, 1))
        total = s if total is None else total + s
        count += m.shape[0] * m.shape[1]
    if count == 0:
        raise ValidationError("no attention maps to aggregate")
    return total / count


def save_matrix_csv(path: str | os.PathLike, matrix: np.ndarray, header: list[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(",".join(header) + "\n")
        for row in np.atleast_2d(matrix):
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def load_matrix_csv(path: str | os.PathLike, header: bool = False) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1 if header else 0, ndmin=2)


def save_pgm(path: str | os.PathLike, matrix: np.ndarray) -> None:
    """8-bit binary PGM; every row is scaled by its own maximum."""
    m = np.asarray(matrix, dtype=np.float64)
    peak = m.max(axis=1, keepdims=True)
    norm = np.divide(m, peak, out=np.zeros_like(m), where=peak > 0)
    img = np.round(np.clip(norm, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def load_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1  # single whitespace byte before the raster
    return np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
