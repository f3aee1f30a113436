"""Reconstruction quality: Chamfer distance, point-to-plane PSNR, voxel IOU."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import as_cloud

DEFAULT_VOXEL = (0.2, 0.2, 0.1)


def _nonempty(*clouds):
    out = []
    for c in clouds:
        c = as_cloud(c)
        if len(c) == 0:
            raise ValueError("metric needs non-empty clouds")
        out.append(c)
    return out


def nearest(P, Q):
    """Index into ``Q`` of the nearest neighbour of every point of ``P``.

    Ties resolve to the lowest index in ``Q``, matching a brute-force scan.
    """
    P, Q = _nonempty(P, Q)
    tree = cKDTree(Q)
    if len(Q) == 1:
        return np.zeros(len(P), dtype=np.int64)
    dist, idx = tree.query(P, k=2)
    # the kd-tree may return any of several equidistant points
    tied = np.flatnonzero(dist[:, 1] <= dist[:, 0] * (1 + 1e-9) + 1e-300)
    out = idx[:, 0].copy()
    for i in tied:
        cand = tree.query_ball_point(P[i], dist[i, 0] * (1 + 1e-9) + 1e-300)
        d = np.sum((Q[cand] - P[i]) ** 2, axis=1)
        out[i] = min(c for c, dc in zip(cand, d) if dc == d.min())
    return out


def chamfer(P, Q) -> float:
    """Mean distance from points of ``P`` to their nearest point in ``Q``."""
    P, Q = _nonempty(P, Q)
    # distances recomputed from the indices so the result is bit-identical to a brute-force scan
    dist = np.sqrt(np.sum((Q[nearest(P, Q)] - P) ** 2, axis=1))
    return float(dist.mean())


def chamfer_sym(P, Q) -> float:
    return chamfer(P, Q) + chamfer(Q, P)


def estimate_normals(P, k: int = 12):
    """PCA normals from the ``k`` nearest neighbours (the point itself included).

    Returns ``(normals, valid)``. ``valid`` is False where the neighbourhood
    spans less than a plane (two vanishing covariance eigenvalues); such
    normals are still unit vectors but carry no information.
    """
    P = as_cloud(P)
    if len(P) < 3:
        raise ValueError("normal estimation needs at least 3 points")
    kk = min(k, len(P))
    _, nbr = cKDTree(P).query(P, k=kk)
    nb = P[nbr]  # (n, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / kk
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    scale = np.maximum(evals[:, 2], np.finfo(float).tiny)
    valid = evals[:, 1] > 1e-12 * scale
    return normals, valid


def psnr(P, Q, normals=None, valid=None) -> float:
    """One-directional point-to-plane PSNR of ``Q`` against reference ``P``.

    The peak is the largest squared nearest-neighbour distance and the MSE is
    the mean squared projection of the residual on the normal of ``P``.
    Returns ``inf`` when the MSE vanishes.
    """
    P, Q = _nonempty(P, Q)
    if normals is None:
        normals, valid = estimate_normals(P)
    if valid is None:
        valid = np.ones(len(P), dtype=bool)
    idx = nearest(P, Q)
    resid = Q[idx] - P
    peak = float(np.max(np.sum(resid**2, axis=1)))
    proj = np.einsum("ij,ij->i", resid, normals)[valid]
    if len(proj) == 0:
        raise ValueError("no valid normals in reference cloud")
    mse = float(np.mean(proj**2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak / mse)


def psnr_sym(P, Q) -> float:
    return min(psnr(P, Q), psnr(Q, P))


def voxelize(P, dims=DEFAULT_VOXEL, anchor=(0.0, 0.0, 0.0)) -> np.ndarray:
    P = as_cloud(P)
    idx = np.floor((P - np.asarray(anchor)) / np.asarray(dims)).astype(np.int64)
    return np.unique(idx, axis=0)


def voxel_iou(P, Q, dims=DEFAULT_VOXEL, anchor=(0.0, 0.0, 0.0)) -> float:
    a = {tuple(v) for v in voxelize(P, dims, anchor).tolist()}
    b = {tuple(v) for v in voxelize(Q, dims, anchor).tolist()}
    union = len(a | b)
    if union == 0:
        return 1.0
    return len(a & b) / union
