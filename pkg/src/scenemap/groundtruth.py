"""Brute-force reference fields computed straight from an occupancy grid.

These are the oracles for the incremental window: exact Euclidean distance
to the nearest occupied voxel (via the exact distance transform) and the
skeleton of free voxels whose neighborhoods span two sufficiently separated
nearest-surface sites. The incremental code never calls into this module.
"""

from __future__ import annotations

import numpy as np
from numba import njit
from scipy import ndimage

N26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]


def brute_force_esdf(occupancy: np.ndarray, voxel_size: float) -> np.ndarray:
    """Exact voxel-center Euclidean distance to the nearest occupied voxel."""
    occupancy = np.asarray(occupancy, dtype=bool)
    if not occupancy.any():
        return np.full(occupancy.shape, np.inf)
    return ndimage.distance_transform_edt(~occupancy, sampling=voxel_size)


def nearest_surface_features(occupancy: np.ndarray) -> np.ndarray:
    """(3, nx, ny, nz) voxel indices of each voxel's nearest occupied voxel."""
    occupancy = np.asarray(occupancy, dtype=bool)
    _, indices = ndimage.distance_transform_edt(~occupancy, return_indices=True)
    return indices


def brute_force_gvd(
    occupancy: np.ndarray,
    voxel_size: float,
    min_distance_vox: float = 2.0,
    separation_vox: float = 3.0,
    equid_tolerance_vox: float = 1.0,
) -> np.ndarray:
    """Free voxels equidistant (in the discrete sense) to two distinct surfaces.

    For each free voxel above the clearance floor, the nearest-surface sites
    of its 27-neighborhood are pruned to those within the equidistance
    tolerance of the voxel's own clearance and chained by single linkage;
    sites of one contiguous surface merge, distinct obstacles do not. Two or
    more chains make the voxel a skeleton member. Everything derives from
    the exact distance transform, independent of the incremental field.
    """
    occupancy = np.asarray(occupancy, dtype=bool)
    dist_vox = brute_force_esdf(occupancy, 1.0)
    feats = nearest_surface_features(occupancy).astype(np.int64)
    free = ~occupancy
    member = np.zeros(occupancy.shape, dtype=bool)
    _gvd_from_features(
        dist_vox,
        feats[0],
        feats[1],
        feats[2],
        free,
        float(min_distance_vox),
        float(equid_tolerance_vox),
        float(separation_vox) ** 2,
        member,
    )
    return member


@njit(cache=True)
def _gvd_from_features(dist_vox, fx, fy, fz, free, min_dist_vox, tol_vox, link_sq, member):
    nx, ny, nz = dist_vox.shape
    cands = np.empty((27, 3), dtype=np.int64)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if not free[i, j, k] or dist_vox[i, j, k] < min_dist_vox:
                    continue
                limit = dist_vox[i, j, k] + tol_vox
                limit_sq = limit * limit
                n_c = 0
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        for dk in (-1, 0, 1):
                            ui, uj, uk = i + di, j + dj, k + dk
                            if ui < 0 or uj < 0 or uk < 0 or ui >= nx or uj >= ny or uk >= nz:
                                continue
                            qx, qy, qz = fx[ui, uj, uk], fy[ui, uj, uk], fz[ui, uj, uk]
                            ddx = float(qx - i)
                            ddy = float(qy - j)
                            ddz = float(qz - k)
                            if ddx * ddx + ddy * ddy + ddz * ddz > limit_sq:
                                continue
                            dup = False
                            for m in range(n_c):
                                if cands[m, 0] == qx and cands[m, 1] == qy and cands[m, 2] == qz:
                                    dup = True
                                    break
                            if not dup:
                                cands[n_c, 0] = qx
                                cands[n_c, 1] = qy
                                cands[n_c, 2] = qz
                                n_c += 1
                if n_c < 2:
                    continue
                # single-linkage cluster count
                roots = np.empty(n_c, dtype=np.int64)
                for a in range(n_c):
                    roots[a] = a
                for a in range(n_c):
                    for b in range(a + 1, n_c):
                        dx = cands[a, 0] - cands[b, 0]
                        dy = cands[a, 1] - cands[b, 1]
                        dz = cands[a, 2] - cands[b, 2]
                        if dx * dx + dy * dy + dz * dz <= link_sq:
                            ra = a
                            while roots[ra] != ra:
                                ra = roots[ra]
                            rb = b
                            while roots[rb] != rb:
                                rb = roots[rb]
                            if ra != rb:
                                if ra < rb:
                                    roots[rb] = ra
                                else:
                                    roots[ra] = rb
                count = 0
                for a in range(n_c):
                    ra = a
                    while roots[ra] != ra:
                        ra = roots[ra]
                    if ra == a:
                        count += 1
                if count >= 2:
                    member[i, j, k] = True


def _shift(arr: np.ndarray, off) -> np.ndarray:
    """Shift so that out[i] = arr[i + off], zero/False padded."""
    out = np.zeros_like(arr)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    for axis, o in enumerate(off):
        if o > 0:
            src[axis] = slice(o, None)
            dst[axis] = slice(None, -o)
        elif o < 0:
            src[axis] = slice(None, o)
            dst[axis] = slice(-o, None)
    out[tuple(dst)] = arr[tuple(src)]
    return out


def masks_match_within_band(a: np.ndarray, b: np.ndarray) -> bool:
    """True when each mask lies within a one-voxel (26-neighborhood) band of
    the other."""
    structure = np.ones((3, 3, 3), dtype=bool)
    if a.any() != b.any():
        return not a.any() and not b.any()
    a_band = ndimage.binary_dilation(a, structure=structure)
    b_band = ndimage.binary_dilation(b, structure=structure)
    return bool(np.all(b[~a_band] == False) and np.all(a[~b_band] == False))  # noqa: E712
