"""Numba kernels for the wavefront (brushfire) distance-field update.

The field lives in dense window-local arrays; parents are stored as global
voxel coordinates so the window can be rebased without rewriting them.
Both queues are binary heaps keyed by (distance, lexicographic voxel
coordinate) so updates are deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit

PARENT_NONE = np.int32(-(2**31) + 1)

_OFFSETS = np.array(
    [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ],
    dtype=np.int64,
)


@njit(cache=True)
def _heap_push(keys, ties, idxs, size, key, tie, idx):
    i = size
    keys[i] = key
    ties[i] = tie
    idxs[i] = idx
    while i > 0:
        p = (i - 1) // 2
        if (keys[p] > keys[i]) or (keys[p] == keys[i] and ties[p] > ties[i]):
            keys[p], keys[i] = keys[i], keys[p]
            ties[p], ties[i] = ties[i], ties[p]
            idxs[p], idxs[i] = idxs[i], idxs[p]
            i = p
        else:
            break
    return size + 1


@njit(cache=True)
def _heap_pop(keys, ties, idxs, size):
    key = keys[0]
    idx = idxs[0]
    size -= 1
    keys[0] = keys[size]
    ties[0] = ties[size]
    idxs[0] = idxs[size]
    i = 0
    while True:
        left = 2 * i + 1
        right = left + 1
        smallest = i
        if left < size and (
            keys[left] < keys[smallest]
            or (keys[left] == keys[smallest] and ties[left] < ties[smallest])
        ):
            smallest = left
        if right < size and (
            keys[right] < keys[smallest]
            or (keys[right] == keys[smallest] and ties[right] < ties[smallest])
        ):
            smallest = right
        if smallest == i:
            break
        keys[i], keys[smallest] = keys[smallest], keys[i]
        ties[i], ties[smallest] = ties[smallest], ties[i]
        idxs[i], idxs[smallest] = idxs[smallest], idxs[i]
        i = smallest
    return key, idx, size


@njit(cache=True)
def _run_update(
    dist,
    px,
    py,
    pz,
    sx,
    sy,
    sz,
    fixed,
    observed,
    raise_seeds,
    lower_seeds,
    ox,
    oy,
    oz,
    voxel_size,
    max_dist,
    equid_tol,
    link_sq,
    changed,
    offsets,
    cap,
):
    """Raise orphaned voxels, then re-lower from the valid frontier.

    Returns 0 on success, -1 if the heap capacity was exhausted (caller
    retries with a larger capacity).
    """
    nx, ny, nz = dist.shape

    r_keys = np.empty(cap, dtype=np.float64)
    r_ties = np.empty(cap, dtype=np.int64)
    r_idxs = np.empty(cap, dtype=np.int64)
    r_size = 0
    l_keys = np.empty(cap, dtype=np.float64)
    l_ties = np.empty(cap, dtype=np.int64)
    l_idxs = np.empty(cap, dtype=np.int64)
    l_size = 0

    for s in range(raise_seeds.shape[0]):
        idx = raise_seeds[s]
        if r_size >= cap:
            return -1
        r_size = _heap_push(r_keys, r_ties, r_idxs, r_size, dist.flat[idx], idx, idx)

    # Raise phase: clear every voxel whose recorded parent is no longer a
    # live source, collecting the surviving frontier for re-lowering.
    while r_size > 0:
        _, idx, r_size = _heap_pop(r_keys, r_ties, r_idxs, r_size)
        i = idx // (ny * nz)
        rem = idx % (ny * nz)
        j = rem // nz
        k = rem % nz
        if dist[i, j, k] == np.inf and px[i, j, k] == PARENT_NONE:
            continue  # already cleared
        dist[i, j, k] = np.inf
        px[i, j, k] = PARENT_NONE
        py[i, j, k] = PARENT_NONE
        pz[i, j, k] = PARENT_NONE
        sx[i, j, k] = PARENT_NONE
        sy[i, j, k] = PARENT_NONE
        sz[i, j, k] = PARENT_NONE
        changed.flat[idx] = True
        for n in range(offsets.shape[0]):
            ui = i + offsets[n, 0]
            uj = j + offsets[n, 1]
            uk = k + offsets[n, 2]
            if ui < 0 or uj < 0 or uk < 0 or ui >= nx or uj >= ny or uk >= nz:
                continue
            if not observed[ui, uj, uk]:
                continue
            upx = px[ui, uj, uk]
            if upx == PARENT_NONE:
                continue  # cleared or never reached
            # parent validity: inside the window and still a source
            lpi = upx - ox
            lpj = py[ui, uj, uk] - oy
            lpk = pz[ui, uj, uk] - oz
            uidx = (ui * ny + uj) * nz + uk
            valid = (
                0 <= lpi < nx
                and 0 <= lpj < ny
                and 0 <= lpk < nz
                and fixed[lpi, lpj, lpk]
            )
            if valid:
                if l_size >= cap:
                    return -1
                l_size = _heap_push(l_keys, l_ties, l_idxs, l_size, dist[ui, uj, uk], uidx, uidx)
            else:
                if r_size >= cap:
                    return -1
                r_size = _heap_push(r_keys, r_ties, r_idxs, r_size, dist[ui, uj, uk], uidx, uidx)

    for s in range(lower_seeds.shape[0]):
        idx = lower_seeds[s]
        if l_size >= cap:
            return -1
        l_size = _heap_push(l_keys, l_ties, l_idxs, l_size, dist.flat[idx], idx, idx)

    # Lower phase: Dijkstra-style relaxation; each voxel stores the exact
    # center-to-center distance to its recorded parent, so propagated
    # distances stay within a voxel diagonal of the true value.
    while l_size > 0:
        key, idx, l_size = _heap_pop(l_keys, l_ties, l_idxs, l_size)
        i = idx // (ny * nz)
        rem = idx % (ny * nz)
        j = rem // nz
        k = rem % nz
        if key > dist[i, j, k] + 1e-12:
            continue  # stale entry
        gpx = px[i, j, k]
        gpy = py[i, j, k]
        gpz = pz[i, j, k]
        if gpx == PARENT_NONE:
            continue
        for n in range(offsets.shape[0]):
            ui = i + offsets[n, 0]
            uj = j + offsets[n, 1]
            uk = k + offsets[n, 2]
            if ui < 0 or uj < 0 or uk < 0 or ui >= nx or uj >= ny or uk >= nz:
                continue
            if not observed[ui, uj, uk] or fixed[ui, uj, uk]:
                continue
            dx = float(ui + ox - gpx)
            dy = float(uj + oy - gpy)
            dz = float(uk + oz - gpz)
            cand = voxel_size * np.sqrt(dx * dx + dy * dy + dz * dz)
            if cand > max_dist:
                continue
            uidx = (ui * ny + uj) * nz + uk
            if cand < dist[ui, uj, uk] - 1e-12:
                # keep the displaced wavefront origin as a secondary basis
                # when it is a genuinely distinct site
                opx = px[ui, uj, uk]
                if opx != PARENT_NONE:
                    ddx = opx - gpx
                    ddy = py[ui, uj, uk] - gpy
                    ddz = pz[ui, uj, uk] - gpz
                    if ddx * ddx + ddy * ddy + ddz * ddz > link_sq:
                        sx[ui, uj, uk] = opx
                        sy[ui, uj, uk] = py[ui, uj, uk]
                        sz[ui, uj, uk] = pz[ui, uj, uk]
                dist[ui, uj, uk] = cand
                px[ui, uj, uk] = gpx
                py[ui, uj, uk] = gpy
                pz[ui, uj, uk] = gpz
                # drop a secondary that is no longer distinct from the primary
                if sx[ui, uj, uk] != PARENT_NONE:
                    ddx = sx[ui, uj, uk] - gpx
                    ddy = sy[ui, uj, uk] - gpy
                    ddz = sz[ui, uj, uk] - gpz
                    if ddx * ddx + ddy * ddy + ddz * ddz <= link_sq:
                        sx[ui, uj, uk] = PARENT_NONE
                        sy[ui, uj, uk] = PARENT_NONE
                        sz[ui, uj, uk] = PARENT_NONE
                changed.flat[uidx] = True
                if l_size >= cap:
                    return -1
                l_size = _heap_push(l_keys, l_ties, l_idxs, l_size, cand, uidx, uidx)
            elif cand <= dist[ui, uj, uk] + equid_tol:
                # wavefronts meet: a second origin reaches this voxel at
                # (nearly) the settled distance
                ddx = px[ui, uj, uk] - gpx
                ddy = py[ui, uj, uk] - gpy
                ddz = pz[ui, uj, uk] - gpz
                if ddx * ddx + ddy * ddy + ddz * ddz > link_sq:
                    replace = sx[ui, uj, uk] == PARENT_NONE
                    if not replace:
                        ex = float(sx[ui, uj, uk] - ui - ox)
                        ey = float(sy[ui, uj, uk] - uj - oy)
                        ez = float(sz[ui, uj, uk] - uk - oz)
                        e_cand = voxel_size * np.sqrt(ex * ex + ey * ey + ez * ez)
                        if cand < e_cand - 1e-12:
                            replace = True
                        elif cand <= e_cand + 1e-12:
                            # deterministic tie-break on site coordinate
                            old_key = (
                                (sx[ui, uj, uk] * 2097152 + sy[ui, uj, uk]) * 2097152
                                + sz[ui, uj, uk]
                            )
                            new_key = (gpx * 2097152 + gpy) * 2097152 + gpz
                            replace = new_key < old_key
                    if replace:
                        sx[ui, uj, uk] = gpx
                        sy[ui, uj, uk] = gpy
                        sz[ui, uj, uk] = gpz
                        changed.flat[uidx] = True
    return 0


def run_esdf_update(dist, px, py, pz, sx, sy, sz, fixed, observed, raise_seeds,
                    lower_seeds, origin, voxel_size, max_dist, equid_tol, link_sq,
                    changed):
    """Python wrapper: retries with growing heap capacity on overflow."""
    cap = max(4096, 8 * (len(raise_seeds) + len(lower_seeds)))
    n = dist.size
    while True:
        dist_bak = dist.copy()
        px_bak, py_bak, pz_bak = px.copy(), py.copy(), pz.copy()
        sx_bak, sy_bak, sz_bak = sx.copy(), sy.copy(), sz.copy()
        changed_bak = changed.copy()
        status = _run_update(
            dist, px, py, pz, sx, sy, sz, fixed, observed,
            np.asarray(raise_seeds, dtype=np.int64),
            np.asarray(lower_seeds, dtype=np.int64),
            np.int32(origin[0]), np.int32(origin[1]), np.int32(origin[2]),
            float(voxel_size), float(max_dist), float(equid_tol), float(link_sq),
            changed, _OFFSETS, cap,
        )
        if status == 0:
            return
        dist[:], px[:], py[:], pz[:] = dist_bak, px_bak, py_bak, pz_bak
        sx[:], sy[:], sz[:] = sx_bak, sy_bak, sz_bak
        changed[:] = changed_bak
        cap = min(cap * 4, 32 * n + 1024)


@njit(cache=True)
def basis_cluster_count(cands, n_cands, link_sq):
    """Single-linkage cluster count of candidate sites (order-free)."""
    roots = np.empty(n_cands, dtype=np.int64)
    for i in range(n_cands):
        roots[i] = i
    for i in range(n_cands):
        for j in range(i + 1, n_cands):
            dx = cands[i, 0] - cands[j, 0]
            dy = cands[i, 1] - cands[j, 1]
            dz = cands[i, 2] - cands[j, 2]
            if dx * dx + dy * dy + dz * dz <= link_sq:
                ri = i
                while roots[ri] != ri:
                    ri = roots[ri]
                rj = j
                while roots[rj] != rj:
                    rj = roots[rj]
                if ri != rj:
                    if ri < rj:
                        roots[rj] = ri
                    else:
                        roots[ri] = rj
    count = 0
    for i in range(n_cands):
        ri = i
        while roots[ri] != ri:
            ri = roots[ri]
        if ri == i:
            count += 1
    return count


@njit(cache=True)
def gvd_sweep(
    dist,
    px,
    py,
    pz,
    sx,
    sy,
    sz,
    fixed,
    observed,
    ox,
    oy,
    oz,
    lo0,
    lo1,
    lo2,
    hi0,
    hi1,
    hi2,
    min_dist,
    voxel_size,
    equid_tol_vox,
    link_vox_sq,
    member_out,
    extra_out,
    offsets,
):
    """Recompute skeleton membership over a subregion from the parent field.

    For each voxel, the nearest-site candidates carried by its
    27-neighborhood are pruned to those within one equidistance tolerance
    of the voxel's own clearance and then merged by single-linkage
    chaining: sites of one contiguous surface chain into a single cluster,
    while distinct obstacles stay apart. Two or more clusters make the
    voxel a skeleton member; the cluster count beyond the first is its
    extra-basis count. The rule is a function of the candidate set only,
    so it has no dependence on sweep order.
    """
    nx, ny, nz = dist.shape
    cands = np.empty((54, 3), dtype=np.int64)
    for i in range(lo0, hi0):
        for j in range(lo1, hi1):
            for k in range(lo2, hi2):
                member_out[i, j, k] = False
                extra_out[i, j, k] = 0
                if not observed[i, j, k]:
                    continue
                d = dist[i, j, k]
                if d < min_dist or d == np.inf:
                    continue
                if px[i, j, k] == PARENT_NONE:
                    continue
                d_vox = d / voxel_size
                limit = d_vox + equid_tol_vox
                limit_sq = limit * limit
                n_c = 0
                for n in range(-1, offsets.shape[0]):
                    if n < 0:
                        ui, uj, uk = i, j, k
                    else:
                        ui = i + offsets[n, 0]
                        uj = j + offsets[n, 1]
                        uk = k + offsets[n, 2]
                        if ui < 0 or uj < 0 or uk < 0 or ui >= nx or uj >= ny or uk >= nz:
                            continue
                    if not observed[ui, uj, uk]:
                        continue
                    for which in range(2):
                        if which == 0:
                            qx = px[ui, uj, uk]
                            qy = py[ui, uj, uk]
                            qz = pz[ui, uj, uk]
                        else:
                            qx = sx[ui, uj, uk]
                            qy = sy[ui, uj, uk]
                            qz = sz[ui, uj, uk]
                        if qx == PARENT_NONE:
                            continue
                        # candidate sites are global voxel coords; they must
                        # still be live sources and (nearly) equidistant
                        li = qx - ox
                        lj = qy - oy
                        lk = qz - oz
                        if li < 0 or lj < 0 or lk < 0 or li >= nx or lj >= ny or lk >= nz:
                            continue
                        if not fixed[li, lj, lk]:
                            continue
                        ddx = float(qx - (i + ox))
                        ddy = float(qy - (j + oy))
                        ddz = float(qz - (k + oz))
                        if ddx * ddx + ddy * ddy + ddz * ddz > limit_sq:
                            continue
                        dup = False
                        for m in range(n_c):
                            if cands[m, 0] == qx and cands[m, 1] == qy and cands[m, 2] == qz:
                                dup = True
                                break
                        if not dup and n_c < 54:
                            cands[n_c, 0] = qx
                            cands[n_c, 1] = qy
                            cands[n_c, 2] = qz
                            n_c += 1
                if n_c < 2:
                    continue
                clusters = basis_cluster_count(cands, n_c, link_vox_sq)
                if clusters >= 2:
                    member_out[i, j, k] = True
                    extra_out[i, j, k] = clusters - 1
