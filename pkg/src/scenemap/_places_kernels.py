"""Numba kernels for place-graph maintenance over dense window-local grids."""

from __future__ import annotations

import numpy as np
from numba import njit

NON_MEMBER = np.int32(-2)
UNLABELED = np.int32(-1)


@njit(cache=True)
def flood_fill_labels(grid, nx, ny, nz, seeds, pairs_a, pairs_b, cap):
    """Multi-source BFS over the member grid.

    ``grid`` is flat int32: -2 non-member, -1 member (unlabeled), >= 0 a
    label. Seeds must already be written into the grid; ``seeds`` holds
    their linear indices. Expansion runs in waves with each wave processed
    in ascending linear index, so labeling is deterministic. Contacts
    between differing labels are emitted into the pair arrays (may contain
    duplicates). Returns the number of pairs, or -1 on overflow.
    """
    n_pairs = 0
    frontier = np.sort(seeds.copy())
    while frontier.shape[0] > 0:
        next_frontier = np.empty(frontier.shape[0] * 26, dtype=np.int64)
        n_next = 0
        for f in range(frontier.shape[0]):
            idx = frontier[f]
            label = grid[idx]
            i = idx // (ny * nz)
            rem = idx % (ny * nz)
            j = rem // nz
            k = rem % nz
            for di in range(-1, 2):
                ii = i + di
                if ii < 0 or ii >= nx:
                    continue
                for dj in range(-1, 2):
                    jj = j + dj
                    if jj < 0 or jj >= ny:
                        continue
                    for dk in range(-1, 2):
                        kk = k + dk
                        if kk < 0 or kk >= nz or (di == 0 and dj == 0 and dk == 0):
                            continue
                        nidx = (ii * ny + jj) * nz + kk
                        val = grid[nidx]
                        if val == NON_MEMBER:
                            continue
                        if val == UNLABELED:
                            grid[nidx] = label
                            next_frontier[n_next] = nidx
                            n_next += 1
                        elif val != label:
                            if n_pairs >= cap:
                                return -1
                            if val < label:
                                pairs_a[n_pairs] = val
                                pairs_b[n_pairs] = label
                            else:
                                pairs_a[n_pairs] = label
                                pairs_b[n_pairs] = val
                            n_pairs += 1
        frontier = np.sort(next_frontier[:n_next])
    return n_pairs


@njit(cache=True)
def component_labels(grid, nx, ny, nz):
    """Connected components of member voxels (26-adjacency): flat int32
    array with -1 for non-members, else a component id by discovery order
    of the lowest linear index."""
    comp = np.full(grid.shape[0], -1, dtype=np.int32)
    stack = np.empty(grid.shape[0], dtype=np.int64)
    current = 0
    for start in range(grid.shape[0]):
        if grid[start] == NON_MEMBER or comp[start] >= 0:
            continue
        comp[start] = current
        stack[0] = start
        top = 1
        while top > 0:
            top -= 1
            idx = stack[top]
            i = idx // (ny * nz)
            rem = idx % (ny * nz)
            j = rem // nz
            k = rem % nz
            for di in range(-1, 2):
                ii = i + di
                if ii < 0 or ii >= nx:
                    continue
                for dj in range(-1, 2):
                    jj = j + dj
                    if jj < 0 or jj >= ny:
                        continue
                    for dk in range(-1, 2):
                        kk = k + dk
                        if kk < 0 or kk >= nz or (di == 0 and dj == 0 and dk == 0):
                            continue
                        nidx = (ii * ny + jj) * nz + kk
                        if grid[nidx] != NON_MEMBER and comp[nidx] < 0:
                            comp[nidx] = current
                            stack[top] = nidx
                            top += 1
        current += 1
    return comp
