"""Spatially windowed volumetric mapping.

Maintains a truncated signed distance field in fixed-size blocks around the
robot, an unsigned Euclidean distance field updated by dual-queue wavefront
propagation with parent (nearest surface voxel) tracking, a skeleton of
free-space voxels whose neighborhoods span two or more distinct wavefront
origins, and an incrementally extracted labeled triangle mesh. Blocks that
leave a sphere around the robot are archived exactly once and dropped from
storage, which bounds memory and per-scan compute.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from ._esdf_kernels import PARENT_NONE, gvd_sweep, run_esdf_update, _OFFSETS

Coord = tuple[int, int, int]


@dataclass
class VolumetricConfig:
    voxel_size: float = 0.1
    block_size: int = 16
    truncation: float = 0.3
    max_range: float = 5.0
    num_labels: int = 16
    window_radius: float = 8.0
    # skeleton extraction
    min_gvd_distance_vox: float = 2.0  # clearance floor, in voxels
    basis_separation_vox: float = 3.0  # site chains farther apart are distinct obstacles
    equid_tolerance_vox: float = 1.0  # how close to equidistant two sites must be
    max_esdf_distance: float = 10.0

    def __post_init__(self):
        if self.truncation < 2 * self.voxel_size:
            raise ValueError("truncation must be at least two voxel sizes")
        if self.voxel_size <= 0 or self.block_size < 4:
            raise ValueError("bad grid geometry")


@dataclass
class PosedLabeledCloud:
    pose: np.ndarray  # 4x4 world <- sensor
    points: np.ndarray  # (n, 3) in sensor frame
    labels: np.ndarray  # (n,)
    surface_ids: Optional[np.ndarray] = None  # (n,) stable ids of the hit surface

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if not np.all(np.isfinite(self.pose)):
            raise ValueError("cloud pose must be finite")
        if self.points.shape[0] != self.labels.shape[0]:
            raise ValueError("points and labels must have equal length")


@dataclass(frozen=True)
class GvdVoxelInfo:
    coord: Coord
    distance: float
    parent: Optional[Coord]
    num_extra_basis: int


@dataclass
class GvdDelta:
    added: list[GvdVoxelInfo] = field(default_factory=list)
    updated: list[GvdVoxelInfo] = field(default_factory=list)
    removed: list[Coord] = field(default_factory=list)

    def empty(self) -> bool:
        return not (self.added or self.updated or self.removed)


@dataclass
class MeshDelta:
    block_vertices: dict = field(default_factory=dict)  # block -> (ids, positions, labels)
    block_faces: dict = field(default_factory=dict)  # block -> list of id triples
    removed_ids: list[int] = field(default_factory=list)
    bindings: dict = field(default_factory=dict)  # surface voxel coord -> vertex id

    def empty(self) -> bool:
        return not (self.block_vertices or self.removed_ids)


@dataclass
class ArchivedChunk:
    vertex_ids: np.ndarray
    positions: np.ndarray
    labels: np.ndarray
    faces: list[tuple[int, int, int]]
    archived_blocks: list[Coord]
    place_ids: list = field(default_factory=list)

    def empty(self) -> bool:
        return not self.archived_blocks


class _TsdfBlock:
    __slots__ = ("distance", "weight", "label_hist")

    def __init__(self, side: int):
        self.distance = np.zeros((side, side, side), dtype=np.float32)
        self.weight = np.zeros((side, side, side), dtype=np.float32)
        self.label_hist = None  # lazily (side, side, side, num_labels) uint16

    def ensure_hist(self, num_labels: int):
        if self.label_hist is None:
            side = self.distance.shape[0]
            self.label_hist = np.zeros((side, side, side, num_labels), dtype=np.uint16)
        return self.label_hist


class _BlockMesh:
    __slots__ = ("ids", "positions", "labels", "faces")

    def __init__(self, ids, positions, labels, faces):
        self.ids = ids
        self.positions = positions
        self.labels = labels
        self.faces = faces


class VolumetricWindow:
    """Block-hashed TSDF plus a dense distance-field mirror of the window."""

    def __init__(self, config: VolumetricConfig | None = None):
        self.config = config or VolumetricConfig()
        self.blocks: dict[Coord, _TsdfBlock] = {}
        self.block_mesh: dict[Coord, _BlockMesh] = {}
        self._bindings: dict[Coord, int] = {}  # surface voxel -> representative vertex id
        self._block_binding_keys: dict[Coord, set[Coord]] = {}
        self._next_vertex_id = 0
        self._pending_clear: list[Coord] = []
        # dense window-local field
        self._origin = np.zeros(3, dtype=np.int64)
        self._shape = (0, 0, 0)
        self._tsdf = np.zeros((0, 0, 0), dtype=np.float32)
        self._observed = np.zeros((0, 0, 0), dtype=bool)
        self._dist = np.zeros((0, 0, 0), dtype=np.float64)
        self._px = np.zeros((0, 0, 0), dtype=np.int32)
        self._py = np.zeros((0, 0, 0), dtype=np.int32)
        self._pz = np.zeros((0, 0, 0), dtype=np.int32)
        self._sx = np.zeros((0, 0, 0), dtype=np.int32)
        self._sy = np.zeros((0, 0, 0), dtype=np.int32)
        self._sz = np.zeros((0, 0, 0), dtype=np.int32)
        self._fixed = np.zeros((0, 0, 0), dtype=bool)
        self._member = np.zeros((0, 0, 0), dtype=bool)
        self._extra = np.zeros((0, 0, 0), dtype=np.int8)
        self._member_coords_cache = None
        self._pending_raise: list[int] = []

    # ------------------------------------------------------------ geometry

    def world_to_voxel(self, points) -> np.ndarray:
        return np.floor(np.atleast_2d(points) / self.config.voxel_size).astype(np.int64)

    def voxel_center(self, coords) -> np.ndarray:
        return (np.atleast_2d(coords).astype(float) + 0.5) * self.config.voxel_size

    def block_of(self, voxel) -> np.ndarray:
        return np.floor_divide(np.atleast_2d(voxel), self.config.block_size)

    @property
    def num_allocated_blocks(self) -> int:
        return len(self.blocks)

    # ----------------------------------------------------------- integrate

    def integrate_cloud(self, cloud: PosedLabeledCloud) -> set[Coord]:
        """Weighted projective TSDF update along each sensor ray.

        Every ray is sampled at half-voxel steps from the origin out to one
        truncation band beyond the endpoint; samples in front of the band
        carve free space at the clamped truncation distance, samples inside
        the band update the signed distance average and the voxel's label
        histogram. Points beyond max_range are ignored.
        """
        cfg = self.config
        v = cfg.voxel_size
        tau = cfg.truncation
        if cloud.points.shape[0] == 0:
            return set()
        R = cloud.pose[:3, :3]
        origin = cloud.pose[:3, 3]
        pts_w = cloud.points @ R.T + origin
        ranges = np.linalg.norm(pts_w - origin, axis=1)
        keep = np.isfinite(ranges) & (ranges > 1e-6) & (ranges <= cfg.max_range)
        pts_w = pts_w[keep]
        ranges = ranges[keep]
        labels = cloud.labels[keep]
        if pts_w.shape[0] == 0:
            return set()
        dirs = (pts_w - origin) / ranges[:, None]

        step = 0.5 * v
        counts = np.ceil((ranges + tau) / step).astype(np.int64) + 1
        total = int(counts.sum())
        ray_idx = np.repeat(np.arange(len(ranges)), counts)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        t = (np.arange(total) - np.repeat(starts, counts)) * step
        samples = origin[None, :] + dirs[ray_idx] * t[:, None]
        sdf = ranges[ray_idx] - t
        sdf = np.clip(sdf, -tau, tau)

        vox = np.floor(samples / v).astype(np.int64)
        # one entry per (ray, voxel); the signed distance is then evaluated
        # exactly at the voxel center (projective, along the ray)
        key = (vox[:, 0] + 2**20) * 2**42 + (vox[:, 1] + 2**20) * 2**21 + (vox[:, 2] + 2**20)
        pair_order = np.lexsort((ray_idx, key))
        key_sorted = key[pair_order]
        ray_sorted = ray_idx[pair_order]
        first = np.ones(total, dtype=bool)
        first[1:] = (key_sorted[1:] != key_sorted[:-1]) | (ray_sorted[1:] != ray_sorted[:-1])
        sel = pair_order[first]

        vox = vox[sel]
        rays = ray_idx[sel]
        centers = (vox + 0.5) * v
        t_center = np.einsum("ij,ij->i", centers - origin[None, :], dirs[rays])
        sdf = np.clip(ranges[rays] - t_center, -tau, tau)
        lab = labels[rays]
        near = np.abs(sdf) < tau - 1e-9

        touched: set[Coord] = set()
        S = cfg.block_size
        bcoords = vox // S
        offsets = vox - bcoords * S
        bkey = (bcoords[:, 0] + 2**20) * 2**42 + (bcoords[:, 1] + 2**20) * 2**21 + (
            bcoords[:, 2] + 2**20
        )
        order = np.argsort(bkey, kind="stable")
        bkey_sorted = bkey[order]
        boundaries = np.concatenate(
            [[0], np.nonzero(bkey_sorted[1:] != bkey_sorted[:-1])[0] + 1, [len(bkey_sorted)]]
        )
        for s0, s1 in zip(boundaries[:-1], boundaries[1:]):
            rows = order[s0:s1]
            bc = tuple(int(x) for x in bcoords[rows[0]])
            block = self.blocks.get(bc)
            if block is None:
                block = _TsdfBlock(S)
                self.blocks[bc] = block
            off = offsets[rows]
            flat = (off[:, 0] * S + off[:, 1]) * S + off[:, 2]
            w_add = np.zeros(S**3, dtype=np.float64)
            d_add = np.zeros(S**3, dtype=np.float64)
            np.add.at(w_add, flat, 1.0)
            np.add.at(d_add, flat, sdf[rows])
            w_old = block.weight.reshape(-1)
            d_old = block.distance.reshape(-1)
            upd = w_add > 0
            new_w = w_old[upd] + w_add[upd]
            d_old[upd] = (d_old[upd] * w_old[upd] + d_add[upd]) / new_w
            w_old[upd] = new_w
            near_rows = rows[near[rows]]
            if near_rows.size:
                hist = block.ensure_hist(cfg.num_labels).reshape(-1, cfg.num_labels)
                off_n = offsets[near_rows]
                flat_n = (off_n[:, 0] * S + off_n[:, 1]) * S + off_n[:, 2]
                lab_n = np.clip(lab[near_rows], 0, cfg.num_labels - 1)
                np.add.at(hist, (flat_n, lab_n), 1)
            touched.add(bc)
        return touched

    # -------------------------------------------------------- dense window

    def _target_bbox(self) -> tuple[np.ndarray, tuple[int, int, int]]:
        S = self.config.block_size
        if not self.blocks:
            return np.zeros(3, dtype=np.int64), (0, 0, 0)
        coords = np.array(sorted(self.blocks.keys()), dtype=np.int64)
        lo = coords.min(axis=0) * S - 1
        hi = (coords.max(axis=0) + 1) * S + 1
        return lo, tuple(int(x) for x in (hi - lo))

    def _rebase(self) -> None:
        """Re-anchor the dense arrays to the current block set.

        Voxels whose recorded parent falls outside the moved window are
        queued as raise seeds for the next field update.
        """
        lo, shape = self._target_bbox()
        if np.array_equal(lo, self._origin) and shape == self._shape:
            return
        was_empty = self._shape == (0, 0, 0)
        nx, ny, nz = shape

        def fresh(dtype, fill):
            arr = np.full(shape, fill, dtype=dtype)
            return arr

        new_tsdf = fresh(np.float32, 0.0)
        new_obs = fresh(bool, False)
        new_dist = fresh(np.float64, np.inf)
        new_px = fresh(np.int32, PARENT_NONE)
        new_py = fresh(np.int32, PARENT_NONE)
        new_pz = fresh(np.int32, PARENT_NONE)
        new_sx = fresh(np.int32, PARENT_NONE)
        new_sy = fresh(np.int32, PARENT_NONE)
        new_sz = fresh(np.int32, PARENT_NONE)
        new_fix = fresh(bool, False)
        new_mem = fresh(bool, False)
        new_ext = fresh(np.int8, 0)

        if self._shape != (0, 0, 0):
            old_lo = self._origin
            old_hi = self._origin + np.array(self._shape)
            new_hi = lo + np.array(shape)
            ov_lo = np.maximum(old_lo, lo)
            ov_hi = np.minimum(old_hi, new_hi)
            if np.all(ov_hi > ov_lo):
                src = tuple(slice(int(a - old_lo[i]), int(b - old_lo[i])) for i, (a, b) in enumerate(zip(ov_lo, ov_hi)))
                dst = tuple(slice(int(a - lo[i]), int(b - lo[i])) for i, (a, b) in enumerate(zip(ov_lo, ov_hi)))
                new_tsdf[dst] = self._tsdf[src]
                new_obs[dst] = self._observed[src]
                new_dist[dst] = self._dist[src]
                new_px[dst] = self._px[src]
                new_py[dst] = self._py[src]
                new_pz[dst] = self._pz[src]
                new_sx[dst] = self._sx[src]
                new_sy[dst] = self._sy[src]
                new_sz[dst] = self._sz[src]
                new_fix[dst] = self._fixed[src]
                new_mem[dst] = self._member[src]
                new_ext[dst] = self._extra[src]

        self._origin = lo
        self._shape = shape
        self._tsdf, self._observed, self._dist = new_tsdf, new_obs, new_dist
        self._px, self._py, self._pz = new_px, new_py, new_pz
        self._sx, self._sy, self._sz = new_sx, new_sy, new_sz
        self._fixed, self._member, self._extra = new_fix, new_mem, new_ext
        self._member_coords_cache = None
        self._pending_raise = []

        if nx == 0:
            return
        if was_empty:
            for bc in self.blocks:
                self._sync_block(bc)
            return
        has_parent = self._px != PARENT_NONE
        in_x = (self._px >= lo[0]) & (self._px < lo[0] + nx)
        in_y = (self._py >= lo[1]) & (self._py < lo[1] + ny)
        in_z = (self._pz >= lo[2]) & (self._pz < lo[2] + nz)
        orphan = has_parent & ~(in_x & in_y & in_z)
        self._pending_raise = np.flatnonzero(orphan.reshape(-1)).tolist()

    def _sync_block(self, bc: Coord) -> None:
        S = self.config.block_size
        block = self.blocks[bc]
        lo = np.array(bc, dtype=np.int64) * S - self._origin
        sl = tuple(slice(int(lo[i]), int(lo[i]) + S) for i in range(3))
        self._tsdf[sl] = block.distance
        self._observed[sl] = block.weight > 0

    def _clear_block_region(self, bc: Coord) -> None:
        S = self.config.block_size
        lo = np.array(bc, dtype=np.int64) * S - self._origin
        hi = lo + S
        if np.any(hi <= 0) or np.any(lo >= np.array(self._shape)):
            return
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, np.array(self._shape))
        sl = tuple(slice(int(lo[i]), int(hi[i])) for i in range(3))
        self._tsdf[sl] = 0.0
        self._observed[sl] = False

    def _ensure_synced(self, updated_blocks: Iterable[Coord]) -> None:
        self._rebase()
        for bc in self._pending_clear:
            self._clear_block_region(bc)
        self._pending_clear = []
        for bc in updated_blocks:
            if bc in self.blocks:
                self._sync_block(bc)

    def _detect_sources(self) -> np.ndarray:
        """Surface voxels: observed non-positive TSDF with an observed
        positive 6-neighbor."""
        inside = self._observed & (self._tsdf <= 0)
        free = self._observed & (self._tsdf > 0)
        src = np.zeros_like(inside)
        for axis in range(3):
            for sign in (1, -1):
                shifted = np.roll(free, sign, axis=axis)
                # roll wraps; kill the wrapped slice
                idx = [slice(None)] * 3
                idx[axis] = 0 if sign == 1 else -1
                shifted[tuple(idx)] = False
                src |= inside & shifted
        return src

    # ----------------------------------------------------------- the field

    def update_esdf(self, updated_blocks: Iterable[Coord]) -> GvdDelta:
        """Propagate the distance field after TSDF changes.

        Sources (surface voxels) are re-detected in the window; removed
        sources trigger a raise wavefront that clears dependents, new ones a
        lower wavefront. Skeleton membership is then re-derived from the
        parent field over the changed region and returned as a delta.
        """
        cfg = self.config
        self._ensure_synced(updated_blocks)
        orphans = self._pending_raise
        self._pending_raise = []
        if self._shape == (0, 0, 0):
            return GvdDelta()

        new_fixed = self._detect_sources()
        removed = self._fixed & ~new_fixed
        added = new_fixed & ~self._fixed
        raise_seeds = np.flatnonzero(removed.reshape(-1)).tolist() + orphans
        lower_seeds = np.flatnonzero(added.reshape(-1))
        self._fixed = new_fixed
        changed = np.zeros(self._shape, dtype=bool)

        if len(raise_seeds) == 0 and len(lower_seeds) == 0:
            return GvdDelta()

        if len(lower_seeds):
            ii, jj, kk = np.unravel_index(lower_seeds, self._shape)
            self._dist[ii, jj, kk] = 0.0
            self._px[ii, jj, kk] = (ii + self._origin[0]).astype(np.int32)
            self._py[ii, jj, kk] = (jj + self._origin[1]).astype(np.int32)
            self._pz[ii, jj, kk] = (kk + self._origin[2]).astype(np.int32)
            self._sx[ii, jj, kk] = PARENT_NONE
            self._sy[ii, jj, kk] = PARENT_NONE
            self._sz[ii, jj, kk] = PARENT_NONE
            changed[ii, jj, kk] = True

        run_esdf_update(
            self._dist,
            self._px,
            self._py,
            self._pz,
            self._sx,
            self._sy,
            self._sz,
            self._fixed,
            self._observed,
            np.asarray(raise_seeds, dtype=np.int64),
            np.asarray(lower_seeds, dtype=np.int64),
            self._origin,
            cfg.voxel_size,
            cfg.max_esdf_distance,
            cfg.equid_tolerance_vox * cfg.voxel_size,
            cfg.basis_separation_vox**2,
            changed,
        )
        return self._sweep_membership(changed)

    def _sweep_membership(self, changed: np.ndarray) -> GvdDelta:
        idx = np.argwhere(changed)
        if idx.size == 0:
            return GvdDelta()
        lo = np.maximum(idx.min(axis=0) - 1, 0)
        hi = np.minimum(idx.max(axis=0) + 2, np.array(self._shape))
        region = tuple(slice(int(lo[i]), int(hi[i])) for i in range(3))
        prev_member = self._member[region].copy()
        prev_extra = self._extra[region].copy()

        free = self._observed & (self._tsdf > 0)
        # membership is only defined for free voxels; fold the free mask into
        # the observed mask handed to the sweep
        gvd_sweep(
            self._dist,
            self._px,
            self._py,
            self._pz,
            self._sx,
            self._sy,
            self._sz,
            self._fixed,
            self._observed,
            np.int64(self._origin[0]),
            np.int64(self._origin[1]),
            np.int64(self._origin[2]),
            int(lo[0]),
            int(lo[1]),
            int(lo[2]),
            int(hi[0]),
            int(hi[1]),
            int(hi[2]),
            self.config.min_gvd_distance_vox * self.config.voxel_size,
            self.config.voxel_size,
            self.config.equid_tolerance_vox,
            self.config.basis_separation_vox**2,
            self._member,
            self._extra,
            _OFFSETS,
        )
        self._member[region] &= free[region]
        self._member_coords_cache = None

        now_member = self._member[region]
        now_extra = self._extra[region]
        delta = GvdDelta()
        changed_region = changed[region]
        added_mask = now_member & ~prev_member
        removed_mask = prev_member & ~now_member
        updated_mask = now_member & prev_member & (changed_region | (now_extra != prev_extra))
        for mask, sink in ((added_mask, delta.added), (updated_mask, delta.updated)):
            coords = np.argwhere(mask)
            for c in coords:
                g = tuple(int(x) for x in (c + lo + self._origin))
                sink.append(self._info_at(g))
        for c in np.argwhere(removed_mask):
            delta.removed.append(tuple(int(x) for x in (c + lo + self._origin)))
        return delta

    def _local(self, coord: Coord) -> Optional[tuple[int, int, int]]:
        l = (
            coord[0] - int(self._origin[0]),
            coord[1] - int(self._origin[1]),
            coord[2] - int(self._origin[2]),
        )
        if any(x < 0 for x in l) or any(l[i] >= self._shape[i] for i in range(3)):
            return None
        return l

    def _info_at(self, coord: Coord) -> GvdVoxelInfo:
        l = self._local(coord)
        assert l is not None
        parent = (int(self._px[l]), int(self._py[l]), int(self._pz[l]))
        if parent[0] == PARENT_NONE:
            parent = None
        return GvdVoxelInfo(
            coord=coord,
            distance=float(self._dist[l]),
            parent=parent,
            num_extra_basis=int(self._extra[l]),
        )

    # ------------------------------------------------------- field queries

    def esdf_distance(self, coord: Coord) -> float:
        l = self._local(coord)
        if l is None:
            return float("inf")
        return float(self._dist[l])

    def esdf_parent(self, coord: Coord) -> Optional[Coord]:
        l = self._local(coord)
        if l is None or self._px[l] == PARENT_NONE:
            return None
        return (int(self._px[l]), int(self._py[l]), int(self._pz[l]))

    def is_gvd_member(self, coord: Coord) -> bool:
        l = self._local(coord)
        return bool(l is not None and self._member[l])

    def gvd_info(self, coord: Coord) -> Optional[GvdVoxelInfo]:
        if not self.is_gvd_member(coord):
            return None
        return self._info_at(coord)

    def gvd_member_coords(self) -> np.ndarray:
        if self._member_coords_cache is None:
            if self._shape == (0, 0, 0):
                self._member_coords_cache = np.zeros((0, 3), dtype=np.int64)
            else:
                self._member_coords_cache = np.argwhere(self._member) + self._origin
        return self._member_coords_cache

    def binding_for(self, surface_voxel: Coord) -> Optional[int]:
        return self._bindings.get(surface_voxel)

    def observed_free_mask(self) -> tuple[np.ndarray, np.ndarray]:
        """(origin voxel coord, boolean free-space mask) of the window."""
        return self._origin.copy(), (self._observed & (self._tsdf > 0)).copy()

    def esdf_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(origin, distances, observed) dense views for tests/metrics."""
        return self._origin.copy(), self._dist.copy(), self._observed.copy()

    # ---------------------------------------------------------------- mesh

    def extract_mesh(self, updated_blocks: Iterable[Coord]) -> MeshDelta:
        """Marching cubes over each updated block on the zero level set.

        Cells use a one-voxel halo from neighboring blocks so surfaces stay
        continuous across block faces; only fully observed cells march.
        Each surface voxel in the block records one representative mesh
        vertex, consumed later for place/parent bindings.
        """
        from skimage import measure

        cfg = self.config
        S = cfg.block_size
        v = cfg.voxel_size
        self._ensure_synced(updated_blocks)
        delta = MeshDelta()
        for bc in sorted(set(updated_blocks)):
            if bc not in self.blocks:
                continue
            lo_local = np.array(bc, dtype=np.int64) * S - self._origin
            hi_local = lo_local + S + 1
            if np.any(lo_local < 0) or np.any(hi_local > np.array(self._shape)):
                continue  # window not rebased over this block yet
            region = tuple(slice(int(lo_local[i]), int(hi_local[i])) for i in range(3))
            vol = self._tsdf[region].astype(np.float64)
            mask = self._observed[region]

            old = self.block_mesh.pop(bc, None)
            if old is not None:
                delta.removed_ids.extend(int(i) for i in old.ids)
                for key in self._block_binding_keys.pop(bc, ()):  # stale bindings
                    self._bindings.pop(key, None)

            if not mask.any():
                continue
            vals = vol[mask]
            if not (np.any(vals <= 0) and np.any(vals > 0)):
                continue
            try:
                verts, faces, _, _ = measure.marching_cubes(
                    vol, level=0.0, spacing=(v, v, v), mask=mask
                )
            except (ValueError, RuntimeError):
                continue
            if len(verts) == 0:
                continue
            # corner sample i sits at the center of voxel (block_lo + i)
            block_world = (np.array(bc, dtype=float) * S + 0.5) * v
            verts_world = verts + block_world

            labels = self._labels_for_vertices(verts_world)
            ids = np.arange(self._next_vertex_id, self._next_vertex_id + len(verts_world), dtype=np.int64)
            self._next_vertex_id += len(verts_world)
            face_ids = [tuple(int(ids[i]) for i in f) for f in faces]
            face_ids = [f for f in face_ids if len(set(f)) == 3]
            self.block_mesh[bc] = _BlockMesh(ids, verts_world, labels, face_ids)
            delta.block_vertices[bc] = (ids, verts_world, labels)
            delta.block_faces[bc] = face_ids

            delta.bindings.update(self._bind_surface_voxels(bc, ids, verts_world))
        return delta

    def _labels_for_vertices(self, verts_world: np.ndarray) -> np.ndarray:
        cfg = self.config
        S = cfg.block_size
        vox = self.world_to_voxel(verts_world)
        labels = np.zeros(len(verts_world), dtype=np.int64)
        pending = np.ones(len(verts_world), dtype=bool)
        bcoords = vox // S
        keys = (bcoords[:, 0] + 2**20) * 2**42 + (bcoords[:, 1] + 2**20) * 2**21 + (
            bcoords[:, 2] + 2**20
        )
        for key in np.unique(keys):
            rows = np.nonzero(keys == key)[0]
            bc = tuple(int(x) for x in bcoords[rows[0]])
            block = self.blocks.get(bc)
            if block is None or block.label_hist is None:
                continue
            off = vox[rows] - np.array(bc, dtype=np.int64) * S
            hist = block.label_hist[off[:, 0], off[:, 1], off[:, 2]]
            have = hist.sum(axis=1) > 0
            labels[rows[have]] = np.argmax(hist[have], axis=1)
            pending[rows[have]] = False
        # fallback: vertex voxel carries no label yet, borrow a neighbor
        for off in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            if not pending.any():
                break
            rows_p = np.nonzero(pending)[0]
            shifted = vox[rows_p] + np.array(off, dtype=np.int64)
            sub_labels, have = self._batch_hist_labels(shifted)
            labels[rows_p[have]] = sub_labels[have]
            pending[rows_p[have]] = False
        return labels

    def _batch_hist_labels(self, vox: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        S = self.config.block_size
        labels = np.zeros(len(vox), dtype=np.int64)
        have = np.zeros(len(vox), dtype=bool)
        bcoords = vox // S
        keys = (bcoords[:, 0] + 2**20) * 2**42 + (bcoords[:, 1] + 2**20) * 2**21 + (
            bcoords[:, 2] + 2**20
        )
        for key in np.unique(keys):
            rows = np.nonzero(keys == key)[0]
            bc = tuple(int(x) for x in bcoords[rows[0]])
            block = self.blocks.get(bc)
            if block is None or block.label_hist is None:
                continue
            off = vox[rows] - np.array(bc, dtype=np.int64) * S
            hist = block.label_hist[off[:, 0], off[:, 1], off[:, 2]]
            nonzero = hist.sum(axis=1) > 0
            labels[rows[nonzero]] = np.argmax(hist[nonzero], axis=1)
            have[rows[nonzero]] = True
        return labels, have

    def _voxel_label(self, coord: Coord) -> int:
        best = self._hist_argmax(coord)
        if best >= 0:
            return best
        for off in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            best = self._hist_argmax((coord[0] + off[0], coord[1] + off[1], coord[2] + off[2]))
            if best >= 0:
                return best
        return 0

    def _hist_argmax(self, coord: Coord) -> int:
        S = self.config.block_size
        bc = tuple(int(np.floor_divide(coord[i], S)) for i in range(3))
        block = self.blocks.get(bc)
        if block is None or block.label_hist is None:
            return -1
        off = tuple(int(coord[i] - bc[i] * S) for i in range(3))
        hist = block.label_hist[off]
        if hist.sum() == 0:
            return -1
        return int(np.argmax(hist))

    def _bind_surface_voxels(self, bc: Coord, ids, verts_world) -> dict[Coord, int]:
        """Map each surface voxel of the block to its nearest new vertex
        (within one voxel diagonal)."""
        cfg = self.config
        S = cfg.block_size
        v = cfg.voxel_size
        lo_local = np.array(bc, dtype=np.int64) * S - self._origin
        region = tuple(slice(int(lo_local[i]), int(lo_local[i]) + S) for i in range(3))
        src_local = np.argwhere(self._fixed[region])
        if src_local.size == 0:
            return {}
        from scipy.spatial import cKDTree

        centers = (src_local + lo_local + self._origin + 0.5) * v
        tree = cKDTree(verts_world)
        diag = np.sqrt(3.0) * v
        dists, rows = tree.query(centers, distance_upper_bound=diag)
        out: dict[Coord, int] = {}
        keys = self._block_binding_keys.setdefault(bc, set())
        for c, d, row in zip(src_local, dists, rows):
            if not np.isfinite(d) or row >= len(verts_world):
                continue
            g = tuple(int(x) for x in (c + lo_local + self._origin))
            out[g] = int(ids[row])
            self._bindings[g] = int(ids[row])
            keys.add(g)
        return out

    def live_mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[tuple[int, int, int]]]:
        """Concatenated (ids, positions, labels, faces) of in-window blocks."""
        if not self.block_mesh:
            return (
                np.zeros(0, dtype=np.int64),
                np.zeros((0, 3)),
                np.zeros(0, dtype=np.int64),
                [],
            )
        ids, pos, lab, faces = [], [], [], []
        for bc in sorted(self.block_mesh.keys()):
            bm = self.block_mesh[bc]
            ids.append(bm.ids)
            pos.append(bm.positions)
            lab.append(bm.labels)
            faces.extend(bm.faces)
        return np.concatenate(ids), np.vstack(pos), np.concatenate(lab), faces

    # ------------------------------------------------------------- archive

    def archive_outside_window(self, robot_position, radius: float | None = None) -> ArchivedChunk:
        """Drop blocks fully outside the window sphere, emitting their final
        mesh exactly once."""
        cfg = self.config
        radius = cfg.window_radius if radius is None else radius
        if radius <= 0:
            raise ValueError("window radius must be positive")
        center = np.asarray(robot_position, dtype=float)
        S = cfg.block_size
        v = cfg.voxel_size
        gone: list[Coord] = []
        for bc in sorted(self.blocks.keys()):
            lo = np.array(bc, dtype=float) * S * v
            hi = lo + S * v
            nearest = np.clip(center, lo, hi)
            if np.linalg.norm(nearest - center) > radius:
                gone.append(bc)
        ids, pos, lab, faces = [], [], [], []
        for bc in gone:
            del self.blocks[bc]
            self._pending_clear.append(bc)
            bm = self.block_mesh.pop(bc, None)
            if bm is not None:
                ids.append(bm.ids)
                pos.append(bm.positions)
                lab.append(bm.labels)
                faces.extend(bm.faces)
        if ids:
            chunk = ArchivedChunk(
                vertex_ids=np.concatenate(ids),
                positions=np.vstack(pos),
                labels=np.concatenate(lab),
                faces=faces,
                archived_blocks=gone,
            )
        else:
            chunk = ArchivedChunk(
                vertex_ids=np.zeros(0, dtype=np.int64),
                positions=np.zeros((0, 3)),
                labels=np.zeros(0, dtype=np.int64),
                faces=[],
                archived_blocks=gone,
            )
        return chunk

    # ------------------------------------------------------------- testing

    def set_tsdf_from_occupancy(self, occupancy: np.ndarray, origin_voxel=(0, 0, 0)) -> set[Coord]:
        """Load a synthetic world: occupied voxels get -truncation, free ones
        +truncation, everything observed. Returns the touched block set."""
        cfg = self.config
        S = cfg.block_size
        occupancy = np.asarray(occupancy, dtype=bool)
        origin_voxel = np.asarray(origin_voxel, dtype=np.int64)
        touched = set()
        shape = np.array(occupancy.shape)
        b_lo = np.floor_divide(origin_voxel, S)
        b_hi = np.floor_divide(origin_voxel + shape - 1, S) + 1
        for bx in range(b_lo[0], b_hi[0]):
            for by in range(b_lo[1], b_hi[1]):
                for bz in range(b_lo[2], b_hi[2]):
                    bc = (bx, by, bz)
                    block = self.blocks.get(bc)
                    if block is None:
                        block = _TsdfBlock(S)
                        self.blocks[bc] = block
                    g_lo = np.array(bc) * S
                    g_hi = g_lo + S
                    ov_lo = np.maximum(g_lo, origin_voxel)
                    ov_hi = np.minimum(g_hi, origin_voxel + shape)
                    if np.any(ov_hi <= ov_lo):
                        continue
                    src = tuple(
                        slice(int(ov_lo[i] - origin_voxel[i]), int(ov_hi[i] - origin_voxel[i]))
                        for i in range(3)
                    )
                    dst = tuple(slice(int(ov_lo[i] - g_lo[i]), int(ov_hi[i] - g_lo[i])) for i in range(3))
                    occ = occupancy[src]
                    block.distance[dst] = np.where(occ, -cfg.truncation, cfg.truncation)
                    block.weight[dst] = 1.0
                    touched.add(bc)
        return touched
