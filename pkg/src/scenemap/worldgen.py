"""Synthetic indoor worlds, depth-scan rendering, and drifting odometry.

Worlds are axis-aligned room boxes with shared walls, door apertures cut
through them, and labeled box objects inside the rooms. Everything is
rasterized onto one occupancy grid that doubles as ground truth: room
voxel labels, object placements, the brute-force distance field and
skeleton, and per-voxel surface ids used as a stand-in appearance signal.
Scans are rendered by voxel ray marching against that grid, so a rendered
cloud re-integrated into a mapping grid reproduces the same surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy.spatial.transform import Rotation

from .geometry import make_pose, pose_inverse, so3_exp
from .groundtruth import brute_force_esdf, brute_force_gvd
from .volumetric import PosedLabeledCloud

LABEL_WALL = 1
LABEL_FLOOR = 2
LABEL_CEILING = 3
FIRST_OBJECT_LABEL = 4


@dataclass
class RoomBox:
    lo: np.ndarray  # interior min corner, meters
    hi: np.ndarray  # interior max corner, meters
    floor: int = 0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if np.any(self.hi <= self.lo):
            raise ValueError("room box must have positive extent")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)


@dataclass
class Door:
    position: np.ndarray  # center of the aperture on the shared wall
    width: float
    height: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("door aperture must have positive size")


@dataclass
class ObjectSpec:
    label: int
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.label < FIRST_OBJECT_LABEL:
            raise ValueError(f"object labels start at {FIRST_OBJECT_LABEL}")
        if np.any(self.hi <= self.lo):
            raise ValueError("object box must have positive extent")


@dataclass
class WorldSpec:
    rooms: list[RoomBox]
    doors: list[Door] = field(default_factory=list)
    objects: list[ObjectSpec] = field(default_factory=list)
    wall_thickness: float = 0.2
    voxel_size: float = 0.1
    seed: int = 0


class WorldSpecError(ValueError):
    pass


@dataclass
class GroundTruthObject:
    label: int
    centroid: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


class World:
    """Rasterized world with cached ground-truth fields."""

    def __init__(self, spec: WorldSpec, occupancy, labels, room_voxels, origin_voxel):
        self.spec = spec
        self.occupancy = occupancy
        self.labels = labels
        self.room_voxels = room_voxels  # int grid, -1 where not in a room
        self.origin_voxel = np.asarray(origin_voxel, dtype=np.int64)
        self.objects: list[GroundTruthObject] = [
            GroundTruthObject(o.label, 0.5 * (o.lo + o.hi), o.lo.copy(), o.hi.copy())
            for o in spec.objects
        ]
        self._gvd = None
        self._esdf = None

    @property
    def voxel_size(self) -> float:
        return self.spec.voxel_size

    def voxel_center(self, coords) -> np.ndarray:
        return (np.atleast_2d(coords) + self.origin_voxel + 0.5) * self.voxel_size

    def world_to_grid(self, points) -> np.ndarray:
        return np.floor(np.atleast_2d(points) / self.voxel_size).astype(np.int64) - self.origin_voxel

    def is_free(self, point) -> bool:
        c = self.world_to_grid(point)[0]
        if np.any(c < 0) or np.any(c >= np.array(self.occupancy.shape)):
            return False
        return not bool(self.occupancy[tuple(c)])

    def gt_gvd(self) -> np.ndarray:
        if self._gvd is None:
            self._gvd = brute_force_gvd(self.occupancy, self.voxel_size)
        return self._gvd

    def gt_esdf(self) -> np.ndarray:
        if self._esdf is None:
            self._esdf = brute_force_esdf(self.occupancy, self.voxel_size)
        return self._esdf

    def gt_gvd_positions(self) -> np.ndarray:
        return self.voxel_center(np.argwhere(self.gt_gvd()))

    def free_voxel_positions(self) -> np.ndarray:
        return self.voxel_center(np.argwhere(~self.occupancy))

    def interior_free_mask(self) -> np.ndarray:
        """Free voxels connected to the first room's center: the building
        interior, excluding the open space outside the shell."""
        if getattr(self, "_interior", None) is None:
            from scipy import ndimage

            labeled, _ = ndimage.label(~self.occupancy)
            seed = self.world_to_grid(self.spec.rooms[0].center)[0]
            seed = np.clip(seed, 0, np.array(self.occupancy.shape) - 1)
            self._interior = labeled == labeled[tuple(seed)]
        return self._interior

    def room_voxel_sets(self) -> dict[int, set[tuple[int, int, int]]]:
        out: dict[int, set] = {}
        for c in np.argwhere(self.room_voxels >= 0):
            out.setdefault(int(self.room_voxels[tuple(c)]), set()).add(tuple(int(x) for x in c))
        return out


def generate_world(spec: WorldSpec) -> World:
    """Rasterize a world spec deterministically onto its occupancy grid."""
    v = spec.voxel_size
    t = spec.wall_thickness
    if not spec.rooms:
        raise WorldSpecError("a world needs at least one room")

    lo = np.min([r.lo for r in spec.rooms], axis=0) - t
    hi = np.max([r.hi for r in spec.rooms], axis=0) + t
    origin_voxel = np.floor(lo / v).astype(np.int64) - 1
    shape = tuple((np.ceil(hi / v).astype(np.int64) + 1 - origin_voxel).tolist())

    occupancy = np.zeros(shape, dtype=bool)
    labels = np.zeros(shape, dtype=np.int16)
    room_voxels = np.full(shape, -1, dtype=np.int16)

    def to_grid(point):
        return np.floor(np.asarray(point) / v).astype(np.int64) - origin_voxel

    def fill(lo_pt, hi_pt, value_mask=True, label=None):
        a = np.maximum(to_grid(lo_pt), 0)
        b = np.minimum(to_grid(hi_pt) + 1, np.array(shape))
        if np.any(b <= a):
            return
        sl = tuple(slice(int(a[i]), int(b[i])) for i in range(3))
        if label is None:
            occupancy[sl] = value_mask
        else:
            occupancy[sl] = True
            labels[sl] = label

    # walls: expanded shell of every room, interiors carved after
    for room in spec.rooms:
        fill(room.lo - t, room.hi + t, label=LABEL_WALL)
    for idx, room in enumerate(spec.rooms):
        a = np.maximum(to_grid(room.lo), 0)
        b = np.minimum(to_grid(room.hi) + 1, np.array(shape))
        sl = tuple(slice(int(a[i]), int(b[i])) for i in range(3))
        occupancy[sl] = False
        labels[sl] = 0
        room_voxels[sl] = idx

    # floor and ceiling labels on the existing shell
    for room in spec.rooms:
        a = to_grid(room.lo)
        b = to_grid(room.hi)
        z_lo, z_hi = int(a[2]), int(b[2])
        sl_xy = (slice(int(a[0]), int(b[0]) + 1), slice(int(a[1]), int(b[1]) + 1))
        if z_lo - 1 >= 0:
            region = (*sl_xy, slice(max(z_lo - int(np.ceil(t / v)), 0), z_lo))
            labels[region] = np.where(occupancy[region], LABEL_FLOOR, labels[region])
        region = (*sl_xy, slice(z_hi + 1, min(z_hi + 1 + int(np.ceil(t / v)), shape[2])))
        labels[region] = np.where(occupancy[region], LABEL_CEILING, labels[region])

    _carve_doors(spec, occupancy, labels, room_voxels, to_grid, shape)

    for obj in spec.objects:
        inside = any(
            np.all(obj.lo >= room.lo - 1e-9) and np.all(obj.hi <= room.hi + 1e-9)
            for room in spec.rooms
        )
        if not inside:
            raise WorldSpecError(f"object at {obj.lo} is not inside any room")
        fill(obj.lo, obj.hi - 1e-9, label=obj.label)

    return World(spec, occupancy, labels, room_voxels, origin_voxel)


def _carve_doors(spec, occupancy, labels, room_voxels, to_grid, shape):
    v = spec.voxel_size
    t = spec.wall_thickness
    for d_idx, door in enumerate(spec.doors):
        # find the wall slab(s) this aperture crosses: it must touch the
        # interiors of exactly two rooms once opened
        axis = None
        for ax in range(3):
            near = [
                r
                for r in spec.rooms
                if abs(r.lo[ax] - door.position[ax]) <= t + 1e-9
                or abs(r.hi[ax] - door.position[ax]) <= t + 1e-9
            ]
            if len(near) >= 1:
                others = [
                    o for o in range(3) if o != ax
                ]
                if all(
                    any(r.lo[o] - t <= door.position[o] <= r.hi[o] + t for r in near)
                    for o in others
                ):
                    axis = ax
                    break
        if axis is None:
            raise WorldSpecError(f"door {d_idx} does not sit on any wall")
        horiz = [a for a in range(3) if a != axis and a != 2]
        horiz = horiz[0] if horiz else 0
        lo_pt = door.position.copy()
        hi_pt = door.position.copy()
        lo_pt[axis] -= t * 1.5
        hi_pt[axis] += t * 1.5
        lo_pt[horiz] -= door.width / 2
        hi_pt[horiz] += door.width / 2
        lo_pt[2] = door.position[2]
        hi_pt[2] = door.position[2] + door.height
        # carve voxels whose centers fall inside the aperture, so the opening
        # is the nominal door size rather than up to a voxel wider per side
        a = to_grid(lo_pt + 0.5 * v)
        b = to_grid(hi_pt - 0.5 * v) + 1
        a[axis] = to_grid(lo_pt)[axis]  # but cut the full wall slab depth
        b[axis] = to_grid(hi_pt)[axis] + 1
        a = np.maximum(a, 0)
        b = np.minimum(b, np.array(shape))
        sl = tuple(slice(int(a[i]), int(b[i])) for i in range(3))
        carved = occupancy[sl] & (labels[sl] == LABEL_WALL)
        if not carved.any():
            raise WorldSpecError(f"door {d_idx} does not intersect a shared wall")
        occupancy[sl] &= ~carved
        labels[sl] = np.where(carved, 0, labels[sl])


# --------------------------------------------------------------- rendering


@dataclass
class SensorParams:
    width: int = 64
    height: int = 48
    fov_horizontal: float = np.deg2rad(90)
    fov_vertical: float = np.deg2rad(70)
    max_range: float = 5.0
    range_noise: float = 0.0


def _pixel_directions(params: SensorParams) -> np.ndarray:
    """Unit ray directions in the sensor frame (x forward, y left, z up)."""
    us = np.linspace(-np.tan(params.fov_horizontal / 2), np.tan(params.fov_horizontal / 2), params.width)
    vs = np.linspace(-np.tan(params.fov_vertical / 2), np.tan(params.fov_vertical / 2), params.height)
    dirs = np.stack(
        [
            np.ones((params.height, params.width)),
            np.broadcast_to(us, (params.height, params.width)),
            np.broadcast_to(vs[:, None], (params.height, params.width)),
        ],
        axis=-1,
    ).reshape(-1, 3)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


@njit(cache=True)
def _raycast(occupancy, origin, dirs, voxel, max_range, hits, hit_idx):
    nx, ny, nz = occupancy.shape
    n = dirs.shape[0]
    for r in range(n):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        x, y, z = origin[0], origin[1], origin[2]
        ix = int(np.floor(x / voxel))
        iy = int(np.floor(y / voxel))
        iz = int(np.floor(z / voxel))
        step_x = 1 if dx > 0 else -1
        step_y = 1 if dy > 0 else -1
        step_z = 1 if dz > 0 else -1
        big = 1e30
        t_max_x = (((ix + (step_x > 0)) * voxel) - x) / dx if dx != 0 else big
        t_max_y = (((iy + (step_y > 0)) * voxel) - y) / dy if dy != 0 else big
        t_max_z = (((iz + (step_z > 0)) * voxel) - z) / dz if dz != 0 else big
        t_delta_x = abs(voxel / dx) if dx != 0 else big
        t_delta_y = abs(voxel / dy) if dy != 0 else big
        t_delta_z = abs(voxel / dz) if dz != 0 else big
        t = 0.0
        hits[r] = -1.0
        hit_idx[r] = -1
        while t <= max_range:
            if ix < 0 or iy < 0 or iz < 0 or ix >= nx or iy >= ny or iz >= nz:
                break
            if occupancy[ix, iy, iz]:
                hits[r] = t
                hit_idx[r] = (ix * ny + iy) * nz + iz
                break
            if t_max_x <= t_max_y and t_max_x <= t_max_z:
                t = t_max_x
                t_max_x += t_delta_x
                ix += step_x
            elif t_max_y <= t_max_z:
                t = t_max_y
                t_max_y += t_delta_y
                iy += step_y
            else:
                t = t_max_z
                t_max_z += t_delta_z
                iz += step_z


def render_scan(
    world: World,
    pose: np.ndarray,
    params: SensorParams,
    rng: Optional[np.random.Generator] = None,
) -> PosedLabeledCloud:
    """Ray-cast a labeled depth scan from a pose in free space.

    Points come back in the sensor frame with per-point ground-truth labels
    and the flat index of the hit surface voxel as a stable surface id.
    """
    pose = np.asarray(pose, dtype=float)
    origin_world = pose[:3, 3]
    if not world.is_free(origin_world):
        raise ValueError("sensor pose is inside an obstacle")
    dirs_sensor = _pixel_directions(params)
    dirs_world = dirs_sensor @ pose[:3, :3].T
    # ray marching runs in grid-local metric coordinates
    origin_local = origin_world - world.origin_voxel * world.voxel_size
    hits = np.zeros(len(dirs_world))
    hit_idx = np.zeros(len(dirs_world), dtype=np.int64)
    _raycast(
        world.occupancy,
        origin_local.astype(np.float64),
        np.ascontiguousarray(dirs_world),
        float(world.voxel_size),
        float(params.max_range),
        hits,
        hit_idx,
    )
    valid = hits >= 0
    depths = hits[valid]
    if rng is not None and params.range_noise > 0:
        depths = depths + rng.normal(0.0, params.range_noise, size=depths.shape)
        depths = np.maximum(depths, 1e-3)
    pts_sensor = dirs_sensor[valid] * depths[:, None]
    flat = hit_idx[valid]
    ny, nz = world.occupancy.shape[1], world.occupancy.shape[2]
    ix = flat // (ny * nz)
    iy = (flat % (ny * nz)) // nz
    iz = flat % nz
    labels = world.labels[ix, iy, iz].astype(np.int64)
    return PosedLabeledCloud(
        pose=pose, points=pts_sensor, labels=labels, surface_ids=flat.copy()
    )


# ---------------------------------------------------------------- odometry


@dataclass
class DriftModel:
    sigma_translation: float = 0.0  # meters per step
    sigma_rotation: float = 0.0  # radians per step
    bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=float)
        if self.sigma_translation < 0 or self.sigma_rotation < 0:
            raise ValueError("noise sigmas must be nonnegative")


def simulate_odometry(
    true_poses: Sequence[np.ndarray], drift: DriftModel, seed: int = 0
) -> list[np.ndarray]:
    """Compound per-step noise onto the true relative motions."""
    rng = np.random.default_rng(seed)
    if not len(true_poses):
        return []
    out = [np.asarray(true_poses[0], dtype=float).copy()]
    for prev, cur in zip(true_poses, true_poses[1:]):
        rel = pose_inverse(np.asarray(prev)) @ np.asarray(cur)
        noise_t = rng.normal(0.0, drift.sigma_translation, size=3) + drift.bias
        noise_r = rng.normal(0.0, drift.sigma_rotation, size=3)
        if drift.sigma_translation == 0 and drift.sigma_rotation == 0 and not drift.bias.any():
            noisy_rel = rel
        else:
            noisy_rel = rel @ make_pose(so3_exp(noise_r), noise_t)
        out.append(out[-1] @ noisy_rel)
    return out


# -------------------------------------------------------------- trajectories


def _yaw_pose(position: np.ndarray, direction: np.ndarray) -> np.ndarray:
    d = np.asarray(direction, dtype=float)
    d[2] = 0.0
    n = np.linalg.norm(d)
    if n < 1e-9:
        R = np.eye(3)
    else:
        yaw = np.arctan2(d[1], d[0])
        R = Rotation.from_euler("z", yaw).as_matrix()
    return make_pose(R, position)


def waypoint_trajectory(
    waypoints: Sequence[np.ndarray], step: float = 0.25
) -> list[np.ndarray]:
    """Piecewise-linear path with yaw facing the walking direction."""
    poses = []
    for a, b in zip(waypoints, waypoints[1:]):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        seg = b - a
        length = float(np.linalg.norm(seg))
        if length < 1e-9:
            continue
        n_steps = max(1, int(np.ceil(length / step)))
        for i in range(n_steps):
            pos = a + seg * (i / n_steps)
            poses.append(_yaw_pose(pos, seg))
    poses.append(_yaw_pose(np.asarray(waypoints[-1], dtype=float), seg))
    return poses


def room_tour_waypoints(spec: WorldSpec, height: float = 1.2, revisit: bool = False):
    """Room centers threaded through the door centers between them."""
    points = []
    rooms = spec.rooms
    for i, room in enumerate(rooms):
        center = room.center.copy()
        center[2] = height
        points.append(center)
        if i + 1 < len(rooms):
            door = _door_between(spec, rooms[i], rooms[i + 1])
            if door is not None:
                p = door.position.copy()
                p[2] = min(height, door.position[2] + door.height * 0.6)
                points.append(p)
    if revisit:
        points = points + points[-2::-1]
    return points


def room_sweep_waypoints(
    spec: WorldSpec, height: float = 1.2, lanes: int = 3, margin: float = 1.0, revisit: bool = False
):
    """Serpentine sweep through every room, threaded through the doors.

    Alternating lane directions vary the heading, so floors, ceilings and
    walls get observed from several angles instead of one pass down the
    middle."""
    points = []
    rooms = spec.rooms
    for i, room in enumerate(rooms):
        lo = room.lo + margin
        hi = room.hi - margin
        if np.any(hi[:2] <= lo[:2]):
            center = room.center.copy()
            center[2] = height
            points.append(center)
        else:
            ys = np.linspace(lo[1], hi[1], max(2, lanes))
            for lane, y in enumerate(ys):
                x0, x1 = (lo[0], hi[0]) if lane % 2 == 0 else (hi[0], lo[0])
                points.append(np.array([x0, y, height]))
                points.append(np.array([x1, y, height]))
        if i + 1 < len(rooms):
            door = _door_between(spec, rooms[i], rooms[i + 1])
            if door is not None:
                p = door.position.copy()
                p[2] = min(height, door.position[2] + door.height * 0.6)
                points.append(p)
    if revisit:
        points = points + points[-2::-1]
    return points


def _door_between(spec: WorldSpec, a: RoomBox, b: RoomBox) -> Optional[Door]:
    best, best_d = None, np.inf
    mid = 0.5 * (a.center + b.center)
    for door in spec.doors:
        d = float(np.linalg.norm(door.position[:2] - mid[:2]))
        if d < best_d:
            best, best_d = door, d
    return best


# ------------------------------------------------------------ world presets


def four_room_circuit(
    room_size=(4.0, 4.0, 3.0),
    door_width: float = 0.8,
    door_height: float = 2.0,
    n_objects: int = 0,
    seed: int = 0,
    wall_thickness: float = 0.2,
    object_size=(0.3, 0.5),
) -> WorldSpec:
    """Four rooms in a 2x2 grid whose doors form a cycle, so a lap of the
    room centers revisits the start with the same heading."""
    rng = np.random.default_rng(seed)
    sx, sy, sz = room_size
    t = wall_thickness
    base = np.array([1.0, 1.0, 0.5])
    cells = [(0, 0), (1, 0), (1, 1), (0, 1)]  # cycle order
    rooms = []
    for cx, cy in cells:
        lo = base + np.array([cx * (sx + t), cy * (sy + t), 0.0])
        rooms.append(RoomBox(lo=lo, hi=lo + np.array([sx, sy, sz])))
    doors = []
    for i in range(4):
        a = rooms[i]
        b = rooms[(i + 1) % 4]
        shared_axis = 0 if abs(a.center[0] - b.center[0]) > abs(a.center[1] - b.center[1]) else 1
        position = 0.5 * (a.center + b.center)
        position[shared_axis] = 0.5 * (
            max(a.lo[shared_axis], b.lo[shared_axis]) + min(a.hi[shared_axis], b.hi[shared_axis])
        )
        position[2] = base[2]
        doors.append(Door(position=position, width=door_width, height=door_height))
    objects = []
    for k in range(n_objects):
        room = rooms[k % 4]
        size = rng.uniform(object_size[0], object_size[1], size=3)
        margin = 0.8
        lo = np.array(
            [
                rng.uniform(room.lo[0] + margin, room.hi[0] - margin - size[0]),
                rng.uniform(room.lo[1] + margin, room.hi[1] - margin - size[1]),
                room.lo[2],
            ]
        )
        objects.append(ObjectSpec(label=FIRST_OBJECT_LABEL + (k % 8), lo=lo, hi=lo + size))
    return WorldSpec(rooms=rooms, doors=doors, objects=objects, wall_thickness=t, seed=seed)


def circuit_waypoints(spec: WorldSpec, height: float = 1.2, laps: int = 2):
    """Waypoints around the door cycle of a circuit world, lap after lap."""
    rooms = spec.rooms
    one_lap = []
    for i, room in enumerate(rooms):
        center = room.center.copy()
        center[2] = height
        one_lap.append(center)
        door = _door_between(spec, rooms[i], rooms[(i + 1) % len(rooms)])
        if door is not None:
            p = door.position.copy()
            p[2] = min(height, door.position[2] + door.height * 0.6)
            one_lap.append(p)
    points = []
    for _ in range(max(1, laps)):
        points.extend(one_lap)
    first = rooms[0].center.copy()
    first[2] = height
    points.append(first)
    return points


def rooms_in_a_row(
    n_rooms: int,
    room_size=(4.0, 4.0, 3.0),
    door_width: float = 0.8,
    door_height: float = 2.0,
    n_objects: int = 0,
    seed: int = 0,
    wall_thickness: float = 0.2,
) -> WorldSpec:
    """n rooms side by side along x, one door through each shared wall,
    optional labeled box objects scattered inside."""
    rng = np.random.default_rng(seed)
    sx, sy, sz = room_size
    t = wall_thickness
    rooms = []
    doors = []
    x = 1.0
    for i in range(n_rooms):
        lo = np.array([x, 1.0, 0.5])
        hi = lo + np.array([sx, sy, sz])
        rooms.append(RoomBox(lo=lo, hi=hi))
        if i > 0:
            wall_x = x - t / 2
            doors.append(
                Door(
                    position=np.array([wall_x, 1.0 + sy / 2, 0.5]),
                    width=door_width,
                    height=door_height,
                )
            )
        x += sx + t
    objects = []
    for k in range(n_objects):
        room = rooms[k % n_rooms]
        size = rng.uniform(0.3, 0.5, size=3)
        margin = 0.8
        lo = np.array(
            [
                rng.uniform(room.lo[0] + margin, room.hi[0] - margin - size[0]),
                rng.uniform(room.lo[1] + margin, room.hi[1] - margin - size[1]),
                room.lo[2],
            ]
        )
        objects.append(ObjectSpec(label=FIRST_OBJECT_LABEL + (k % 8), lo=lo, hi=lo + size))
    return WorldSpec(rooms=rooms, doors=doors, objects=objects, wall_thickness=t, seed=seed)
