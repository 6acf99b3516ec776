"""Incremental sparsification of the free-space skeleton into places.

Skeleton voxels with enough distinct wavefront origins (or matching a
corner template) become place nodes. Each update alternates a flood-fill
phase, which labels skeleton voxels by nearest node and merges nodes whose
regions touch at close range, with an edge phase, which validates each
putative edge's straight segment against the supporting voxel chain and
splits it at the maximum-deviation voxel when it strays too far. Finally
disconnected components inside the window are tied together by their
closest node pair (tagged bridge edges, exempt from straight-line checks
and re-derived on every update).

The module talks to the volumetric window through a small view protocol
(is_gvd_member / gvd_info / gvd_member_coords / esdf_distance /
binding_for), so tests can drive it with hand-built skeletons. Flood fill
and component analysis run in numba kernels over a dense window-local
label grid; everything is deterministic given identical inputs.
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field
from math import sqrt
from typing import Iterable, Optional

import numpy as np

from ._places_kernels import NON_MEMBER, UNLABELED, component_labels, flood_fill_labels

Coord = tuple[int, int, int]

N26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]

_N6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]

_AXIS_NORMALS = [
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
]


class NodeVerdict(enum.Enum):
    NODE_BASIS = "NODE_BASIS"
    NODE_CORNER = "NODE_CORNER"
    NOT_NODE = "NOT_NODE"


@dataclass
class PlacesConfig:
    iterations: int = 2
    edge_split_deviation_vox: float = 2.0
    node_merge_distance_vox: float = 3.0
    min_basis_considered: int = 3  # total basis needed to look at a voxel
    basis_for_node: int = 4  # total basis that promotes outright


def is_node_candidate(num_total_basis: int, neighborhood: np.ndarray) -> NodeVerdict:
    """Classify a skeleton voxel as a graph node candidate.

    ``neighborhood`` is the 3x3x3 skeleton membership mask centered on the
    voxel. Voxels with enough basis points become nodes outright; otherwise
    the corner template checks whether all member neighbors lie in one
    closed half-space spanned by an axis-aligned normal (with at least one
    strictly inside, so straight-line interiors never match).
    """
    if num_total_basis >= 4:
        return NodeVerdict.NODE_BASIS
    neighborhood = np.asarray(neighborhood, dtype=bool)
    if neighborhood.shape != (3, 3, 3):
        raise ValueError("neighborhood mask must be 3x3x3")
    offsets = [
        (dx, dy, dz)
        for dx, dy, dz in N26
        if neighborhood[dx + 1, dy + 1, dz + 1]
    ]
    if not offsets:
        return NodeVerdict.NOT_NODE
    for n in _AXIS_NORMALS:
        dots = [o[0] * n[0] + o[1] * n[1] + o[2] * n[2] for o in offsets]
        if all(d >= 0 for d in dots) and any(d > 0 for d in dots):
            return NodeVerdict.NODE_CORNER
    return NodeVerdict.NOT_NODE


@dataclass
class PlaceNode:
    voxel: Coord
    position: np.ndarray
    obstacle_distance: float
    num_basis: int
    nearest_parent_vertex: Optional[int] = None


@dataclass
class PlaceGraphDelta:
    added: list[int] = field(default_factory=list)
    moved: list[int] = field(default_factory=list)
    removed: list[int] = field(default_factory=list)
    merged: list[tuple[int, int]] = field(default_factory=list)  # (keep, drop)
    added_edges: list[tuple[int, int]] = field(default_factory=list)
    removed_edges: list[tuple[int, int]] = field(default_factory=list)

    def empty(self) -> bool:
        return not (
            self.added
            or self.moved
            or self.removed
            or self.merged
            or self.added_edges
            or self.removed_edges
        )


class _Grid:
    """Dense window-local label grid over the current member set."""

    def __init__(self, coords: np.ndarray):
        if coords.shape[0] == 0:
            self.lo = np.zeros(3, dtype=np.int64)
            self.shape = (0, 0, 0)
            self.flat = np.zeros(0, dtype=np.int32)
            self.member_lin = np.zeros(0, dtype=np.int64)
            return
        self.lo = coords.min(axis=0)
        hi = coords.max(axis=0) + 1
        self.shape = tuple(int(x) for x in (hi - self.lo))
        self.flat = np.full(int(np.prod(self.shape)), NON_MEMBER, dtype=np.int32)
        local = coords - self.lo
        ny, nz = self.shape[1], self.shape[2]
        self.member_lin = (local[:, 0] * ny + local[:, 1]) * nz + local[:, 2]
        self.flat[self.member_lin] = UNLABELED

    def lin(self, coord: Coord) -> Optional[int]:
        i = coord[0] - self.lo[0]
        j = coord[1] - self.lo[1]
        k = coord[2] - self.lo[2]
        nx, ny, nz = self.shape
        if i < 0 or j < 0 or k < 0 or i >= nx or j >= ny or k >= nz:
            return None
        return int((i * ny + j) * nz + k)

    def coords_of(self, lins: np.ndarray) -> np.ndarray:
        ny, nz = self.shape[1], self.shape[2]
        i = lins // (ny * nz)
        rem = lins % (ny * nz)
        return np.stack([i, rem // nz, rem % nz], axis=1) + self.lo


class SparsePlaceGraph:
    def __init__(self, config: PlacesConfig | None = None, voxel_size: float = 0.1):
        self.config = config or PlacesConfig()
        self.voxel_size = voxel_size
        self.nodes: dict[int, PlaceNode] = {}
        self.edges: set[tuple[int, int]] = set()
        self.bridge_edges: set[tuple[int, int]] = set()
        self.voxel_labels: dict[Coord, int] = {}
        self._adj: dict[int, set[int]] = {}
        self._next_id = 0
        self._edge_cache: dict[tuple[int, int], tuple[Coord, Coord, bool]] = {}
        self._pos_cache = None
        self._pos_cache_len = -1

    # ------------------------------------------------------------- helpers

    def _edge_key(self, a: int, b: int) -> tuple[int, int]:
        return (a, b) if a < b else (b, a)

    def _discard_edge(self, e: tuple[int, int]) -> None:
        self.edges.discard(e)
        self.bridge_edges.discard(e)
        a, b = e
        if a in self._adj:
            self._adj[a].discard(b)
        if b in self._adj:
            self._adj[b].discard(a)

    def neighbors(self, node_id: int) -> set[int]:
        return set(self._adj.get(node_id, ()))

    def components(self) -> list[set[int]]:
        seen: set[int] = set()
        comps = []
        for start in sorted(self.nodes):
            if start in seen:
                continue
            comp = {start}
            stack = [start]
            seen.add(start)
            while stack:
                cur = stack.pop()
                for nb in self._adj.get(cur, ()):
                    if nb not in seen:
                        seen.add(nb)
                        comp.add(nb)
                        stack.append(nb)
            comps.append(comp)
        return comps

    def _merge_distance(self) -> float:
        return self.config.node_merge_distance_vox * self.voxel_size

    def _split_threshold(self) -> float:
        return self.config.edge_split_deviation_vox * self.voxel_size

    # ------------------------------------------------------------- updates

    def update_places(
        self,
        window,
        delta,
        iterations: int | None = None,
        force_full_validation: bool = False,
    ) -> PlaceGraphDelta:
        """Run the two-phase sparsification against the current skeleton."""
        cfg = self.config
        iterations = cfg.iterations if iterations is None else iterations
        force_full = force_full_validation
        out = PlaceGraphDelta()
        changed = bool(delta.added or delta.updated or delta.removed)
        if not changed and not force_full and self._stable(window):
            return out

        coords = np.asarray(window.gvd_member_coords(), dtype=np.int64).reshape(-1, 3)
        members = {tuple(int(x) for x in c) for c in coords}
        grid = _Grid(coords)

        # bridges are transient connectivity aids: re-derived every update so
        # stale cross-region shortcuts never outlive real connectivity
        for e in sorted(self.bridge_edges):
            self._discard_edge(e)
            out.removed_edges.append(e)
        self.bridge_edges = set()

        # retire or relocate nodes that lost their supporting voxel
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            if node.voxel in members:
                continue
            new_voxel = self._nearest_member(node.voxel, coords)
            if new_voxel is not None:
                node.voxel = new_voxel
                self._refresh_attrs(node, window)
                out.moved.append(node_id)
            else:
                self._drop_node(node_id, out)

        # refresh attributes where the skeleton info changed underneath
        updated_coords = {info.coord for info in delta.updated}
        if updated_coords:
            for node_id in sorted(self.nodes):
                node = self.nodes[node_id]
                if node.voxel in updated_coords:
                    self._refresh_attrs(node, window)
                    if node_id not in out.moved:
                        out.moved.append(node_id)

        # new candidates from the skeleton delta
        for info in sorted(
            list(delta.added) + list(delta.updated), key=lambda x: x.coord
        ):
            if info.coord not in members:
                continue
            total = info.num_extra_basis + 1
            if total < cfg.min_basis_considered:
                continue
            mask = self._neighborhood_mask(info.coord, members)
            if is_node_candidate(total, mask) == NodeVerdict.NOT_NODE:
                continue
            if self._has_node_within(info.coord, self._merge_distance()):
                continue
            self._add_node(info.coord, window, out)

        validated: set[tuple[int, int]] = set()
        for _ in range(max(1, iterations)):
            boundary = self._flood_fill(grid)
            n_merged = len(out.merged)
            self._merge_close_pairs(boundary, out)
            if len(out.merged) > n_merged:
                boundary = self._flood_fill(grid)
            n_added = len(out.added)
            touched = set(out.added) | set(out.moved) | {k for k, _ in out.merged}
            validated = self._validate_edges(
                boundary, members, window, out, touched, force_full
            )
            force_full = False
            if len(out.merged) == n_merged and len(out.added) == n_added:
                break  # no merges or splits: another round changes nothing

        # commit: replace edge set with validated edges
        old_edges = set(self.edges) - self.bridge_edges
        for e in sorted(old_edges - validated):
            self._discard_edge(e)
            out.removed_edges.append(e)
        for e in sorted(validated - old_edges):
            if e[0] in self.nodes and e[1] in self.nodes:
                self._add_edge(e)
                out.added_edges.append(e)

        # nodes that lost all voxel support vanish with their region
        labels_alive = set(self.voxel_labels.values())
        for node_id in sorted(self.nodes):
            if node_id not in labels_alive:
                self._drop_node(node_id, out)

        self._ensure_component_nodes(grid, window, out)
        self._connect_components(out)
        return out

    def _add_edge(self, e_or_a, b=None) -> None:  # tolerate key or pair form
        if b is None:
            a, b = e_or_a
        else:
            a = e_or_a
        key = self._edge_key(a, b)
        self.edges.add(key)
        self._adj.setdefault(a, set()).add(b)
        self._adj.setdefault(b, set()).add(a)

    def _stable(self, window) -> bool:
        for node in self.nodes.values():
            if not window.is_gvd_member(node.voxel):
                return False
        return True

    def _nearest_member(self, voxel: Coord, coords: np.ndarray) -> Optional[Coord]:
        if coords.shape[0] == 0:
            return None
        d = np.linalg.norm(coords - np.array(voxel), axis=1)
        limit = self._merge_distance() / self.voxel_size
        best_d = d.min()
        if best_d > limit:
            return None
        rows = np.nonzero(d == best_d)[0]
        return min(tuple(int(x) for x in coords[r]) for r in rows)

    def _has_node_within(self, voxel: Coord, radius: float) -> bool:
        if not self.nodes:
            return False
        if self._pos_cache is None or self._pos_cache_len != len(self.nodes):
            self._pos_cache = np.stack([n.position for n in self.nodes.values()])
            self._pos_cache_len = len(self.nodes)
        p = (np.array(voxel, dtype=float) + 0.5) * self.voxel_size
        return bool((np.linalg.norm(self._pos_cache - p, axis=1) <= radius).any())

    def _neighborhood_mask(self, voxel: Coord, members: set[Coord]) -> np.ndarray:
        mask = np.zeros((3, 3, 3), dtype=bool)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    if (voxel[0] + dx, voxel[1] + dy, voxel[2] + dz) in members:
                        mask[dx + 1, dy + 1, dz + 1] = True
        mask[1, 1, 1] = voxel in members
        return mask

    def _add_node(self, voxel: Coord, window, out: PlaceGraphDelta) -> int:
        node_id = self._next_id
        self._next_id += 1
        node = PlaceNode(
            voxel=voxel,
            position=(np.array(voxel, dtype=float) + 0.5) * self.voxel_size,
            obstacle_distance=0.0,
            num_basis=2,
        )
        self.nodes[node_id] = node
        self._adj.setdefault(node_id, set())
        self._refresh_attrs(node, window)
        self._pos_cache = None
        out.added.append(node_id)
        return node_id

    def _refresh_attrs(self, node: PlaceNode, window) -> None:
        self._pos_cache = None
        node.position = (np.array(node.voxel, dtype=float) + 0.5) * self.voxel_size
        info = window.gvd_info(node.voxel)
        if info is not None:
            node.obstacle_distance = info.distance
            node.num_basis = info.num_extra_basis + 1
            node.nearest_parent_vertex = (
                window.binding_for(info.parent) if info.parent is not None else None
            )
        else:
            node.obstacle_distance = window.esdf_distance(node.voxel)
            node.nearest_parent_vertex = None

    def _drop_node(self, node_id: int, out: PlaceGraphDelta) -> None:
        self._pos_cache = None
        del self.nodes[node_id]
        for nb in sorted(self._adj.get(node_id, ())):
            e = self._edge_key(node_id, nb)
            self._discard_edge(e)
            out.removed_edges.append(e)
        self._adj.pop(node_id, None)
        out.removed.append(node_id)

    # ------------------------------------------------------------ phase 1

    def _flood_fill(self, grid: _Grid) -> set[tuple[int, int]]:
        """Label every skeleton voxel with its nearest node id; returns the
        set of (label, label) contacts between adjacent differing labels."""
        self.voxel_labels = {}
        if grid.shape == (0, 0, 0):
            return set()
        grid.flat[grid.member_lin] = UNLABELED
        seeds = []
        for node_id in sorted(self.nodes):
            lin = grid.lin(self.nodes[node_id].voxel)
            if lin is not None and grid.flat[lin] != NON_MEMBER:
                grid.flat[lin] = node_id
                seeds.append(lin)
        if not seeds:
            return set()
        nx, ny, nz = grid.shape
        cap = max(4096, 32 * len(grid.member_lin))
        while True:
            pairs_a = np.empty(cap, dtype=np.int64)
            pairs_b = np.empty(cap, dtype=np.int64)
            work = grid.flat.copy()
            n_pairs = flood_fill_labels(
                work, nx, ny, nz, np.asarray(seeds, dtype=np.int64), pairs_a, pairs_b, cap
            )
            if n_pairs >= 0:
                break
            cap *= 4
        grid.flat = work
        labels = grid.flat[grid.member_lin]
        labeled = labels >= 0
        coords = grid.coords_of(grid.member_lin[labeled])
        self.voxel_labels = dict(
            zip(map(tuple, coords.tolist()), labels[labeled].tolist())
        )
        if n_pairs == 0:
            return set()
        enc = pairs_a[:n_pairs] * (2**31) + pairs_b[:n_pairs]
        uniq = np.unique(enc)
        return {(int(e // (2**31)), int(e % (2**31))) for e in uniq}

    def _merge_close_pairs(self, boundary, out: PlaceGraphDelta) -> None:
        merge_dist = self._merge_distance()
        for a, b in sorted(boundary):
            if a not in self.nodes or b not in self.nodes:
                continue
            pa = self.nodes[a].position
            pb = self.nodes[b].position
            if np.linalg.norm(pa - pb) <= merge_dist:
                keep, drop = (a, b) if a < b else (b, a)
                # larger clearance wins for the kept attributes
                if self.nodes[drop].obstacle_distance > self.nodes[keep].obstacle_distance:
                    kept_node = self.nodes[drop]
                    self.nodes[keep] = PlaceNode(
                        voxel=kept_node.voxel,
                        position=kept_node.position,
                        obstacle_distance=kept_node.obstacle_distance,
                        num_basis=kept_node.num_basis,
                        nearest_parent_vertex=kept_node.nearest_parent_vertex,
                    )
                for nb in sorted(self._adj.get(drop, ())):
                    e = self._edge_key(drop, nb)
                    self._discard_edge(e)
                    out.removed_edges.append(e)
                    if nb != keep:
                        ne = self._edge_key(keep, nb)
                        if ne not in self.edges:
                            self._add_edge(ne)
                            out.added_edges.append(ne)
                self._adj.pop(drop, None)
                del self.nodes[drop]
                self._pos_cache = None
                out.merged.append((keep, drop))

    # ------------------------------------------------------------ phase 2

    def _validate_edges(
        self, boundary, members, window, out, touched_nodes, force_full
    ) -> set[tuple[int, int]]:
        """Straight-line check of each putative edge against its voxel chain;
        splits insert a node at the maximum-deviation voxel.

        Verdicts are cached per node pair: an edge is revalidated when its
        endpoints moved, either endpoint was created or merged this update,
        or a full pass was requested (done once before the final flush so
        every committed edge reflects the settled skeleton).
        """
        threshold = self._split_threshold()
        validated: set[tuple[int, int]] = set()
        cache = self._edge_cache
        for a, b in sorted(boundary):
            if a not in self.nodes or b not in self.nodes:
                continue
            key = self._edge_key(a, b)
            va, vb = self.nodes[a].voxel, self.nodes[b].voxel
            hit = cache.get(key)
            if (
                hit is not None
                and hit[0] == va
                and hit[1] == vb
                and not force_full
                and a not in touched_nodes
                and b not in touched_nodes
            ):
                if hit[2]:
                    validated.add(key)
                continue
            chain = self._chain_between(a, b, members)
            if chain is None:
                continue
            pa = self.nodes[a].position
            pb = self.nodes[b].position
            worst_voxel, worst_dev = None, 0.0
            v = self.voxel_size
            for c in chain:
                p = ((c[0] + 0.5) * v, (c[1] + 0.5) * v, (c[2] + 0.5) * v)
                dev = _point_segment_distance(p, pa, pb)
                if dev > worst_dev:
                    worst_dev, worst_voxel = dev, c
            ok = worst_dev <= threshold
            cache[key] = (va, vb, ok)
            if not ok and worst_voxel is not None:
                if not self._has_node_within(worst_voxel, self.voxel_size * 0.5):
                    self._add_node(worst_voxel, window, out)
                continue
            validated.add(key)
        return validated

    def _chain_between(self, a: int, b: int, members) -> Optional[list[Coord]]:
        """Voxel path between two node voxels through their joint flood-fill
        regions; face connectivity preferred so chains hug the skeleton
        instead of cutting corners diagonally."""
        for offsets in (_N6, N26):
            chain = self._astar_chain(a, b, members, offsets)
            if chain is not None:
                return chain
        return None

    def _astar_chain(self, a: int, b: int, members, offsets) -> Optional[list[Coord]]:
        allowed = {a, b}
        start = self.nodes[a].voxel
        goal = self.nodes[b].voxel
        if start not in members or goal not in members:
            return None
        gx, gy, gz = goal
        labels = self.voxel_labels

        def h(c):
            dx, dy, dz = c[0] - gx, c[1] - gy, c[2] - gz
            return sqrt(dx * dx + dy * dy + dz * dz)

        prev: dict[Coord, Coord] = {start: start}
        g_cost: dict[Coord, float] = {start: 0.0}
        heap = [(h(start), start)]
        while heap:
            f, cur = heapq.heappop(heap)
            if cur == goal:
                chain = [cur]
                while prev[chain[-1]] != chain[-1]:
                    chain.append(prev[chain[-1]])
                return chain[::-1]
            base = g_cost[cur]
            if f - h(cur) > base + 1e-9:
                continue  # stale entry
            for off in offsets:
                nxt = (cur[0] + off[0], cur[1] + off[1], cur[2] + off[2])
                if nxt not in members:
                    continue
                if labels.get(nxt) not in allowed:
                    continue
                step = sqrt(off[0] * off[0] + off[1] * off[1] + off[2] * off[2])
                cand = base + step
                if cand < g_cost.get(nxt, np.inf) - 1e-12:
                    g_cost[nxt] = cand
                    prev[nxt] = cur
                    heapq.heappush(heap, (cand + h(nxt), nxt))
        return None

    # ------------------------------------------------------------- commit

    def _ensure_component_nodes(self, grid: _Grid, window, out) -> None:
        """Every connected skeleton component gets at least one node, so
        corridors without junctions are still represented."""
        if grid.shape == (0, 0, 0):
            return
        comp = component_labels(grid.flat, *grid.shape)
        member_comp = comp[grid.member_lin]
        member_label = grid.flat[grid.member_lin]
        n_comp = member_comp.max() + 1 if member_comp.size else 0
        has_node = np.zeros(n_comp, dtype=bool)
        np.maximum.at(has_node, member_comp, member_label >= 0)
        for comp_id in np.nonzero(~has_node)[0]:
            rows = np.nonzero(member_comp == comp_id)[0]
            coords = grid.coords_of(grid.member_lin[rows])
            best = max(
                (tuple(int(x) for x in c) for c in coords),
                key=lambda c: (window.esdf_distance(c), c),
            )
            node_id = self._add_node(best, window, out)
            for c in coords:
                self.voxel_labels[(int(c[0]), int(c[1]), int(c[2]))] = node_id

    def _connect_components(self, out: PlaceGraphDelta) -> None:
        from scipy.spatial import cKDTree

        comps = self.components()
        while len(comps) > 1:
            comps.sort(key=lambda c: (len(c), min(c)))
            small = sorted(comps[0])
            rest = sorted(set().union(*comps[1:]))
            pa = np.stack([self.nodes[n].position for n in small])
            pb = np.stack([self.nodes[n].position for n in rest])
            tree = cKDTree(pb)
            dists, rows = tree.query(pa)
            order = np.lexsort((rows, np.arange(len(small)), dists))
            pick = order[0]
            a = small[pick]
            b = rest[int(rows[pick])]
            e = self._edge_key(a, b)
            self._add_edge(e)
            self.bridge_edges.add(e)
            out.added_edges.append(e)
            merged = comps[0] | next(c for c in comps[1:] if b in c)
            comps = [c for c in comps[1:] if b not in c] + [merged]

    # ----------------------------------------------------------- archiving

    def prune_archived(self, archived_blocks: Iterable[Coord], block_size: int) -> list[int]:
        """Drop nodes and labels whose voxels left the window; the caller
        keeps the corresponding persistent nodes frozen in the scene graph."""
        blocks = set(tuple(int(x) for x in b) for b in archived_blocks)
        if not blocks:
            return []

        def block_of(c: Coord) -> Coord:
            return (c[0] // block_size, c[1] // block_size, c[2] // block_size)

        gone_ids = sorted(
            node_id for node_id, node in self.nodes.items() if block_of(node.voxel) in blocks
        )
        for node_id in gone_ids:
            del self.nodes[node_id]
            for nb in sorted(self._adj.get(node_id, ())):
                self._discard_edge(self._edge_key(node_id, nb))
            self._adj.pop(node_id, None)
        self.voxel_labels = {
            c: l
            for c, l in self.voxel_labels.items()
            if block_of(c) not in blocks and l in self.nodes
        }
        return gone_ids

    def finalize_attrs(self, node_id: int, window) -> PlaceNode:
        node = self.nodes[node_id]
        self._refresh_attrs(node, window)
        return node


def _point_segment_distance(p, a, b) -> float:
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    apx, apy, apz = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    denom = abx * abx + aby * aby + abz * abz
    if denom < 1e-12:
        return float(sqrt(apx * apx + apy * apy + apz * apz))
    t = (apx * abx + apy * aby + apz * abz) / denom
    t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
    dx = apx - t * abx
    dy = apy - t * aby
    dz = apz - t * abz
    return float(sqrt(dx * dx + dy * dy + dz * dz))
