"""Balanced quadtrees over an implicit domain and boundary-augmented point clouds.

The tree covers the domain's square bounding box. Leaves are classified as
interior, boundary, or exterior by probing phi at corners and edge samples.
After balancing (edge-adjacent leaves differ by at most one level), the cloud
is assembled: interior points are leaf vertices strictly inside the domain,
and every boundary leaf receives points placed on the boundary curve so the
local boundary resolution beats the interior gap by the factor 4*tan(dtheta/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .errors import AssumptionViolated, ConfigurationError, InternalError
from .geometry import ImplicitDomain, boundary_arc, place_boundary_points, square_boundary_crossings

LEAF_INTERIOR = 0
LEAF_BOUNDARY = 1
LEAF_EXTERIOR = 2

_CLASS_NAMES = {LEAF_INTERIOR: "interior", LEAF_BOUNDARY: "boundary", LEAF_EXTERIOR: "exterior"}

# Children in Morton order: SW, SE, NW, NE.
_CHILD_OFFSETS = ((0, 0), (1, 0), (0, 1), (1, 1))


@dataclass(frozen=True)
class Square:
    x0: float
    y0: float
    size: float
    depth: int

    @property
    def center(self):
        return (self.x0 + 0.5 * self.size, self.y0 + 0.5 * self.size)


def uniform_rule(max_depth: int) -> Callable:
    """Refine every square to max_depth."""
    return lambda sq, cls: sq.depth < max_depth


def boundary_rule(base_depth: int, max_depth: int) -> Callable:
    """Refine everywhere to base_depth, then boundary squares on to max_depth."""

    def rule(sq, cls):
        if sq.depth < base_depth:
            return True
        return cls == LEAF_BOUNDARY and sq.depth < max_depth

    return rule


class Quadtree:
    """Classified, balanced 4-ary tree of squares over the domain's bounding box."""

    def __init__(self, domain: ImplicitDomain):
        self.domain = domain
        self.box = domain.box
        # key = (depth, ix, iy); cls holds every node ever created.
        self.cls: dict = {}
        self.split: set = set()
        self.edge_violation: dict = {}
        self._final = None

    # -- node geometry ------------------------------------------------------

    def square(self, key) -> Square:
        d, i, j = key
        size = self.box.size / (1 << d)
        return Square(self.box.x0 + i * size, self.box.y0 + j * size, size, d)

    def is_leaf(self, key) -> bool:
        return key in self.cls and key not in self.split

    def leaves(self):
        """Leaf keys in Morton (depth-first SW,SE,NW,NE) order."""
        out = []
        stack = [(0, 0, 0)]
        while stack:
            key = stack.pop()
            if key in self.split:
                d, i, j = key
                for dx, dy in reversed(_CHILD_OFFSETS):
                    stack.append((d + 1, 2 * i + dx, 2 * j + dy))
            else:
                out.append(key)
        return out

    # -- classification -----------------------------------------------------

    def _classify_batch(self, keys):
        """Probe phi on corners + edge samples for each key; set cls and
        edge_violation. Children of already-classified interior/exterior
        parents inherit without probing."""
        probe_keys = []
        for key in keys:
            d, i, j = key
            parent = (d - 1, i // 2, j // 2) if d > 0 else None
            if parent is not None and self.cls.get(parent) in (LEAF_INTERIOR, LEAF_EXTERIOR):
                self.cls[key] = self.cls[parent]
                self.edge_violation[key] = False
            else:
                probe_keys.append(key)
        if not probe_keys:
            return
        n = geometry.N_TRACE
        t = np.linspace(0.0, 1.0, n + 1)
        # Interior lattice guards against a boundary component that never
        # touches the square's edges (e.g. the whole domain inside one square).
        m = 8
        ti = (np.arange(m) + 0.5) / m
        TX, TY = np.meshgrid(ti, ti)
        K = len(probe_keys)
        xs = np.empty((K, 4, n + 1))
        ys = np.empty((K, 4, n + 1))
        xi = np.empty((K, m * m))
        yi = np.empty((K, m * m))
        for k, key in enumerate(probe_keys):
            sq = self.square(key)
            x0, y0, s = sq.x0, sq.y0, sq.size
            xs[k, 0], ys[k, 0] = x0 + t * s, np.full(n + 1, y0)          # south
            xs[k, 1], ys[k, 1] = np.full(n + 1, x0 + s), y0 + t * s      # east
            xs[k, 2], ys[k, 2] = x0 + t * s, np.full(n + 1, y0 + s)      # north
            xs[k, 3], ys[k, 3] = np.full(n + 1, x0), y0 + t * s          # west
            xi[k], yi[k] = (x0 + TX.ravel() * s), (y0 + TY.ravel() * s)
        vals = self.domain.phi_at(xs, ys)
        ivals = self.domain.phi_at(xi, yi)
        tol = self.domain.tol_b
        sgn = np.sign(vals)
        sgn[np.abs(vals) <= tol] = 0.0
        isgn = np.sign(ivals)
        isgn[np.abs(ivals) <= tol] = 0.0
        for k, key in enumerate(probe_keys):
            s = sgn[k]
            has_zero = np.any(s == 0.0) or np.any(isgn[k] == 0.0)
            has_neg = np.any(s < 0.0) or np.any(isgn[k] < 0.0)
            has_pos = np.any(s > 0.0) or np.any(isgn[k] > 0.0)
            if has_zero or (has_neg and has_pos):
                self.cls[key] = LEAF_BOUNDARY
            elif has_neg:
                self.cls[key] = LEAF_INTERIOR
            else:
                self.cls[key] = LEAF_EXTERIOR
            viol = False
            if self.cls[key] == LEAF_BOUNDARY:
                for e in range(4):
                    nz = s[e][s[e] != 0.0]
                    if nz.size >= 2 and int(np.sum(nz[1:] != nz[:-1])) > 1:
                        viol = True
            self.edge_violation[key] = viol

    def subdivide(self, key):
        if key in self.split:
            return
        d, i, j = key
        self.split.add(key)
        children = [(d + 1, 2 * i + dx, 2 * j + dy) for dx, dy in _CHILD_OFFSETS]
        self._classify_batch(children)
        self._final = None

    # -- balancing ----------------------------------------------------------

    def _edge_neighbor_keys(self, key):
        d, i, j = key
        span = 1 << d
        out = []
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < span and 0 <= nj < span:
                out.append(((d, ni, nj), (di, dj)))
        return out

    def _needs_split_for_balance(self, key):
        d, i, j = key
        for (nkey, (di, dj)) in self._edge_neighbor_keys(key):
            if nkey not in self.cls or nkey not in self.split:
                continue
            nd, ni, nj = nkey
            # Children of the neighbor facing this leaf; if any is split,
            # leaves there are at depth >= d+2.
            if di != 0:
                cx = 2 * ni if di > 0 else 2 * ni + 1
                facing = [(nd + 1, cx, 2 * nj), (nd + 1, cx, 2 * nj + 1)]
            else:
                cy = 2 * nj if dj > 0 else 2 * nj + 1
                facing = [(nd + 1, 2 * ni, cy), (nd + 1, 2 * ni + 1, cy)]
            for f in facing:
                if f in self.split:
                    return True
        return False

    def balance(self):
        """Split leaves until edge-adjacent leaves differ by at most one level.

        Idempotent; splits only as needed (each split is forced by a depth-2
        violation, so the result is the minimal balanced refinement).
        """
        work = list(self.leaves())
        in_work = set(work)
        while work:
            key = work.pop()
            in_work.discard(key)
            if not self.is_leaf(key):
                continue
            if self._needs_split_for_balance(key):
                self.subdivide(key)
                d, i, j = key
                for dx, dy in _CHILD_OFFSETS:
                    ck = (d + 1, 2 * i + dx, 2 * j + dy)
                    if ck not in in_work:
                        work.append(ck)
                        in_work.add(ck)
                # Splitting may newly violate shallower neighbors.
                for (nkey, _) in self._edge_neighbor_keys(key):
                    leaf = self._covering_leaf(nkey)
                    if leaf is not None and leaf not in in_work:
                        work.append(leaf)
                        in_work.add(leaf)
        self._final = None
        return self

    def _covering_leaf(self, key):
        """The leaf whose square contains the square of `key`, if any."""
        d, i, j = key
        while d >= 0:
            k = (d, i, j)
            if k in self.cls:
                return k if k not in self.split else None
            d, i, j = d - 1, i // 2, j // 2
        return None

    # -- finalized arrays ----------------------------------------------------

    def finalize(self):
        if self._final is not None:
            return self._final
        keys = self.leaves()
        n = len(keys)
        depth = np.empty(n, dtype=np.int32)
        ix = np.empty(n, dtype=np.int64)
        iy = np.empty(n, dtype=np.int64)
        cls = np.empty(n, dtype=np.int8)
        for li, key in enumerate(keys):
            depth[li], ix[li], iy[li] = key
            cls[li] = self.cls[key]
        D = int(depth.max())
        cell = self.box.size / (1 << D)
        shift = D - depth
        gx0 = ix << shift.astype(np.int64)
        gy0 = iy << shift.astype(np.int64)
        span = (np.int64(1) << shift.astype(np.int64))
        grid = np.full(((1 << D), (1 << D)), -1, dtype=np.int32)
        for li in range(n):
            grid[gx0[li] : gx0[li] + span[li], gy0[li] : gy0[li] + span[li]] = li
        if np.any(grid < 0):
            raise InternalError("leaf tiling does not cover the root box")
        registry: dict = {}
        for li in range(n):
            s = int(span[li])
            x, y = int(gx0[li]), int(gy0[li])
            for vx, vy in ((x, y), (x + s, y), (x, y + s), (x + s, y + s)):
                registry.setdefault((vx, vy), []).append(li)
        size = self.box.size / (1 << depth).astype(float)
        x0 = self.box.x0 + ix * size
        y0 = self.box.y0 + iy * size
        self._final = {
            "keys": keys,
            "depth": depth,
            "cls": cls,
            "x0": x0,
            "y0": y0,
            "size": size,
            "gx0": gx0,
            "gy0": gy0,
            "span": span,
            "D": D,
            "cell": cell,
            "grid": grid,
            "registry": registry,
        }
        return self._final

    @property
    def max_leaf_depth(self):
        return self.finalize()["D"]

    def leaf_square(self, li) -> Square:
        f = self.finalize()
        return Square(float(f["x0"][li]), float(f["y0"][li]), float(f["size"][li]), int(f["depth"][li]))

    def leaf_at(self, x, y):
        f = self.finalize()
        nc = 1 << f["D"]
        i = min(max(int((x - self.box.x0) / f["cell"]), 0), nc - 1)
        j = min(max(int((y - self.box.y0) / f["cell"]), 0), nc - 1)
        return int(f["grid"][i, j])

    def copy(self):
        t = Quadtree(self.domain)
        t.cls = dict(self.cls)
        t.split = set(self.split)
        t.edge_violation = dict(self.edge_violation)
        return t

    def verify_boundary_assumption(self):
        f = self.finalize()
        bad = [
            self.leaf_square(li)
            for li, key in enumerate(f["keys"])
            if f["cls"][li] == LEAF_BOUNDARY and self.edge_violation.get(key, False)
        ]
        if bad:
            sq = bad[0]
            raise AssumptionViolated(
                f"{len(bad)} boundary leaves have an edge crossing the boundary twice "
                f"(first at ({sq.x0:.6g},{sq.y0:.6g}), size {sq.size:.3g}); "
                "rebuild with a larger max_depth"
            )


def build(domain: ImplicitDomain, max_depth: int, refine_rule=None) -> Quadtree:
    """Construct, classify, and balance a quadtree over the domain's box."""
    if max_depth < 2:
        raise ConfigurationError("max_depth must be >= 2")
    if refine_rule is None:
        refine_rule = uniform_rule(max_depth)
    tree = Quadtree(domain)
    tree._classify_batch([(0, 0, 0)])
    queue = [(0, 0, 0)]
    while queue:
        key = queue.pop()
        if refine_rule(tree.square(key), tree.cls[key]) and key[0] < max_depth:
            tree.subdivide(key)
            d, i, j = key
            queue.extend((d + 1, 2 * i + dx, 2 * j + dy) for dx, dy in _CHILD_OFFSETS)
    tree.balance()
    tree.verify_boundary_assumption()
    tree.finalize()
    return tree


# ---------------------------------------------------------------------------
# Boundary augmentation (the per-leaf placement loop)
# ---------------------------------------------------------------------------


@dataclass
class BoundaryLeafRecord:
    leaf: int
    delta: Optional[float]        # min distance from interior points in the leaf to its arc
    hb_desired: Optional[float]   # 4*delta*tan(dtheta/2)
    hb_realized: Optional[float]  # sup over the arc of distance to the leaf's boundary points
    arc_length: Optional[float]
    n_placed: int


@dataclass
class PointCloud:
    """Interior vertices plus boundary points, with per-leaf bookkeeping."""

    tree: Quadtree
    domain: ImplicitDomain
    points: np.ndarray          # (N, 2), interior block first
    n_interior: int
    lattice: np.ndarray         # (n_interior, 2) int64 lattice coords at fine resolution
    vert_id: np.ndarray         # ((2^D+1), (2^D+1)) int32: lattice vertex -> interior index or -1
    leaf_bpt_off: np.ndarray    # CSR leaf -> boundary point ids (global indices)
    leaf_bpt_idx: np.ndarray
    bpt_owner: np.ndarray       # (n_boundary,) owning leaf id
    records: dict               # leaf id -> BoundaryLeafRecord
    polylines: dict             # leaf id -> (M, 2) traced arc
    dtheta: float

    @property
    def n_points(self):
        return self.points.shape[0]

    @property
    def n_boundary(self):
        return self.n_points - self.n_interior

    @property
    def interior_points(self):
        return self.points[: self.n_interior]

    @property
    def boundary_points(self):
        return self.points[self.n_interior :]

    def leaf_boundary_ids(self, li):
        return self.leaf_bpt_idx[self.leaf_bpt_off[li] : self.leaf_bpt_off[li + 1]]

    def boundary_samples(self, min_total=10_000):
        """Dense samples of the boundary curve, from the traced per-leaf arcs."""
        polys = list(self.polylines.values())
        if not polys:
            return np.empty((0, 2))
        per = max(2, int(math.ceil(min_total / len(polys))))
        out = []
        for poly in polys:
            seg = np.hypot(np.diff(poly[:, 0]), np.diff(poly[:, 1]))
            cum = np.concatenate([[0.0], np.cumsum(seg)])
            if cum[-1] == 0.0:
                out.append(poly)
                continue
            s = np.linspace(0.0, cum[-1], per)
            out.append(
                np.column_stack(
                    [np.interp(s, cum, poly[:, 0]), np.interp(s, cum, poly[:, 1])]
                )
            )
        return np.vstack(out)

    def local_leaf_size(self):
        """Smallest incident leaf size for each interior point."""
        f = self.tree.finalize()
        reg = f["registry"]
        size = f["size"]
        out = np.empty(self.n_interior)
        for i in range(self.n_interior):
            key = (int(self.lattice[i, 0]), int(self.lattice[i, 1]))
            out[i] = min(size[li] for li in reg[key])
        return out


def augment_boundary(tree: Quadtree, domain: ImplicitDomain, dtheta: float) -> PointCloud:
    """Build the point cloud: interior vertices + boundary points per leaf.

    For each boundary leaf: add the edge crossings, measure the gap delta
    between interior points in the leaf and its boundary arc, and place
    ceil(l / (4*delta*tan(dtheta/2))) points equally spaced along the arc.
    """
    if not (0.0 < dtheta <= math.pi / 4 + 1e-12):
        raise ConfigurationError("dtheta must lie in (0, pi/4]")
    f = tree.finalize()
    D, cell = f["D"], f["cell"]
    box = tree.box
    tol_b = domain.tol_b

    # Interior vertices: registry vertices of non-exterior leaves with phi < -tol_b.
    cand = sorted(
        key for key, leaves in f["registry"].items()
        if any(f["cls"][li] != LEAF_EXTERIOR for li in leaves)
    )
    cand = np.array(cand, dtype=np.int64).reshape(-1, 2)
    vx = box.x0 + cand[:, 0] * cell
    vy = box.y0 + cand[:, 1] * cell
    vphi = domain.phi_at(vx, vy)
    interior_mask = vphi < -tol_b
    snapped_mask = np.abs(vphi) <= tol_b

    int_lattice = cand[interior_mask]
    int_xy = np.column_stack([vx[interior_mask], vy[interior_mask]])
    order = np.lexsort((int_xy[:, 0], int_xy[:, 1]))
    int_lattice = int_lattice[order]
    int_xy = int_xy[order]

    nv = (1 << D) + 1
    vert_id = np.full((nv, nv), -1, dtype=np.int32)
    vert_id[int_lattice[:, 0], int_lattice[:, 1]] = np.arange(len(int_xy), dtype=np.int32)

    # Boundary candidates: (x, y, leaf id). Vertex zeros attach to every
    # incident boundary leaf.
    bcand = []
    for k in np.flatnonzero(snapped_mask):
        key = (int(cand[k, 0]), int(cand[k, 1]))
        for li in f["registry"][key]:
            if f["cls"][li] == LEAF_BOUNDARY:
                bcand.append((vx[k], vy[k], li))

    records: dict = {}
    polylines: dict = {}
    boundary_leaves = np.flatnonzero(f["cls"] == LEAF_BOUNDARY)
    for li in boundary_leaves:
        li = int(li)
        sq = tree.leaf_square(li)
        crossings = square_boundary_crossings(domain, sq.x0, sq.y0, sq.size)
        for p in crossings:
            bcand.append((float(p[0]), float(p[1]), li))
        if len(crossings) != 2:
            continue
        poly, arclen = boundary_arc(domain, (sq.x0, sq.y0, sq.size))
        polylines[li] = poly

        # X = interior cloud points inside the closed square (lattice-exact).
        s = int(f["span"][li])
        x_lo, y_lo = int(f["gx0"][li]), int(f["gy0"][li])
        in_leaf = (
            (int_lattice[:, 0] >= x_lo)
            & (int_lattice[:, 0] <= x_lo + s)
            & (int_lattice[:, 1] >= y_lo)
            & (int_lattice[:, 1] <= y_lo + s)
        )
        X = int_xy[in_leaf]
        if X.shape[0] == 0:
            records[li] = BoundaryLeafRecord(li, None, None, None, arclen, 0)
            continue
        d2 = (X[:, None, 0] - poly[None, :, 0]) ** 2 + (X[:, None, 1] - poly[None, :, 1]) ** 2
        delta = float(np.sqrt(d2.min()))
        hb = 4.0 * delta * math.tan(0.5 * dtheta)
        count = int(math.ceil(arclen / hb))
        placed = place_boundary_points(domain, poly, count, tol_root=geometry.TOL_ROOT_REL * sq.size)
        for p in placed:
            bcand.append((float(p[0]), float(p[1]), li))
        records[li] = BoundaryLeafRecord(li, delta, hb, None, arclen, count)

    # Deduplicate boundary candidates (shared crossings, corner zeros).
    dedup_tol = 10.0 * geometry.TOL_ROOT_REL * box.size
    bcand.sort(key=lambda c: (c[1], c[0], c[2]))
    kept_xy = []
    assoc = []  # parallel list of leaf-id sets
    cell_map: dict = {}
    for x, y, li in bcand:
        gi, gj = int(math.floor(x / dedup_tol)), int(math.floor(y / dedup_tol))
        hit = -1
        for ci in range(gi - 1, gi + 2):
            for cj in range(gj - 1, gj + 2):
                for idx in cell_map.get((ci, cj), ()):
                    px, py = kept_xy[idx]
                    if math.hypot(px - x, py - y) <= dedup_tol:
                        hit = idx
                        break
                if hit >= 0:
                    break
            if hit >= 0:
                break
        if hit >= 0:
            assoc[hit].add(li)
        else:
            kept_xy.append((x, y))
            assoc.append({li})
            cell_map.setdefault((gi, gj), []).append(len(kept_xy) - 1)

    if kept_xy:
        b_xy = np.array(kept_xy)
        border = np.lexsort((b_xy[:, 0], b_xy[:, 1]))
        b_xy = b_xy[border]
        assoc = [assoc[k] for k in border]
    else:
        b_xy = np.empty((0, 2))

    n_int = len(int_xy)
    points = np.vstack([int_xy, b_xy]) if len(b_xy) else int_xy.copy()

    n_leaf = len(f["keys"])
    per_leaf: dict = {li: [] for li in range(n_leaf)}
    owner = np.full(len(b_xy), -1, dtype=np.int32)
    for bi, leaf_set in enumerate(assoc):
        owner[bi] = min(leaf_set)
        for li in leaf_set:
            per_leaf[li].append(n_int + bi)
    off = np.zeros(n_leaf + 1, dtype=np.int64)
    idx = []
    for li in range(n_leaf):
        ids = sorted(per_leaf[li])
        idx.extend(ids)
        off[li + 1] = len(idx)
    leaf_bpt_idx = np.array(idx, dtype=np.int32) if idx else np.empty(0, dtype=np.int32)

    cloud = PointCloud(
        tree=tree,
        domain=domain,
        points=points,
        n_interior=n_int,
        lattice=int_lattice,
        vert_id=vert_id,
        leaf_bpt_off=off,
        leaf_bpt_idx=leaf_bpt_idx,
        bpt_owner=owner,
        records=records,
        polylines=polylines,
        dtheta=float(dtheta),
    )

    # Realized per-leaf boundary resolution (sup over the arc of the distance
    # to the leaf's own boundary points).
    for li, rec in records.items():
        poly = polylines.get(li)
        ids = cloud.leaf_boundary_ids(li)
        if poly is None or len(ids) == 0:
            continue
        bp = points[ids]
        d2 = (poly[:, None, 0] - bp[None, :, 0]) ** 2 + (poly[:, None, 1] - bp[None, :, 1]) ** 2
        rec.hb_realized = float(np.sqrt(d2.min(axis=1).max()))
    return cloud


# ---------------------------------------------------------------------------
# Metrics and dumps
# ---------------------------------------------------------------------------


@dataclass
class MeshMetrics:
    h: float
    h_b: float
    delta: float
    dtheta: float
    eps: Optional[float] = None
    dphi_max: Optional[float] = None
    hb_delta_ratio_max: Optional[float] = None  # realized max of h_{B,S} / delta_S
    # Algorithm constant vs the prose bound constant (recorded, not enforced).
    hb_rule_constant: float = 4.0
    hb_prose_constant: float = 2.0


def metrics(cloud: PointCloud, eps=None, dphi_max=None) -> MeshMetrics:
    """Global resolution measures: suprema/minima approximated by sampling the
    boundary (~1e4 points) and leaf-square centres; per-leaf values exact over
    stored points."""
    if cloud.n_points == 0:
        raise ConfigurationError("empty cloud")
    f = cloud.tree.finalize()
    kd_all = cKDTree(cloud.points)
    bsamp = cloud.boundary_samples()

    inside = f["cls"] != LEAF_EXTERIOR
    centers = np.column_stack(
        [f["x0"][inside] + 0.5 * f["size"][inside], f["y0"][inside] + 0.5 * f["size"][inside]]
    )
    cphi = cloud.domain.phi_at(centers[:, 0], centers[:, 1])
    centers = centers[cphi < 0]
    probes = np.vstack([centers, bsamp]) if len(bsamp) else centers
    h = float(kd_all.query(probes)[0].max()) if len(probes) else float("nan")

    if cloud.n_boundary > 0 and len(bsamp):
        kd_b = cKDTree(cloud.boundary_points)
        h_b = float(kd_b.query(bsamp)[0].max())
    else:
        h_b = 0.0

    if len(bsamp) and cloud.n_interior > 0:
        kd_s = cKDTree(bsamp)
        delta = float(kd_s.query(cloud.interior_points)[0].min())
    else:
        delta = float("inf")

    ratio = None
    recs = [r for r in cloud.records.values() if r.delta is not None and r.hb_realized is not None]
    if recs:
        ratio = max(r.hb_realized / r.delta for r in recs)
    return MeshMetrics(
        h=h,
        h_b=h_b,
        delta=delta,
        dtheta=cloud.dtheta,
        eps=eps,
        dphi_max=dphi_max,
        hb_delta_ratio_max=ratio,
    )


def dump(cloud: PointCloud) -> str:
    """Text mesh dump: `V i x y kind` then `L depth x0 y0 size class`.

    Points ordered by (y, x); leaves in Morton order. Deterministic."""
    lines = []
    order = np.lexsort((cloud.points[:, 0], cloud.points[:, 1]))
    for i in order:
        kind = "interior" if i < cloud.n_interior else "boundary"
        x, y = cloud.points[i]
        lines.append(f"V {i} {x!r} {y!r} {kind}")
    f = cloud.tree.finalize()
    for li in range(len(f["keys"])):
        lines.append(
            f"L {f['depth'][li]} {f['x0'][li]!r} {f['y0'][li]!r} {f['size'][li]!r} "
            f"{_CLASS_NAMES[int(f['cls'][li])]}"
        )
    return "\n".join(lines) + "\n"
