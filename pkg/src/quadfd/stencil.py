"""Wide-stencil construction: tree-accelerated neighbour search and monotone
second-directional-derivative coefficients.

For every interior point and every direction in the discrete angle set, the
search walks leaf squares along the ray (both senses), collecting the entry
edges' endpoint vertices as candidate neighbours; boundary leaves met along
the way contribute their boundary points, and the walk stops where the ray
enters an exterior leaf, so a stencil never differences across the exterior.
One candidate per quadrant of the rotated frame is selected (best angular
alignment), and the four-point coefficients reproduce u_theta_theta exactly
on the quadratic test set while keeping every weight nonnegative. Directions
aligned with the lattice collapse to the classic two-point second difference.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit, prange

from .errors import DegenerateStencil, InsufficientResolution, InternalError
from .mesh import LEAF_BOUNDARY, PointCloud

ONRAY_TOL = 1e-12      # |sin phi| below this counts as on-ray
SNAP_TOL = 1e-9        # crossing-to-vertex snap, in fine-cell units
DEGENERATE_TOL = 1e-12

# Per-task status codes produced by the kernels.
OK = 0
EMPTY_QUADRANT = 1
DEGENERATE = 2
EXITED_BOX = 3

KIND_FOUR = 0
KIND_ALIGNED = 1


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchParams:
    """Search radius and direction set.

    Defaults follow eps = eps_coef*sqrt(h*L) and dtheta = dtheta_coef*sqrt(h/L)
    with L the root box size and h the largest non-exterior leaf size; the
    direction count over [0, pi) is rounded up to an even number so that
    theta + pi/2 stays inside the set.
    """

    eps: float
    n_dirs: int
    eps_coef: float = 2.0
    dtheta_coef: float = math.pi / 2

    @property
    def dtheta(self) -> float:
        return math.pi / self.n_dirs

    @property
    def thetas(self) -> np.ndarray:
        return np.arange(self.n_dirs) * (math.pi / self.n_dirs)


def mesh_h(tree) -> float:
    """Length scale of the largest leaf square that meets the domain."""
    f = tree.finalize()
    inside = f["cls"] != 2
    return float(f["size"][inside].max())


def n_dirs_for(h: float, box_size: float, dtheta_coef: float = math.pi / 2) -> int:
    target = dtheta_coef * math.sqrt(h / box_size)
    return 2 * max(2, int(math.ceil(math.pi / target / 2.0)))


def default_params(tree, eps_coef: float = 2.0, dtheta_coef: float = math.pi / 2,
                   n_dirs: Optional[int] = None, eps: Optional[float] = None) -> SearchParams:
    h = mesh_h(tree)
    L = tree.box.size
    if eps is None:
        eps = eps_coef * math.sqrt(h * L)
    if n_dirs is None:
        n_dirs = n_dirs_for(h, L, dtheta_coef)
    if n_dirs % 2:
        n_dirs += 1
    if eps <= 2.0 * h:
        warnings.warn(
            f"search radius eps={eps:.3g} is not greater than twice the leaf size {h:.3g}; "
            "stencil angular resolution will be poor",
            stacklevel=2,
        )
    return SearchParams(eps=float(eps), n_dirs=int(n_dirs),
                        eps_coef=eps_coef, dtheta_coef=dtheta_coef)


# ---------------------------------------------------------------------------
# Closed-form coefficients (reference implementation; the kernel mirrors it)
# ---------------------------------------------------------------------------


def coefficients(C, S):
    """Monotone 4-point weights for u_theta_theta from rotated coordinates.

    C, S are length-4 arrays (axial and transverse components of the four
    neighbours, one per quadrant). Raises DegenerateStencil when the common
    denominator vanishes relative to the stencil scale.
    """
    C = np.asarray(C, dtype=float)
    S = np.asarray(S, dtype=float)
    P = C[2] * S[1] - C[1] * S[2]
    Q = C[0] * S[3] - C[3] * S[0]
    D = P * (C[0] ** 2 * S[3] - C[3] ** 2 * S[0]) - Q * (C[2] ** 2 * S[1] - C[1] ** 2 * S[2])
    rmax = float(np.sqrt(C**2 + S**2).max())
    if abs(D) <= DEGENERATE_TOL * rmax**5:
        raise DegenerateStencil("coefficient denominator vanishes (collinear neighbours)")
    a = np.array([2 * S[3] * P, 2 * S[2] * Q, -2 * S[1] * Q, -2 * S[0] * P]) / D
    return a


def aligned_weights(r_plus, r_minus):
    """Two-point second difference on the ray: weights for u+, u-, u0."""
    wp = 2.0 / (r_plus * (r_plus + r_minus))
    wm = 2.0 / (r_minus * (r_plus + r_minus))
    return wp, wm, -2.0 / (r_plus * r_minus)


# ---------------------------------------------------------------------------
# Numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _march_half(PX, PY, dx, dy, eps_c, nC,
                grid, leaf_gx0, leaf_gy0, leaf_span, leaf_class,
                vert_id, bpt_off, bpt_idx, pts_cx, pts_cy,
                cand, ncand):
    """Walk leaf squares from lattice vertex (PX, PY) along (dx, dy) up to
    eps_c (all lengths in fine-cell units). Appends candidate point ids to
    cand. Returns (ncand, status)."""
    big = 1e300
    # Starting cell (the ray's own quadrant; on-line ties resolve east/north).
    cx = PX if dx >= 0.0 else PX - 1
    cy = PY if dy >= 0.0 else PY - 1
    if cx < 0 or cx >= nC or cy < 0 or cy >= nC:
        return ncand, EXITED_BOX
    li = grid[cx, cy]
    axis_ray = (dx == 0.0) or (dy == 0.0)
    eps2 = eps_c * eps_c * (1.0 + 1e-12)

    if leaf_class[li] == 2:
        return ncand, OK
    if leaf_class[li] == 1:  # starts inside a boundary leaf
        for k in range(bpt_off[li], bpt_off[li + 1]):
            pid = bpt_idx[k]
            rx = pts_cx[pid] - PX
            ry = pts_cy[pid] - PY
            if rx * rx + ry * ry <= eps2:
                cand[ncand] = pid
                ncand += 1

    max_steps = 4 * nC + 16
    for _ in range(max_steps):
        gx = leaf_gx0[li]
        gy = leaf_gy0[li]
        sp = leaf_span[li]
        tx = big
        ty = big
        if dx > 0.0:
            tx = (gx + sp - PX) / dx
        elif dx < 0.0:
            tx = (gx - PX) / dx
        if dy > 0.0:
            ty = (gy + sp - PY) / dy
        elif dy < 0.0:
            ty = (gy - PY) / dy
        t_exit = tx if tx < ty else ty
        if t_exit > eps_c:
            return ncand, OK

        if tx <= ty:
            X = gx + sp if dx > 0.0 else gx
            Yc = PY + t_exit * dy
            Yr = math.floor(Yc + 0.5)
            if abs(Yc - Yr) <= SNAP_TOL:
                # Crossing at a lattice vertex.
                vX = X
                vY = int(Yr)
                is_vertex = True
            else:
                is_vertex = False
                ecol = X
                erow = int(math.floor(Yc))
        else:
            Y = gy + sp if dy > 0.0 else gy
            Xc = PX + t_exit * dx
            Xr = math.floor(Xc + 0.5)
            if abs(Xc - Xr) <= SNAP_TOL:
                vX = int(Xr)
                vY = Y
                is_vertex = True
            else:
                is_vertex = False
                erow = Y
                ecol = int(math.floor(Xc))

        if is_vertex:
            ncx = vX if dx >= 0.0 else vX - 1
            ncy = vY if dy >= 0.0 else vY - 1
            if 0 <= vX <= nC and 0 <= vY <= nC:
                vid = vert_id[vX, vY]
                if vid >= 0:
                    rx = float(vX - PX)
                    ry = float(vY - PY)
                    if rx * rx + ry * ry <= eps2:
                        cand[ncand] = vid
                        ncand += 1
        else:
            if tx <= ty:
                ncx = ecol if dx >= 0.0 else ecol - 1
                ncy = erow
            else:
                ncx = ecol
                ncy = erow if dy >= 0.0 else erow - 1
        if ncx < 0 or ncx >= nC or ncy < 0 or ncy >= nC:
            # Only reachable along a boundary-leaf corridor where the domain
            # touches the box; from an interior leaf the tiling is broken.
            if leaf_class[li] == 0:
                return ncand, EXITED_BOX
            return ncand, OK
        nl = grid[ncx, ncy]

        # Entry-edge endpoints of the entered leaf (plus, for axis rays at a
        # vertex crossing, the matching edge of the leaf across the line).
        ngx = leaf_gx0[nl]
        ngy = leaf_gy0[nl]
        nsp = leaf_span[nl]
        if is_vertex:
            if axis_ray:
                if dy == 0.0:
                    ncand = _appended(vert_id, vX, ngy, nC, PX, PY, eps2, cand, ncand)
                    ncand = _appended(vert_id, vX, ngy + nsp, nC, PX, PY, eps2, cand, ncand)
                    oy = vY - 1
                    if 0 <= oy < nC and 0 <= ncx < nC:
                        ol = grid[ncx, oy]
                        ncand = _appended(vert_id, vX, leaf_gy0[ol], nC, PX, PY, eps2, cand, ncand)
                else:
                    ncand = _appended(vert_id, ngx, vY, nC, PX, PY, eps2, cand, ncand)
                    ncand = _appended(vert_id, ngx + nsp, vY, nC, PX, PY, eps2, cand, ncand)
                    ox = vX - 1
                    if 0 <= ox < nC and 0 <= ncy < nC:
                        ol = grid[ox, ncy]
                        ncand = _appended(vert_id, leaf_gx0[ol], vY, nC, PX, PY, eps2, cand, ncand)
        else:
            if tx <= ty:
                ncand = _appended(vert_id, ecol, ngy, nC, PX, PY, eps2, cand, ncand)
                ncand = _appended(vert_id, ecol, ngy + nsp, nC, PX, PY, eps2, cand, ncand)
            else:
                ncand = _appended(vert_id, ngx, erow, nC, PX, PY, eps2, cand, ncand)
                ncand = _appended(vert_id, ngx + nsp, erow, nC, PX, PY, eps2, cand, ncand)

        if leaf_class[nl] == 2:
            # The ray has left the domain; never difference across the exterior.
            return ncand, OK
        if leaf_class[nl] == 1:
            for k in range(bpt_off[nl], bpt_off[nl + 1]):
                pid = bpt_idx[k]
                rx = pts_cx[pid] - PX
                ry = pts_cy[pid] - PY
                if rx * rx + ry * ry <= eps2:
                    cand[ncand] = pid
                    ncand += 1
        li = nl
    return ncand, OK


@njit(cache=True)
def _appended(vert_id, vx, vy, nC, PX, PY, eps2, cand, ncand):
    if vx < 0 or vx > nC or vy < 0 or vy > nC:
        return ncand
    vid = vert_id[vx, vy]
    if vid < 0:
        return ncand
    rx = float(vx - PX)
    ry = float(vy - PY)
    if rx * rx + ry * ry > eps2:
        return ncand
    cand[ncand] = vid
    return ncand + 1


@njit(cache=True)
def _select_and_coeffs(cands, ncand, x0, y0, ct, st, px, py, eps,
                       nbr_out, coef_out):
    """Pick the best candidate per quadrant and evaluate the weights.

    Returns (status, kind, c0, dphi). nbr_out/coef_out are length-4."""
    best_id = np.full(4, -1, dtype=np.int64)
    best_key0 = np.full(4, 1e300)   # sin^2 phi
    best_key1 = np.full(4, 1e300)   # r^2
    bC = np.zeros(4)
    bS = np.zeros(4)
    eps2 = eps * eps * (1.0 + 1e-12)
    for k in range(ncand):
        pid = cands[k]
        dxp = px[pid] - x0
        dyp = py[pid] - y0
        C = dxp * ct + dyp * st
        S = -dxp * st + dyp * ct
        r2 = C * C + S * S
        if r2 <= 0.0 or r2 > eps2:
            continue
        if C > 0.0 and S >= 0.0:
            q = 0
        elif C <= 0.0 and S > 0.0:
            q = 1
        elif C < 0.0 and S <= 0.0:
            q = 2
        elif C >= 0.0 and S < 0.0:
            q = 3
        else:
            continue
        sin2 = S * S / r2
        if (sin2 < best_key0[q]
                or (sin2 == best_key0[q] and r2 < best_key1[q])
                or (sin2 == best_key0[q] and r2 == best_key1[q] and pid < best_id[q])):
            best_key0[q] = sin2
            best_key1[q] = r2
            best_id[q] = pid
            bC[q] = C
            bS[q] = S

    onray1 = best_id[0] >= 0 and best_key0[0] < ONRAY_TOL * ONRAY_TOL
    onray3 = best_id[2] >= 0 and best_key0[2] < ONRAY_TOL * ONRAY_TOL
    if onray1 and onray3:
        rp = bC[0]
        rm = -bC[2]
        nbr_out[0] = best_id[0]
        nbr_out[1] = best_id[2]
        nbr_out[2] = -1
        nbr_out[3] = -1
        coef_out[0] = 2.0 / (rp * (rp + rm))
        coef_out[1] = 2.0 / (rm * (rp + rm))
        coef_out[2] = 0.0
        coef_out[3] = 0.0
        c0 = -2.0 / (rp * rm)
        return OK, KIND_ALIGNED, c0, 0.0

    for q in range(4):
        if best_id[q] < 0:
            return EMPTY_QUADRANT, KIND_FOUR, 0.0, 0.0

    P = bC[2] * bS[1] - bC[1] * bS[2]
    Q = bC[0] * bS[3] - bC[3] * bS[0]
    D = P * (bC[0] ** 2 * bS[3] - bC[3] ** 2 * bS[0]) - Q * (bC[2] ** 2 * bS[1] - bC[1] ** 2 * bS[2])
    rmax = 0.0
    dphi = 0.0
    for q in range(4):
        r = math.sqrt(bC[q] ** 2 + bS[q] ** 2)
        if r > rmax:
            rmax = r
        phi = math.asin(min(1.0, abs(bS[q]) / r))
        if phi > dphi:
            dphi = phi
    if abs(D) <= DEGENERATE_TOL * rmax**5:
        return DEGENERATE, KIND_FOUR, 0.0, 0.0
    a0 = 2.0 * bS[3] * P / D
    a1 = 2.0 * bS[2] * Q / D
    a2 = -2.0 * bS[1] * Q / D
    a3 = -2.0 * bS[0] * P / D
    amax = max(abs(a0), abs(a1), abs(a2), abs(a3))
    if a0 < -1e-10 * amax or a1 < -1e-10 * amax or a2 < -1e-10 * amax or a3 < -1e-10 * amax:
        return DEGENERATE, KIND_FOUR, 0.0, 0.0
    for q in range(4):
        nbr_out[q] = best_id[q]
    coef_out[0] = a0
    coef_out[1] = a1
    coef_out[2] = a2
    coef_out[3] = a3
    c0 = -(a0 + a1 + a2 + a3)
    return OK, KIND_FOUR, c0, dphi


@njit(cache=True)
def _task(i, ct, st, eps_c, lat_x, lat_y, nC, cell,
          grid, leaf_gx0, leaf_gy0, leaf_span, leaf_class,
          vert_id, bpt_off, bpt_idx, pts_cx, pts_cy,
          cand, nbr_out, coef_out):
    PX = lat_x[i]
    PY = lat_y[i]
    ncand, st1 = _march_half(PX, PY, ct, st, eps_c, nC, grid, leaf_gx0, leaf_gy0,
                             leaf_span, leaf_class, vert_id, bpt_off, bpt_idx,
                             pts_cx, pts_cy, cand, 0)
    ncand, st2 = _march_half(PX, PY, -ct, -st, eps_c, nC, grid, leaf_gx0, leaf_gy0,
                             leaf_span, leaf_class, vert_id, bpt_off, bpt_idx,
                             pts_cx, pts_cy, cand, ncand)
    if st1 == EXITED_BOX or st2 == EXITED_BOX:
        return EXITED_BOX, KIND_FOUR, 0.0, 0.0
    x0 = float(PX)
    y0 = float(PY)
    status, kind, c0, dphi = _select_and_coeffs(
        cand, ncand, x0, y0, ct, st, pts_cx, pts_cy, eps_c, nbr_out, coef_out
    )
    # Weights were computed in cell units; u_thetatheta scales by 1/cell^2.
    return status, kind, c0 / (cell * cell), dphi


@njit(cache=True, parallel=True)
def _build_kernel(lat_x, lat_y, cos_t, sin_t, eps_c, nC, cell, max_cand,
                  grid, leaf_gx0, leaf_gy0, leaf_span, leaf_class,
                  vert_id, bpt_off, bpt_idx, pts_cx, pts_cy,
                  nbr, coef, ccoef, kind, dphi, status):
    n_int = lat_x.shape[0]
    n_dirs = cos_t.shape[0]
    for i in prange(n_int):
        cand = np.empty(max_cand, dtype=np.int64)
        nbr_out = np.empty(4, dtype=np.int64)
        coef_out = np.empty(4)
        for j in range(n_dirs):
            stt, kd, c0, dp = _task(i, cos_t[j], sin_t[j], eps_c, lat_x, lat_y, nC, cell,
                                    grid, leaf_gx0, leaf_gy0, leaf_span, leaf_class,
                                    vert_id, bpt_off, bpt_idx, pts_cx, pts_cy,
                                    cand, nbr_out, coef_out)
            status[i, j] = stt
            kind[i, j] = kd
            if stt == OK:
                for q in range(4):
                    nbr[i, j, q] = nbr_out[q] if nbr_out[q] >= 0 else i
                    coef[i, j, q] = coef_out[q] / (cell * cell)
                ccoef[i, j] = c0
                dphi[i, j] = dp


@njit(cache=True)
def _brute_ball(i, pts_x, pts_y, eps, members):
    """All cloud points within eps of interior point i (the original method)."""
    x0 = pts_x[i]
    y0 = pts_y[i]
    eps2 = eps * eps * (1.0 + 1e-12)
    n = 0
    for p in range(pts_x.shape[0]):
        if p == i:
            continue
        dx = pts_x[p] - x0
        dy = pts_y[p] - y0
        if dx * dx + dy * dy <= eps2:
            members[n] = p
            n += 1
    return n


@njit(cache=True)
def _brute_kernel(n_int, pts_x, pts_y, cos_t, sin_t, eps,
                  nbr, coef, ccoef, kind, dphi, status):
    n_dirs = cos_t.shape[0]
    members = np.empty(pts_x.shape[0], dtype=np.int64)
    nbr_out = np.empty(4, dtype=np.int64)
    coef_out = np.empty(4)
    for i in range(n_int):
        nm = _brute_ball(i, pts_x, pts_y, eps, members)
        for j in range(n_dirs):
            stt, kd, c0, dp = _select_and_coeffs(
                members, nm, pts_x[i], pts_y[i], cos_t[j], sin_t[j], pts_x, pts_y,
                eps, nbr_out, coef_out
            )
            status[i, j] = stt
            kind[i, j] = kd
            if stt == OK:
                for q in range(4):
                    nbr[i, j, q] = nbr_out[q] if nbr_out[q] >= 0 else i
                    coef[i, j, q] = coef_out[q]
                ccoef[i, j] = c0
                dphi[i, j] = dp


# ---------------------------------------------------------------------------
# Table construction
# ---------------------------------------------------------------------------


@dataclass
class StencilTable:
    """Per (interior point, direction) monotone stencil.

    Aligned rows keep the two on-ray neighbours in slots 0-1 with zero-weight
    self-references in slots 2-3, so gather-based evaluation never branches.
    """

    thetas: np.ndarray
    nbr: np.ndarray        # (n_int, n_dirs, 4) int32 global point ids
    coef: np.ndarray       # (n_int, n_dirs, 4)
    center_coef: np.ndarray  # (n_int, n_dirs)
    kind: np.ndarray       # (n_int, n_dirs) int8
    dphi: np.ndarray       # (n_int, n_dirs)
    eps_used: np.ndarray   # (n_int, n_dirs)
    params: SearchParams

    @property
    def n_interior(self):
        return self.nbr.shape[0]

    @property
    def n_dirs(self):
        return self.nbr.shape[1]

    @property
    def dphi_max(self):
        return float(self.dphi.max()) if self.dphi.size else 0.0

    def d2_all(self, u):
        """u_thetatheta estimates for every (interior point, direction)."""
        u = np.asarray(u, dtype=float)
        q = np.einsum("ijk,ijk->ij", self.coef, u[self.nbr])
        q += self.center_coef * u[: self.n_interior, None]
        return q

    def d2(self, i, j, u):
        u = np.asarray(u, dtype=float)
        return float(self.coef[i, j] @ u[self.nbr[i, j]] + self.center_coef[i, j] * u[i])


def _flat_mesh_data(cloud: PointCloud):
    f = cloud.tree.finalize()
    box = cloud.tree.box
    cell = f["cell"]
    pts_cx = (cloud.points[:, 0] - box.x0) / cell
    pts_cy = (cloud.points[:, 1] - box.y0) / cell
    return {
        "nC": 1 << f["D"],
        "cell": cell,
        "grid": f["grid"],
        "gx0": f["gx0"].astype(np.int64),
        "gy0": f["gy0"].astype(np.int64),
        "span": f["span"].astype(np.int64),
        "cls": f["cls"],
        "vert_id": cloud.vert_id,
        "bpt_off": cloud.leaf_bpt_off,
        "bpt_idx": cloud.leaf_bpt_idx.astype(np.int64),
        "pts_cx": pts_cx,
        "pts_cy": pts_cy,
        "lat_x": cloud.lattice[:, 0].astype(np.int64),
        "lat_y": cloud.lattice[:, 1].astype(np.int64),
    }


def _max_candidates(cloud: PointCloud, data):
    per_leaf = np.diff(cloud.leaf_bpt_off)
    mb = int(per_leaf.max()) if per_leaf.size else 0
    return 12 * data["nC"] + 2 * mb + 64


def ray_march_candidates(cloud: PointCloud, i: int, theta: float, eps: float):
    """Candidate neighbour ids plus rotated coordinates (C, S) for point i.

    Walks both senses of the ray; raises InternalError if a walk exits the
    root box (impossible for a domain enclosed by boundary leaves)."""
    data = _flat_mesh_data(cloud)
    cand = np.empty(_max_candidates(cloud, data), dtype=np.int64)
    ct, st = math.cos(theta), math.sin(theta)
    eps_c = eps / data["cell"]
    args = (data["nC"], data["grid"], data["gx0"], data["gy0"], data["span"], data["cls"],
            data["vert_id"], data["bpt_off"], data["bpt_idx"], data["pts_cx"], data["pts_cy"])
    PX, PY = int(data["lat_x"][i]), int(data["lat_y"][i])
    n1, st1 = _march_half(PX, PY, ct, st, eps_c, *args, cand, 0)
    n2, st2 = _march_half(PX, PY, -ct, -st, eps_c, *args, cand, n1)
    if st1 == EXITED_BOX or st2 == EXITED_BOX:
        raise InternalError("stencil search ray exited the root box")
    ids = np.unique(cand[:n2])
    d = cloud.points[ids] - cloud.points[i]
    C = d[:, 0] * ct + d[:, 1] * st
    S = -d[:, 0] * st + d[:, 1] * ct
    keep = (C**2 + S**2) <= eps**2 * (1 + 1e-12)
    return ids[keep], C[keep], S[keep]


def quadrant_of(C, S):
    """Quadrant index 0..3 with half-open angular boundaries (on-ray -> 0/2)."""
    if C > 0 and S >= 0:
        return 0
    if C <= 0 and S > 0:
        return 1
    if C < 0 and S <= 0:
        return 2
    return 3


def select_neighbors(ids, C, S):
    """argmin of sin^2 phi per quadrant; ties by smaller r then smaller id.

    Returns (ids4, C4, S4, aligned): when the forward and backward on-ray
    candidates both exist, the aligned two-point pair is returned instead and
    ids4[2:] are -1."""
    best = [None] * 4
    for pid, c, s in sorted(zip(ids.tolist(), C.tolist(), S.tolist())):
        r2 = c * c + s * s
        if r2 <= 0:
            continue
        q = quadrant_of(c, s)
        key = (s * s / r2, r2, pid)
        if best[q] is None or key < best[q][0]:
            best[q] = (key, pid, c, s)
    on0 = best[0] is not None and best[0][0][0] < ONRAY_TOL**2
    on2 = best[2] is not None and best[2][0][0] < ONRAY_TOL**2
    if on0 and on2:
        ids4 = np.array([best[0][1], best[2][1], -1, -1])
        C4 = np.array([best[0][2], best[2][2], 0.0, 0.0])
        S4 = np.zeros(4)
        return ids4, C4, S4, True
    if any(b is None for b in best):
        missing = [q + 1 for q in range(4) if best[q] is None]
        raise InsufficientResolution(f"no candidate in quadrant(s) {missing}")
    ids4 = np.array([b[1] for b in best])
    C4 = np.array([b[2] for b in best])
    S4 = np.array([b[3] for b in best])
    return ids4, C4, S4, False


def d2_apply(ids4, C4, S4, aligned, u, u0):
    """Reference evaluation of the directional second difference."""
    if aligned:
        wp, wm, c0 = aligned_weights(C4[0], -C4[1])
        return wp * u[0] + wm * u[1] + c0 * u0
    a = coefficients(C4, S4)
    return float(np.dot(a, u) - a.sum() * u0)


def build_table(cloud: PointCloud, params: SearchParams, retries: int = 1) -> StencilTable:
    """Stencils for every interior point and every direction in the set.

    Failing (point, direction) tasks are retried with the radius doubled
    (bounded); anything still failing raises InsufficientResolution with
    per-task diagnostics."""
    data = _flat_mesh_data(cloud)
    n_int = cloud.n_interior
    thetas = params.thetas
    n_dirs = params.n_dirs
    cos_t = np.cos(thetas)
    sin_t = np.sin(thetas)
    # Exact axis directions keep lattice alignment detectable.
    cos_t[np.isclose(thetas, 0.0)] = 1.0
    sin_t[np.isclose(thetas, 0.0)] = 0.0
    half = np.isclose(thetas, math.pi / 2)
    cos_t[half] = 0.0
    sin_t[half] = 1.0

    nbr = np.zeros((n_int, n_dirs, 4), dtype=np.int64)
    coef = np.zeros((n_int, n_dirs, 4))
    ccoef = np.zeros((n_int, n_dirs))
    kind = np.zeros((n_int, n_dirs), dtype=np.int8)
    dphi = np.zeros((n_int, n_dirs))
    status = np.zeros((n_int, n_dirs), dtype=np.int8)
    eps_used = np.full((n_int, n_dirs), params.eps)

    max_cand = _max_candidates(cloud, data)
    _build_kernel(data["lat_x"], data["lat_y"], cos_t, sin_t, params.eps / data["cell"],
                  data["nC"], data["cell"], max_cand,
                  data["grid"], data["gx0"], data["gy0"], data["span"], data["cls"],
                  data["vert_id"], data["bpt_off"], data["bpt_idx"],
                  data["pts_cx"], data["pts_cy"],
                  nbr, coef, ccoef, kind, dphi, status)

    if np.any(status == EXITED_BOX):
        raise InternalError("stencil search ray exited the root box")

    bad = np.argwhere(status != OK)
    eps_try = params.eps
    cand = np.empty(max_cand + 8 * data["nC"], dtype=np.int64)
    nbr_out = np.empty(4, dtype=np.int64)
    coef_out = np.empty(4)
    for _ in range(retries):
        if bad.size == 0:
            break
        eps_try *= 2.0
        still = []
        for i, j in bad:
            stt, kd, c0, dp = _task(int(i), cos_t[j], sin_t[j], eps_try / data["cell"],
                                    data["lat_x"], data["lat_y"], data["nC"], data["cell"],
                                    data["grid"], data["gx0"], data["gy0"], data["span"],
                                    data["cls"], data["vert_id"], data["bpt_off"],
                                    data["bpt_idx"], data["pts_cx"], data["pts_cy"],
                                    cand, nbr_out, coef_out)
            if stt == OK:
                status[i, j] = OK
                kind[i, j] = kd
                for q in range(4):
                    nbr[i, j, q] = nbr_out[q] if nbr_out[q] >= 0 else i
                    coef[i, j, q] = coef_out[q] / (data["cell"] ** 2)
                ccoef[i, j] = c0
                dphi[i, j] = dp
                eps_used[i, j] = eps_try
            else:
                still.append((int(i), int(j), int(stt)))
        bad = np.array([(i, j) for i, j, _ in still]) if still else np.empty((0, 2), dtype=int)

    if bad.size:
        failures = [
            (int(i), float(thetas[j]), "empty quadrant" if status[i, j] == EMPTY_QUADRANT else "degenerate")
            for i, j in bad[:50]
        ]
        raise InsufficientResolution(
            f"{len(bad)} stencil task(s) unresolved after widening eps to {eps_try:.3g}; "
            f"first failures (point, theta, reason): {failures[:5]}",
            failures=failures,
        )

    return StencilTable(thetas=thetas, nbr=nbr, coef=coef, center_coef=ccoef,
                        kind=kind, dphi=dphi, eps_used=eps_used, params=params)


def build_table_brute(cloud: PointCloud, params: SearchParams) -> StencilTable:
    """Brute-force table: per point, inspect all cloud points within eps."""
    n_int = cloud.n_interior
    thetas = params.thetas
    n_dirs = params.n_dirs
    cos_t = np.cos(thetas)
    sin_t = np.sin(thetas)
    cos_t[np.isclose(thetas, 0.0)] = 1.0
    sin_t[np.isclose(thetas, 0.0)] = 0.0
    half = np.isclose(thetas, math.pi / 2)
    cos_t[half] = 0.0
    sin_t[half] = 1.0
    nbr = np.zeros((n_int, n_dirs, 4), dtype=np.int64)
    coef = np.zeros((n_int, n_dirs, 4))
    ccoef = np.zeros((n_int, n_dirs))
    kind = np.zeros((n_int, n_dirs), dtype=np.int8)
    dphi = np.zeros((n_int, n_dirs))
    status = np.zeros((n_int, n_dirs), dtype=np.int8)
    _brute_kernel(n_int, cloud.points[:, 0].copy(), cloud.points[:, 1].copy(),
                  cos_t, sin_t, params.eps, nbr, coef, ccoef, kind, dphi, status)
    if np.any(status != OK):
        bad = np.argwhere(status != OK)
        failures = [(int(i), float(thetas[j]), int(status[i, j])) for i, j in bad[:50]]
        raise InsufficientResolution(
            f"brute-force selection failed for {len(bad)} task(s)", failures=failures
        )
    return StencilTable(thetas=thetas, nbr=nbr, coef=coef, center_coef=ccoef,
                        kind=kind, dphi=dphi,
                        eps_used=np.full((n_int, n_dirs), params.eps), params=params)


def dump(table: StencilTable) -> str:
    """Debug dump: `S i theta j1 j2 j3 j4 a1 a2 a3 a4` (not a stable format)."""
    lines = []
    for i in range(table.n_interior):
        for j, th in enumerate(table.thetas):
            n = table.nbr[i, j]
            a = table.coef[i, j]
            lines.append(
                f"S {i} {th:.12g} {n[0]} {n[1]} {n[2]} {n[3]} "
                f"{a[0]!r} {a[1]!r} {a[2]!r} {a[3]!r}"
            )
    return "\n".join(lines) + "\n"
