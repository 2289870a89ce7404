"""Implicit planar domains: membership tests, boundary intersections, arc tracing.

A domain is the open set {phi < 0} of a continuous scalar field, bounded and
contained in an axis-aligned square bounding box. All boundary geometry is
recovered numerically from sign changes of phi: edge crossings by bisection,
boundary arcs inside a square by a predictor-corrector march along {phi = 0},
and point placement by equal-arc-length sampling of the traced polyline.
"""

from __future__ import annotations

import ast
import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AssumptionViolated, ConfigurationError, EvaluationError

# Probes per square edge, both for classification and for detecting violations
# of the "each leaf edge crosses the boundary at most once" assumption.
N_TRACE = 64

# Relative tolerances (scaled by box size / square size at the call site).
TOL_B_REL = 1e-12
TOL_ROOT_REL = 1e-12


class Membership(enum.Enum):
    INTERIOR = -1
    BOUNDARY = 0
    EXTERIOR = 1


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned square, southwest corner (x0, y0) and side length."""

    x0: float
    y0: float
    size: float

    def center(self):
        return (self.x0 + 0.5 * self.size, self.y0 + 0.5 * self.size)


@dataclass(frozen=True)
class ImplicitDomain:
    """Level-set description of a bounded planar domain.

    phi is negative inside, zero on the boundary, positive outside, and must
    be evaluable (vectorised over numpy arrays) anywhere in the bounding box.
    lipschitz_hint bounds |grad phi| and converts position tolerances into
    level-value tolerances.
    """

    phi: Callable[[np.ndarray, np.ndarray], np.ndarray]
    box: BoundingBox
    lipschitz_hint: float = 1.0
    name: str = "custom"

    def phi_at(self, x, y):
        val = self.phi(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        val = np.asarray(val, dtype=float)
        if not np.all(np.isfinite(val)):
            raise EvaluationError(f"phi returned a non-finite value for domain '{self.name}'")
        return val

    @property
    def tol_b(self):
        return TOL_B_REL * self.box.size


def contains(domain: ImplicitDomain, p, tol_b=None) -> Membership:
    """Classify a point against the domain's level set."""
    x, y = float(p[0]), float(p[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise EvaluationError("non-finite point")
    tol = domain.tol_b if tol_b is None else tol_b
    v = float(domain.phi_at(x, y))
    if v < -tol:
        return Membership.INTERIOR
    if v <= tol:
        return Membership.BOUNDARY
    return Membership.EXTERIOR


def _segment_signs(domain, a, b, n=N_TRACE, zero_tol=0.0):
    t = np.linspace(0.0, 1.0, n + 1)
    xs = a[0] + t * (b[0] - a[0])
    ys = a[1] + t * (b[1] - a[1])
    v = domain.phi_at(xs, ys)
    s = np.sign(v)
    if zero_tol > 0.0:
        s[np.abs(v) <= zero_tol] = 0.0
    return s


def _count_sign_changes(signs):
    nz = signs[signs != 0.0]
    if nz.size < 2:
        return 0
    return int(np.sum(nz[1:] != nz[:-1]))


def edge_boundary_intersection(domain: ImplicitDomain, a, b, tol_root=None):
    """Locate the crossing of segment [a, b] with {phi = 0}, or None.

    The segment is assumed to be (part of) a leaf-square edge; midpoint probing
    verifies the "at most one crossing" mesh assumption and raises
    AssumptionViolated when it fails. The root is found by bisection to an
    absolute position tolerance.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    seg_len = float(np.hypot(*(b - a)))
    if tol_root is None:
        tol_root = TOL_ROOT_REL * max(seg_len, domain.box.size * 1e-6)

    signs = _segment_signs(domain, a, b, zero_tol=domain.tol_b)
    if _count_sign_changes(signs) > 1:
        raise AssumptionViolated(
            "edge crosses the boundary more than once; mesh is under-refined near the boundary"
        )

    fa = float(domain.phi_at(*a))
    fb = float(domain.phi_at(*b))
    tol_b = domain.tol_b
    if abs(fa) <= tol_b:
        return a.copy()
    if abs(fb) <= tol_b:
        return b.copy()
    if (fa < 0.0) == (fb < 0.0):
        # No endpoint sign change; an interior zero-touch without crossing is
        # treated as no intersection.
        return None

    lo, hi = 0.0, 1.0
    flo = fa
    # Bisection: ~52 steps drive the bracket below any practical tol_root.
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        pm = a + mid * (b - a)
        fm = float(domain.phi_at(*pm))
        if fm == 0.0:
            return pm
        if (fm < 0.0) == (flo < 0.0):
            lo = mid
            flo = fm
        else:
            hi = mid
        if (hi - lo) * seg_len <= tol_root:
            break
    return a + 0.5 * (lo + hi) * (b - a)


def _phi_and_grad(domain, p, h):
    """phi and a central-difference gradient at p, in one vectorised call."""
    xs = np.array([p[0], p[0] + h, p[0] - h, p[0], p[0]])
    ys = np.array([p[1], p[1], p[1], p[1] + h, p[1] - h])
    v = domain.phi_at(xs, ys)
    return float(v[0]), np.array([(v[1] - v[2]) / (2 * h), (v[3] - v[4]) / (2 * h)])


def _grad(domain, p, h):
    return _phi_and_grad(domain, p, h)[1]


def _project_bisect(domain, p, scale, tol_root, max_expand=8):
    f0 = float(domain.phi_at(*p))
    if f0 == 0.0:
        return p
    g = _grad(domain, p, 1e-6 * scale)
    gn = np.hypot(*g)
    if gn == 0.0:
        raise EvaluationError("zero gradient while projecting onto the boundary")
    n = g / gn
    # phi increases along +n; a root lies on the -f0 side.
    step = scale * 0.25
    for _ in range(max_expand):
        q = p - n * step * np.sign(f0)
        fq = float(domain.phi_at(*q))
        if (fq < 0.0) != (f0 < 0.0) or fq == 0.0:
            lo, hi = p.copy(), q
            flo = f0
            for _ in range(64):
                mid = 0.5 * (lo + hi)
                fm = float(domain.phi_at(*mid))
                if fm == 0.0:
                    return mid
                if (fm < 0.0) == (flo < 0.0):
                    lo = mid
                    flo = fm
                else:
                    hi = mid
                if np.hypot(*(hi - lo)) <= tol_root:
                    break
            return 0.5 * (lo + hi)
        step *= 2.0
    raise EvaluationError("failed to bracket the boundary while projecting a point")


def project_to_boundary(domain: ImplicitDomain, p, scale, tol_root=None):
    """Move p onto {phi = 0} along the gradient direction.

    Newton steps with a bracketed-bisection fallback (kinked boundaries).
    scale sets the finite-difference step and the fallback bracket size.
    """
    p = np.asarray(p, dtype=float).copy()
    if tol_root is None:
        tol_root = TOL_ROOT_REL * scale
    h = 1e-6 * scale
    for _ in range(12):
        f, g = _phi_and_grad(domain, p, h)
        gn2 = g[0] * g[0] + g[1] * g[1]
        if gn2 == 0.0:
            break
        if abs(f) <= tol_root * math.sqrt(gn2):
            return p
        step = f / gn2
        move = np.hypot(step * g[0], step * g[1])
        if move > scale:
            break  # diverging; let bisection handle it
        p -= step * g
    return _project_bisect(domain, p, scale, tol_root)


def _square_edges(x0, y0, size):
    a = np.array([x0, y0])
    b = np.array([x0 + size, y0])
    c = np.array([x0 + size, y0 + size])
    d = np.array([x0, y0 + size])
    return [(a, b), (b, c), (c, d), (d, a)]


def square_boundary_crossings(domain: ImplicitDomain, x0, y0, size):
    """All distinct points where the square's edges meet {phi = 0}.

    Corner zeros count once; duplicates within 10*tol_root are merged.
    """
    tol_root = TOL_ROOT_REL * size
    pts = []
    for a, b in _square_edges(x0, y0, size):
        p = edge_boundary_intersection(domain, a, b, tol_root=tol_root)
        if p is not None:
            pts.append(p)
    out = []
    for p in pts:
        if all(np.hypot(*(p - q)) > 10 * tol_root for q in out):
            out.append(p)
    return out


def boundary_arc(domain: ImplicitDomain, square, n_trace=N_TRACE):
    """Trace the boundary curve inside a boundary leaf square.

    square is (x0, y0, size). Returns (polyline, length): an ordered (M, 2)
    array running from one edge crossing to the other, with step <= size/n_trace.
    """
    x0, y0, size = square
    crossings = square_boundary_crossings(domain, x0, y0, size)
    if len(crossings) != 2:
        raise AssumptionViolated(
            f"expected 2 boundary crossings on the square at ({x0:.6g},{y0:.6g}), "
            f"found {len(crossings)}; mesh is under-refined near the boundary"
        )
    start, goal = crossings
    step = size / n_trace
    tol_root = TOL_ROOT_REL * size

    pts = [np.asarray(start, dtype=float)]
    prev_t = None
    cx, cy = x0 + 0.5 * size, y0 + 0.5 * size
    for it in range(8 * n_trace):
        p = pts[-1]
        if np.hypot(*(goal - p)) <= 1.5 * step:
            pts.append(np.asarray(goal, dtype=float))
            break
        g = _grad(domain, p, 1e-6 * size)
        gn = np.hypot(*g)
        if gn == 0.0:
            raise AssumptionViolated("zero gradient while tracing the boundary arc")
        t = np.array([-g[1], g[0]]) / gn
        if prev_t is None:
            # Head toward the exit crossing (corner-clipping arcs can run
            # almost perpendicular to the square-center direction).
            d0 = np.dot(t, goal - p)
            if abs(d0) > 1e-14:
                t = t if d0 > 0 else -t
            elif np.dot(t, np.array([cx, cy]) - p) < 0:
                t = -t
        else:
            d = np.dot(t, prev_t)
            if abs(d) < 0.1:
                # Sharp corner: keep moving away from where we came from.
                if np.dot(t, p - pts[-2]) < 0:
                    t = -t
            elif d < 0:
                t = -t
        q = p + step * t
        q = project_to_boundary(domain, q, step, tol_root=tol_root)
        if (
            q[0] < x0 - 2 * step
            or q[0] > x0 + size + 2 * step
            or q[1] < y0 - 2 * step
            or q[1] > y0 + size + 2 * step
        ):
            raise AssumptionViolated("boundary trace left the square")
        pts.append(q)
        prev_t = t
    else:
        raise AssumptionViolated("boundary trace failed to reach the exit crossing")

    poly = np.array(pts)
    seg = np.hypot(np.diff(poly[:, 0]), np.diff(poly[:, 1]))
    length = float(seg.sum())
    if length <= 0.0:
        raise AssumptionViolated("degenerate boundary arc")
    return poly, length


def place_boundary_points(domain: ImplicitDomain, polyline, count, tol_root=None):
    """count points on {phi = 0}, equally spaced in arc length along the polyline.

    Cell-midpoint convention: arc offsets (k + 1/2)/count, so the arc's end
    crossings (already in the cloud) are never duplicated.
    """
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    poly = np.asarray(polyline, dtype=float)
    seg = np.hypot(np.diff(poly[:, 0]), np.diff(poly[:, 1]))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if tol_root is None:
        tol_root = TOL_ROOT_REL * max(total, 1e-30)
    targets = total * (np.arange(count) + 0.5) / count
    out = np.empty((count, 2))
    j = 0
    for k, s in enumerate(targets):
        while j < len(seg) - 1 and cum[j + 1] < s:
            j += 1
        w = 0.0 if seg[j] == 0.0 else (s - cum[j]) / seg[j]
        p = poly[j] + w * (poly[j + 1] - poly[j])
        out[k] = project_to_boundary(domain, p, max(total / count, tol_root), tol_root=tol_root)
    return out


# ---------------------------------------------------------------------------
# Built-in domains and the custom expression grammar
# ---------------------------------------------------------------------------

_UNIT_BOX = BoundingBox(-1.0, -1.0, 2.0)

_ROT_PHI = math.pi / 6


def _rotated_ellipse_phi(x, y):
    c, s = math.cos(_ROT_PHI), math.sin(_ROT_PHI)
    xi = x * c + y * s
    eta = -x * s + y * c
    return xi**2 + 4.0 * eta**2 - 1.0


_BUILTIN_DOMAINS = {
    "circle": (lambda x, y: x**2 + y**2 - 1.0, _UNIT_BOX, 3.0),
    "ellipse": (lambda x, y: x**2 + 2.0 * y**2 - 1.0, _UNIT_BOX, 5.0),
    "diamond": (lambda x, y: np.abs(x) + np.abs(y) - 1.0, _UNIT_BOX, 2.0),
    "diamond-stretched": (lambda x, y: np.abs(x) + np.abs(2.0 * y) - 1.0, _UNIT_BOX, 3.0),
    "ellipse-rotated": (_rotated_ellipse_phi, _UNIT_BOX, 5.0),
}


def builtin_domain(name: str) -> ImplicitDomain:
    try:
        phi, box, lip = _BUILTIN_DOMAINS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown domain '{name}'; choose from {sorted(_BUILTIN_DOMAINS)}"
        ) from None
    return ImplicitDomain(phi=phi, box=box, lipschitz_hint=lip, name=name)


def domain_names():
    return sorted(_BUILTIN_DOMAINS)


_ALLOWED_CALLS = {"abs": np.abs, "sqrt": np.sqrt}


def _compile_expr(tree):
    if isinstance(tree, ast.Expression):
        return _compile_expr(tree.body)
    if isinstance(tree, ast.BinOp) and isinstance(tree.op, (ast.Add, ast.Sub, ast.Mult, ast.Pow)):
        lf = _compile_expr(tree.left)
        rf = _compile_expr(tree.right)
        op = {
            ast.Add: np.add,
            ast.Sub: np.subtract,
            ast.Mult: np.multiply,
            ast.Pow: np.power,
        }[type(tree.op)]
        return lambda x, y: op(lf(x, y), rf(x, y))
    if isinstance(tree, ast.UnaryOp) and isinstance(tree.op, (ast.USub, ast.UAdd)):
        f = _compile_expr(tree.operand)
        if isinstance(tree.op, ast.USub):
            return lambda x, y: -f(x, y)
        return f
    if isinstance(tree, ast.Call) and isinstance(tree.func, ast.Name):
        fn = _ALLOWED_CALLS.get(tree.func.id)
        if fn is None or len(tree.args) != 1 or tree.keywords:
            raise ConfigurationError(f"unsupported call '{ast.dump(tree)}' in expression")
        arg = _compile_expr(tree.args[0])
        return lambda x, y: fn(arg(x, y))
    if isinstance(tree, ast.Name):
        if tree.id == "x":
            return lambda x, y: x
        if tree.id == "y":
            return lambda x, y: y
        raise ConfigurationError(f"unknown name '{tree.id}' in expression (only x, y allowed)")
    if isinstance(tree, ast.Constant) and isinstance(tree.value, (int, float)):
        v = float(tree.value)
        return lambda x, y: v
    raise ConfigurationError(f"unsupported syntax in expression: {ast.dump(tree)}")


def parse_field(expr: str):
    """Compile a scalar field from the small expression grammar.

    Supported: +, -, *, powers (** or ^), abs(...), sqrt(...), numeric
    constants, and the variables x, y. Evaluates vectorised over numpy arrays.
    """
    src = expr.replace("^", "**")
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as e:
        raise ConfigurationError(f"cannot parse expression '{expr}': {e}") from None
    f = _compile_expr(tree)
    return lambda x, y: np.asarray(f(np.asarray(x, dtype=float), np.asarray(y, dtype=float)), dtype=float)


def domain_from_expression(expr: str, box: BoundingBox = _UNIT_BOX, lipschitz_hint=None) -> ImplicitDomain:
    phi = parse_field(expr)
    if lipschitz_hint is None:
        # Crude bound from sampled finite differences over the box.
        n = 48
        xs = np.linspace(box.x0, box.x0 + box.size, n)
        ys = np.linspace(box.y0, box.y0 + box.size, n)
        X, Y = np.meshgrid(xs, ys)
        h = 1e-6 * box.size
        gx = (phi(X + h, Y) - phi(X - h, Y)) / (2 * h)
        gy = (phi(X, Y + h) - phi(X, Y - h)) / (2 * h)
        lipschitz_hint = float(np.nanmax(np.hypot(gx, gy))) + 1.0
    return ImplicitDomain(phi=phi, box=box, lipschitz_hint=lipschitz_hint, name=f"expr:{expr}")
