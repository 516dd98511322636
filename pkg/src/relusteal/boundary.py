"""Hard-label boundary geometry.

Locates decision-boundary points by binary search, walks along the boundary
until it bends (an activation boundary crossing), estimates boundary normals
coordinate-wise, and assembles intersection spaces: the point s plus an
orthonormal basis N of the (d0-2)-dimensional subspace orthogonal to both
bend normals. Everything here sees the target through OracleSession only;
in evaluation mode each space is additionally tagged with the ground-truth
(layer, neuron) whose boundary was hit, for audits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import nullspace
from .oracle import OracleSession, PreconditionError


class TrackingError(RuntimeError):
    """The boundary was lost while walking or re-projecting."""


class UnreachableBoundaryError(RuntimeError):
    """No boundary crossing was found within the probe range."""


class DistributionError(RuntimeError):
    """The input distribution failed to produce differing labels."""


@dataclass(frozen=True)
class BoundaryPoint:
    """A decision-boundary point with its straddling bracket."""

    x: np.ndarray
    x_lo: np.ndarray  # keeps the label of the original first endpoint
    x_hi: np.ndarray
    width: float

    @property
    def crossing_dir(self) -> np.ndarray:
        d = self.x_hi - self.x_lo
        n = np.linalg.norm(d)
        return d / n if n > 0 else d


@dataclass(frozen=True)
class IntersectionSpace:
    """Point on decision boundary *and* one activation boundary, plus frame.

    N's columns are an orthonormal basis of span{v_left, v_right}^perp;
    ground_truth is (layer, neuron) in evaluation mode, else None.
    """

    s: np.ndarray
    N: np.ndarray
    v_left: np.ndarray
    v_right: np.ndarray
    x_left: np.ndarray
    x_right: np.ndarray
    ground_truth: tuple[int, int] | None = None

    def bend_angle(self) -> float:
        c = abs(float(self.v_left @ self.v_right))
        return float(np.arccos(min(c, 1.0)))


@dataclass(frozen=True)
class BoundaryConfig:
    """Tunable probe scales; defaults are relative to unit-scale inputs."""

    boundary_tol: float = 1e-10       # bracket width for precision boundary points
    walk_bracket: float = 1e-7        # slab width used while walking (tangent-error headroom)
    alpha_tol: float = 1e-7           # walk leave-point resolution
    walk_step: float = 1e-3           # initial walk step (doubles on straight runs)
    walk_max_dist: float = 64.0       # give up distance for one walk
    tangent_rho: float = 1e-2         # displacement used to build a tangent
    probe_eps: float = 1e-6           # normal-estimation offset, relative to 1+|x|
    probe_range_mult: float = 1e3     # per-coordinate search bound, times eps
    backoff: float = 1e-3             # distance from the bend for left/right points
    min_bend_angle: float = 1e-6      # below this the "bend" is noise, not real
    max_sample_attempts: int = 200
    input_scale: float = 1.0
    max_walk_retries: int = 8


def find_boundary_point(
    session: OracleSession, x0, x1, tol: float, max_iter: int = 200
) -> BoundaryPoint:
    """Binary search between differently-labeled x0, x1 (paper's Step 1)."""
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    lo, hi = session.bisect(x0, x1, tol, max_iter=max_iter)
    width = float(np.linalg.norm(hi - lo))
    return BoundaryPoint(x=0.5 * (lo + hi), x_lo=lo, x_hi=hi, width=width)


def refine_bracket(session: OracleSession, a, b, tol: float) -> BoundaryPoint:
    """Tighten an existing straddling bracket down to `tol`."""
    return find_boundary_point(session, a, b, tol)


def estimate_normal(
    session: OracleSession,
    b: BoundaryPoint,
    probe_eps: float = 1e-6,
    range_mult: float = 1e3,
    displace_dir: np.ndarray | None = None,
    _orient_labels: tuple[int, int] | None = None,
    _retries: int = 2,
) -> np.ndarray:
    """Unit normal of the locally-linear decision boundary at b.

    Probes per coordinate: from a point x' displaced off the boundary, the
    crossing offsets alpha_i along each e_i satisfy v propto (1/alpha_1, ...,
    1/alpha_d0). Coordinates that never re-cross within the search range get
    component 0. The sign convention: stepping +v from the boundary lands on
    the x_hi-side label.

    The displacement direction needs a healthy component along the (unknown)
    normal; when the first estimate shows the chosen direction was nearly
    tangent, the probe re-runs displaced along that estimate.
    """
    d0 = b.x.shape[0]
    scale = probe_eps * (1.0 + float(np.linalg.norm(b.x)))
    if b.width > 0.5 * scale:
        raise PreconditionError("bracket too wide for the requested probe offset")
    disp = b.crossing_dir if displace_dir is None else np.asarray(displace_dir, dtype=float)
    xp = b.x + scale * disp  # definite side, offset ~ scale from boundary
    ref = session.query(xp)
    inv_alpha = np.zeros(d0)
    t0 = scale * 1e-4
    tmax = scale * range_mult
    found_any = False
    for i in range(d0):
        e = np.zeros(d0)
        e[i] = 1.0
        t_lo, t_hi, found = session.first_flip(xp, e, ref, t0, tmax)
        sign = 1.0
        if not found:
            t_lo, t_hi, found = session.first_flip(xp, -e, ref, t0, tmax)
            sign = -1.0
        if not found:
            continue  # unreachable coordinate: component 0
        lo, hi = session.bisect(xp + sign * t_lo * e, xp + sign * t_hi * e, 0.0, max_iter=60)
        alpha = float((lo[i] + hi[i]) / 2.0 - xp[i])  # signed crossing offset
        inv_alpha[i] = 1.0 / alpha
        found_any = True
    if not found_any:
        raise UnreachableBoundaryError("no coordinate re-crossed the boundary in range")
    v = inv_alpha / np.linalg.norm(inv_alpha)
    quality = abs(float(v @ disp) / max(np.linalg.norm(disp), 1e-300))
    if quality < max(0.05, 0.5 / np.sqrt(d0)) and _retries > 0:
        # nearly tangent displacement: redo along the current estimate
        return estimate_normal(session, b, probe_eps, range_mult, displace_dir=v,
                               _orient_labels=_orient_labels, _retries=_retries - 1)
    # orient: +v side carries the x_hi label
    if _orient_labels is not None:
        l_lo, l_hi = _orient_labels
    else:
        l_lo, l_hi = session.query(b.x_lo), session.query(b.x_hi)
    side = session.query(b.x + scale * v)
    if side == l_hi:
        return v
    if side == l_lo:
        return -v
    raise TrackingError("normal orientation probe hit a third label")


def fit_normal(
    session: OracleSession,
    b: BoundaryPoint,
    radius: float,
    rng: np.random.Generator,
    n_points: int | None = None,
    _orient_labels: tuple[int, int] | None = None,
) -> np.ndarray:
    """Boundary normal by hyperplane fit through re-projected nearby points.

    Samples ~d0+3 boundary points within `radius` of b and takes the least
    singular direction of the centered point cloud. Unlike the coordinate
    probes of estimate_normal, every sample lies on the boundary to bracket
    tolerance, so accuracy is ~bracket_tol/radius and contamination by a
    nearby bend shows up as a large fit residual.

    Raises TrackingError when the points do not fit one hyperplane.
    """
    d0 = b.x.shape[0]
    n_points = n_points or d0 + 3
    tol = max(b.width, 1e-12 * (1.0 + float(np.linalg.norm(b.x))))
    pts = [b.x]
    attempts = 0
    while len(pts) < n_points and attempts < 4 * n_points:
        attempts += 1
        delta = rng.standard_normal(d0)
        delta *= radius / np.linalg.norm(delta)
        try:
            bp2 = _reproject(session, b.x + delta, (b.crossing_dir,), 4.0 * radius, tol)
        except TrackingError:
            continue
        pts.append(bp2.x)
    if len(pts) < d0 + 1:
        raise TrackingError("not enough boundary points for a hyperplane fit")
    Y = np.asarray(pts)
    Yc = Y - Y.mean(axis=0)
    _, svals, vh = np.linalg.svd(Yc, full_matrices=True)
    v = vh[-1]
    residual = svals[-1] if svals.shape[0] == d0 else 0.0
    if residual > max(100.0 * tol, 1e-9 * radius) * np.sqrt(len(pts)):
        raise TrackingError("boundary points are not coplanar; bend inside fit radius")
    if _orient_labels is not None:
        l_lo, l_hi = _orient_labels
    else:
        l_lo, l_hi = session.query(b.x_lo), session.query(b.x_hi)
    side = session.query(b.x + max(8.0 * tol, 1e-7 * radius) * v)
    if side == l_hi:
        return v
    if side == l_lo:
        return -v
    raise TrackingError("normal orientation probe hit a third label")


def _reproject(session: OracleSession, center, scan_dirs, reach, tol) -> BoundaryPoint:
    """Find the boundary near `center` by scanning along candidate directions."""
    ref = session.query(center)
    for d in scan_dirs:
        for sgn in (1.0, -1.0):
            t_lo, t_hi, found = session.first_flip(center, sgn * d, ref, reach * 1e-6, reach)
            if found:
                lo, hi = session.bisect(center + sgn * t_lo * d,
                                        center + sgn * t_hi * d, tol)
                width = float(np.linalg.norm(hi - lo))
                return BoundaryPoint(x=0.5 * (lo + hi), x_lo=lo, x_hi=hi, width=width)
    raise TrackingError("lost the decision boundary while re-projecting")


def tangent_direction(
    session: OracleSession, b: BoundaryPoint, rng: np.random.Generator, rho: float, tol: float
) -> tuple[np.ndarray, BoundaryPoint]:
    """Step 2: a unit direction along the boundary, via a second nearby point.

    Displaces b.x by rho in a random direction and re-projects onto the
    boundary; the chord direction is tangent up to ~tol/rho.
    """
    d0 = b.x.shape[0]
    for _ in range(8):
        r = rng.standard_normal(d0)
        r /= np.linalg.norm(r)
        try:
            b2 = _reproject(session, b.x + rho * r, (b.crossing_dir,), 4.0 * rho, tol)
        except TrackingError:
            rho *= 0.5  # boundary may be curved or short here: shrink
            continue
        delta = b2.x - b.x
        n = np.linalg.norm(delta)
        if n > 0.1 * rho:
            return delta / n, b2
        rho *= 0.5
    raise TrackingError("could not construct a tangent direction")


def walk_to_intersection(
    session: OracleSession,
    b: BoundaryPoint,
    delta_x: np.ndarray,
    step: float,
    max_steps: int,
    config: BoundaryConfig = BoundaryConfig(),
    rng: np.random.Generator | None = None,
    ground_truth_fn=None,
    light: bool = False,
):
    """Steps 3-6: slide along the boundary until it bends, localize the bend,
    and build the intersection space from the normals on either side.

    Returns an IntersectionSpace, or None when the boundary stays straight
    for the whole range. `light` skips normal estimation and returns a
    minimal space (s only) for discovery-rate statistics.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    u = np.asarray(delta_x, dtype=float)
    u = u / np.linalg.norm(u)
    # walk with a slab wide enough to absorb the tangent's angular error
    wb = _walk_bracket(session, b, config.walk_bracket)
    max_dist = min(config.walk_max_dist, step * (2.0 ** max_steps))
    alpha_on, alpha_off, status = session.walk_to_bend(
        wb.x_lo, wb.x_hi, u, step, max_dist, config.alpha_tol
    )
    if status == 1:
        return None  # boundary locally straight beyond range
    if alpha_on <= 4.0 * config.alpha_tol:
        raise TrackingError("bracket left the boundary immediately; direction not tangent")
    if light:
        s_bp = refine_bracket(session, wb.x_lo + alpha_on * u, wb.x_hi + alpha_on * u,
                              config.boundary_tol)
        gt = ground_truth_fn(s_bp.x) if ground_truth_fn is not None else None
        d0 = s_bp.x.shape[0]
        empty = np.zeros((d0, 0))
        z = np.zeros(d0)
        return IntersectionSpace(s=s_bp.x, N=empty, v_left=z, v_right=z,
                                 x_left=s_bp.x, x_right=s_bp.x, ground_truth=gt)
    back = max(config.backoff, 8.0 * config.alpha_tol)
    if alpha_on < back:
        raise TrackingError("bend too close to the starting point for a left probe")
    left_bp = refine_bracket(session, wb.x_lo + (alpha_on - back) * u,
                             wb.x_hi + (alpha_on - back) * u, config.boundary_tol)
    l_lo, l_hi = session.query(wb.x_lo), session.query(wb.x_hi)
    v_left = _bend_normal(session, left_bp, back, config, rng, (l_lo, l_hi))
    right_center = wb.x + (alpha_off + back) * u
    right_bp = _reproject(session, right_center, (v_left, wb.crossing_dir),
                          16.0 * back, config.boundary_tol)
    v_right = _bend_normal(session, right_bp, back, config, rng, (l_lo, l_hi))
    angle = float(np.arccos(min(abs(float(v_left @ v_right)), 1.0)))
    if angle < config.min_bend_angle:
        return None  # straight within tolerance: not a genuine intersection
    # refine the bend parameter: the walked line crosses the right piece's
    # plane exactly at the intersection point, pinning it far tighter than
    # the walk slab can
    denom = float(v_right @ u)
    if abs(denom) > 1e-12:
        alpha_star = float(v_right @ (right_bp.x - wb.x)) / denom
        lo_win, hi_win = alpha_on - back, alpha_off + back
        if not (lo_win <= alpha_star <= hi_win):
            alpha_star = 0.5 * (alpha_on + alpha_off)
    else:
        alpha_star = 0.5 * (alpha_on + alpha_off)
    s_bp = refine_bracket(session, wb.x_lo + alpha_star * u, wb.x_hi + alpha_star * u,
                          config.boundary_tol)
    # validate both fitted planes against fresh boundary points flanking the
    # bend; a second activation boundary inside the backoff window shows up
    # as a plane violation here
    thr = max(100.0 * config.boundary_tol, 1e-5 * back / 8.0)
    near_left = refine_bracket(session, wb.x_lo + (alpha_star - back / 8.0) * u,
                               wb.x_hi + (alpha_star - back / 8.0) * u, config.boundary_tol)
    if abs(float(v_left @ (near_left.x - left_bp.x))) > thr:
        raise TrackingError("left plane fails validation; secondary bend suspected")
    near_right = _reproject(session, wb.x + (alpha_star + back / 8.0) * u,
                            (v_left, wb.crossing_dir), 2.0 * back, config.boundary_tol)
    if abs(float(v_right @ (near_right.x - right_bp.x))) > thr:
        raise TrackingError("right plane fails validation; secondary bend suspected")
    gt = ground_truth_fn(s_bp.x) if ground_truth_fn is not None else None
    space = build_intersection_space(s_bp.x, v_left, v_right)
    return replace(space, x_left=left_bp.x, x_right=right_bp.x, ground_truth=gt)


def _walk_bracket(session: OracleSession, b: BoundaryPoint, width: float) -> BoundaryPoint:
    """Bracket of controlled width around b, labels verified."""
    if 0.25 * width <= b.width <= 2.0 * width:
        return b
    if b.width > 2.0 * width:
        return refine_bracket(session, b.x_lo, b.x_hi, width)
    cd = b.crossing_dir
    lo = b.x - 0.5 * width * cd
    hi = b.x + 0.5 * width * cd
    if session.query(lo) == session.query(hi):
        return b  # widening left the linear slab; keep the tight bracket
    return BoundaryPoint(x=b.x, x_lo=lo, x_hi=hi, width=width)


def _bend_normal(session, bp, back, config, rng, orient_labels):
    """Piece normal next to a bend: hyperplane fit with a shrinking radius."""
    last = None
    for shrink in (0.5, 0.125, 0.03125):
        try:
            return fit_normal(session, bp, shrink * back, rng,
                              _orient_labels=orient_labels)
        except TrackingError as exc:
            last = exc
    raise last


def build_intersection_space(s, v_left, v_right) -> IntersectionSpace:
    """Step 6: orthonormal basis of span{v_left, v_right}^perp."""
    s = np.asarray(s, dtype=float)
    v_left = np.asarray(v_left, dtype=float)
    v_right = np.asarray(v_right, dtype=float)
    pair = np.vstack([v_left, v_right])
    cross = abs(float(v_left @ v_right))
    if cross > 1.0 - 1e-12 or min(np.linalg.norm(v_left), np.linalg.norm(v_right)) == 0:
        raise ValueError("parallel or zero normals: degenerate intersection")
    N = nullspace(pair)
    if N.shape[1] != s.shape[0] - 2:
        raise ValueError(f"expected {s.shape[0] - 2} basis columns, got {N.shape[1]}")
    return IntersectionSpace(s=s, N=N, v_left=v_left, v_right=v_right,
                             x_left=s, x_right=s, ground_truth=None)


def sample_label_pair(
    session: OracleSession, rng: np.random.Generator, config: BoundaryConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Draw Gaussian inputs until two labels differ."""
    d0 = session.input_dim
    x0 = config.input_scale * rng.standard_normal(d0)
    l0 = session.query(x0)
    for _ in range(config.max_sample_attempts):
        x1 = config.input_scale * rng.standard_normal(d0)
        if session.query(x1) != l0:
            return x0, x1
    raise DistributionError(
        f"no differing labels after {config.max_sample_attempts} samples"
    )


def collect_intersection_spaces(
    session: OracleSession,
    count: int,
    rng: np.random.Generator,
    config: BoundaryConfig = BoundaryConfig(),
    ground_truth_fn=None,
    light: bool = False,
    n_workers: int = 1,
) -> tuple[list[IntersectionSpace], dict]:
    """Step 7: repeat the search until `count` spaces are collected.

    Returns (spaces, discovery_counts) where discovery_counts maps the
    ground-truth (layer, neuron) to the number of spaces found for it
    (evaluation mode only; empty in attack mode). Worker RNG streams are
    seeded master+worker and merged in worker order, so results do not
    depend on scheduling.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    master = rng.integers(0, 2**62)
    per_worker = [count // n_workers + (1 if w < count % n_workers else 0)
                  for w in range(n_workers)]
    spaces: list[IntersectionSpace] = []
    counts: dict[tuple[int, int], int] = {}
    for worker, quota in enumerate(per_worker):
        wrng = np.random.default_rng(master + worker)
        got = 0
        while got < quota:
            space = _collect_one(session, wrng, config, ground_truth_fn, light)
            if space is None:
                continue
            spaces.append(space)
            if space.ground_truth is not None:
                counts[space.ground_truth] = counts.get(space.ground_truth, 0) + 1
            got += 1
    return spaces, counts


def _collect_one(session, rng, config, ground_truth_fn, light):
    try:
        x0, x1 = sample_label_pair(session, rng, config)
        b = find_boundary_point(session, x0, x1, config.boundary_tol)
        u, _ = tangent_direction(session, b, rng, config.tangent_rho, config.boundary_tol)
        for attempt in range(config.max_walk_retries):
            direction = u if attempt % 2 == 0 else -u
            try:
                space = walk_to_intersection(
                    session, b, direction, config.walk_step, 40, config,
                    rng=rng, ground_truth_fn=ground_truth_fn, light=light,
                )
            except (TrackingError, UnreachableBoundaryError, PreconditionError):
                continue
            if space is not None:
                return space
        return None
    except (TrackingError, UnreachableBoundaryError, PreconditionError):
        return None


def dump_spaces(spaces: list[IntersectionSpace], path) -> None:
    """JSON-lines dump, one object per space (column-major N)."""
    with open(path, "w") as fh:
        for sp in spaces:
            doc = {
                "s": sp.s.tolist(),
                "N": sp.N.T.tolist(),
                "v_left": sp.v_left.tolist(),
                "v_right": sp.v_right.tolist(),
            }
            if sp.ground_truth is not None:
                doc["ground_truth"] = {"layer": sp.ground_truth[0], "index": sp.ground_truth[1]}
            fh.write(json.dumps(doc) + "\n")


def load_spaces(path) -> list[IntersectionSpace]:
    spaces = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            gt = doc.get("ground_truth")
            spaces.append(IntersectionSpace(
                s=np.asarray(doc["s"], dtype=float),
                N=np.asarray(doc["N"], dtype=float).T,
                v_left=np.asarray(doc["v_left"], dtype=float),
                v_right=np.asarray(doc["v_right"], dtype=float),
                x_left=np.asarray(doc["s"], dtype=float),
                x_right=np.asarray(doc["s"], dtype=float),
                ground_truth=(gt["layer"], gt["index"]) if gt else None,
            ))
    return spaces
