"""Example smooth systems and the tangent-cocycle toolbox built on them.

Three builtin systems cover the hypotheses the rest of the package
exercises:

* ``cat_map``      linear Anosov automorphism of the 2-torus,
* ``solenoid``     uniformly hyperbolic attractor in a solid torus,
* ``skew_center``  expanding circle base driving a circle fiber
                   (1-d unstable + 1-d center).

All map callables are batched: they accept a single point ``(d,)`` or an
array of points ``(n, d)``.

A note on the angle-doubling coordinates: the exact update ``2*theta mod 1``
degenerates in binary floating point (every float is dyadic, so the orbit
reaches exactly 0 within 53 steps, which is a genuine but measure-zero
orbit).  The builtin systems therefore couple the angle update to the other
coordinates with a smooth term of size ``eps_couple = 1e-11``.  This keeps
them honest smooth systems while shifting exponents, invariant bundles and
measures by O(1e-11), far below every tolerance used in the package.
The coupling is included exactly in ``derivative``.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DominationRefuted, NumericalError

__all__ = [
    "SmoothSystem",
    "SplittingSpec",
    "BundleFrame",
    "DominationEstimate",
    "LocalManifold",
    "PlaqueChain",
    "builtin_system",
    "default_splitting",
    "orbit",
    "orbit_sample",
    "orbit_paths",
    "backward_orbit",
    "lyapunov_spectrum",
    "frames_along",
    "estimate_bundles",
    "point_frames",
    "path_frames",
    "backward_frames",
    "certify_domination",
    "verify_domination",
    "unstable_plaque",
    "unstable_plaque_chain",
]


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class SmoothSystem:
    """An example system with evaluable maps and exact derivative blocks.

    ``inverse`` is a right inverse: ``forward(inverse(x)) == x`` up to
    roundoff.  For the non-injective angle-doubling systems it selects one
    preimage branch deterministically (the solenoid picks the branch that
    stays on the attractor; ``skew_center`` scrambles the branch choice with
    a fixed hash of the point so backward orbits look typical).
    """

    name: str
    state_dim: int
    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    attractor_box: np.ndarray  # (d, 2) rows (lo, hi)
    periodic: tuple
    parameters: dict = field(default_factory=dict)

    def wrap(self, x):
        """Reduce periodic coordinates to [lo, hi)."""
        x = np.array(x, dtype=float, copy=True)
        for i, per in enumerate(self.periodic):
            if per:
                lo, hi = self.attractor_box[i]
                x[..., i] = lo + np.mod(x[..., i] - lo, hi - lo)
        return x

    def displacement(self, a, b):
        """Minimal-image difference a - b respecting periodic axes."""
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        d = np.array(d, copy=True)
        for i, per in enumerate(self.periodic):
            if per:
                lo, hi = self.attractor_box[i]
                width = hi - lo
                d[..., i] = (d[..., i] + width / 2.0) % width - width / 2.0
        return d

    def distance(self, a, b):
        return np.linalg.norm(self.displacement(a, b), axis=-1)

    def in_box(self, x, slack=0.0):
        x = np.asarray(x, dtype=float)
        lo = self.attractor_box[:, 0] - slack
        hi = self.attractor_box[:, 1] + slack
        return np.all((x >= lo) & (x <= hi), axis=-1)


@dataclass(frozen=True)
class SplittingSpec:
    """Ordered bundle dimensions: E^u, then k one-dimensional centers,
    then (optionally) E^s."""

    bundle_dims: tuple
    center_count: int

    def __post_init__(self):
        dims = tuple(int(d) for d in self.bundle_dims)
        object.__setattr__(self, "bundle_dims", dims)
        k = self.center_count
        if k < 0 or k > len(dims) - 1:
            raise ValueError("center_count must index interior blocks")
        if any(d < 1 for d in dims):
            raise ValueError("bundle dimensions must be positive")
        if any(dims[1 + i] != 1 for i in range(k)):
            raise ValueError("every center bundle must be one-dimensional")

    @property
    def state_dim(self):
        return sum(self.bundle_dims)

    @property
    def n_bundles(self):
        return len(self.bundle_dims)

    def block_slice(self, j):
        start = sum(self.bundle_dims[:j])
        return slice(start, start + self.bundle_dims[j])

    def leading_dim(self, n_lead):
        """Dimension of the span of the first n_lead bundles."""
        return sum(self.bundle_dims[:n_lead])


@dataclass(frozen=True)
class BundleFrame:
    """Orthonormal frames for an estimated invariant splitting along an orbit.

    ``frames[i]`` is a (d, d) orthonormal matrix at ``points[i]`` whose
    column blocks (per ``spec.bundle_dims``) span the bundles, ordered from
    most expanded to most contracted.
    """

    points: np.ndarray  # (W, d)
    frames: np.ndarray  # (W, d, d)
    spec: SplittingSpec

    def __len__(self):
        return self.points.shape[0]

    def block(self, i, j):
        """Frame columns of bundle j at orbit index i."""
        return self.frames[i][:, self.spec.block_slice(j)]

    def leading(self, i, n_lead):
        """Frame columns spanning the first n_lead bundles at index i."""
        return self.frames[i][:, : self.spec.leading_dim(n_lead)]


@dataclass(frozen=True)
class DominationEstimate:
    """Fitted constants certifying E-over-F domination along tested orbits."""

    C: float
    lam: float
    alpha_holder: float
    C_holder: float


@dataclass(frozen=True)
class LocalManifold:
    """A sampled local manifold tangent to a bundle at a base point.

    For a one-dimensional bundle: ``params`` is the sorted mesh of the
    graph coordinate and ``points`` the curve samples (kept unwrapped, i.e.
    continuous across periodic boundaries).  For a full-dimensional bundle
    the manifold is a flat patch over a product mesh.
    """

    base_point: np.ndarray
    params: np.ndarray  # (M,) or (M, p)
    points: np.ndarray  # (M, d)
    tangent: np.ndarray  # (d, p) orthonormal tangent at the base
    radius: float

    @property
    def param_dim(self):
        return 1 if self.params.ndim == 1 else self.params.shape[1]

    def interp(self, u):
        """Linear interpolation of the curve at graph coordinates u (1-d only)."""
        if self.param_dim != 1:
            raise ValueError("interp is defined for curve plaques only")
        u = np.asarray(u, dtype=float)
        cols = [np.interp(u, self.params, self.points[:, i])
                for i in range(self.points.shape[1])]
        return np.stack(cols, axis=-1)

    def arc_lengths(self):
        """Cumulative arc length along the mesh (1-d only)."""
        if self.param_dim != 1:
            raise ValueError("arc length is defined for curve plaques only")
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        return np.concatenate(([0.0], np.cumsum(seg)))


# ---------------------------------------------------------------------------
# builtin systems

_CAT = np.array([[2.0, 1.0], [1.0, 1.0]])
_CAT_INV = np.array([[1.0, -1.0], [-1.0, 2.0]])


def _cat_map():
    def forward(x):
        x = np.asarray(x, dtype=float)
        return np.mod(x @ _CAT.T, 1.0)

    def inverse(x):
        x = np.asarray(x, dtype=float)
        return np.mod(x @ _CAT_INV.T, 1.0)

    def derivative(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(_CAT, x.shape[:-1] + (2, 2)).copy()

    return SmoothSystem(
        name="cat_map",
        state_dim=2,
        forward=forward,
        inverse=inverse,
        derivative=derivative,
        attractor_box=np.array([[0.0, 1.0], [0.0, 1.0]]),
        periodic=(True, True),
        parameters={},
    )


def _solenoid(lam=0.25, c=0.5, eps_couple=1e-11):
    two_pi = 2.0 * np.pi

    def forward(p):
        p = np.asarray(p, dtype=float)
        th, x, y = p[..., 0], p[..., 1], p[..., 2]
        th2 = np.mod(2.0 * th + eps_couple * (x + y), 1.0)
        return np.stack(
            [th2, lam * x + c * np.cos(two_pi * th), lam * y + c * np.sin(two_pi * th)],
            axis=-1,
        )

    def inverse(p):
        p = np.asarray(p, dtype=float)
        th2, x2, y2 = p[..., 0], p[..., 1], p[..., 2]
        # two candidate angle branches; the attractor one has the smaller
        # recovered (x, y)
        cand = []
        for j in (0.0, 0.5):
            th = np.mod(th2, 1.0) / 2.0 + j
            for _ in range(3):  # absorb the tiny coupling term
                x = (x2 - c * np.cos(two_pi * th)) / lam
                y = (y2 - c * np.sin(two_pi * th)) / lam
                th = np.mod(th2 - eps_couple * (x + y), 1.0) / 2.0 + j
            x = (x2 - c * np.cos(two_pi * th)) / lam
            y = (y2 - c * np.sin(two_pi * th)) / lam
            cand.append((th, x, y))
        r0 = cand[0][1] ** 2 + cand[0][2] ** 2
        r1 = cand[1][1] ** 2 + cand[1][2] ** 2
        pick0 = r0 <= r1
        th = np.where(pick0, cand[0][0], cand[1][0])
        x = np.where(pick0, cand[0][1], cand[1][1])
        y = np.where(pick0, cand[0][2], cand[1][2])
        return np.stack([np.mod(th, 1.0), x, y], axis=-1)

    def derivative(p):
        p = np.asarray(p, dtype=float)
        th = p[..., 0]
        z = np.zeros_like(th)
        e = np.full_like(th, eps_couple)
        row0 = np.stack([np.full_like(th, 2.0), e, e], axis=-1)
        row1 = np.stack([-two_pi * c * np.sin(two_pi * th), np.full_like(th, lam), z], axis=-1)
        row2 = np.stack([two_pi * c * np.cos(two_pi * th), z, np.full_like(th, lam)], axis=-1)
        return np.stack([row0, row1, row2], axis=-2)

    return SmoothSystem(
        name="solenoid",
        state_dim=3,
        forward=forward,
        inverse=inverse,
        derivative=derivative,
        attractor_box=np.array([[0.0, 1.0], [-0.8, 0.8], [-0.8, 0.8]]),
        periodic=(True, False, False),
        parameters={"lam": lam, "c": c, "eps_couple": eps_couple},
    )


def _branch_hash(u, v, n_branches):
    """Deterministic pseudo-random branch index from two coordinates."""
    h = np.sin(u * 12.9898 + v * 78.233) * 43758.5453123
    return np.floor((h - np.floor(h)) * n_branches).astype(int)


def _skew_center(a=0.1, b=0.3, base_degree=2, center_slope=1, eps_couple=1e-11):
    two_pi = 2.0 * np.pi
    deg = int(base_degree)
    slope = int(center_slope)
    if not two_pi * abs(a) < slope:
        raise ValueError("need 2*pi*|a| < center_slope for an invertible fiber branch")
    if deg < 2:
        raise ValueError("base_degree must be >= 2")

    def forward(p):
        p = np.asarray(p, dtype=float)
        th, t = p[..., 0], p[..., 1]
        th2 = np.mod(deg * th + eps_couple * np.sin(two_pi * t), 1.0)
        t2 = np.mod(slope * t + a * np.sin(two_pi * t) + b * np.cos(two_pi * th), 1.0)
        return np.stack([th2, t2], axis=-1)

    def _fiber_solve(w):
        # solve slope*t + a*sin(2*pi*t) = w on the line (strictly increasing)
        t = w / slope
        for _ in range(40):
            f = slope * t + a * np.sin(two_pi * t) - w
            df = slope + two_pi * a * np.cos(two_pi * t)
            step = f / df
            t = t - step
            if np.max(np.abs(step)) < 1e-15:
                break
        return t

    def inverse(p):
        p = np.asarray(p, dtype=float)
        th2, t2 = p[..., 0], p[..., 1]
        jb = _branch_hash(th2, t2, deg)
        jf = _branch_hash(t2, th2, slope) if slope > 1 else 0
        t = t2  # crude start; one outer pass suffices at eps_couple scale
        for _ in range(3):
            th = np.mod((np.mod(th2 - eps_couple * np.sin(two_pi * t), 1.0) + jb) / deg, 1.0)
            w = t2 + jf - b * np.cos(two_pi * th)
            t = np.mod(_fiber_solve(w), 1.0)
        return np.stack([th, t], axis=-1)

    def derivative(p):
        p = np.asarray(p, dtype=float)
        th, t = p[..., 0], p[..., 1]
        row0 = np.stack(
            [np.full_like(th, float(deg)), eps_couple * two_pi * np.cos(two_pi * t)],
            axis=-1,
        )
        row1 = np.stack(
            [-two_pi * b * np.sin(two_pi * th), slope + two_pi * a * np.cos(two_pi * t)],
            axis=-1,
        )
        return np.stack([row0, row1], axis=-2)

    return SmoothSystem(
        name="skew_center",
        state_dim=2,
        forward=forward,
        inverse=inverse,
        derivative=derivative,
        attractor_box=np.array([[0.0, 1.0], [0.0, 1.0]]),
        periodic=(True, True),
        parameters={
            "a": a,
            "b": b,
            "base_degree": deg,
            "center_slope": slope,
            "eps_couple": eps_couple,
        },
    )


_BUILTINS = {"cat_map": _cat_map, "solenoid": _solenoid, "skew_center": _skew_center}


def builtin_system(name, **overrides) -> SmoothSystem:
    """Instantiate a roster system, optionally overriding its parameters."""
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(_BUILTINS)}")
    return factory(**overrides)


def default_splitting(sys: SmoothSystem) -> SplittingSpec:
    if sys.name == "cat_map":
        return SplittingSpec((1, 1), center_count=0)
    if sys.name == "solenoid":
        return SplittingSpec((1, 2), center_count=0)
    if sys.name == "skew_center":
        return SplittingSpec((1, 1), center_count=1)
    raise ValueError(f"no default splitting for {sys.name!r}")


# ---------------------------------------------------------------------------
# orbits


def orbit(sys: SmoothSystem, x0, n_steps, transient=0):
    """Forward orbit of length n_steps + 1 after discarding a transient."""
    x = np.asarray(x0, dtype=float)
    for _ in range(transient):
        x = sys.forward(x)
    out = np.empty((n_steps + 1, sys.state_dim))
    out[0] = x
    for i in range(n_steps):
        x = sys.forward(x)
        out[i + 1] = x
    return out


def backward_orbit(sys: SmoothSystem, x0, n_steps):
    """Backward orbit x_0, x_{-1}, ..., x_{-n} via the system's inverse branch."""
    x = np.asarray(x0, dtype=float)
    out = np.empty((n_steps + 1, sys.state_dim))
    out[0] = x
    for i in range(n_steps):
        x = sys.inverse(x)
        if not sys.in_box(x, slack=0.5):
            raise NumericalError(
                f"backward orbit escaped the chart at step {i + 1} of {sys.name}"
            )
        out[i + 1] = x
    return out


def orbit_sample(sys: SmoothSystem, n_points, walkers=100, burn_in=1000, seed=0):
    """Physical-measure sample: pooled long orbits of many seeded walkers.

    Walkers start uniformly in the attractor box, discard ``burn_in`` steps,
    then every walker state at every subsequent step is recorded.  The result
    is deterministic for a fixed seed.
    """
    paths = orbit_paths(
        sys, walkers, int(np.ceil(n_points / walkers)), burn_in, seed
    )
    return paths[:, 1:, :].transpose(1, 0, 2).reshape(-1, sys.state_dim)[:n_points]


def orbit_paths(sys: SmoothSystem, walkers, steps, burn_in=1000, seed=0):
    """Post-burn-in forward paths of seeded walkers, shape (walkers, steps+1, d).

    Recorded paths are how backward data is obtained on systems whose
    inverse branch is numerically unstable (iterating the solenoid inverse
    amplifies off-attractor roundoff fourfold per step, so explicit backward
    orbits fail after roughly 25 steps).
    """
    rng = np.random.default_rng(seed)
    lo = sys.attractor_box[:, 0]
    hi = sys.attractor_box[:, 1]
    x = lo + (hi - lo) * rng.random((walkers, sys.state_dim))
    for _ in range(burn_in):
        x = sys.forward(x)
    out = np.empty((walkers, steps + 1, sys.state_dim))
    out[:, 0] = x
    for i in range(steps):
        x = sys.forward(x)
        out[:, i + 1] = x
    return out


# ---------------------------------------------------------------------------
# Lyapunov spectrum


def lyapunov_spectrum(sys: SmoothSystem, x0, n_steps, transient=500, qr_cadence=1):
    """Lyapunov exponents (nats per iterate, sorted descending) via QR
    re-orthogonalization of the derivative cocycle.

    The orbit and the QR frame both run through ``transient`` warmup steps
    before log-stretches are accumulated, so constant-derivative systems
    converge at roundoff level.  With ``qr_cadence > 1`` several derivative
    factors are multiplied between orthogonalizations; overflow is detected
    and reported.
    """
    if n_steps < 1000:
        raise ValueError("n_steps >= 1000 required for a meaningful spectrum")
    d = sys.state_dim
    x = np.asarray(x0, dtype=float)
    if not sys.in_box(x, slack=1e-9):
        raise ValueError("x0 must lie in the attractor box")
    q = np.eye(d)
    sums = np.zeros(d)

    def push(q, x, accumulate):
        m = q
        for _ in range(qr_cadence):
            m = sys.derivative(x) @ m
            x = sys.forward(x)
        if not np.all(np.isfinite(m)):
            raise NumericalError(
                "cocycle product overflowed; reduce qr_cadence "
                f"(currently {qr_cadence})"
            )
        q, r = np.linalg.qr(m)
        diag = np.abs(np.diag(r))
        if np.any(diag == 0.0) or not np.all(np.isfinite(diag)):
            raise NumericalError(
                "degenerate QR factor in cocycle product; reduce qr_cadence"
            )
        if accumulate:
            sums[:] += np.log(diag)
        return q, x

    for _ in range(max(1, transient // qr_cadence)):
        q, x = push(q, x, accumulate=False)
    n_blocks = n_steps // qr_cadence
    for _ in range(n_blocks):
        q, x = push(q, x, accumulate=True)
    return np.sort(sums / (n_blocks * qr_cadence))[::-1]


# ---------------------------------------------------------------------------
# invariant bundle estimation


def _subspace_intersection(U, V, dim):
    """Orthonormal basis of the dim-dimensional intersection of two spans."""
    M = U.T @ V
    W, s, _ = np.linalg.svd(M)
    basis = U @ W[:, :dim]
    q, _ = np.linalg.qr(basis)
    return q[:, :dim], (s[dim - 1] if dim >= 1 else 1.0)


def frames_along(derivs, spec: SplittingSpec, buffer):
    """Per-point orthonormal frames of the splitting along a derivative path.

    ``derivs[i]`` maps the tangent space at point i to point i+1; the path
    has ``len(derivs) + 1`` points.  Frames are returned for the interior
    window [buffer, len(derivs) - buffer] where both the forward and the
    backward flag iterations have converged.
    """
    derivs = np.asarray(derivs, dtype=float)
    n = derivs.shape[0]
    d = derivs.shape[1]
    if spec.state_dim != d:
        raise ValueError("splitting dims must sum to the state dimension")
    if n - 2 * buffer < 0:
        raise ValueError("path too short for the requested buffer")

    # a fixed generic seed: the identity is an (unstable) fixed point of the
    # QR iteration for axis-aligned cocycles and would freeze a wrong order
    seed_q, _ = np.linalg.qr(np.random.default_rng(1234567).standard_normal((d, d)))

    fwd = np.empty((n + 1, d, d))
    q = seed_q
    fwd[0] = q
    for i in range(n):
        q, r = np.linalg.qr(derivs[i] @ q)
        q = q * np.sign(np.diag(r))  # keep a continuous orientation
        fwd[i + 1] = q

    bwd = np.empty((n + 1, d, d))
    q = seed_q
    bwd[n] = q
    inv = np.linalg.inv(derivs)
    for i in range(n - 1, -1, -1):
        q, r = np.linalg.qr(inv[i] @ q)
        q = q * np.sign(np.diag(r))
        bwd[i] = q

    lo, hi = buffer, n - buffer
    window = range(lo, hi + 1)
    frames = np.empty((len(window), d, d))
    k = spec.n_bundles
    cumdims = np.cumsum((0,) + spec.bundle_dims)
    for w, i in enumerate(window):
        cols = []
        for j in range(k):
            dim_j = spec.bundle_dims[j]
            if j == 0:
                # fastest bundles lead the forward flag
                basis = fwd[i][:, : cumdims[1]]
            elif j == k - 1:
                # slowest bundles lead the backward flag
                basis = bwd[i][:, :dim_j]
            else:
                U = fwd[i][:, : cumdims[j + 1]]
                V = bwd[i][:, : d - cumdims[j]]
                basis, _ = _subspace_intersection(U, V, dim_j)
            cols.append(basis)
        frames[w] = np.concatenate(cols, axis=1)
    return frames, lo, hi


def _invariance_angle(derivs, frames, spec, lo):
    """Largest per-bundle angle between pushed and next-point frame spans."""
    worst = 0.0
    n_frames = frames.shape[0]
    for i in range(n_frames - 1):
        D = derivs[lo + i]
        for j in range(spec.n_bundles):
            blk = frames[i][:, spec.block_slice(j)]
            pushed = D @ blk
            q, _ = np.linalg.qr(pushed)
            target = frames[i + 1][:, spec.block_slice(j)]
            s = np.linalg.svd(q.T @ target, compute_uv=False)
            worst = max(worst, float(np.arccos(np.clip(s[-1], -1.0, 1.0))))
    return worst


def estimate_bundles(
    sys: SmoothSystem, spec: SplittingSpec, orbit_points, buffer=500,
    angle_tol=1e-6,
) -> BundleFrame:
    """Estimate the invariant splitting along an orbit by power iteration of
    the derivative cocycle (forward QR for expanding flags, backward QR for
    contracting flags).

    Frames are returned on the interior window where both iterations have
    converged; the construction fails if the pushed frames miss the
    next-point frames by more than ``angle_tol``.
    """
    pts = np.asarray(orbit_points, dtype=float)
    derivs = sys.derivative(pts[:-1])
    frames, lo, hi = frames_along(derivs, spec, buffer)
    worst = _invariance_angle(derivs, frames, spec, lo)
    if worst > angle_tol:
        raise NumericalError(
            f"bundle estimation did not converge: invariance angle {worst:.3e} "
            f"exceeds {angle_tol:.1e}; lengthen the orbit or the buffer"
        )
    return BundleFrame(points=pts[lo : hi + 1], frames=frames, spec=spec)


def _two_sided_path(sys: SmoothSystem, x, back_steps, fwd_steps, history=None):
    """Points x_{-back_steps}, ..., x_0 = x, ..., x_{+fwd_steps}.

    The backward part is sliced from a recorded forward ``history`` (an
    array of consecutive points ending at x) when given, and generated with
    the system's inverse branch otherwise.
    """
    x = np.asarray(x, dtype=float)
    if history is not None:
        history = np.asarray(history, dtype=float)
        if history.shape[0] < back_steps + 1:
            raise ValueError(
                f"history with at least {back_steps + 1} points required, "
                f"got {history.shape[0]}"
            )
        if sys.distance(history[-1], x) > 1e-9:
            raise ValueError("history must end at the base point")
        back = history[-(back_steps + 1):]
    else:
        back = backward_orbit(sys, x, back_steps)[::-1]
    fwdpts = orbit(sys, x, fwd_steps)
    return np.concatenate([back, fwdpts[1:]], axis=0)


def point_frames(sys: SmoothSystem, x, spec: SplittingSpec, buffer=200, history=None):
    """Splitting frame at a single point, from a local two-sided orbit."""
    path = _two_sided_path(sys, x, buffer, buffer, history)
    derivs = sys.derivative(path[:-1])
    frames, lo, hi = frames_along(derivs, spec, buffer)
    return frames[buffer - lo]


def path_frames(sys: SmoothSystem, path, spec: SplittingSpec, buffer):
    """Splitting frames along consecutive recorded points.

    Returns (frames, lo) where frames[i] sits at path[lo + i]; the window
    excludes ``buffer`` points on each side.
    """
    path = np.asarray(path, dtype=float)
    derivs = sys.derivative(path[:-1])
    frames, lo, hi = frames_along(derivs, spec, buffer)
    return frames, lo


def backward_frames(sys: SmoothSystem, x, spec: SplittingSpec, depth, buffer=200,
                    history=None):
    """Backward orbit x_0, ..., x_{-depth} with splitting frames at each point.

    Returns (points, frames) with index i corresponding to x_{-i}.  The
    frames come from a path extended by ``buffer`` steps on both sides so
    every returned frame is converged.
    """
    path = _two_sided_path(sys, x, depth + buffer, buffer, history)
    derivs = sys.derivative(path[:-1])
    frames, lo, hi = frames_along(derivs, spec, buffer)
    # path index of x_{-i} is depth + buffer - i; frame array offset is lo
    pts = np.empty((depth + 1, sys.state_dim))
    out = np.empty((depth + 1, sys.state_dim, sys.state_dim))
    for i in range(depth + 1):
        idx = depth + buffer - i
        pts[i] = path[idx]
        out[i] = frames[idx - lo]
    return pts, out


# ---------------------------------------------------------------------------
# domination certificates


def _block_step_matrices(derivs, frames, spec, block, lo=0):
    """One-step derivative matrices expressed in the block's own frames:
    M[i] = Q_block(x_{i+1})^T D_i Q_block(x_i).

    Restricted cocycle products are accumulated from these small matrices;
    projecting into the frame at every step keeps the fast directions from
    contaminating slow-bundle norms (a direct product D^n @ Q_F amplifies
    any frame error by the domination gap to the n-th power).
    """
    sl = spec.block_slice(block)
    n = frames.shape[0] - 1
    Q = frames[:, :, sl]
    out = np.einsum("idk,idj,ijl->ikl", Q[1:], derivs[lo : lo + n], Q[:-1])
    return out


def _restricted_products(derivs, frames, spec, E_block, F_block, starts, n_max):
    """For each start and 1 <= n <= n_max, the log of
    ||Df^n|_F(x)|| and of ||Df^{-n}|_E(f^n x)||, from stepwise
    frame-projected products."""
    ME = _block_step_matrices(derivs, frames, spec, E_block)
    MF = _block_step_matrices(derivs, frames, spec, F_block)
    sigF = np.empty((len(starts), n_max))
    sigE = np.empty((len(starts), n_max))
    for si, s in enumerate(starts):
        PE = np.eye(ME.shape[1])
        PF = np.eye(MF.shape[1])
        logSE = 0.0
        logSF = 0.0
        for n in range(1, n_max + 1):
            PE = ME[s + n - 1] @ PE
            PF = MF[s + n - 1] @ PF
            nE, nF = np.linalg.norm(PE), np.linalg.norm(PF)
            if nE > 1e100 or nE < 1e-100:
                PE /= nE
                logSE += np.log(nE)
            if nF > 1e100 or nF < 1e-100:
                PF /= nF
                logSF += np.log(nF)
            sF = np.linalg.svd(PF, compute_uv=False)
            sE = np.linalg.svd(PE, compute_uv=False)
            sigF[si, n - 1] = np.log(sF[0]) + logSF
            sigE[si, n - 1] = -(np.log(sE[-1]) + logSE)
    return sigF, sigE  # log norms


def _fit_lambda(log_products, n_max, lam_grid):
    """Smallest grid lambda whose normalized products peak in the first half
    (no tail growth), together with the fitted constant C."""
    ns = np.arange(1, n_max + 1)
    half = max(1, n_max // 2)
    for lam in np.sort(np.asarray(lam_grid)):  # smallest admissible wins
        normalized = log_products - np.log(lam) * ns  # (starts, n)
        head = np.max(normalized[:, :half])
        tail = np.max(normalized[:, half:])
        if tail <= head:
            return float(lam), float(np.exp(np.max(normalized)))
    return None, None


def certify_domination(
    sys: SmoothSystem,
    frame: BundleFrame,
    E_block: int,
    F_block: int,
    n_max=60,
    max_starts=120,
    lam_grid=None,
    alpha_grid=(1.0, 0.75, 0.5, 0.4, 0.3, 0.25, 0.2, 0.15, 0.1, 0.05, 0.025, 0.01),
) -> DominationEstimate:
    """Fit (C, lambda) with ||Df^n|_F|| * ||Df^{-n}|_E|| <= C lambda^n on all
    tested orbit segments, plus the largest alpha for which both
    (1+alpha)-domination inequalities admit such constants.

    A grid lambda is admissible when the normalized products peak in the
    first half of the window (the supremum shows no tail growth); the
    smallest admissible lambda is reported.
    """
    if E_block == F_block:
        raise DominationRefuted(
            "a bundle never dominates itself: the restricted products are >= 1"
        )
    if E_block > F_block:
        raise ValueError("E must precede F in the splitting order")
    if n_max < 4:
        raise ValueError("n_max >= 4 required to judge tail growth")
    if lam_grid is None:
        lam_grid = np.round(np.arange(0.99, 0.009, -0.01), 4)
    spec = frame.spec
    W = len(frame)
    if W <= n_max + 1:
        raise ValueError("frame window too short for n_max")
    derivs = sys.derivative(frame.points[:-1])
    starts = np.unique(np.linspace(0, W - n_max - 1, max_starts).astype(int))
    logF, logEinv = _restricted_products(
        derivs, frame.frames, spec, E_block, F_block, starts, n_max
    )
    log_prod = logF + logEinv
    lam, C = _fit_lambda(log_prod, n_max, lam_grid)
    if lam is None:
        raise DominationRefuted(
            f"no lambda < 1 certifies {sys.name}: block {E_block} does not "
            f"dominate block {F_block} on the tested segments"
        )
    alpha_best, C_holder = 0.0, C
    for alpha in alpha_grid:
        l1, c1 = _fit_lambda((1.0 + alpha) * logF + logEinv, n_max, lam_grid)
        l2, c2 = _fit_lambda(logF + (1.0 + alpha) * logEinv, n_max, lam_grid)
        if l1 is not None and l2 is not None:
            alpha_best, C_holder = alpha, max(c1, c2)
            break
    return DominationEstimate(C=C, lam=float(lam), alpha_holder=alpha_best, C_holder=C_holder)


def verify_domination(
    sys: SmoothSystem, est: DominationEstimate, frame: BundleFrame,
    E_block: int, F_block: int, n_max=60, max_starts=60, slack=1.05,
) -> bool:
    """Check the fitted inequality on a frame not used for fitting."""
    spec = frame.spec
    derivs = sys.derivative(frame.points[:-1])
    W = len(frame)
    starts = np.unique(np.linspace(0, W - n_max - 1, max_starts).astype(int))
    logF, logEinv = _restricted_products(
        derivs, frame.frames, spec, E_block, F_block, starts, n_max
    )
    ns = np.arange(1, n_max + 1)
    bound = np.log(slack * est.C) + np.log(est.lam) * ns
    return bool(np.all(logF + logEinv <= bound))


# ---------------------------------------------------------------------------
# unstable plaques by graph transform


@dataclass(frozen=True)
class PlaqueChain:
    """An unstable plaque together with its backward-orbit predecessors.

    ``levels[j]`` is the plaque at x_{-j}; ``pullbacks[j]`` (for j >= 1)
    maps the mesh parameters of ``levels[j-1]`` to the source parameters on
    ``levels[j]`` whose forward images they are.  The chain lets backward
    orbits of leaf points be read off from forward-constructed data, which
    stays numerically stable where explicit inverse iteration does not.
    """

    levels: list
    pullbacks: list

    @property
    def plaque(self) -> LocalManifold:
        return self.levels[0]

    @property
    def depth(self):
        return len(self.levels) - 1

    def pull_back_params(self, u, depth):
        """Parameters on ``levels[depth]`` of the backward orbit of the leaf
        points with parameters ``u`` on the plaque."""
        u = np.asarray(u, dtype=float)
        for j in range(1, depth + 1):
            mesh = self.levels[j - 1].params
            u = np.interp(u, mesh, self.pullbacks[j])
        return u

    def leaf_orbit(self, u, depth):
        """Backward orbit points G^{-j}(y) for leaf parameters u, j = 0..depth."""
        u = np.asarray(u, dtype=float)
        out = np.empty((depth + 1,) + u.shape + (self.levels[0].points.shape[1],))
        uu = u
        out[0] = self.levels[0].interp(uu)
        for j in range(1, depth + 1):
            mesh = self.levels[j - 1].params
            uu = np.interp(uu, mesh, self.pullbacks[j])
            out[j] = self.levels[j].interp(uu)
        return out

    def leaf_tangent(self, u, depth):
        """Unit tangent of ``levels[depth]`` at the pulled-back parameters."""
        lvl = self.levels[depth]
        uu = self.pull_back_params(u, depth)
        h = lvl.params[1] - lvl.params[0]
        fwd = lvl.interp(np.minimum(uu + h, lvl.params[-1]))
        bwd = lvl.interp(np.maximum(uu - h, lvl.params[0]))
        tang = fwd - bwd
        return tang / np.linalg.norm(tang, axis=-1, keepdims=True)


def _flat_patch(sys, spec, x, radius, mesh, buffer, history):
    """Full-dimensional 'plaque': a flat patch spanned by the whole frame."""
    d = sys.state_dim
    frame = point_frames(sys, x, spec, buffer, history=history)
    per_axis = max(9, int(round(mesh ** (1.0 / d))) | 1)
    grid = np.linspace(-radius, radius, per_axis)
    mesh_pts = np.stack(np.meshgrid(*([grid] * d), indexing="ij"), axis=-1)
    params = mesh_pts.reshape(-1, d)
    points = x + params @ frame.T
    return LocalManifold(
        base_point=x, params=params, points=points, tangent=frame, radius=radius
    )


def unstable_plaque_chain(
    sys: SmoothSystem,
    spec: SplittingSpec,
    x,
    radius,
    depth,
    mesh=129,
    buffer=200,
    tangency_tol=1e-6,
    history=None,
) -> PlaqueChain:
    """Grow the unstable plaque through x by graph transform, keeping every
    intermediate curve along the backward orbit.

    The flat graph seeded at x_{-depth} is pushed forward ``depth`` times;
    at each step the image curve is re-sampled as a piecewise-linear graph
    (mesh nodes over the leading-bundle coordinate) at the next orbit point.
    On systems without a stable inverse, pass a recorded forward ``history``
    ending at x with at least depth + buffer + 1 points.
    """
    x = np.asarray(x, dtype=float)
    if spec.bundle_dims[0] != 1:
        raise NotImplementedError(
            "graph-transform plaques are implemented for a one-dimensional "
            "leading bundle"
        )
    if depth < 1:
        raise ValueError("chain construction needs depth >= 1")
    pts, frames = backward_frames(sys, x, spec, depth, buffer, history=history)
    params = np.linspace(-radius, radius, mesh)
    periodic_widths = [hi - lo for (lo, hi), per
                       in zip(sys.attractor_box, sys.periodic) if per]
    half_width = 0.5 * min(periodic_widths) if periodic_widths else np.inf

    def e_and_complement(i):
        F = frames[i]
        return F[:, 0], F[:, 1:]

    e_seed, _ = e_and_complement(depth)
    curve = pts[depth] + params[:, None] * e_seed[None, :]
    levels = [None] * (depth + 1)
    pullbacks = [None] * (depth + 1)
    levels[depth] = LocalManifold(
        base_point=pts[depth], params=params, points=curve,
        tangent=e_seed[:, None], radius=radius,
    )
    final_nodes = None

    for k in range(depth, 0, -1):
        image = sys.forward(curve)
        center = pts[k - 1]
        e, Cmat = e_and_complement(k - 1)
        rel = sys.displacement(image, center)
        # the splitting is oblique: graph coordinates in the basis [e | C]
        # come from a linear solve, not from inner products
        coords = np.linalg.solve(frames[k - 1], rel.T).T
        u = coords[:, 0]
        w = coords[:, 1:]  # (mesh, d-1)
        src = params.copy()
        order = np.argsort(u)
        u, w, src = u[order], w[order], src[order]
        if u[0] > -radius or u[-1] < radius:
            raise NumericalError(
                "graph transform image does not cover the chart; "
                "use a smaller radius or a deeper backward orbit"
            )
        if np.any(np.diff(u) <= 0):
            keep = np.concatenate(([True], np.diff(u) > 0))
            u, w, src = u[keep], w[keep], src[keep]
        wnew = np.stack([np.interp(params, u, w[:, j]) for j in range(w.shape[1])], axis=-1)
        if np.max(np.abs(wnew)) > 0.9 * half_width:
            raise NumericalError(
                "graph transform leaves the chart: reduce the plaque radius"
            )
        pullbacks[k] = np.interp(params, u, src)
        curve = center + params[:, None] * e[None, :] + wnew @ Cmat.T
        tangent = (curve[mesh // 2 + 1] - curve[mesh // 2 - 1])
        tangent = tangent / np.linalg.norm(tangent)
        levels[k - 1] = LocalManifold(
            base_point=center, params=params, points=curve,
            tangent=tangent[:, None], radius=radius,
        )
        if k == 1:
            final_nodes = (u, w)

    # recentre the final curve so it passes through x exactly
    e, Cmat = e_and_complement(0)
    final = levels[0].points
    rel = sys.displacement(final, x)
    offset = np.linalg.solve(frames[0], rel[mesh // 2])[1:]
    final = final - (Cmat @ offset)[None, :]
    final[mesh // 2] = x
    # The image nodes sit on the manifold far more accurately than the
    # piecewise-linear resample between them (transverse node errors are
    # contracted every level), so the center tangent comes from a local
    # quadratic fit over the nodes rather than from curve differences.
    u_nodes, w_nodes = final_nodes
    h = params[1] - params[0]
    near = np.abs(u_nodes) <= 8.0 * h
    V = np.vander(u_nodes[near], 3)
    coeff, *_ = np.linalg.lstsq(V, w_nodes[near], rcond=None)
    slope = coeff[1]  # dw/du at u = 0
    tangent_vec = e + Cmat @ slope
    tangent_vec = tangent_vec / np.linalg.norm(tangent_vec)
    angle = np.arccos(np.clip(abs(float(tangent_vec @ e)), -1.0, 1.0))
    if angle > tangency_tol:
        raise NumericalError(
            f"plaque tangency error {angle:.2e} exceeds {tangency_tol:.1e}; "
            "increase depth"
        )
    levels[0] = LocalManifold(
        base_point=x, params=params, points=final,
        tangent=tangent_vec[:, None], radius=radius,
    )
    return PlaqueChain(levels=levels, pullbacks=pullbacks)


def unstable_plaque(
    sys: SmoothSystem,
    spec: SplittingSpec,
    x,
    radius,
    depth,
    n_lead=1,
    mesh=129,
    buffer=200,
    tangency_tol=1e-6,
    history=None,
) -> LocalManifold:
    """Local manifold tangent to the span of the first ``n_lead`` bundles.

    One-dimensional leading bundles use the graph transform seeded at the
    flat graph along the backward orbit (``unstable_plaque_chain``); with
    ``depth=0`` the flat seed itself is returned.  When the leading bundles
    span the whole tangent space the plaque is a flat patch.
    """
    x = np.asarray(x, dtype=float)
    dim_E = spec.leading_dim(n_lead)
    d = sys.state_dim
    if dim_E == d:
        return _flat_patch(sys, spec, x, radius, mesh, buffer, history)
    if dim_E != 1:
        raise NotImplementedError(
            "graph-transform plaques are implemented for one-dimensional "
            "leading bundles and for the full tangent space"
        )
    if depth == 0:
        e = point_frames(sys, x, spec, buffer, history=history)[:, :1]
        params = np.linspace(-radius, radius, mesh)
        return LocalManifold(
            base_point=x, params=params, points=x + params[:, None] * e[:, 0],
            tangent=e, radius=radius,
        )
    chain = unstable_plaque_chain(
        sys, spec, x, radius, depth, mesh, buffer, tangency_tol, history
    )
    return chain.plaque
