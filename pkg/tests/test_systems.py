import numpy as np
import pytest

from srblab.errors import DominationRefuted, NumericalError
from srblab.systems import (
    SplittingSpec,
    backward_orbit,
    builtin_system,
    certify_domination,
    default_splitting,
    estimate_bundles,
    frames_along,
    lyapunov_spectrum,
    orbit,
    orbit_paths,
    orbit_sample,
    point_frames,
    unstable_plaque,
    verify_domination,
)

# eigenvalues of [[2,1],[1,1]]
CAT_LOG = np.log((3.0 + np.sqrt(5.0)) / 2.0)
CAT_EU = np.array([1.0, (np.sqrt(5.0) - 1.0) / 2.0])
CAT_ES = np.array([1.0, -(np.sqrt(5.0) + 1.0) / 2.0])


@pytest.fixture(scope="module")
def cat():
    return builtin_system("cat_map")


@pytest.fixture(scope="module")
def solenoid():
    return builtin_system("solenoid")


@pytest.fixture(scope="module")
def skew():
    return builtin_system("skew_center")


def test_unknown_name_rejected():
    with pytest.raises(ValueError):
        builtin_system("horseshoe")


def test_cat_derivative_constant(cat):
    rng = np.random.default_rng(0)
    pts = rng.random((20, 2))
    D = cat.derivative(pts)
    assert np.allclose(D, np.array([[2.0, 1.0], [1.0, 1.0]]))


def test_solenoid_contraction_block_is_lambda_identity(solenoid):
    rng = np.random.default_rng(1)
    pts = np.column_stack(
        [rng.random(10), rng.uniform(-0.6, 0.6, 10), rng.uniform(-0.6, 0.6, 10)]
    )
    D = solenoid.derivative(pts)
    lam = solenoid.parameters["lam"]
    assert np.allclose(D[:, 1:, 1:], lam * np.eye(2))


def test_skew_center_fiber_derivative_range(skew):
    a = skew.parameters["a"]
    ts = np.linspace(0.0, 1.0, 1001)
    pts = np.column_stack([np.zeros_like(ts), ts])
    dd = skew.derivative(pts)[:, 1, 1]
    assert np.all(dd >= 1.0 - 2.0 * np.pi * a - 1e-12)
    assert np.all(dd <= 1.0 + 2.0 * np.pi * a + 1e-12)
    assert np.all(np.abs(dd) > 0.3)


@pytest.mark.parametrize("name", ["cat_map", "solenoid", "skew_center"])
def test_forward_inverse_identity(name):
    sys = builtin_system(name)
    rng = np.random.default_rng(5)
    lo, hi = sys.attractor_box[:, 0], sys.attractor_box[:, 1]
    pts = lo + (hi - lo) * rng.random((200, sys.state_dim))
    if name == "solenoid":
        # land on the attractor first so the branch choice is meaningful
        for _ in range(40):
            pts = sys.forward(pts)
    err = np.linalg.norm(sys.displacement(sys.forward(sys.inverse(pts)), pts), axis=1)
    assert np.max(err) < 1e-12


@pytest.mark.parametrize("name", ["cat_map", "solenoid", "skew_center"])
def test_attracting_box(name):
    sys = builtin_system(name)
    rng = np.random.default_rng(9)
    lo, hi = sys.attractor_box[:, 0], sys.attractor_box[:, 1]
    pts = lo + (hi - lo) * rng.random((500, sys.state_dim))
    img = sys.forward(pts)
    assert np.all(sys.in_box(img, slack=1e-12))


def test_derivative_invertible_on_samples():
    for name in ["cat_map", "solenoid", "skew_center"]:
        sys = builtin_system(name)
        pts = orbit_sample(sys, 100, walkers=10, burn_in=50, seed=2)
        conds = np.linalg.cond(sys.derivative(pts))
        assert np.all(np.isfinite(conds))


def test_cocycle_composition(cat, solenoid):
    for sys in (cat, solenoid):
        pts = orbit(sys, orbit_sample(sys, 1, walkers=1, burn_in=200, seed=3)[0], 30)
        D = sys.derivative(pts[:-1])
        prod_all = np.eye(sys.state_dim)
        for i in range(30):
            prod_all = D[i] @ prod_all
        prod_a = np.eye(sys.state_dim)
        for i in range(12):
            prod_a = D[i] @ prod_a
        prod_b = np.eye(sys.state_dim)
        for i in range(12, 30):
            prod_b = D[i] @ prod_b
        rel = np.linalg.norm(prod_b @ prod_a - prod_all) / np.linalg.norm(prod_all)
        assert rel < 1e-10


# ---------------------------------------------------------------------------
# Lyapunov spectra against analytic values


def test_lyapunov_cat(cat):
    spec = lyapunov_spectrum(cat, np.array([0.31, 0.47]), n_steps=100_000)
    assert spec[0] == pytest.approx(CAT_LOG, abs=1e-6)
    assert spec[1] == pytest.approx(-CAT_LOG, abs=1e-6)


def test_lyapunov_solenoid(solenoid):
    x0 = orbit_sample(solenoid, 1, walkers=1, burn_in=300, seed=4)[0]
    spec = lyapunov_spectrum(solenoid, x0, n_steps=100_000)
    assert spec[0] == pytest.approx(np.log(2.0), abs=1e-3)
    assert spec[1] == pytest.approx(np.log(0.25), abs=1e-3)
    assert spec[2] == pytest.approx(np.log(0.25), abs=1e-3)


def test_lyapunov_degenerate_center_zero():
    sys = builtin_system("skew_center", a=0.0, b=0.0)
    spec = lyapunov_spectrum(sys, np.array([0.3, 0.6]), n_steps=2_000)
    assert spec[1] == pytest.approx(0.0, abs=1e-8)


def test_lyapunov_volume_consistency(skew):
    x0 = np.array([0.21, 0.55])
    n = 20_000
    spec = lyapunov_spectrum(skew, x0, n_steps=n, transient=500)
    pts = orbit(skew, x0, n + 500)[500:]
    logdet = np.mean(np.log(np.abs(np.linalg.det(skew.derivative(pts[:n])))))
    assert np.sum(spec) == pytest.approx(logdet, abs=1e-6)


def test_lyapunov_overflow_diagnostic(cat):
    with pytest.raises(NumericalError):
        lyapunov_spectrum(cat, np.array([0.1, 0.2]), n_steps=2000, qr_cadence=900)


def test_lyapunov_requires_min_steps(cat):
    with pytest.raises(ValueError):
        lyapunov_spectrum(cat, np.array([0.1, 0.2]), n_steps=10)


# ---------------------------------------------------------------------------
# bundle estimation


def test_frames_along_synthetic_three_blocks():
    rng = np.random.default_rng(0)
    n = 400
    base = np.diag([4.0, 2.0, 0.5])
    derivs = np.array([base for _ in range(n)])
    spec = SplittingSpec((1, 1, 1), center_count=1)
    frames, lo, hi = frames_along(derivs, spec, buffer=100)
    mid = frames[frames.shape[0] // 2]
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1.0
        assert abs(abs(mid[:, j] @ e) - 1.0) < 1e-10


def test_estimate_bundles_cat(cat):
    pts = orbit(cat, np.array([0.32, 0.46]), 1400)
    frame = estimate_bundles(cat, default_splitting(cat), pts, buffer=400)
    eu = CAT_EU / np.linalg.norm(CAT_EU)
    es = CAT_ES / np.linalg.norm(CAT_ES)
    for i in [0, len(frame) // 2, len(frame) - 1]:
        assert abs(abs(frame.block(i, 0)[:, 0] @ eu) - 1.0) < 1e-9
        assert abs(abs(frame.block(i, 1)[:, 0] @ es) - 1.0) < 1e-9


def test_estimate_bundles_solenoid_stable_plane(solenoid):
    x0 = orbit_sample(solenoid, 1, walkers=1, burn_in=300, seed=6)[0]
    pts = orbit(solenoid, x0, 1400)
    frame = estimate_bundles(solenoid, default_splitting(solenoid), pts, buffer=400)
    for i in [0, len(frame) // 2, len(frame) - 1]:
        block = frame.block(i, 1)  # should span the (x, y) plane
        assert np.max(np.abs(block[0, :])) < 1e-8


def test_estimate_bundles_skew_center_fiber(skew):
    pts = orbit(skew, np.array([0.17, 0.58]), 1400)
    frame = estimate_bundles(skew, default_splitting(skew), pts, buffer=400)
    for i in [0, len(frame) // 2, len(frame) - 1]:
        ec = frame.block(i, 1)[:, 0]
        assert abs(ec[0]) < 1e-8  # exactly the fiber direction


def test_bundle_invariance_under_push(cat):
    pts = orbit(cat, np.array([0.11, 0.83]), 1300)
    frame = estimate_bundles(cat, default_splitting(cat), pts, buffer=400)
    D = cat.derivative(frame.points[:-1])
    for i in range(0, len(frame) - 1, 50):
        for j in range(2):
            pushed = D[i] @ frame.block(i, j)
            pushed = pushed / np.linalg.norm(pushed)
            target = frame.block(i + 1, j)
            angle = np.arccos(np.clip(abs(float(pushed[:, 0] @ target[:, 0])), 0, 1))
            assert angle < 1e-6


# ---------------------------------------------------------------------------
# domination


def test_certify_domination_cat(cat):
    pts = orbit(cat, np.array([0.37, 0.21]), 1600)
    frame = estimate_bundles(cat, default_splitting(cat), pts, buffer=450)
    est = certify_domination(cat, frame, E_block=0, F_block=1, n_max=60)
    assert est.lam <= 0.15
    assert est.C <= 1.01
    assert est.alpha_holder >= 0.5


def test_certify_domination_solenoid_exact_rate(solenoid):
    x0 = orbit_sample(solenoid, 1, walkers=1, burn_in=300, seed=8)[0]
    pts = orbit(solenoid, x0, 1600)
    frame = estimate_bundles(solenoid, default_splitting(solenoid), pts, buffer=450)
    est = certify_domination(solenoid, frame, E_block=0, F_block=1, n_max=50)
    # exact contraction 1/4 against expansion 2: rate 1/8; the constant
    # absorbs the bounded leaf-slope ratio of the oblique unstable frames
    assert est.lam <= 0.13
    assert est.C <= 2.5


def test_certified_constants_hold_on_fresh_orbit(cat):
    pts = orbit(cat, np.array([0.37, 0.21]), 1600)
    frame = estimate_bundles(cat, default_splitting(cat), pts, buffer=450)
    est = certify_domination(cat, frame, E_block=0, F_block=1, n_max=60)
    pts2 = orbit(cat, np.array([0.63, 0.77]), 1600)
    frame2 = estimate_bundles(cat, default_splitting(cat), pts2, buffer=450)
    assert verify_domination(cat, est, frame2, 0, 1, n_max=60)


def test_domination_refuted_for_same_block(cat):
    pts = orbit(cat, np.array([0.25, 0.15]), 1600)
    frame = estimate_bundles(cat, default_splitting(cat), pts, buffer=450)
    with pytest.raises(DominationRefuted):
        certify_domination(cat, frame, E_block=0, F_block=0, n_max=40)


# ---------------------------------------------------------------------------
# unstable plaques


def test_plaque_cat_is_straight_eigenline(cat):
    x = np.array([0.5, 0.5])
    plq = unstable_plaque(cat, default_splitting(cat), x, radius=0.1, depth=25)
    eu = CAT_EU / np.linalg.norm(CAT_EU)
    expected = x + plq.params[:, None] * eu[None, :] * np.sign(plq.tangent[0, 0] * eu[0])
    resid = np.max(np.linalg.norm(cat.displacement(plq.points, expected), axis=1))
    assert resid < 1e-10


def test_plaque_depth_zero_is_flat_seed(cat):
    x = np.array([0.4, 0.3])
    plq = unstable_plaque(cat, default_splitting(cat), x, radius=0.05, depth=0)
    chords = np.diff(plq.points, axis=0)
    chords = chords / np.linalg.norm(chords, axis=1, keepdims=True)
    assert np.max(np.abs(np.diff(chords, axis=0))) < 1e-12


def test_plaque_solenoid_forward_self_consistency(solenoid):
    path = orbit_paths(solenoid, walkers=1, steps=300, burn_in=400, seed=10)[0]
    x, fx = path[-2], path[-1]
    spec = default_splitting(solenoid)
    plq_x = unstable_plaque(solenoid, spec, x, 0.12, depth=30, history=path[:-1])
    plq_fx = unstable_plaque(solenoid, spec, fx, 0.12, depth=30, history=path)
    image = solenoid.forward(plq_x.points)
    # match image points to the target plaque through its graph coordinate
    e = plq_fx.tangent[:, 0]
    u_img = solenoid.displacement(image, fx) @ e
    inside = np.abs(u_img) < 0.9 * plq_fx.radius
    u_tgt = solenoid.displacement(plq_fx.points, fx) @ e
    order = np.argsort(u_tgt)
    dists = []
    for k in np.nonzero(inside)[0]:
        cols = [np.interp(u_img[k], u_tgt[order], plq_fx.points[order, i])
                for i in range(3)]
        dists.append(np.linalg.norm(image[k] - np.array(cols)))
    # accuracy floor of the piecewise-linear 129-node graph representation
    assert np.max(dists) < 5e-4


def test_plaque_backward_contraction(solenoid):
    from srblab.systems import unstable_plaque_chain

    path = orbit_paths(solenoid, walkers=1, steps=300, burn_in=400, seed=11)[0]
    x = path[-1]
    spec = default_splitting(solenoid)
    chain = unstable_plaque_chain(solenoid, spec, x, 0.1, depth=25, history=path)
    u = np.array([-0.04, 0.05])
    orbs = chain.leaf_orbit(u, 20)  # (depth+1, 2, 3)
    d0 = solenoid.distance(orbs[0, 0], orbs[0, 1])
    for n in range(1, 21):
        dn = solenoid.distance(orbs[n, 0], orbs[n, 1])
        assert dn <= 3.0 * (0.62**n) * d0


def test_plaque_chain_levels_are_consistent(solenoid):
    """Forward image of each chain level must land on the previous level."""
    from srblab.systems import unstable_plaque_chain

    path = orbit_paths(solenoid, walkers=1, steps=300, burn_in=400, seed=13)[0]
    spec = default_splitting(solenoid)
    chain = unstable_plaque_chain(solenoid, spec, path[-1], 0.1, depth=20, history=path)
    u = np.linspace(-0.05, 0.05, 7)
    orbs = chain.leaf_orbit(u, 10)
    for j in range(10, 0, -1):
        fwd = solenoid.forward(orbs[j])
        err = solenoid.distance(fwd, orbs[j - 1])
        assert np.max(err) < 5e-4


def test_plaque_radius_too_large(solenoid):
    path = orbit_paths(solenoid, walkers=1, steps=300, burn_in=400, seed=12)[0]
    with pytest.raises(NumericalError):
        unstable_plaque(
            solenoid, default_splitting(solenoid), path[-1], radius=0.45,
            depth=25, history=path,
        )


def test_full_dimension_plaque_patch():
    sys = builtin_system("skew_center", a=0.05, b=0.2, base_degree=4, center_slope=2)
    spec = default_splitting(sys)
    x = np.array([0.3, 0.7])
    plq = unstable_plaque(sys, spec, x, radius=0.05, depth=0, n_lead=2)
    assert plq.param_dim == 2
    assert np.allclose(plq.points[plq.points.shape[0] // 2], x, atol=0.08)


def test_backward_orbit_consistency(cat):
    x = np.array([0.39, 0.58])
    back = backward_orbit(cat, x, 10)
    for i in range(10):
        err = cat.distance(cat.forward(back[i + 1]), back[i])
        assert err < 1e-12
