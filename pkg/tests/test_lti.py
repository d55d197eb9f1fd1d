import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal

from iqclearn.lti import (
    FilterBank,
    StateSpace,
    StabilityError,
    TransferFunction,
    _simulate_recursive,
    filter_bank_apply,
    filter_from_dict,
    freq_response,
    log_spaced_bank,
    make_band_pass,
    make_butterworth2,
    make_highpass1,
    make_laguerre_basis,
    make_lowpass1,
    simulate_filter,
    tf_from_coeffs,
    tf_multiply,
    to_state_space,
    tustin,
)

GRID = np.logspace(-3, 3, 200)


def _all_constructors():
    return [
        tf_from_coeffs([1], [1, 1]),
        tf_from_coeffs([1, 0], [1, 1]),
        tf_from_coeffs([1], [1, 1]) * tf_from_coeffs([1, 0], [1, 1]),
        make_band_pass(0.1, 10 ** -0.75),
        make_band_pass(1.0, 1.0),
        make_lowpass1(2.0),
        make_highpass1(0.5),
        make_butterworth2(np.pi, "low"),
        make_butterworth2(np.pi, "high"),
        *make_laguerre_basis([1.0, 2.0, complex(0.5, 1.5), complex(0.5, -1.5)], 4),
    ]


# --- construction -----------------------------------------------------------


def test_low_and_high_pass_from_coeffs():
    phi1 = tf_from_coeffs([1], [1, 1])
    phi2 = tf_from_coeffs([1, 0], [1, 1])
    assert np.allclose(phi1.den, [1, 1]) and np.allclose(phi1.num, [1])
    assert phi2(1.0) == pytest.approx((1 + 1j) / 2)
    assert abs(phi2(1.0)) ** 2 == pytest.approx(0.5)


def test_identity_filter():
    ident = tf_from_coeffs([1], [1])
    assert ident.order == 0
    assert np.allclose(ident(GRID), 1.0)


def test_denominator_is_normalized():
    tf = TransferFunction([2.0], [2.0, 4.0])
    assert tf.den[0] == 1.0
    assert np.allclose(tf.num, [1.0]) and np.allclose(tf.den, [1.0, 2.0])


def test_unstable_rejected_with_root():
    with pytest.raises(StabilityError) as err:
        tf_from_coeffs([1], [1, -2])
    assert err.value.root == pytest.approx(2.0)


def test_marginal_pole_rejected():
    with pytest.raises(StabilityError):
        tf_from_coeffs([1], [1, 0])
    with pytest.raises(StabilityError):
        tf_from_coeffs([1], [1, 0, 1])


def test_improper_rejected():
    with pytest.raises(ValueError, match="improper"):
        tf_from_coeffs([1, 0, 0], [1, 1])


def test_coefficients_read_only():
    tf = tf_from_coeffs([1], [1, 1])
    with pytest.raises(ValueError):
        tf.den[0] = 5.0


def test_product_band_pass():
    phi3 = tf_multiply(tf_from_coeffs([1], [1, 1]), tf_from_coeffs([1, 0], [1, 1]))
    assert np.allclose(phi3.num, [1, 0])
    assert np.allclose(phi3.den, [1, 2, 1])
    assert np.allclose(make_band_pass(1.0, 1.0).den, phi3.den)
    assert np.allclose(make_band_pass(1.0, 1.0)(GRID), phi3(GRID))


def test_product_zero_factor():
    zero = TransferFunction([0.0], [1.0, 1.0])
    prod = zero * tf_from_coeffs([1], [1, 2])
    assert np.allclose(prod(GRID), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.05, 20.0), min_size=3, max_size=3),
       st.lists(st.floats(0.0, 5.0), min_size=3, max_size=3))
def test_multiply_associative_commutative(poles, gains):
    a, b, c = (TransferFunction([g, 1.0], [1.0, p]) for g, p in zip(gains, poles))
    left = (a * b) * c
    right = a * (b * c)
    swapped = c * (b * a)
    assert np.allclose(left.num, right.num, atol=1e-12 * np.abs(left.num).max())
    assert np.allclose(left.den, right.den, rtol=1e-12)
    assert np.allclose(left.den, swapped.den, rtol=1e-12)
    assert np.allclose(left.num, swapped.num, atol=1e-12 * np.abs(left.num).max())


# --- frequency response -----------------------------------------------------


def test_high_pass_response_values():
    phi2 = tf_from_coeffs([1, 0], [1, 1])
    assert freq_response(phi2, 0.0) == 0
    assert np.allclose(4 * np.abs(phi2(GRID)) ** 2, 4 * GRID**2 / (1 + GRID**2))


def test_band_pass_peak_near_geometric_mean():
    lo, hi = 0.1, 10 ** -0.75
    bp = make_band_pass(lo, hi)
    om = np.logspace(-3, 2, 5001)
    peak = om[np.argmax(np.abs(bp(om)))]
    assert peak == pytest.approx(np.sqrt(lo * hi), rel=0.01)


def test_band_pass_rejects_nonpositive():
    with pytest.raises(ValueError):
        make_band_pass(0.0, 1.0)
    with pytest.raises(ValueError):
        make_band_pass(1.0, -2.0)


def test_butterworth_half_power_and_complementarity():
    low = make_butterworth2(np.pi, "low")
    high = make_butterworth2(np.pi, "high")
    assert abs(low(np.pi)) ** 2 == pytest.approx(0.5)
    assert high(0.0) == 0
    assert np.allclose(np.abs(low(GRID)) ** 2 + np.abs(high(GRID)) ** 2, 1.0)
    with pytest.raises(ValueError):
        make_butterworth2(0.0)
    with pytest.raises(ValueError):
        make_butterworth2(1.0, "band")


def test_section_v_bank_has_no_dead_band():
    decls = log_spaced_bank(0.1, 10.0, 9)
    filters = [f for d in decls for f in filter_from_dict(d)]
    assert len(filters) == 10
    first_interior = make_band_pass(0.1, 10 ** -0.75)
    assert np.allclose(filters[1](GRID), first_interior(GRID))
    om = np.logspace(-2, 2, 400)
    cover = np.max([np.abs(f(om)) for f in filters], axis=0)
    assert cover.min() >= 0.2


# --- Laguerre ---------------------------------------------------------------


def test_laguerre_first_function():
    (phi,) = make_laguerre_basis([1.0], 1)
    assert np.allclose(phi.num, [np.sqrt(2)])
    assert np.allclose(phi.den, [1, 1])


def test_laguerre_empty():
    assert make_laguerre_basis([1.0], 0) == []


def test_laguerre_second_function():
    basis = make_laguerre_basis([1.0, 1.0], 2)
    ref = TransferFunction(np.sqrt(2) * np.array([1.0, -1.0]), [1.0, 2.0, 1.0])
    assert np.allclose(basis[1](GRID), ref(GRID))


def _gram_h2(basis):
    # int phi_i conj(phi_j) dw / 2 pi over the full axis, via symmetry of real filters
    om = np.concatenate([[0.0], np.logspace(-5, 5, 200001)])
    P = np.array([tf(om) for tf in basis])
    integrand = np.real(P[:, None, :] * P[None, :, :].conj())
    return 2 * np.trapezoid(integrand, om, axis=-1) / (2 * np.pi)


@pytest.mark.parametrize("poles", [
    [1.0, 1.0],
    [0.5, 2.0, 3.0],
    [complex(1.0, 2.0), complex(1.0, -2.0), 0.7],
])
def test_laguerre_orthonormal(poles):
    basis = make_laguerre_basis(poles, len(poles))
    assert np.allclose(_gram_h2(basis), np.eye(len(poles)), atol=2e-4)


def test_laguerre_rejects_bad_poles():
    with pytest.raises(ValueError):
        make_laguerre_basis([-1.0], 1)
    with pytest.raises(ValueError):
        make_laguerre_basis([complex(1, 1), 2.0], 2)
    with pytest.raises(ValueError):
        make_laguerre_basis([1.0], 2)


def test_laguerre_declaration_round_trip():
    basis = make_laguerre_basis([1.0, complex(1, 1), complex(1, -1)], 3)
    for tf in basis:
        (again,) = filter_from_dict(tf.desc)
        assert np.allclose(again(GRID), tf(GRID))


# --- realization and discretization ----------------------------------------


def test_state_space_first_order():
    ss = to_state_space(tf_from_coeffs([1], [1, 1]))
    assert np.allclose(ss.A, [[-1]]) and np.allclose(ss.B, [[1]])
    assert np.allclose(ss.C, [[1]]) and ss.D == 0


def test_state_space_static():
    ss = to_state_space(tf_from_coeffs([3.0], [1]))
    assert ss.A.shape == (0, 0) and ss.D == 3.0


def test_state_space_high_pass():
    ss = to_state_space(tf_from_coeffs([1, 0], [1, 1]))
    assert ss.D == 1 and np.allclose(ss.C, [[-1]]) and np.allclose(ss.A, [[-1]])


@pytest.mark.parametrize("tf", _all_constructors(), ids=lambda tf: str(tf.desc)[:40])
def test_realization_matches_transfer_function(tf):
    ss = to_state_space(tf)
    a, b = tf(GRID), ss.freq_response(GRID)
    assert np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-300)) <= 1e-10
    if ss.order:
        assert np.linalg.eigvals(ss.A).real.max() < 0


@pytest.mark.parametrize("tf", _all_constructors()[:6], ids=lambda tf: str(tf.desc)[:40])
def test_tustin_matches_scipy_bilinear(tf):
    dt = 0.01
    ad, bd, cd, dd = tustin(to_state_space(tf), dt)
    nd, ddz = signal.bilinear(tf.num, tf.den, fs=1.0 / dt)
    z = np.exp(1j * np.linspace(0.01, 3.0, 50))
    mine = np.array([(cd @ np.linalg.solve(zz * np.eye(len(ad)) - ad, bd)).item() + dd
                     for zz in z])
    ref = np.polyval(nd, z) / np.polyval(ddz, z)
    assert np.allclose(mine, ref, rtol=1e-9, atol=1e-12)


def test_tustin_degenerate_step_rejected():
    # |1 - dt*lam/2| >= 1 for Hurwitz A, so only a raw unstable realization can hit it
    raw = StateSpace(np.array([[2.0]]), np.array([[1.0]]), np.array([[1.0]]), 0.0)
    with pytest.raises(ValueError, match="degenerate"):
        tustin(raw, 1.0)
    with pytest.raises(ValueError):
        tustin(to_state_space(tf_from_coeffs([1], [1, 1])), 0.0)


def test_simulate_zero_input():
    ss = to_state_space(make_butterworth2(2.0))
    assert np.all(simulate_filter(ss, np.zeros(100), 0.01) == 0)


def test_first_order_step():
    dt = 1e-3
    t = dt * np.arange(int(1 / dt) + 1)
    ss = to_state_space(tf_from_coeffs([1], [1, 1]))
    # the trapezoidal rule sees a jump at t=0 through its midpoint value H(0) = 1/2
    u = np.ones_like(t)
    u[0] = 0.5
    y = simulate_filter(ss, u, dt)
    assert y.size == t.size
    assert y[-1] == pytest.approx(1 - np.exp(-1), abs=1e-4)
    # with u(0) = 1 the bilinear map leads by half a sample
    y1 = simulate_filter(ss, np.ones_like(t), dt)
    assert y1[-1] == pytest.approx(1 - np.exp(-(1 + dt / 2)), abs=1e-6)


@pytest.mark.parametrize("tf", _all_constructors(), ids=lambda tf: str(tf.desc)[:40])
def test_sos_path_matches_recursion(tf):
    rng = np.random.default_rng(0)
    u = rng.normal(size=400)
    ss = to_state_space(tf)
    a = simulate_filter(ss, u, 0.02)
    b = _simulate_recursive(ss, u, 0.02)
    assert np.allclose(a, b, rtol=1e-9, atol=1e-10)


def _steady_state(tf, omega, dt):
    poles = np.abs(tf.poles.real) if tf.order else np.array([1.0])
    settle = max(10.0 / poles.min(), 400 * dt)
    period = 2 * np.pi / omega
    n_periods = 4
    t = dt * np.arange(int((settle + n_periods * period) / dt) + 1)
    y = simulate_filter(to_state_space(tf), np.sin(omega * t), dt)
    tail = t >= t[-1] - n_periods * period
    # least-squares fit of a sin + b cos on the last periods
    X = np.column_stack([np.sin(omega * t[tail]), np.cos(omega * t[tail])])
    a, b = np.linalg.lstsq(X, y[tail], rcond=None)[0]
    return complex(a, b)


@pytest.mark.parametrize("tf", _all_constructors(), ids=lambda tf: str(tf.desc)[:40])
@pytest.mark.parametrize("omega", [0.3, 1.0, 5.0])
def test_steady_state_gain_and_phase(tf, omega):
    dt = 2 * np.pi / (100 * omega)
    est = _steady_state(tf, omega, dt)
    ref = complex(tf(omega))
    if abs(ref) < 1e-3:
        return
    assert abs(est) == pytest.approx(abs(ref), rel=0.01)
    assert abs(np.angle(est / ref)) <= 0.01 * np.pi


def test_filter_bank_channels():
    phi1 = tf_from_coeffs([1], [1, 1])
    phi2 = tf_from_coeffs([1, 0], [1, 1])
    bank = FilterBank([tf_from_coeffs([1], [1])], [phi1, phi2, phi1 * phi2])
    assert (bank.n_zw, bank.n_zv, bank.n_z) == (1, 3, 4)
    rng = np.random.default_rng(1)
    w, v = rng.normal(size=300), rng.normal(size=300)
    z = filter_bank_apply(bank, w, v, 0.01)
    assert z.shape == (4, 300)
    assert np.allclose(z[0], w)
    assert np.allclose(z[2], simulate_filter(to_state_space(phi2), v, 0.01))
    z0 = filter_bank_apply(bank, w, np.zeros(300), 0.01)
    assert np.all(z0[1:] == 0)
    with pytest.raises(ValueError):
        filter_bank_apply(bank, w, v[:-1], 0.01)


def test_identity_bank():
    ident = tf_from_coeffs([1], [1])
    bank = FilterBank([ident], [ident])
    w, v = np.arange(10.0), np.arange(10.0) ** 2
    assert np.allclose(filter_bank_apply(bank, w, v, 0.1), [w, v])


def test_filter_declarations():
    assert np.allclose(filter_from_dict({"kind": "tf", "num": [1], "den": [1, 1]})[0](GRID),
                       1 / (1j * GRID + 1))
    assert filter_from_dict({"kind": "butter2", "cutoff": 2.0, "pass": "high"})[0](0.0) == 0
    assert len(filter_from_dict({"kind": "laguerre", "poles": [1, 2, 3], "n": 3})) == 3
    with pytest.raises(ValueError):
        filter_from_dict({"kind": "nonsense"})
