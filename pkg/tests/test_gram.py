import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iqclearn.gram import (
    GramMatrix,
    TrajectoryError,
    batch_gram,
    compute_gram,
    read_archive,
    write_archive,
)
from iqclearn.lti import FilterBank, filter_bank_apply, make_highpass1, make_lowpass1, tf_from_coeffs
from iqclearn.plant import Trajectory


def _delay_bank():
    lo, hi = make_lowpass1(1.0), make_highpass1(1.0)
    return FilterBank([tf_from_coeffs([1], [1])], [lo, hi, lo * hi], name="delay")


def _random_trajectories(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        size = int(rng.integers(17, 300))
        dt = float(10 ** rng.uniform(-3, -1))
        out.append(Trajectory(dt, rng.standard_normal(size), rng.standard_normal(size),
                              {"i": i}))
    return out


# --- quadrature oracles -----------------------------------------------------


def test_sinusoid_oracles():
    # one full period on a uniform grid with step close to 1e-3
    n = 6283
    t = np.linspace(0, 2 * np.pi, n + 1)
    z = np.vstack([np.sin(t), np.cos(t)])
    G = compute_gram(z, t[1] - t[0])
    assert G.matrix[0, 0] == pytest.approx(np.pi, abs=1e-5)
    assert G.matrix[1, 1] == pytest.approx(np.pi, abs=1e-5)
    assert abs(G.matrix[0, 1]) <= 1e-5


def test_sinusoid_oracles_at_unit_millisecond():
    dt = 1e-3
    t = dt * np.arange(6284)
    z = np.vstack([np.sin(t), np.cos(t)])
    G = compute_gram(z, dt)
    # exact integrals over [0, T] with T = 6.283
    T = t[-1]
    ss = T / 2 - np.sin(2 * T) / 4
    sc = np.sin(T) ** 2 / 2
    assert G.matrix[0, 0] == pytest.approx(ss, abs=1e-5)
    assert G.matrix[0, 1] == pytest.approx(sc, abs=1e-5)
    assert G.matrix[1, 1] == pytest.approx(T - ss, abs=1e-5)


def test_trapezoid_matches_numpy():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((3, 101))
    G = compute_gram(z, 0.1)
    ref = np.array([[np.trapezoid(z[i] * z[j], dx=0.1) for j in range(3)] for i in range(3)])
    assert np.allclose(G.matrix, ref, rtol=1e-12, atol=1e-14)


def test_gram_is_symmetric_and_read_only():
    G = compute_gram(np.random.default_rng(2).standard_normal((4, 50)), 0.01, n_zw=1)
    assert np.array_equal(G.matrix, G.matrix.T)
    with pytest.raises(ValueError):
        G.matrix[0, 0] = 1.0


def test_block_views():
    G = GramMatrix(np.diag([1.0, 2.0, 3.0]), 1)
    assert G.n_z == 3 and G.n_zw == 1 and G.n_zv == 2
    assert np.array_equal(G.ww, [[1.0]])
    assert np.array_equal(G.vv, np.diag([2.0, 3.0]))
    assert G.trace == 6.0


def test_gram_validation():
    with pytest.raises(ValueError):
        GramMatrix(np.zeros((2, 3)), 0)
    with pytest.raises(ValueError):
        GramMatrix(np.eye(2), 3)
    with pytest.raises(ValueError):
        compute_gram(np.ones((2, 1)), 0.1)
    z = np.ones((2, 10))
    z[1, 4] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        compute_gram(z, 0.1)
    with pytest.raises(ValueError, match="overflow"):
        compute_gram(np.full((2, 10), 1e200), 0.1)


# --- invariants -------------------------------------------------------------


def test_psd_over_random_trajectories():
    grams = batch_gram(_random_trajectories(1000), _delay_bank())
    assert len(grams) == 1000
    for G in grams:
        assert np.linalg.eigvalsh(G.matrix).min() >= -1e-8 * G.trace


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10.0))
def test_amplitude_scaling(seed, a):
    (tr,) = _random_trajectories(1, seed)
    bank = _delay_bank()
    G1 = batch_gram([tr], bank)[0].matrix
    G2 = batch_gram([Trajectory(tr.dt, a * tr.v, a * tr.w)], bank)[0].matrix
    assert np.allclose(G2, a * a * G1, rtol=1e-10, atol=1e-12 * a * a * np.abs(G1).max())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_pairing_equals_supply_integral(seed):
    (tr,) = _random_trajectories(1, seed)
    bank = _delay_bank()
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((bank.n_z, bank.n_z))
    M = B + B.T
    G = batch_gram([tr], bank)[0]
    z = filter_bank_apply(bank, tr.w, tr.v, tr.dt)
    supply = np.trapezoid(np.einsum("it,ij,jt->t", z, M, z), dx=tr.dt)
    assert G.pair(M) == pytest.approx(supply, rel=1e-9, abs=1e-12)


def test_batch_order_and_workers():
    trs = _random_trajectories(12, 5)
    bank = _delay_bank()
    serial = batch_gram(trs, bank)
    threaded = batch_gram(trs, bank, workers=4)
    for a, b in zip(serial, threaded):
        assert np.array_equal(a.matrix, b.matrix)
        assert a.meta == b.meta
    assert [g.meta["i"] for g in serial] == list(range(12))
    assert serial[0].meta["dt"] == trs[0].dt


def test_batch_empty():
    assert batch_gram([], _delay_bank()) == []


def test_batch_reports_failing_index():
    trs = _random_trajectories(3, 1)
    bad = Trajectory(trs[1].dt, trs[1].v.copy(), trs[1].w.copy())
    bad.w[3] = np.inf
    with pytest.raises(TrajectoryError) as err:
        batch_gram([trs[0], bad, trs[2]], _delay_bank())
    assert err.value.index == 1


# --- archive ----------------------------------------------------------------


def _round_trip(grams, header=None):
    buf = io.StringIO()
    write_archive(buf, grams, header)
    buf.seek(0)
    return buf.getvalue(), read_archive(buf)


def test_archive_round_trip_is_exact():
    grams = batch_gram(_random_trajectories(20, 3), _delay_bank())
    _, (head, back) = _round_trip(grams, {"note": "x"})
    assert head["count"] == 20 and head["n_zw"] == 1 and head["n_zv"] == 3
    assert head["note"] == "x"
    for a, b in zip(grams, back):
        assert np.array_equal(a.matrix, b.matrix)
        assert a.meta == b.meta and b.n_zw == 1


def test_archive_empty():
    _, (head, back) = _round_trip([], {"n_z": 4, "n_zw": 1})
    assert back == [] and head["count"] == 0


def test_archive_rejects_mixed_layout():
    with pytest.raises(ValueError):
        write_archive(io.StringIO(), [GramMatrix(np.eye(2), 1), GramMatrix(np.eye(3), 1)])


def test_archive_rejects_truncation():
    text, _ = _round_trip(batch_gram(_random_trajectories(5, 4), _delay_bank()))
    lines = text.splitlines(keepends=True)
    with pytest.raises(ValueError, match="truncated"):
        read_archive(io.StringIO("".join(lines[:-1])))


def test_archive_rejects_short_record():
    text, _ = _round_trip([GramMatrix(np.eye(2), 1)])
    lines = text.splitlines(keepends=True)
    lines[-1] = lines[-1].rsplit("\t", 1)[0] + "\n"
    with pytest.raises(ValueError):
        read_archive(io.StringIO("".join(lines)))


def test_archive_rejects_invalid_flag_and_format():
    buf = io.StringIO()
    write_archive(buf, [GramMatrix(np.eye(2), 1)], {"valid": False})
    text = buf.getvalue()
    with pytest.raises(ValueError, match="invalid"):
        read_archive(io.StringIO(text))
    with pytest.raises(ValueError):
        read_archive(io.StringIO("no header\n"))
    bad = text.replace("iqclearn-gram-archive/1", "other/9")
    with pytest.raises(ValueError, match="format"):
        read_archive(io.StringIO(bad))
