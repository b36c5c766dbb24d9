import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdlab import system as sy
from pdlab.errors import KernelDimensionUnsupported, ParseError, UnknownName, ValidationError


def test_symbol_examples():
    dw = sy.builtin("damped_wave")
    assert np.array_equal(sy.symbol_A(dw, 1.0, [2.0]), [[0, 2], [2, 0]])
    assert not sy.symbol_A(dw, 3.0, [0.0]).any()
    ch = sy.builtin("chain3")
    tri = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    assert np.array_equal(sy.symbol_A(ch, 1.0, [0.5]), 0.5 * tri)


def test_symbol_batched():
    dw = sy.builtin("damped_wave")
    out = sy.symbol_A(dw, 1.0, np.array([[1.0], [-3.0]]))
    assert out.shape == (2, 2, 2)
    assert np.array_equal(out[1], [[0, -3], [-3, 0]])


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 50))
def test_symbol_linear_in_xi(a, b, x, y, t):
    spec = sy.builtin("chain3")
    lhs = sy.symbol_A(spec, t, [a * x + b * y])
    rhs = a * sy.symbol_A(spec, t, [x]) + b * sy.symbol_A(spec, t, [y])
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-13)


def test_b1_b2_damped_wave():
    r = sy.check_b1_b2(sy.builtin("damped_wave"))
    assert r.b1_ok and r.b2_ok
    assert r.kappa == pytest.approx(1.0)
    assert r.kernel_dim == 1


def test_b1_b2_telegraph():
    r = sy.check_b1_b2(sy.builtin("telegraph"))
    assert r.b2_ok
    assert r.kappa == pytest.approx(2.0)
    assert r.kernel_dim == 1


def test_two_dimensional_kernel_rejected():
    spec = sy.SystemSpec(d=3, n=1, A=(sy.constant(np.eye(3)),), B=sy.constant(np.diag([0.0, 0.0, 1.0])))
    with pytest.raises(KernelDimensionUnsupported):
        sy.check_b1_b2(spec)


def test_kalman_damped_wave():
    r = sy.check_kalman(sy.builtin("damped_wave"), [1.0], [[1.0]])
    assert r.kalman_sigma_min == pytest.approx(1.0)
    assert r.b3_ok


def test_kalman_uncoupled():
    r = sy.check_kalman(sy.builtin("uncoupled_bad"), [1.0], [[1.0]])
    assert r.kalman_sigma_min == 0.0
    assert not r.b3_ok


def test_kalman_chain3_matches_gram_oracle():
    r = sy.check_kalman(sy.builtin("chain3"), [1.0], [[1.0]])
    b = np.diag([0.0, 1.0, 1.0])
    a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float)
    k = np.vstack([b, b @ a, b @ a @ a])
    oracle = np.sqrt(np.linalg.eigvalsh(k.T @ k)[0])
    assert r.kalman_sigma_min > 0
    assert r.kalman_sigma_min == pytest.approx(oracle, rel=1e-10)


@pytest.mark.parametrize("name", ["damped_wave", "damped_wave_bt", "telegraph", "chain3"])
def test_builtins_satisfy_all_hypotheses(name):
    r = sy.certify(sy.builtin(name))
    assert r.all_ok, r.summary()


def test_uncoupled_fails_only_kalman():
    r = sy.certify(sy.builtin("uncoupled_bad"))
    assert r.b1_ok and r.b2_ok and not r.b3_ok
    assert r.first_failure() == "B3"


@pytest.mark.parametrize("name", ["damped_wave", "telegraph", "chain3"])
def test_kalman_even_in_frequency(name):
    spec = sy.builtin(name)
    plus = sy.check_kalman(spec, [1.0, 7.0], [[1.0]]).kalman_sigma_min
    minus = sy.check_kalman(spec, [1.0, 7.0], [[-1.0]]).kalman_sigma_min
    assert plus == pytest.approx(minus, rel=1e-12)


def test_unknown_builtin():
    with pytest.raises(UnknownName):
        sy.builtin("heat")


def test_time_dependent_damping_is_order_zero():
    spec = sy.builtin("damped_wave_bt")
    rep = sy.t_class_report(spec.B, 0, sy.default_t_grid(1.0), kmax=2)
    assert rep["ok"]
    # closed form: |b'(t)| (1 + t) = (1 + t)^-1
    for t in (1.0, 10.0, 100.0):
        assert abs(spec.B.derivative(t, 1)[1, 1]) * (1 + t) == pytest.approx(1 / (1 + t))


def test_t_class_rejects_growth():
    grow = sy.PolynomialMF([np.zeros((1, 1)), np.ones((1, 1))])
    assert not sy.t_class_report(grow, 0, sy.default_t_grid(1.0))["ok"]


def test_fit_t_order():
    f = sy.RationalMF([(2, np.eye(2))])
    assert sy.fit_t_order(f, sy.default_t_grid()) == pytest.approx(2.0)
    assert sy.fit_t_order(sy.constant(np.zeros((2, 2))), [1, 2, 4]) == np.inf


def test_rational_jet_exact():
    f = sy.RationalMF([(0, np.eye(1)), (1.5, 2 * np.eye(1))])
    t = 3.0
    jet = f.jet(t, 3)[:, 0, 0].real
    x = 1 + t
    assert jet[0] == pytest.approx(1 + 2 * x**-1.5)
    assert jet[1] == pytest.approx(2 * -1.5 * x**-2.5)
    assert jet[2] == pytest.approx(2 * 1.5 * 2.5 * x**-3.5)
    assert jet[3] == pytest.approx(2 * -1.5 * 2.5 * 3.5 * x**-4.5)


def test_polynomial_jet_exact():
    f = sy.PolynomialMF([np.eye(1), 3 * np.eye(1), np.eye(1)])
    jet = f.jet(2.0, 3)[:, 0, 0].real
    assert np.allclose(jet, [1 + 6 + 4, 3 + 4, 2, 0])


@pytest.mark.parametrize("t", [0.0, 1.0, 10.0, 300.0])
def test_tabulated_derivative_agrees_with_analytic(t):
    exact = sy.RationalMF([(0, np.diag([0.0, 2.0])), (1, np.diag([0.0, 1.0])), (2.5, [[0, 1], [1, 0]])])
    tab = sy.TabulatedMF(exact, exact.shape)
    je, jt = exact.jet(t, 2), tab.jet(t, 2)
    for k in (1, 2):
        scale = np.linalg.norm(je[k])
        assert np.linalg.norm(je[k] - jt[k]) <= 1e-6 * scale


def test_first_derivative_step_rule():
    assert sy.fd_step(0.0, 1) == pytest.approx(1e-4)
    assert sy.fd_step(99.0, 1) == pytest.approx(1e-2)


def test_jet_inverse_and_product():
    f = sy.RationalMF([(0, [[2.0, 1.0], [0.0, 1.0]]), (1, np.eye(2))])
    j = f.jet(1.5, 4)
    prod = sy.jet_mul(j, sy.jet_inv(j))
    assert np.allclose(prod[0], np.eye(2))
    assert np.allclose(prod[1:], 0, atol=1e-12)


# config files

def test_config_roundtrip_matches_builtin():
    for name in sy.BUILTINS:
        ref = sy.builtin(name)
        text = sy.dump_system(ref)
        got = sy.load_system(text)
        assert got.d == ref.d and got.n == ref.n and got.t0 == ref.t0
        for t in (1.0, 2.5, 40.0):
            assert np.array_equal(got.B(t), ref.B(t))
            assert np.array_equal(got.A[0](t), ref.A[0](t))


def test_config_plain_numbers_accepted():
    text = json.dumps({"d": 2, "n": 1, "A": [[{"e": 0, "C": [[0, 1], [1, 0]]}]],
                       "B": [{"e": 0, "C": [[0, 0], [0, 1]]}]})
    spec = sy.load_system(text)
    assert np.array_equal(spec.B(5.0), np.diag([0, 1]))
    assert spec.t0 == 1.0


def _base_cfg():
    return json.loads(sy.dump_system(sy.builtin("damped_wave")))


def test_config_non_self_adjoint():
    cfg = _base_cfg()
    cfg["A"][0][0]["C"][0][1] = [2.0, 0.0]
    with pytest.raises(ValidationError, match=r"A\[0\] not self-adjoint"):
        sy.load_system(json.dumps(cfg))


def test_config_scalar_state_rejected():
    cfg = {"d": 1, "n": 1, "A": [[{"e": 0, "C": [[1]]}]], "B": [{"e": 0, "C": [[0]]}]}
    with pytest.raises(ValidationError, match="d >= 2"):
        sy.load_system(json.dumps(cfg))


def test_config_unknown_key():
    cfg = _base_cfg()
    cfg["colour"] = "red"
    with pytest.raises(ParseError, match="unknown keys"):
        sy.load_system(json.dumps(cfg))
    cfg = _base_cfg()
    cfg["B"][0]["scale"] = 2
    with pytest.raises(ParseError) as info:
        sy.load_system(json.dumps(cfg))
    assert info.value.field == "B[0]"


def test_config_syntax_error_reports_line():
    with pytest.raises(ParseError) as info:
        sy.load_system('{\n  "d": 2,\n  "n": 1\n  "A": []\n}')
    assert info.value.line == 4


def test_config_bad_matrix_shape():
    cfg = _base_cfg()
    cfg["B"][0]["C"] = [[0, 0]]
    with pytest.raises(ParseError) as info:
        sy.load_system(json.dumps(cfg))
    assert info.value.field == "B[0].C"
