import json

import numpy as np
import pytest

from jacmatch import nn
from jacmatch import noise_lab as N
from jacmatch.autodiff import ops
from jacmatch.nn import Activations
from oracles import slope_1d

SIGMAS = [0.2, 0.1, 0.05, 0.025]


def linear_net(weight, bias=None):
    weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
    k, d = weight.shape
    net = nn.Network((d,), [], {"out": nn.Dense(d, k)})
    net.params = {"head.out.weight": weight,
                  "head.out.bias": np.zeros(k) if bias is None else np.asarray(bias, float)}
    return net


class SquareNet(nn.Network):
    """f(x) = x^2 in one dimension; not expressible with the stock layers."""

    def __init__(self):
        super().__init__((1,), [], {"out": nn.Dense(1, 1)})
        self.params = {"head.out.weight": np.ones((1, 1)), "head.out.bias": np.zeros(1)}

    def run(self, x, params=None, heads=None):
        x = x if hasattr(x, "node") else nn.Tensor(x)
        return Activations({"out": ops.square(x)}, {})


def sigmoid_pair(seed, dim=2, k=2):
    return (nn.mlp([dim, 5, k], "sigmoid").init_params(seed),
            nn.mlp([dim, 4, k], "sigmoid").init_params(seed + 1000))


def relu_breakpoint_pair():
    """Teacher 2*relu(x) (breakpoint at 0), student the identity."""
    t = nn.Network((1,), [nn.Dense(1, 1), nn.ReLU()], {"out": nn.Dense(1, 1)})
    t.params = {"trunk.0.weight": np.ones((1, 1)), "trunk.0.bias": np.zeros(1),
                "head.out.weight": 2 * np.ones((1, 1)), "head.out.bias": np.zeros(1)}
    return t, linear_net([[1.0]])


# expected_loss

def test_linear_pair_closed_form():
    rep = N.expected_loss("squared", linear_net([[2.0]]), linear_net([[1.0]]), np.array([3.0]),
                          N.NoiseModel(0.1))
    assert abs(rep.expected_loss - 9.01) <= 1e-12
    assert abs(rep.analytic_value - 9.01) <= 1e-12
    assert rep.order >= 20 and rep.stderr is None


def test_sigma_zero_returns_loss_at_x():
    t, s = sigmoid_pair(0)
    x = np.array([0.2, -0.1])
    rep = N.expected_loss("squared", t, s, x, N.NoiseModel(0.0))
    want = np.sum((t.forward(x).data - s.forward(x).data) ** 2)
    assert rep.expected_loss == want


def test_quadrature_dimension_and_order_limits():
    net = nn.mlp([5, 2, 1]).init_params(0)
    with pytest.raises(ValueError, match="dimension"):
        N.expected_loss("squared", net, net, np.zeros(5), N.NoiseModel(0.1))
    t, s = sigmoid_pair(0)
    with pytest.raises(ValueError, match="order"):
        N.expected_loss("squared", t, s, np.zeros(2), N.NoiseModel(0.1), ("gauss-hermite", 10))
    with pytest.raises(ValueError, match="2 samples"):
        N.expected_loss("squared", t, s, np.zeros(2), N.NoiseModel(0.1), ("monte-carlo", 1))


def test_quadrature_agrees_with_large_monte_carlo():
    t, s = sigmoid_pair(3)
    x = np.array([0.4, -0.6])
    q = N.expected_loss("squared", t, s, x, N.NoiseModel(0.3))
    m = N.expected_loss("squared", t, s, x, N.NoiseModel(0.3), ("monte-carlo", 10 ** 6), seed=11)
    assert abs(q.expected_loss - m.expected_loss) <= 3 * m.stderr


def test_monte_carlo_calibration():
    t, s = sigmoid_pair(4, dim=3)
    x = np.array([0.1, 0.5, -0.3])
    noise = N.NoiseModel(0.4)
    truth = N.expected_loss("squared", t, s, x, noise).expected_loss
    hits = 0
    for seed in range(100):
        m = N.expected_loss("squared", t, s, x, noise, ("monte-carlo", 10 ** 4), seed=seed)
        hits += abs(m.expected_loss - truth) <= 2 * m.stderr
    assert hits >= 95


def test_monte_carlo_independent_of_jobs():
    t, s = sigmoid_pair(5)
    x = np.array([0.0, 1.0])
    a = N.expected_loss("squared", t, s, x, N.NoiseModel(0.2), ("monte-carlo", 20_000), seed=3)
    b = N.expected_loss("squared", t, s, x, N.NoiseModel(0.2), ("monte-carlo", 20_000), seed=3, jobs=3)
    assert a.to_dict() == b.to_dict()


def test_report_is_json_serializable():
    t, s = sigmoid_pair(6)
    rep = N.expected_loss("cross-entropy", t, s, np.zeros(2), N.NoiseModel(0.1))
    assert json.loads(json.dumps(rep.to_dict()))["kind"] == "cross-entropy"


# analytic_expansion

def test_expansion_exact_for_linear_nets():
    t = linear_net([[1.0, 2.0], [0.5, -1.0]], bias=[0.3, 0.0])
    s = linear_net([[0.0, 1.0], [1.5, 0.5]])
    x = np.array([0.7, -0.2])
    rep = N.expected_loss("squared", t, s, x, N.NoiseModel(0.3))
    assert abs(rep.expected_loss - rep.analytic_value) <= 1e-12


def test_expansion_zero_for_identical_nets():
    t, _ = sigmoid_pair(7)
    assert N.analytic_expansion("squared", t, t.copy(), np.array([0.3, 0.3]), 0.2) == 0.0


def test_squared_expansion_linear_student():
    W = np.array([[1.0, -1.0], [2.0, 0.5]])
    s = linear_net(W)
    x = np.array([0.5, 1.0])
    y = np.array([1.0, 0.0])
    got = N.analytic_expansion("penalty-squared", None, s, x, 0.2, y=y)
    want = np.sum((y - W @ x) ** 2) + 0.04 * np.sum(W ** 2)
    assert abs(got - want) <= 1e-14


# scaling study

def test_quadratic_pair_residual_is_fourth_moment():
    study = N.residual_scaling_study("squared", SquareNet(), linear_net([[0.0]]), np.array([0.0]), SIGMAS)
    np.testing.assert_allclose(study.residuals, 3 * np.array(SIGMAS) ** 4, rtol=1e-10)
    assert abs(study.slope - 4.0) <= 1e-6


def test_linear_pair_study_reports_exact_case():
    study = N.residual_scaling_study("squared", linear_net([[2.0]]), linear_net([[1.0]]),
                                     np.array([3.0]), SIGMAS)
    assert study.status == "exact" and study.slope is None
    assert not any(study.included)


def test_random_1d_sigmoid_pair_slope_matches_oracle():
    # frozen from tests/oracles/slope_1d.py (independent trapezoid-rule oracle)
    oracle_slope = 2.021455266724784
    pt, ps = slope_1d.pair_params()
    t = nn.mlp([1, 4, 1], "sigmoid")
    t.params = pt
    s = nn.mlp([1, 4, 1], "sigmoid")
    s.params = ps
    study = N.residual_scaling_study("squared", t, s, np.array([slope_1d.POINT]), SIGMAS)
    np.testing.assert_allclose(study.residuals, slope_1d.residuals(), rtol=1e-6)
    assert abs(study.slope - oracle_slope) <= 1e-4


def test_curvature_corrected_residual_has_slope_four():
    for seed in range(5):
        t, s = sigmoid_pair(seed, dim=2)
        x = np.random.default_rng(seed).normal(size=2)
        study = N.residual_scaling_study("squared", t, s, x, SIGMAS, with_curvature=True)
        assert 3.5 <= study.slope <= 4.5


def test_curvature_term_matches_finite_differences():
    t, s = sigmoid_pair(9, dim=2)
    x = np.array([0.3, -0.4])
    d = lambda z: t.forward(z).data - s.forward(z).data
    h = 1e-4
    trace = sum((d(x + h * e) - 2 * d(x) + d(x - h * e)) / h ** 2 for e in np.eye(2))
    want = 0.01 * float(d(x) @ trace)
    assert abs(N.curvature_term(t, s, x, 0.1) - want) <= 1e-8


@pytest.mark.parametrize("kind", N.KINDS)
def test_residual_monotone_as_sigma_shrinks(kind):
    t, s = sigmoid_pair(12)
    study = N.residual_scaling_study(kind, t, s, np.array([0.2, -0.5]), SIGMAS, y=np.array([0.0, 1.0]))
    assert all(a >= b for a, b in zip(study.residuals, study.residuals[1:]))


def test_study_preconditions():
    t, s = sigmoid_pair(0)
    with pytest.raises(ValueError, match="at least 4"):
        N.residual_scaling_study("squared", t, s, np.zeros(2), [0.1, 0.05, 0.01])
    with pytest.raises(ValueError, match="span"):
        N.residual_scaling_study("squared", t, s, np.zeros(2), [0.1, 0.09, 0.08, 0.07])


def test_fourth_order_bound_on_random_pairs():
    # |expected - expansion| <= 10 sigma^4 c, with c = residual / sigma^4 at the largest sigma
    failures = []
    for seed in range(20):
        t, s = sigmoid_pair(100 + seed, dim=2)
        x = np.random.default_rng(seed).normal(size=2)
        study = N.residual_scaling_study("squared", t, s, x, SIGMAS)
        coef = study.residuals[0] / SIGMAS[0] ** 4
        ok = all(r <= 10 * coef * sg ** 4 for r, sg in zip(study.residuals, SIGMAS))
        if not ok:
            failures.append((seed, study.slope))
    assert not failures, f"pairs violating the sigma^4 bound (seed, slope): {failures}"


# truncated noise and exactness

def test_truncated_second_moment_matches_rejection_sampling():
    noise = N.NoiseModel(0.5, "truncated-gaussian", 0.6)
    rng = np.random.default_rng(0)
    z = 0.5 * rng.standard_normal((2_000_000, 2))
    kept = z[np.linalg.norm(z, axis=1) <= 0.6]
    want = kept[:, 0].var()
    se = want * np.sqrt(2.0 / len(kept))
    assert abs(noise.coordinate_variance(2) - want) <= 4 * se
    samples = noise.sample(np.random.default_rng(1), 200_000, 2)
    assert np.linalg.norm(samples, axis=1).max() <= 0.6 + 1e-12


def test_relu_breakpoint_exact_inside_linear_region():
    t, s = relu_breakpoint_pair()
    cert = N.piecewise_exactness_check(t, s, np.array([1.0]), radius=0.5, sigma=0.4)
    assert cert.passed and cert.pattern_checked
    assert cert.coordinate_variance < 0.16


def test_zero_radius_trivially_exact():
    t, s = relu_breakpoint_pair()
    assert N.piecewise_exactness_check(t, s, np.array([1.0]), radius=0.0, sigma=0.4).passed


def test_sigmoid_negative_control_fails():
    t = nn.mlp([1, 3, 1], "sigmoid").init_params(2)
    t.params["trunk.0.weight"] = 4 * t.params["trunk.0.weight"]
    cert = N.piecewise_exactness_check(t, linear_net([[1.0]]), np.array([1.0]), radius=0.5, sigma=0.4)
    assert not cert.passed and not cert.pattern_checked


def test_ball_crossing_breakpoint_rejected():
    t, s = relu_breakpoint_pair()
    with pytest.raises(N.PatternViolation) as err:
        N.piecewise_exactness_check(t, s, np.array([0.2]), radius=0.5, sigma=0.4)
    assert err.value.sample[0] < 0


def test_noise_model_validation():
    with pytest.raises(ValueError):
        N.NoiseModel(-1.0)
    with pytest.raises(ValueError):
        N.NoiseModel(0.1, "truncated-gaussian")
