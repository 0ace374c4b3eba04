"""Numerical checks of noise/Jacobian equivalence.

Compares the expected loss under Gaussian input noise (tensor-product
Gauss-Hermite quadrature or Monte Carlo) with first-order expansions built
from the Jacobian losses, and measures how the gap scales with the noise level.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import stats
from scipy.special import log_softmax, softmax

from . import losses as L
from .autodiff import Tape, grad, ops
from .nn import activation_pattern

KINDS = ("squared", "cross-entropy", "penalty-squared", "penalty-cross-entropy")
MAX_QUADRATURE_DIM = 4
MIN_ORDER = 20
PRECISION_FLOOR = 1e-12
CHUNK = 4096
MIN_SPAN = 8.0


class PatternViolation(ValueError):
    def __init__(self, message, sample):
        super().__init__(message)
        self.sample = sample


@dataclass(frozen=True)
class NoiseModel:
    sigma: float
    kind: str = "gaussian-iid"
    radius: Optional[float] = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.kind not in ("gaussian-iid", "truncated-gaussian"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "truncated-gaussian" and not (self.radius and self.radius > 0):
            raise ValueError("truncated noise needs a radius > 0")

    def coordinate_variance(self, dim: int) -> float:
        """E[xi_j^2] for one coordinate."""
        s2 = self.sigma ** 2
        if self.kind == "gaussian-iid" or s2 == 0:
            return s2
        a2 = (self.radius / self.sigma) ** 2
        return s2 * stats.chi2.cdf(a2, dim + 2) / stats.chi2.cdf(a2, dim)

    def sample(self, rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
        z = rng.standard_normal((n, dim))
        if self.kind == "gaussian-iid":
            return self.sigma * z
        # isotropic: uniform direction times a chi radius truncated at radius / sigma
        direction = z / np.linalg.norm(z, axis=1, keepdims=True)
        top = stats.chi2.cdf((self.radius / self.sigma) ** 2, dim)
        u = rng.uniform(0.0, top, size=n)
        r = self.sigma * np.sqrt(stats.chi2.ppf(u, dim))
        return direction * r[:, None]


@dataclass
class EquivalenceReport:
    kind: str
    sigma: float
    expected_loss: float
    analytic_value: float
    residual: float
    method: str
    order: Optional[int] = None
    n_samples: Optional[int] = None
    stderr: Optional[float] = None
    noise: str = "gaussian-iid"
    coordinate_variance: Optional[float] = None

    def to_dict(self):
        return asdict(self)


# pointwise losses (no autodiff, numpy only) ------------------------------------

def _logits(net, X, head=None):
    X = X.reshape((len(X),) + net.input_shape)
    return net.predict_logits(X, head, batch_size=CHUNK)


def pointwise_loss(kind, teacher, student, X, y=None, temperature: float = 1.0,
                   teacher_head=None, student_head=None) -> np.ndarray:
    """Per-row loss for inputs ``X`` of shape (M, D)."""
    s = _logits(student, X, student_head)
    if kind == "squared":
        return np.sum((_logits(teacher, X, teacher_head) - s) ** 2, axis=1)
    if kind == "cross-entropy":
        pt = softmax(_logits(teacher, X, teacher_head) / temperature, axis=1)
        return -np.sum(pt * log_softmax(s / temperature, axis=1), axis=1)
    target = _targets(y, s.shape[1])
    if kind == "penalty-squared":
        return np.sum((target - s) ** 2, axis=1)
    if kind == "penalty-cross-entropy":
        return -np.sum(target * log_softmax(s / temperature, axis=1), axis=1)
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {KINDS}")


def _targets(y, k):
    if y is None:
        raise ValueError("penalty losses need targets y")
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 0:
        out = np.zeros(k)
        out[int(y)] = 1.0
        return out
    if y.shape != (k,):
        raise ValueError(f"targets of shape {y.shape} do not match {k} outputs")
    return y


# expectation -------------------------------------------------------------------

def gauss_hermite_grid(dim: int, order: int):
    """Nodes (M, dim) and weights (M,) for E over a standard normal in ``dim`` dimensions."""
    nodes, weights = hermegauss(order)
    weights = weights / math.sqrt(2 * math.pi)
    grid = np.array(list(itertools.product(nodes, repeat=dim)))
    w = np.prod(np.array(list(itertools.product(weights, repeat=dim))), axis=1)
    return grid, w


def _parse_method(method):
    if isinstance(method, str):
        method = (method, None)
    name, size = method
    if name == "gauss-hermite":
        return name, MIN_ORDER + 4 if size is None else int(size)
    if name == "monte-carlo":
        return name, 100_000 if size is None else int(size)
    raise ValueError(f"unknown method {name!r}")


def _mc_chunk(args):
    fn, noise, dim, seed, index, size = args
    rng = np.random.default_rng([seed, index])
    values = fn(noise.sample(rng, size, dim))
    mean = values.mean()
    return size, mean, float(((values - mean) ** 2).sum())


def expected_loss(kind, teacher, student, x, noise: NoiseModel, method=("gauss-hermite", None),
                  seed: int = 0, y=None, temperature: float = 1.0, jobs: int = 1,
                  teacher_head=None, student_head=None) -> EquivalenceReport:
    """E over noise of the loss at ``x + noise``, with the first-order expansion alongside."""
    name, size = _parse_method(method)
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    dim = flat.size

    def fn(xi):
        return pointwise_loss(kind, teacher, student, flat[None, :] + xi, y, temperature,
                              teacher_head, student_head)

    analytic = analytic_expansion(kind, teacher, student, x, math.sqrt(noise.coordinate_variance(dim)),
                                  y, temperature, teacher_head, student_head)
    common = dict(kind=kind, sigma=noise.sigma, analytic_value=analytic, noise=noise.kind,
                  coordinate_variance=noise.coordinate_variance(dim))
    if noise.sigma == 0:
        value = float(fn(np.zeros((1, dim)))[0])
        return EquivalenceReport(expected_loss=value, residual=abs(value - analytic), method="exact",
                                 stderr=0.0, **common)
    if name == "gauss-hermite":
        if dim > MAX_QUADRATURE_DIM:
            raise ValueError(f"quadrature needs input dimension <= {MAX_QUADRATURE_DIM}, got {dim}")
        if size < MIN_ORDER:
            raise ValueError(f"quadrature order must be >= {MIN_ORDER}, got {size}")
        if noise.kind != "gaussian-iid":
            raise ValueError("quadrature supports untruncated Gaussian noise only")
        nodes, weights = gauss_hermite_grid(dim, size)
        value = float(weights @ fn(noise.sigma * nodes))
        return EquivalenceReport(expected_loss=value, residual=abs(value - analytic), method=name,
                                 order=size, **common)
    if size < 2:
        raise ValueError("monte-carlo needs at least 2 samples")
    sizes = [min(CHUNK, size - i) for i in range(0, size, CHUNK)]
    tasks = [(fn, noise, dim, seed, i, s) for i, s in enumerate(sizes)]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(_mc_chunk, tasks))
    else:
        parts = [_mc_chunk(t) for t in tasks]
    # pairwise merge of (count, mean, M2), fixed chunk order
    count, mean, m2 = parts[0]
    for c, m, q in parts[1:]:
        delta = m - mean
        total = count + c
        mean = mean + delta * c / total
        m2 = m2 + q + delta * delta * count * c / total
        count = total
    var = m2 / (size - 1)
    return EquivalenceReport(expected_loss=float(mean), residual=abs(float(mean) - analytic),
                             method=name, n_samples=size, stderr=math.sqrt(var / size), **common)


def analytic_expansion(kind, teacher, student, x, sigma: float, y=None, temperature: float = 1.0,
                       teacher_head=None, student_head=None) -> float:
    """Loss at ``x`` plus its sigma^2 Jacobian term, assembled from the loss primitives."""
    xb = np.asarray(x, dtype=np.float64)[None]
    xb = xb.reshape((1,) + student.input_shape)
    if kind == "squared":
        t = teacher.forward(xb, teacher_head)
        s = student.forward(xb, student_head)
        value = L.match_activations_sq(t, s).item()
        if sigma > 0:
            value += L.match_jacobians_sq(teacher, student, xb, L.JacobianStrategy("full"), sigma,
                                          student_head=student_head, teacher_head=teacher_head).item()
        return value
    if kind == "cross-entropy":
        return L.distill_ce_with_jacobian(teacher, student, xb, sigma, temperature,
                                          student_head=student_head, teacher_head=teacher_head).item()
    s = student.forward(xb, student_head).data[0]
    target = _targets(y, s.size)
    if kind == "penalty-squared":
        value = float(np.sum((target - s) ** 2))
        family = "squared-error"
    elif kind == "penalty-cross-entropy":
        value = float(-target @ log_softmax(s / temperature))
        family = "cross-entropy"
    else:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {KINDS}")
    if sigma > 0:
        value += L.jacobian_norm_penalty(student, xb, target[None], family, sigma, temperature,
                                         head=student_head).item()
    return value


def curvature_term(teacher, student, x, sigma: float, teacher_head=None, student_head=None) -> float:
    """sigma^2 * sum_i d_i * trace(Hessian of d_i) for d = teacher - student logits.

    This is the second-order contribution to the expected squared loss that a
    first-order expansion leaves out; it vanishes only where d = 0 or the
    Hessian is traceless.
    """
    tape = Tape()
    xt = tape.watch(np.asarray(x, dtype=np.float64).reshape(student.input_shape))
    d = ops.sub(teacher.forward(xt, teacher_head), student.forward(xt, student_head))
    total = 0.0
    for i in range(d.shape[0]):
        (g,) = grad(d[i], [xt], create_graph=True)
        flat = ops.reshape(g, (-1,))
        trace = 0.0
        for j in range(flat.size):
            (h,) = grad(flat[j], [xt])
            trace += h.data.reshape(-1)[j]
        total += d.data[i] * trace
    return sigma ** 2 * total


# scaling study -----------------------------------------------------------------

@dataclass
class ScalingStudy:
    kind: str
    sigmas: list
    expected: list
    expansion: list
    residuals: list
    included: list
    slope: Optional[float]
    intercept: Optional[float]
    status: str
    method: str
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def fit_loglog_slope(sigmas, residuals):
    slope, intercept = np.polyfit(np.log(sigmas), np.log(residuals), 1)
    return float(slope), float(intercept)


def residual_scaling_study(kind, teacher, student, x, sigmas, method=("gauss-hermite", None),
                           y=None, temperature: float = 1.0, with_curvature: bool = False,
                           seed: int = 0) -> ScalingStudy:
    """Log-log slope of |expected - expansion| against sigma."""
    sigmas = [float(s) for s in sigmas]
    if len(sigmas) < 4:
        raise ValueError("a scaling study needs at least 4 sigma values")
    if min(sigmas) <= 0 or max(sigmas) / min(sigmas) < MIN_SPAN - 1e-9:
        raise ValueError(f"sigma values must be positive and span a factor of at least {MIN_SPAN}")
    if with_curvature and kind != "squared":
        raise ValueError("the curvature correction is defined for the squared loss only")
    expected, expansion, residuals, included, notes = [], [], [], [], []
    name = None
    for s in sigmas:
        rep = expected_loss(kind, teacher, student, x, NoiseModel(s), method, seed, y, temperature)
        name = rep.method
        approx = rep.analytic_value
        if with_curvature:
            approx += float(curvature_term(teacher, student, x, s))
        r = float(abs(rep.expected_loss - approx))
        expected.append(rep.expected_loss)
        expansion.append(approx)
        residuals.append(r)
        ok = bool(r >= PRECISION_FLOOR)
        included.append(ok)
        if not ok:
            notes.append(f"sigma={s:g}: residual {r:.3g} below precision floor, excluded")
    xs = [s for s, ok in zip(sigmas, included) if ok]
    rs = [r for r, ok in zip(residuals, included) if ok]
    if len(xs) < 2:
        return ScalingStudy(kind, sigmas, expected, expansion, residuals, included, None, None,
                            "exact", name, notes + ["no residual above the floor: exact case"])
    slope, intercept = fit_loglog_slope(xs, rs)
    return ScalingStudy(kind, sigmas, expected, expansion, residuals, included, slope, intercept,
                        "ok", name, notes)


# exactness for piecewise-linear networks ----------------------------------------

@dataclass
class ExactnessCertificate:
    passed: bool
    expected_loss: float
    analytic_value: float
    residual: float
    stderr: float
    tolerance: float
    radius: float
    sigma: float
    coordinate_variance: float
    n_samples: int
    pattern_checked: bool
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _piecewise_linear(net):
    try:
        activation_pattern(net, np.zeros(net.input_shape))
    except ValueError:
        return False
    return True


def check_pattern_on_ball(nets, x, radius: float, n: int = 1000, seed: int = 0):
    """Compare activation patterns at ``n`` points on the sphere of ``radius`` around ``x``.

    Raises :class:`PatternViolation` with the first offending point.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng([seed, 0x5A11])
    directions = rng.standard_normal((n, x.size))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    points = x.reshape(1, -1) + radius * directions
    for net in nets:
        ref = activation_pattern(net, x.reshape(net.input_shape))
        pat = activation_pattern(net, points.reshape((n,) + net.input_shape))
        same = np.ones(n, dtype=bool)
        for r, p in zip(ref.relu_signs + ref.pool_indices, pat.relu_signs + pat.pool_indices):
            same &= (p.reshape(n, -1) == r.reshape(1, -1)).all(axis=1)
        if not same.all():
            point = points[int(np.argmin(same))].reshape(x.shape)
            raise PatternViolation(
                f"activation pattern changes inside the ball of radius {radius} at {point.tolist()}",
                point)


def piecewise_exactness_check(teacher, student, x, radius: float, sigma: float,
                              kind: str = "squared", n_samples: int = 100_000, seed: int = 0,
                              boundary_samples: int = 1000, y=None) -> ExactnessCertificate:
    """Expected loss under noise truncated to the ball vs the first-order expansion,
    with sigma^2 replaced by the truncated per-coordinate second moment."""
    x = np.asarray(x, dtype=np.float64)
    notes = []
    if radius == 0:
        value = float(pointwise_loss(kind, teacher, student, x.reshape(1, -1), y)[0])
        return ExactnessCertificate(True, value, value, 0.0, 0.0, 0.0, 0.0, sigma, 0.0, 0, False,
                                    ["radius 0: noise is identically zero"])
    smooth = not (_piecewise_linear(teacher) and _piecewise_linear(student))
    if smooth:
        notes.append("pattern check skipped: network has smooth nonlinearities")
    else:
        # the ball is convex and patterns are region labels, so checking the
        # boundary sphere plus the centre is the sampling certificate
        check_pattern_on_ball([teacher, student], x, radius, boundary_samples, seed)
    noise = NoiseModel(sigma, "truncated-gaussian", radius)
    rep = expected_loss(kind, teacher, student, x, noise, ("monte-carlo", n_samples), seed, y)
    tol = 3.0 * rep.stderr
    notes.append(f"sigma^2 rescaled to truncated second moment {rep.coordinate_variance:.6g}")
    return ExactnessCertificate(rep.residual <= tol, rep.expected_loss, rep.analytic_value,
                                rep.residual, rep.stderr, tol, radius, sigma,
                                rep.coordinate_variance, n_samples, not smooth, notes)


def write_report(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
