"""Knowledge-transfer losses: activation, Jacobian and attention matching.

All losses take batched inputs ``x`` of shape ``(N, *input_shape)`` and return
the mean over the batch of the per-sample loss.  Student terms are evaluated
with ``params`` (a name -> Tensor mapping, usually leaves on a training tape)
and stay differentiable with respect to them; teacher terms are constants.

Per-sample input gradients are taken from a single reverse pass over the
batch, which is exact because samples never interact inside a network.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tape, Tensor, input_gradient, ops
from .autodiff.tensor import ShapeError

EPS = 1e-8

FAMILIES = ("squared-error", "cross-entropy")
MODES = ("full", "correct-class", "max-output", "max-attention-pixel")


class VanishingTermWarning(UserWarning):
    """A weighted term is switched on but is identically zero."""


class LossTermError(FloatingPointError):
    def __init__(self, term: str, message: str):
        super().__init__(f"{term}: {message}")
        self.term = term


@dataclass
class LossCounters:
    clamped: int = 0
    degenerate: int = 0

    def as_dict(self):
        return {"clamped": self.clamped, "degenerate": self.degenerate}


@dataclass(frozen=True)
class JacobianStrategy:
    mode: str = "full"
    pool_window: object = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown Jacobian strategy {self.mode!r}; expected one of {MODES}")
        if self.pool_window is not None and self.mode != "max-attention-pixel":
            raise ValueError("pool_window is only meaningful in max-attention-pixel mode")
        if isinstance(self.pool_window, int) and self.pool_window < 1:
            raise ValueError(f"pool_window must be >= 1, got {self.pool_window}")


@dataclass(frozen=True)
class LossSpec:
    """Weights and settings of the composite training loss.

    ``gamma`` weights the attention-Jacobian term when ``tap_pairs`` are given
    and the output-Jacobian term otherwise.  ``attention_weight`` weights the
    attention-map term, ``penalty`` the Jacobian-norm penalty on the student.
    """

    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.0
    sigma: float = 1.0
    family: str = "squared-error"
    temperature: float = 1.0
    jac_strategy: JacobianStrategy = field(default_factory=JacobianStrategy)
    tap_pairs: tuple = ()
    attention_weight: float = 0.0
    penalty: float = 0.0
    ce_head: Optional[str] = None
    match_head: Optional[str] = None
    teacher_head: Optional[str] = None

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "attention_weight", "penalty"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "tap_pairs", tuple(tuple(p) for p in self.tap_pairs))
        if self.tap_pairs and self.gamma > 0 and self.jac_strategy.mode != "max-attention-pixel":
            raise ValueError("tap pairs with gamma > 0 need the max-attention-pixel strategy")


@dataclass
class AttentionMap:
    values: Tensor
    source_tap: Optional[int] = None


# helpers ----------------------------------------------------------------------

def _as_tensor(v):
    return v if isinstance(v, Tensor) else Tensor(v)


def _tape_for(params) -> Tape:
    for p in (params or {}).values():
        if p.tape is not None:
            return p.tape
    return Tape()


def _batched(x, net):
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.shape == net.input_shape:
        x = x[None]
    return x


def _one_hot(y, k):
    y = np.asarray(y)
    if y.ndim == 2:
        if y.shape[1] != k:
            raise ShapeError(f"targets have {y.shape[1]} classes, outputs have {k}")
        return y.astype(np.float64)
    if np.any((y < 0) | (y >= k)):
        raise ValueError(f"labels must lie in [0, {k})")
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y.astype(int)] = 1.0
    return out


def _row_sq_norm(g):
    n = g.shape[0]
    flat = ops.reshape(g, (n, -1))
    return ops.sum(ops.square(flat), axis=1)


def _mean(per_sample):
    return ops.mean(per_sample)


def _safe_unit(v, counters: Optional[LossCounters]):
    """Row-normalize ``v`` (N, m).  Rows of zero norm map to zero and are masked."""
    ss = ops.sum(ops.square(v), axis=1, keepdims=True)
    valid = (ss.data > 0).astype(np.float64)
    bad = int((valid == 0).sum())
    if bad and counters is not None:
        counters.degenerate += bad
    norm = ops.sqrt(ops.add(ss, Tensor(1.0 - valid)))
    return ops.mul(ops.div(v, norm), Tensor(valid)), valid[:, 0]


def _safe_norm(ss):
    """sqrt(ss) with value and gradient exactly 0 where ss == 0."""
    zero = (ss.data == 0).astype(np.float64)
    return ops.mul(ops.sqrt(ops.add(ss, Tensor(zero))), Tensor(1.0 - zero))


class _Pass:
    """One forward pass of a network on a batch with the inputs watched."""

    def __init__(self, net, x, params=None, head=None):
        self.tape = _tape_for(params)
        self.constant = params is None
        self.x = self.tape.watch(_batched(x, net))
        self.head = net._head(head)
        self.acts = net.run(self.x, params=params, heads=[self.head])
        self.logits = self.acts.logits[self.head]

    def input_grad(self, outputs, weights):
        g = input_gradient(outputs, self.x, weights, create_graph=not self.constant)
        return g.detach() if self.constant else g


def _selected_rows(strategy: JacobianStrategy, k, n, y, teacher_logits):
    """List of (N, k) one-hot weight matrices, one per selected output row."""
    mode = strategy.mode
    if mode == "full":
        mats = []
        for i in range(k):
            w = np.zeros((n, k))
            w[:, i] = 1.0
            mats.append(w)
        return mats
    if mode == "correct-class":
        if y is None:
            raise ValueError("correct-class strategy needs labels")
        idx = np.asarray(y).astype(int)
    elif mode == "max-output":
        idx = np.argmax(np.asarray(teacher_logits), axis=1)
    else:
        raise ValueError(f"strategy {mode!r} does not select output rows")
    w = np.zeros((n, k))
    w[np.arange(n), idx] = 1.0
    return [w]


# activation matching ----------------------------------------------------------

def match_activations_sq(teacher_logits, student_logits) -> Tensor:
    """Sum of squared differences; batch mean for 2-D inputs."""
    t = _as_tensor(teacher_logits)
    s = _as_tensor(student_logits)
    if t.shape[-1] != s.shape[-1] or t.ndim != s.ndim:
        raise ShapeError(f"logit shapes differ: teacher {t.shape}, student {s.shape}")
    per = ops.sum(ops.square(ops.sub(t, s)), axis=-1)
    return per if per.ndim == 0 else _mean(per)


# Jacobian matching ------------------------------------------------------------

def match_jacobians_sq(teacher, student, x, strategy: Optional[JacobianStrategy] = None,
                       sigma: float = 1.0, y=None, params=None, student_head=None,
                       teacher_head=None) -> Tensor:
    """sigma^2 * sum over selected rows i of ||grad T^i - grad S^i||^2 (batch mean)."""
    strategy = strategy or JacobianStrategy()
    tp = _Pass(teacher, x, head=teacher_head)
    sp = _Pass(student, x, params, head=student_head)
    n, k = sp.logits.shape
    if tp.logits.shape != sp.logits.shape:
        raise ShapeError(f"logit shapes differ: teacher {tp.logits.shape}, student {sp.logits.shape}")
    total = None
    for w in _selected_rows(strategy, k, n, y, tp.logits.data):
        diff = ops.sub(tp.input_grad(tp.logits, w), sp.input_grad(sp.logits, w))
        sq = _row_sq_norm(diff)
        total = sq if total is None else ops.add(total, sq)
    return ops.mul(_mean(total), Tensor(sigma * sigma))


def _softened_jacobian_rows(p: _Pass, probs, k):
    n = probs.shape[0]
    rows = []
    for i in range(k):
        w = np.zeros((n, k))
        w[:, i] = 1.0
        rows.append(p.input_grad(probs, w))
    return rows


def _ce_distill_terms(teacher, student, x, sigma, temperature, params, student_head,
                      teacher_head, counters, with_jacobian=True):
    tp = _Pass(teacher, x, head=teacher_head)
    sp = _Pass(student, x, params, head=student_head)
    if tp.logits.shape != sp.logits.shape:
        raise ShapeError(f"logit shapes differ: teacher {tp.logits.shape}, student {sp.logits.shape}")
    n, k = sp.logits.shape
    t_probs = ops.softmax(tp.logits, temperature=temperature)
    s_log = ops.log_softmax(sp.logits, temperature=temperature)
    soft_ce = _mean(ops.neg(ops.sum(ops.mul(Tensor(t_probs.data), s_log), axis=1)))
    if not with_jacobian or sigma == 0:
        return soft_ce, Tensor(0.0)
    s_probs = ops.softmax(sp.logits, temperature=temperature)
    small = int((s_probs.data < EPS).sum())
    if small and counters is not None:
        counters.clamped += small
    denom = ops.clamp_min(s_probs, EPS)
    t_rows = _softened_jacobian_rows(tp, t_probs, k)
    s_rows = _softened_jacobian_rows(sp, s_probs, k)
    acc = None
    for i in range(k):
        dot = ops.sum(ops.reshape(ops.mul(t_rows[i], s_rows[i]), (n, -1)), axis=1)
        term = ops.div(dot, denom[:, i])
        acc = term if acc is None else ops.add(acc, term)
    jac = ops.mul(_mean(acc), Tensor(-sigma * sigma))
    return soft_ce, jac


def distill_ce_with_jacobian(teacher, student, x, sigma: float, temperature: float = 1.0,
                             params=None, student_head=None, teacher_head=None,
                             counters: Optional[LossCounters] = None) -> Tensor:
    """Soft-target cross entropy plus its first-order noise regularizer.

    -sum_i T_s^i log S_s^i - sigma^2 sum_i (grad T_s^i . grad S_s^i) / S_s^i,
    with S_s clamped below at 1e-8 in the denominator.
    """
    soft_ce, jac = _ce_distill_terms(teacher, student, x, sigma, temperature, params,
                                     student_head, teacher_head, counters)
    out = ops.add(soft_ce, jac)
    if not np.isfinite(out.data).all():
        bad = "soft-target cross entropy" if not np.isfinite(soft_ce.data).all() else "Jacobian regularizer"
        raise LossTermError("distill_ce_with_jacobian", f"non-finite {bad} after clamping")
    return out


def jacobian_norm_penalty(student, x, y=None, family: str = "squared-error", sigma: float = 1.0,
                          temperature: float = 1.0, params=None, head=None,
                          counters: Optional[LossCounters] = None) -> Tensor:
    """Noise-robustness penalty on the student's input gradients.

    squared-error: sigma^2 sum_i ||grad S^i||^2 over all logits.
    cross-entropy: sigma^2 sum_i y^i ||grad S_s^i||^2 / (S_s^i)^2 with softmax
    outputs clamped below at 1e-8.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown loss family {family!r}")
    sp = _Pass(student, x, params, head=head)
    n, k = sp.logits.shape
    if family == "squared-error":
        acc = None
        for i in range(k):
            w = np.zeros((n, k))
            w[:, i] = 1.0
            sq = _row_sq_norm(sp.input_grad(sp.logits, w))
            acc = sq if acc is None else ops.add(acc, sq)
        return ops.mul(_mean(acc), Tensor(sigma * sigma))
    if y is None:
        raise ValueError("cross-entropy penalty needs targets")
    targets = _one_hot(y, k)
    probs = ops.softmax(sp.logits, temperature=temperature)
    small = int((probs.data < EPS).sum())
    if small and counters is not None:
        counters.clamped += small
    denom = ops.clamp_min(probs, EPS)
    # one reverse pass per nonzero target slot
    order = np.argsort((targets == 0).astype(np.int8), axis=1, kind="stable")
    slots = int((targets != 0).sum(axis=1).max()) if n else 0
    acc = None
    rows = np.arange(n)
    for r in range(slots):
        cls = order[:, r]
        weight = targets[rows, cls]
        w = np.zeros((n, k))
        w[rows, cls] = 1.0
        g = sp.input_grad(probs, w)
        picked = ops.take(denom, rows * k + cls)
        term = ops.mul(ops.div(_row_sq_norm(g), ops.square(picked)), Tensor(weight))
        acc = term if acc is None else ops.add(acc, term)
    if acc is None:
        return Tensor(0.0)
    return ops.mul(_mean(acc), Tensor(sigma * sigma))


# attention --------------------------------------------------------------------

def attention_map(feature, source_tap: Optional[int] = None) -> AttentionMap:
    """Channelwise sum of squares: (C, H, W) -> (H, W), or batched (N, C, H, W) -> (N, H, W)."""
    f = _as_tensor(feature)
    if f.ndim not in (3, 4) or f.shape[-3] < 1:
        raise ShapeError(f"attention_map: expected (C, H, W) or (N, C, H, W), got {f.shape}")
    return AttentionMap(ops.sum(ops.square(f), axis=-3), source_tap)


def _map_values(a):
    return a.values if isinstance(a, AttentionMap) else _as_tensor(a)


def match_attention(a_t, a_s, counters: Optional[LossCounters] = None) -> Tensor:
    """|| a_t/||a_t|| - a_s/||a_s|| ||_2, not squared; batch mean for 3-D maps."""
    t = _map_values(a_t)
    s = _map_values(a_s)
    if t.shape != s.shape:
        raise ShapeError(f"attention map shapes differ: teacher {t.shape}, student {s.shape}")
    single = t.ndim == 2
    n = 1 if single else t.shape[0]
    tu, tv = _safe_unit(ops.reshape(t, (n, -1)), counters)
    su, sv = _safe_unit(ops.reshape(s, (n, -1)), counters)
    ok = Tensor(tv * sv)
    dist = _safe_norm(ops.sum(ops.square(ops.sub(tu, su)), axis=1))
    per = ops.mul(dist, ok)
    return ops.sum(per) if single else _mean(per)


def resolve_pool_window(window, side: int) -> int:
    """Window size from an int, ``None`` (side/5), ``"none"`` (1), ``"full"`` (side) or ``"s/N"``."""
    if window is None:
        w = side // 5
    elif window == "none":
        w = 1
    elif window == "full":
        w = side
    elif isinstance(window, str) and window.startswith("s/"):
        w = side // int(window[2:])
    else:
        w = int(window)
    w = max(w, 1)
    if w > side:
        raise ValueError(f"pool window {w} exceeds attention map side {side}")
    return w


def _pooled_attention(p: _Pass, tap, window):
    if tap not in p.acts.taps:
        raise ValueError(f"trunk position {tap} is not a feature tap of this network")
    amap = attention_map(p.acts.taps[tap], tap).values
    return ops.avgpool2d(amap, window, stride=1)


def match_attention_jacobians(teacher, student, x, tap_pair, pool_window=None, params=None,
                              counters: Optional[LossCounters] = None, return_index: bool = False):
    """Squared distance between unit-normalized input gradients of the pooled
    attention value at the teacher's argmax pixel (ties: first row-major)."""
    t_tap, s_tap = tap_pair
    t_shape = teacher.tap_shape(t_tap)[1:]
    s_shape = student.tap_shape(s_tap)[1:]
    if t_shape != s_shape:
        raise ShapeError(
            f"tap spatial sizes differ: teacher tap {t_tap} {teacher.tap_shape(t_tap)}, "
            f"student tap {s_tap} {student.tap_shape(s_tap)}"
        )
    window = resolve_pool_window(pool_window, min(t_shape))
    tp = _Pass(teacher, x)
    sp = _Pass(student, x, params)
    t_pooled = _pooled_attention(tp, t_tap, window)
    s_pooled = _pooled_attention(sp, s_tap, window)
    n = t_pooled.shape[0]
    flat_t = ops.reshape(t_pooled, (n, -1))
    flat_s = ops.reshape(s_pooled, (n, -1))
    idx = np.argmax(flat_t.data, axis=1)
    w = np.zeros(flat_t.shape)
    w[np.arange(n), idx] = 1.0
    g_t = ops.reshape(tp.input_grad(flat_t, w), (n, -1))
    g_s = ops.reshape(sp.input_grad(flat_s, w), (n, -1))
    tu, tv = _safe_unit(g_t, counters)
    su, sv = _safe_unit(g_s, counters)
    per = ops.mul(ops.sum(ops.square(ops.sub(tu, su)), axis=1), Tensor(tv * sv))
    loss = _mean(per)
    if return_index:
        return loss, np.stack(np.unravel_index(idx, t_pooled.shape[1:]), axis=1)
    return loss


# composite --------------------------------------------------------------------

@dataclass
class TermValue:
    name: str
    weight: float
    raw: float
    weighted: float
    clamped: int = 0
    degenerate: int = 0


def cross_entropy(logits, y) -> Tensor:
    logits = _as_tensor(logits)
    k = logits.shape[-1]
    targets = _one_hot(y, k)
    return _mean(ops.neg(ops.sum(ops.mul(Tensor(targets), ops.log_softmax(logits)), axis=1)))


def composite_loss(spec: LossSpec, x, y, student, params=None, teacher=None):
    """alpha*CE + beta*activation + gamma*Jacobian (+ attention, penalty).

    Returns ``(total, terms)`` where ``terms`` lists a :class:`TermValue` per
    computed term.  Zero-weight terms are skipped entirely.
    """
    needs_teacher = spec.beta > 0 or spec.gamma > 0 or spec.attention_weight > 0
    if needs_teacher and teacher is None:
        raise ValueError("activation, Jacobian or attention terms need a teacher")
    if spec.gamma > 0 and spec.sigma == 0 and not spec.tap_pairs:
        warnings.warn("gamma > 0 with sigma == 0: the Jacobian term vanishes", VanishingTermWarning,
                      stacklevel=2)
    x = _batched(x, student)
    # untaped params: every term is a constant, possibly from its own scratch tape
    constant = params is None or all(p.tape is None for p in params.values())
    terms: list[TermValue] = []
    parts = []

    def add(name, weight, fn):
        counters = LossCounters()
        try:
            value = fn(counters)
        except (ShapeError, ValueError, FloatingPointError) as exc:
            raise type(exc)(f"{name} term: {exc}") from exc
        if not np.isfinite(value.data).all():
            raise LossTermError(name, "non-finite value")
        if constant:
            value = value.detach()
        parts.append(ops.mul(value, Tensor(weight)))
        terms.append(TermValue(name, weight, float(value.data), weight * float(value.data),
                               counters.clamped, counters.degenerate))

    ce_head = spec.ce_head
    match_head = spec.match_head
    if spec.alpha > 0:
        add("ce", spec.alpha,
            lambda c: cross_entropy(student.forward(Tensor(x), ce_head, params), y))
    if spec.family == "squared-error":
        if spec.beta > 0:
            t_logits = teacher.forward(Tensor(x), spec.teacher_head).data
            add("activation", spec.beta,
                lambda c: match_activations_sq(t_logits, student.forward(Tensor(x), match_head, params)))
        if spec.gamma > 0 and not spec.tap_pairs:
            add("jacobian", spec.gamma,
                lambda c: match_jacobians_sq(teacher, student, x, spec.jac_strategy, spec.sigma, y,
                                             params, match_head, spec.teacher_head))
    else:
        jac_on = spec.gamma > 0 and not spec.tap_pairs
        if spec.beta > 0 or jac_on:
            cache = {}

            def pair(c):
                if not cache:
                    cache["v"] = _ce_distill_terms(teacher, student, x, spec.sigma, spec.temperature,
                                                   params, match_head, spec.teacher_head, c, jac_on)
                return cache["v"]
            if spec.beta > 0:
                add("activation", spec.beta, lambda c: pair(c)[0])
            if jac_on:
                add("jacobian", spec.gamma, lambda c: pair(c)[1])
    for t_tap, s_tap in spec.tap_pairs:
        if spec.attention_weight > 0:
            def att(c, t_tap=t_tap, s_tap=s_tap):
                ta = teacher.run(Tensor(x), heads=[]).taps[t_tap]
                sa = student.run(Tensor(x), params=params, heads=[]).taps[s_tap]
                return match_attention(attention_map(ta), attention_map(sa), c)
            add(f"attention@{t_tap}-{s_tap}", spec.attention_weight, att)
        if spec.gamma > 0:
            add(f"attention_jacobian@{t_tap}-{s_tap}", spec.gamma,
                lambda c, t_tap=t_tap, s_tap=s_tap: match_attention_jacobians(
                    teacher, student, x, (t_tap, s_tap), spec.jac_strategy.pool_window, params, c))
    if spec.penalty > 0:
        add("penalty", spec.penalty,
            lambda c: jacobian_norm_penalty(student, x, y, spec.family, spec.sigma, spec.temperature,
                                            params, ce_head, c))
    if not parts:
        raise ValueError("every loss weight is zero")
    total = parts[0]
    for p in parts[1:]:
        total = ops.add(total, p)
    return total, terms
