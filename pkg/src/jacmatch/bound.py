"""Dataset-distance bound on transfer loss.

The mean loss over a source set is bounded by the worst loss over a target
set plus an empirical Lipschitz constant times the asymmetric Hausdorff
distance from source to target.  Everything is brute force and exact.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

MAX_PAIRS = 10 ** 7
ROW_BLOCK = 256


def _euclidean_rows(a_block, b):
    # one row of A at a time so every distance has the same reduction order
    return np.stack([np.sqrt(np.sum((b - a) ** 2, axis=1)) for a in a_block])


class MetricSpace:
    """Embedding into R^m plus the Euclidean distance."""

    def __init__(self, embed: Optional[Callable] = None, name: str = "pixel"):
        self._embed = embed
        self.name = name

    @classmethod
    def from_network(cls, net) -> "MetricSpace":
        """Distances between trunk features (the input of the final layer)."""
        return cls(net.features, name="features")

    def embed(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self._embed is None:
            return X.reshape(len(X), -1)
        return np.asarray(self._embed(X), dtype=np.float64).reshape(len(X), -1)

    def distance(self, a, b) -> float:
        """Distance between two already-embedded points."""
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        b = np.asarray(b, dtype=np.float64).reshape(1, -1)
        return float(_euclidean_rows(a[None], b)[0, 0])

    def pairwise(self, A, B, jobs: int = 1) -> np.ndarray:
        """(|A|, |B|) distance matrix between embedded point sets."""
        blocks = [A[i: i + ROW_BLOCK] for i in range(0, len(A), ROW_BLOCK)]
        if jobs > 1 and len(blocks) > 1:
            with ThreadPoolExecutor(jobs) as pool:
                parts = list(pool.map(lambda blk: _euclidean_rows(blk, B), blocks))
        else:
            parts = [_euclidean_rows(blk, B) for blk in blocks]
        return np.concatenate(parts) if parts else np.zeros((0, len(B)))

    def spot_check(self, X, n_triples: int = 100, seed: int = 0, slack: float = 1e-9) -> None:
        """Identity, symmetry and triangle inequality on random triples of embedded points."""
        E = self.embed(X)
        rng = np.random.default_rng(seed)
        for i, j, k in rng.integers(0, len(E), size=(n_triples, 3)):
            dij, dji = self.distance(E[i], E[j]), self.distance(E[j], E[i])
            if self.distance(E[i], E[i]) != 0.0 or abs(dij - dji) > slack:
                raise ValueError(f"metric axioms fail on points {i}, {j}")
            if dij > self.distance(E[i], E[k]) + self.distance(E[k], E[j]) + slack:
                raise ValueError(f"triangle inequality fails on points {i}, {k}, {j}")


PIXEL = MetricSpace()


@dataclass
class Hausdorff:
    value: float
    a_index: int
    b_index: int


def _check_nonempty(A, B):
    if len(A) == 0 or len(B) == 0:
        raise ValueError("point sets must be nonempty")
    if len(A) * len(B) > MAX_PAIRS:
        raise ValueError(f"|A|*|B| = {len(A) * len(B)} exceeds the brute-force limit {MAX_PAIRS}")


def _hausdorff_embedded(EA, EB, metric, jobs=1):
    D = metric.pairwise(EA, EB, jobs)
    nearest = np.argmin(D, axis=1)
    near_d = D[np.arange(len(EA)), nearest]
    a = int(np.argmax(near_d))
    return Hausdorff(float(near_d[a]), a, int(nearest[a])), nearest, near_d


def asymmetric_hausdorff(A, B, metric: MetricSpace = PIXEL, jobs: int = 1) -> Hausdorff:
    """sup over a in A of the distance to the nearest b in B, with the witness pair."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _check_nonempty(A, B)
    return _hausdorff_embedded(metric.embed(A), metric.embed(B), metric, jobs)[0]


@dataclass
class Lipschitz:
    value: float
    pair_index: int
    skipped: int


def empirical_lipschitz(rho, pairs, metric: MetricSpace = PIXEL) -> Lipschitz:
    """max |rho(x1) - rho(x2)| / distance over pairs with positive distance.

    ``rho`` maps a batch of points to per-point losses.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs given")
    X1 = np.asarray([p[0] for p in pairs], dtype=np.float64)
    X2 = np.asarray([p[1] for p in pairs], dtype=np.float64)
    r1 = np.asarray(rho(X1), dtype=np.float64)
    r2 = np.asarray(rho(X2), dtype=np.float64)
    E1, E2 = metric.embed(X1), metric.embed(X2)
    best, where, skipped = -1.0, -1, 0
    for i in range(len(pairs)):
        d = metric.distance(E1[i], E2[i])
        if d == 0:
            skipped += 1
            continue
        ratio = abs(r1[i] - r2[i]) / d
        if ratio > best:
            best, where = ratio, i
    if where < 0:
        raise ValueError("every pair is identical under the metric; Lipschitz constant undefined")
    return Lipschitz(float(best), where, skipped)


def squared_output_loss(teacher, student, teacher_head=None, student_head=None):
    """rho(x) = sum_i (T^i(x) - S^i(x))^2 on a batch."""
    def rho(X):
        t = teacher.predict_logits(np.asarray(X), teacher_head)
        s = student.predict_logits(np.asarray(X), student_head)
        return np.sum((t - s) ** 2, axis=1)
    return rho


@dataclass
class BoundReport:
    lhs: float
    max_term: float
    hausdorff: float
    lipschitz: float
    rhs: float
    slack: float
    holds: bool
    max_index: int
    hausdorff_witness: tuple
    lipschitz_witness: int
    skipped_pairs: int
    metric: str

    def to_dict(self):
        d = asdict(self)
        d["hausdorff_witness"] = list(self.hausdorff_witness)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


ULP_SLACK = 8 * np.finfo(np.float64).eps


def check_dataset_bound(teacher, student, source, target, rho=None, metric: MetricSpace = PIXEL,
                        jobs: int = 1) -> BoundReport:
    """mean rho over ``source`` <= max rho over ``target`` + K * H_a(source, target),
    with K the empirical Lipschitz constant over each source point's nearest target point."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_nonempty(source, target)
    rho = rho or squared_output_loss(teacher, student)
    r_src = np.asarray(rho(source), dtype=np.float64)
    r_tgt = np.asarray(rho(target), dtype=np.float64)
    emb_src, emb_tgt = metric.embed(source), metric.embed(target)
    haus, nearest, near_d = _hausdorff_embedded(emb_src, emb_tgt, metric, jobs)
    lhs = float(np.mean(r_src))
    max_index = int(np.argmax(r_tgt))
    max_term = float(r_tgt[max_index])
    positive = near_d > 0
    if positive.any():
        ratios = np.where(positive, np.abs(r_src - r_tgt[nearest]) / np.where(positive, near_d, 1.0), -1.0)
        lip_index = int(np.argmax(ratios))
        K = float(ratios[lip_index])
    else:
        # every source point coincides with a target point: H_a = 0 and K is irrelevant
        lip_index, K = -1, 0.0
    rhs = max_term + K * haus.value
    holds = lhs <= rhs + ULP_SLACK * max(1.0, abs(rhs))
    return BoundReport(lhs, max_term, haus.value, K, rhs, rhs - lhs, bool(holds), max_index,
                       (haus.a_index, haus.b_index), lip_index, int((~positive).sum()), metric.name)


def superset_monotonicity(source, target, extra, metric: MetricSpace = PIXEL) -> tuple:
    """(H_a(source, target), H_a(source, target + extra))."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    before = asymmetric_hausdorff(source, target, metric).value
    extra = np.asarray(extra, dtype=np.float64)
    if extra.size == 0:
        return before, before
    after = asymmetric_hausdorff(source, np.concatenate([target, extra.reshape((-1,) + target.shape[1:])]),
                                 metric).value
    return before, after
