"""Pliss-time extraction over finite real sequences.

Two results are implemented on finite windows, both with O(N) scans whose
outputs are pinned to O(N^2) brute-force oracles in the test suite:

* ``pliss_set`` / ``verify_pliss_like``: given a sequence bounded by C that
  is <= gamma1 on a high-density index set L, a high-density set J of start
  indices exists from which *every* forward partial sum stays below
  n * gamma2.  The density threshold rho below which L must leave gaps is
  an explicit function of (gamma1, gamma2, C, epsilon).

* ``classic_pliss_times``: the classical statement — when the full-window
  average is at least c2, the indices n whose backward averages all stay
  >= c1 make up at least a (c2-c1)/(C-c1) fraction of the window.

Densities are window densities #(S ∩ [0,N)) / N throughout; the liminf /
limsup asymptotics of the infinite-sequence statements are not represented.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import HypothesisViolation

__all__ = [
    "RealSequence",
    "PlissParams",
    "IndexSet",
    "PlissReport",
    "rho_threshold",
    "pliss_set",
    "verify_pliss_like",
    "classic_pliss_times",
    "contracting_pliss_times",
]


@dataclass(frozen=True)
class RealSequence:
    """A finite real sequence with a uniform bound |a_i| <= C."""

    values: np.ndarray
    bound: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size < 1:
            raise ValueError("sequence must be a nonempty 1-d array")
        if not self.bound > 0:
            raise ValueError("bound C must be positive")
        if not np.all(np.isfinite(values)):
            raise ValueError("sequence values must be finite")
        if np.max(np.abs(values)) > self.bound:
            raise ValueError(
                f"|values| exceed the declared bound C={self.bound}"
            )

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class PlissParams:
    """Rates (gamma1 < gamma2, max(0, gamma2) < C) and a density budget epsilon."""

    gamma1: float
    gamma2: float
    C: float
    epsilon: float

    def __post_init__(self):
        if not self.gamma1 < self.gamma2:
            raise ValueError("gamma1 < gamma2 required")
        if not max(0.0, self.gamma2) < self.C:
            raise ValueError("max(0, gamma2) < C required")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")


@dataclass(frozen=True)
class IndexSet:
    """A sorted set of nonnegative integers inside a finite window [0, horizon)."""

    indices: np.ndarray
    horizon: int

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        object.__setattr__(self, "indices", idx)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.horizon):
            raise ValueError("indices must lie in [0, horizon)")

    def __len__(self):
        return self.indices.size

    @property
    def density(self) -> float:
        return self.indices.size / self.horizon

    def contains(self, j: int) -> bool:
        pos = np.searchsorted(self.indices, j)
        return pos < self.indices.size and self.indices[pos] == j


@dataclass(frozen=True)
class PlissReport:
    """Outcome of one density-extraction trial."""

    rho_used: float
    density_of_L: float
    J: IndexSet
    density_of_J: float
    conclusion_holds: bool
    hypothesis_met: bool = field(default=True)


def rho_threshold(params: PlissParams) -> float:
    """Density margin rho for the gap set L.

    Half of min{1, (g2-g1)/(2(2C-g1)), (g2-g1)/(C-g1) * eps}; the halving
    keeps the value strictly below the admissible supremum and makes the
    choice deterministic.
    """
    g1, g2, C, eps = params.gamma1, params.gamma2, params.C, params.epsilon
    rho = 0.5 * min(
        1.0,
        (g2 - g1) / (2.0 * (2.0 * C - g1)),
        (g2 - g1) / (C - g1) * eps,
    )
    assert rho > 0.0
    return rho


def pliss_set(seq: RealSequence, gamma2: float) -> IndexSet:
    """Start indices whose forward partial sums all stay below n * gamma2.

    j belongs to the set iff sum(a[j:j+n]) <= n * gamma2 for every n >= 1
    with j + n <= len(seq).  Computed with a single suffix scan: writing
    S for the prefix sums of (a - gamma2), the condition reads
    max_{m > j} S[m] <= S[j].
    """
    a = seq.values
    n = a.size
    S = np.concatenate(([0.0], np.cumsum(a - gamma2)))
    # suffix_max[j] = max(S[j+1:]) for j in [0, n)
    suffix_max = np.maximum.accumulate(S[::-1])[::-1][1:]
    members = np.nonzero(suffix_max <= S[:-1])[0]
    return IndexSet(members, horizon=n)


def verify_pliss_like(
    seq: RealSequence, L: IndexSet, params: PlissParams
) -> PlissReport:
    """Check the density-extraction conclusion on one finite window.

    Requires a_i <= gamma1 on L.  When L has window density > 1 - rho, the
    returned set J (from ``pliss_set`` at rate gamma2) must have density
    > 1 - epsilon; ``conclusion_holds`` records that implication, and is
    vacuously true when the density hypothesis is not met.
    """
    a = seq.values
    n = a.size
    if L.horizon != n:
        raise ValueError("index set horizon must match the sequence length")
    if len(L) == 0:
        raise ValueError("empty L rejected; construct a nonempty index set")
    if np.any(a[L.indices] > params.gamma1):
        bad = int(L.indices[np.argmax(a[L.indices] > params.gamma1)])
        raise HypothesisViolation(
            f"a[{bad}] = {a[bad]} exceeds gamma1 = {params.gamma1} on L"
        )
    if seq.bound > params.C:
        raise HypothesisViolation(
            f"sequence bound {seq.bound} exceeds params.C = {params.C}"
        )
    rho = rho_threshold(params)
    J = pliss_set(seq, params.gamma2)
    density_L = L.density
    density_J = J.density
    hypothesis_met = density_L > 1.0 - rho
    conclusion = (not hypothesis_met) or (density_J > 1.0 - params.epsilon)
    return PlissReport(
        rho_used=rho,
        density_of_L=density_L,
        J=J,
        density_of_J=density_J,
        conclusion_holds=conclusion,
        hypothesis_met=hypothesis_met,
    )


def classic_pliss_times(seq: RealSequence, c1: float, c2: float) -> IndexSet:
    """End indices n whose backward averages all stay at or above c1.

    Requires c1 < c2 <= C and a full-window average >= c2 (expansion
    orientation).  Returns all n in [1, N] with
    sum(a[m:n]) >= c1 * (n - m) for every 0 <= m < n; the classical count
    is at least (c2 - c1)/(C - c1) * N.  The returned horizon is N + 1
    because valid times range up to N inclusive.
    """
    a = seq.values
    N = a.size
    if not c1 < c2:
        raise ValueError("c1 < c2 required")
    if c2 > seq.bound:
        raise ValueError("c2 must not exceed the sequence bound C")
    total = float(np.sum(a))
    if total < c2 * N:
        raise HypothesisViolation(
            f"window average {total / N:.6g} is below c2 = {c2}"
        )
    T = np.concatenate(([0.0], np.cumsum(a - c1)))
    # n qualifies iff T[n] >= max(T[0:n]); track the running prefix max.
    prefix_max = np.maximum.accumulate(T)[:-1]
    times = np.nonzero(T[1:] >= prefix_max)[0] + 1
    return IndexSet(times, horizon=N + 1)


def contracting_pliss_times(seq: RealSequence, c1: float, c2: float) -> IndexSet:
    """Sign-flipped adapter: times from which forward sums stay below c1.

    Serves the contraction orientation: requires window average <= c2 and
    c2 < c1, and returns end indices n with sum(a[m:n]) <= c1 * (n - m)
    for all m < n.
    """
    flipped = RealSequence(-seq.values, seq.bound)
    return classic_pliss_times(flipped, -c1, -c2)
