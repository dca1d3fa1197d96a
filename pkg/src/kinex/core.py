"""Shared domain types for the finite-N engine and the density integrator.

Wealth is a conserved, non-negative scalar. A population is a finite vector
of agent wealths with a cached total; a wealth grid is a discretized density
on a wealth axis. Both flavors of state share the same three constraints:
non-negativity, fixed normalization, and a conserved first moment.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger("kinex.core")

# Relative threshold below which a negative post-exchange wealth is treated
# as floating-point cancellation and snapped to exactly 0.
SNAP_TOL = 1e-15

# Marker for a per-exchange resampled lambda (Uniform[0,1]).
UNIFORM_LAMBDA = "uniform"


class ContractViolation(RuntimeError):
    """An operation received values that a correct caller can never produce.

    Raised e.g. when an exchange delta lies outside the admissible support;
    this signals a buggy rule implementation and is never clamped silently.
    """


class RuleKind(enum.Enum):
    CLASSIC_LOSER = "loser"
    YARD_SALE = "yardsale"
    UNBIASED_LOSER = "unbiased-loser"
    IGLESIAS_ALMEIDA = "iglesias-almeida"


@dataclass(frozen=True)
class RuleSpec:
    """An exchange rule plus its single parameter.

    ``lam`` is either a fixed fraction in [0, 1] or the marker
    ``UNIFORM_LAMBDA`` ("uniform"), meaning lambda is resampled per exchange
    from Uniform[0,1]. The Iglesias-Almeida rule has no lambda and rejects
    one.
    """

    kind: RuleKind
    lam: float | str | None = None

    def __post_init__(self):
        if self.kind is RuleKind.IGLESIAS_ALMEIDA:
            if self.lam is not None:
                raise ValueError("iglesias-almeida takes no lambda")
            return
        if self.lam is None:
            raise ValueError(f"{self.kind.value} requires lambda")
        if isinstance(self.lam, str):
            if self.lam != UNIFORM_LAMBDA:
                raise ValueError(f"unknown lambda marker {self.lam!r}")
            return
        lam = float(self.lam)
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {lam}")
        object.__setattr__(self, "lam", lam)

    @property
    def random_lambda(self) -> bool:
        return self.lam == UNIFORM_LAMBDA

    @property
    def unbiased(self) -> bool:
        """True for the three rules with zero expected gain for both agents."""
        return self.kind is not RuleKind.CLASSIC_LOSER


@dataclass(frozen=True)
class ExchangeOutcome:
    """One realized pairwise exchange: agent ``i`` gains ``delta``, ``j`` loses it.

    ``coin`` is the sampled fair-coin / win-probability draw (0/1 for the
    loser-rule epsilon, -1/+1 for the coin-flip eta); ``lambda_used`` is the
    lambda value in effect for this exchange (1.0 recorded for the
    parameter-free Iglesias-Almeida rule).
    """

    i: int
    j: int
    delta: float
    coin: int
    lambda_used: float


class Population:
    """Agent wealth vector with a cached conserved total.

    The cached total is set at construction and never recomputed during a
    run; exchanges move a single delta between two entries, so the sum is
    preserved to within accumulated rounding. ``validate_population`` audits
    the drift on demand.
    """

    __slots__ = ("wealth", "total")

    def __init__(self, wealth, total: float | None = None):
        w = np.asarray(wealth, dtype=np.float64).copy()
        if w.ndim != 1 or w.size < 2:
            raise ValueError("population needs at least 2 agents")
        if np.any(w < 0.0) or not np.all(np.isfinite(w)):
            raise ValueError("negative or non-finite wealth is not allowed")
        self.wealth = w
        self.total = math.fsum(w) if total is None else float(total)

    @property
    def size(self) -> int:
        return self.wealth.size

    @property
    def mean(self) -> float:
        return self.total / self.wealth.size

    def copy(self) -> "Population":
        return Population(self.wealth, total=self.total)

    def __repr__(self):
        return f"Population(N={self.size}, total={self.total!r})"


@dataclass
class CheckReport:
    """Result of a population audit; empty ``violations`` means valid."""

    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_population(pop: Population, rel_tol: float = 1e-12) -> CheckReport:
    """Report non-negativity and cached-total consistency violations."""
    report = CheckReport()
    neg = np.nonzero(pop.wealth < 0.0)[0]
    for idx in neg:
        report.violations.append(
            f"non-negativity violation at index {idx}: {pop.wealth[idx]!r}"
        )
    actual = math.fsum(pop.wealth)
    scale = max(abs(pop.total), abs(actual), 1e-300)
    if abs(actual - pop.total) > rel_tol * scale:
        report.violations.append(
            f"total mismatch: cached {pop.total!r}, actual {actual!r}"
        )
    return report


def apply_exchange(pop: Population, out: ExchangeOutcome) -> Population:
    """Apply one exchange in place: ``w[i] += delta``, ``w[j] -= delta``.

    The delta must lie in [-x_i, x_j] evaluated at pre-exchange wealths.
    Values outside that support by more than SNAP_TOL * mean wealth raise
    ContractViolation; sub-SNAP_TOL overshoot is cancellation noise and the
    losing side is snapped to exactly 0 (the absorbing-state tests depend on
    exact zeros). Returns ``pop`` for convenience.
    """
    w = pop.wealth
    i, j, delta = out.i, out.j, out.delta
    if i == j:
        raise ContractViolation("exchange requires two distinct agents")
    xi = w[i]
    xj = w[j]
    snap = SNAP_TOL * max(pop.mean, 1e-300)
    if delta < -xi:
        if -xi - delta > snap:
            raise ContractViolation(
                f"delta {delta!r} below -x_i = {-xi!r} (agents {i},{j})"
            )
        log.debug("snapping agent %d to exact 0 (delta overshoot %.3e)", i, -xi - delta)
        delta = -xi
    elif delta > xj:
        if delta - xj > snap:
            raise ContractViolation(
                f"delta {delta!r} above x_j = {xj!r} (agents {i},{j})"
            )
        log.debug("snapping agent %d to exact 0 (delta overshoot %.3e)", j, delta - xj)
        delta = xj
    w[i] = xi + delta
    w[j] = xj - delta
    return pop


class RngStream:
    """Deterministic random stream: PCG64 keyed by (seed, stream id).

    Identical (seed, stream) pairs reproduce bitwise-identical sample
    sequences; distinct stream ids are statistically independent (numpy
    SeedSequence spawn keys). The generator family is fixed repo-wide so
    that every stochastic path in the artifact shares one reproducibility
    contract.
    """

    __slots__ = ("seed", "stream", "gen")

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def uniform(self) -> float:
        return float(self.gen.random())

    def integer(self, n: int) -> int:
        """One draw uniform on {0, ..., n-1}."""
        return int(self.gen.integers(0, n))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"


class WealthGrid:
    """Discretized wealth density: cell edges, per-cell masses, quadrature points.

    Edges start at 0 and increase strictly. The first cell's representative
    point is exactly 0 (the absorbing state must be resolvable on every
    grid); the remaining representative points are cell centers. Total mass
    must be 1 within 1e-10 and all masses non-negative.
    """

    __slots__ = ("edges", "masses", "centers")

    MASS_TOL = 1e-10

    def __init__(self, edges, masses, centers=None):
        e = np.asarray(edges, dtype=np.float64)
        m = np.asarray(masses, dtype=np.float64).copy()
        if e.ndim != 1 or e.size < 2 or e[0] != 0.0 or np.any(np.diff(e) <= 0):
            raise ValueError("edges must strictly increase from 0")
        if m.shape != (e.size - 1,):
            raise ValueError("masses must have one entry per cell")
        if np.any(m < 0.0):
            raise ValueError("negative cell mass is not allowed")
        if centers is None:
            c = 0.5 * (e[:-1] + e[1:])
            c[0] = 0.0
        else:
            c = np.asarray(centers, dtype=np.float64)
            if c.shape != m.shape or np.any(np.diff(c) <= 0) or c[0] < 0.0:
                raise ValueError("representative points must strictly increase")
        if abs(math.fsum(m) - 1.0) > self.MASS_TOL:
            raise ValueError(
                f"grid mass {math.fsum(m)!r} deviates from 1 beyond {self.MASS_TOL}"
            )
        self.edges = e
        self.masses = m
        self.centers = c

    @property
    def cells(self) -> int:
        return self.masses.size

    @property
    def mean(self) -> float:
        """First moment, <x> = sum(mass * representative point)."""
        return float(np.dot(self.masses, self.centers))

    def total_mass(self) -> float:
        return math.fsum(self.masses)

    def with_masses(self, masses) -> "WealthGrid":
        return WealthGrid(self.edges, masses, centers=self.centers)

    def copy(self) -> "WealthGrid":
        return self.with_masses(self.masses)

    def __repr__(self):
        return (
            f"WealthGrid(cells={self.cells}, x_max={self.edges[-1]!r}, "
            f"mean={self.mean!r})"
        )


SNAPSHOT_HEADER = "# kinex population N={n} t={t}"


def format_float(x: float) -> str:
    """Canonical decimal text: 12 significant digits, locale-independent."""
    x = float(x) + 0.0  # normalize -0.0
    return format(x, ".12g")


def write_snapshot(path, pop: Population, t: float = 0) -> None:
    """Write a population snapshot: header line, one wealth per line."""
    t_text = str(int(t)) if float(t) == int(t) else format_float(t)
    lines = [SNAPSHOT_HEADER.format(n=pop.size, t=t_text)]
    lines.extend(format_float(x) for x in pop.wealth)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_snapshot(path) -> Population:
    """Read a population snapshot written by ``write_snapshot``."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("# kinex population"):
        raise ValueError(f"{path}: not a kinex population snapshot")
    values = [float(ln) for ln in lines[1:]]
    return Population(values)
