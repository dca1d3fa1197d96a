"""Thermodynamic-limit dynamics of binary wealth exchange on a wealth grid.

The transfer kernel of each rule is discretized per ordered cell pair: each
delta atom maps the two post-exchange wealths onto the grid by conservative
two-point splitting (mass is shared between the two representative points
bracketing a post-wealth so that both the split's total mass and its total
wealth are exact). Normalization and zero expected gain therefore survive
discretization to rounding error, which is what makes the monotone-Gini and
condensation statements hold for the discrete system as well.

Time stepping is explicit Euler with adaptive step control: the step is
capped so at most 10% of total mass moves per step, halved whenever a cell
mass would go negative, and halved whenever the Gini index would decrease
(it is a Lyapunov function of the exact dynamics, so a decrease is pure
time-discretization error).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

from .core import RuleKind, RuleSpec, WealthGrid
from .rules import harmonic_transfer

log = logging.getLogger("kinex.master_eq")

__all__ = [
    "LinearScheme",
    "LogScheme",
    "PointMass",
    "UniformBand",
    "Exponential",
    "DiscreteKernel",
    "KernelCheckReport",
    "IntegrationReport",
    "IntegrationAbort",
    "build_grid",
    "build_kernel",
    "check_kernel",
    "rhs",
    "integrate",
    "gini_rate",
    "mobility_bound_check",
    "oligarchy_surrogate",
    "parse_grid_scheme",
    "parse_density",
]

MIN_CELLS = 16
# Fraction of total mass allowed to move in one explicit Euler step.
STEP_MASS_FRACTION = 0.1
# Per-step conservation tolerances (relative to initial mean for the mean).
STEP_MASS_TOL = 1e-12
STEP_MEAN_TOL = 1e-10
# Cumulative truncated wealth (relative) beyond which a run is flagged
# non-conservative.
TRUNCATION_TOL = 1e-8
# Nodes of the Gauss-Legendre mixture standing in for Uniform[0,1] lambda.
LAMBDA_NODES = 8


@dataclass(frozen=True)
class LinearScheme:
    x_max: float
    cells: int


@dataclass(frozen=True)
class LogScheme:
    """Log-spaced cells on [x_min, x_max] plus a dedicated cell at x = 0."""

    x_min: float
    x_max: float
    cells: int


@dataclass(frozen=True)
class PointMass:
    x: float


@dataclass(frozen=True)
class UniformBand:
    a: float
    b: float


@dataclass(frozen=True)
class Exponential:
    mean: float


def parse_grid_scheme(text: str) -> LinearScheme | LogScheme:
    """Parse "linear:<xmax>:<cells>" or "log:<xmin>:<xmax>:<cells>"."""
    parts = text.split(":")
    try:
        if parts[0] == "linear" and len(parts) == 3:
            return LinearScheme(x_max=float(parts[1]), cells=int(parts[2]))
        if parts[0] == "log" and len(parts) == 4:
            return LogScheme(
                x_min=float(parts[1]), x_max=float(parts[2]), cells=int(parts[3])
            )
    except ValueError as exc:
        raise ValueError(f"bad grid spec {text!r}: {exc}") from None
    raise ValueError(f"bad grid spec {text!r}")


def parse_density(text: str) -> PointMass | UniformBand | Exponential:
    """Parse "point:<x>", "uniform:<a>:<b>", or "exp:<mean>"."""
    parts = text.split(":")
    try:
        if parts[0] == "point" and len(parts) == 2:
            return PointMass(x=float(parts[1]))
        if parts[0] == "uniform" and len(parts) == 3:
            return UniformBand(a=float(parts[1]), b=float(parts[2]))
        if parts[0] == "exp" and len(parts) == 2:
            return Exponential(mean=float(parts[1]))
    except ValueError as exc:
        raise ValueError(f"bad density spec {text!r}: {exc}") from None
    raise ValueError(f"bad density spec {text!r}")


def _density_mean(density) -> float:
    if isinstance(density, PointMass):
        return density.x
    if isinstance(density, UniformBand):
        return 0.5 * (density.a + density.b)
    return density.mean


def _grid_axes(scheme) -> tuple[np.ndarray, np.ndarray]:
    """Edges and representative points; the first point is exactly 0.

    Every grid resolves the absorbing state: the first cell's quadrature
    point sits at zero wealth so the kernel's identity row at x = 0 and the
    two-point split of near-zero post-wealths both exist.
    """
    if isinstance(scheme, LinearScheme):
        if scheme.cells < MIN_CELLS:
            raise ValueError(f"need at least {MIN_CELLS} cells")
        if scheme.x_max <= 0:
            raise ValueError("x_max must be positive")
        edges = np.linspace(0.0, scheme.x_max, scheme.cells + 1)
    elif isinstance(scheme, LogScheme):
        if scheme.cells < MIN_CELLS:
            raise ValueError(f"need at least {MIN_CELLS} cells")
        if not 0.0 < scheme.x_min < scheme.x_max:
            raise ValueError("need 0 < x_min < x_max")
        edges = np.concatenate(
            ([0.0], np.geomspace(scheme.x_min, scheme.x_max, scheme.cells + 1))
        )
    else:
        raise TypeError(f"unknown grid scheme {scheme!r}")
    centers = 0.5 * (edges[:-1] + edges[1:])
    centers[0] = 0.0
    return edges, centers


def _split_points(centers: np.ndarray, post: np.ndarray):
    """Conservative two-point split of post-wealths onto the grid.

    Returns (lo, hi, w_lo, overshoot): mass w_lo goes to centers[lo] and
    1 - w_lo to centers[hi], with w_lo*c_lo + (1-w_lo)*c_hi equal to the
    post-wealth exactly. Post-wealths above the top point are assigned to
    the top cell; the lost wealth per unit mass is returned as overshoot.
    """
    n = centers.size
    post = np.asarray(post, dtype=np.float64)
    lo = np.searchsorted(centers, post, side="right") - 1
    lo = np.clip(lo, 0, n - 1)
    over = post > centers[-1]
    exact = (centers[lo] == post) | over
    hi = np.where(exact, lo, np.minimum(lo + 1, n - 1))
    denom = np.where(exact, 1.0, centers[hi] - centers[lo])
    w_lo = np.where(exact, 1.0, (centers[hi] - post) / denom)
    overshoot = np.where(over, post - centers[-1], 0.0)
    return lo.astype(np.int64), hi.astype(np.int64), w_lo, overshoot


def _mean_correct(masses: np.ndarray, centers: np.ndarray, target: float) -> None:
    """Shift mass between one cell below and one above the target mean so the
    first moment equals ``target`` exactly, without changing total mass."""
    current = float(np.dot(masses, centers))
    diff = target - current
    if diff == 0.0:
        return
    below = centers < target
    above = centers > target
    if not below.any() or not above.any():
        raise ValueError("target mean outside the grid's representable range")
    k_lo = int(np.argmax(np.where(below, masses, -1.0)))
    k_hi = int(np.argmax(np.where(above, masses, -1.0)))
    eta = diff / (centers[k_hi] - centers[k_lo])
    if eta > masses[k_lo] or -eta > masses[k_hi]:
        raise ValueError("mean correction would need more mass than available")
    masses[k_lo] -= eta
    masses[k_hi] += eta


def build_grid(scheme, density) -> WealthGrid:
    """Discretize an initial density onto a wealth grid.

    The result is normalized exactly and its first moment is corrected to
    the density's nominal mean by a two-cell adjustment, so integration
    starts from a state that satisfies the conservation contracts to
    rounding error. Requires x_max >= 10 * mean.
    """
    edges, centers = _grid_axes(scheme)
    target_mean = _density_mean(density)
    if target_mean <= 0:
        raise ValueError("initial density must have positive mean")
    if edges[-1] < 10.0 * target_mean:
        raise ValueError("x_max must be at least 10 * mean of the initial density")

    n = centers.size
    masses = np.zeros(n)
    if isinstance(density, PointMass):
        if not 0.0 <= density.x <= centers[-1]:
            raise ValueError("point mass outside the grid")
        lo, hi, w, _ = _split_points(centers, np.array([density.x]))
        masses[lo[0]] += w[0]
        if hi[0] != lo[0]:
            masses[hi[0]] += 1.0 - w[0]
        return WealthGrid(edges, masses, centers=centers)

    if isinstance(density, UniformBand):
        a, b = density.a, density.b
        if not 0.0 <= a < b <= edges[-1]:
            raise ValueError("uniform band must satisfy 0 <= a < b <= x_max")
        overlap = np.clip(edges[1:], a, b) - np.clip(edges[:-1], a, b)
        masses = np.maximum(overlap, 0.0) / (b - a)
    elif isinstance(density, Exponential):
        mu = density.mean
        if mu <= 0:
            raise ValueError("exponential mean must be positive")
        cdf = 1.0 - np.exp(-edges / mu)
        masses = np.diff(cdf)
        masses[-1] += 1.0 - cdf[-1]  # lump the truncated tail into the top cell
    else:
        raise TypeError(f"unknown density spec {density!r}")

    masses /= math.fsum(masses)
    _mean_correct(masses, centers, target_mean)
    return WealthGrid(edges, masses, centers=centers)


def oligarchy_surrogate(grid: WealthGrid, m_factor: float, mean: float = 1.0) -> WealthGrid:
    """Finite-grid surrogate of the absolute oligarchy.

    Mass 1 - 1/M at zero wealth plus mass 1/M at wealth M * mean; the exact
    limit state is reached as M grows. The far point is placed by the same
    mean-exact split as everything else.
    """
    x_far = m_factor * mean
    if x_far > grid.centers[-1]:
        raise ValueError("surrogate wealth M*mean exceeds the grid")
    masses = np.zeros(grid.cells)
    masses[0] = 1.0 - 1.0 / m_factor
    lo, hi, w, _ = _split_points(grid.centers, np.array([x_far]))
    masses[lo[0]] += w[0] / m_factor
    if hi[0] != lo[0]:
        masses[hi[0]] += (1.0 - w[0]) / m_factor
    return grid.with_masses(masses)


def _lambda_mixture(rule: RuleSpec) -> list[tuple[float, float]]:
    """(lambda, weight) nodes representing the rule's lambda law.

    A fixed lambda is a single node. The Uniform[0,1] random lambda is
    represented by a Gauss-Legendre mixture: the master equation is linear
    in the kernel, so any convex mixture of per-lambda kernels is itself a
    valid, exactly normalized and unbiased kernel, and the node set
    converges weakly to the uniform average.
    """
    if rule.kind is RuleKind.IGLESIAS_ALMEIDA:
        return [(1.0, 1.0)]
    if rule.random_lambda:
        x, wgt = np.polynomial.legendre.leggauss(LAMBDA_NODES)
        return [(0.5 * (xi + 1.0), wi / 2.0) for xi, wi in zip(x, wgt)]
    return [(float(rule.lam), 1.0)]


class DiscreteKernel:
    """Discretized transfer kernel on a wealth grid.

    Stores, per ordered cell pair (a, b) and delta atom: the atom's value
    and probability and the two-point splits of both post-exchange wealths.
    Derived arrays feed the integrator: ``gain`` (sparse, maps the outer
    product of masses to per-cell gain), ``abs_delta`` (per-pair expected
    |delta|, the mobility integrand), and the precomputed post-wealth
    lookups for the Gini-rate functional.
    """

    def __init__(self, rule: RuleSpec, grid: WealthGrid, entries: dict):
        self.rule = rule
        self.centers = grid.centers.copy()
        self.pair_a = entries["pair_a"]
        self.pair_b = entries["pair_b"]
        self.prob = entries["prob"]
        self.delta = entries["delta"]
        self.d1_lo = entries["d1_lo"]
        self.d1_hi = entries["d1_hi"]
        self.d1_w = entries["d1_w"]
        self.d2_lo = entries["d2_lo"]
        self.d2_hi = entries["d2_hi"]
        self.d2_w = entries["d2_w"]

        n = self.centers.size
        self.cells = n
        c = self.centers

        # Represented gain of the tagged agent (equals the atom delta except
        # where the post-wealth was truncated at the top cell).
        over1 = entries["over1"]
        over2 = entries["over2"]
        post1 = c[self.pair_a] + self.delta
        self.post_repr = np.where(over1 > 0.0, c[-1], post1)
        self.repr_delta = np.where(over1 > 0.0, c[-1] - c[self.pair_a], self.delta)

        pair_q = self.pair_a.astype(np.int64) * n + self.pair_b
        rows = np.concatenate([self.d1_lo, self.d1_hi])
        cols = np.concatenate([pair_q, pair_q])
        vals = np.concatenate(
            [self.prob * self.d1_w, self.prob * (1.0 - self.d1_w)]
        )
        keep = vals != 0.0
        self.gain = sparse.csr_matrix(
            (vals[keep], (rows[keep], cols[keep])), shape=(n, n * n)
        )

        self.abs_delta = np.zeros((n, n))
        np.add.at(
            self.abs_delta,
            (self.pair_a, self.pair_b),
            self.prob * np.abs(self.repr_delta),
        )

        # Wealth lost by the evolved density per unit (pair-mass * time).
        # Only the tagged agent's overshoot counts: the gain operator uses
        # agent-1 destinations alone (agent-2 outcomes of pair (a, b) are
        # agent-1 outcomes of pair (b, a), which the ordered double sum
        # already covers).
        self.trunc_coef = np.zeros((n, n))
        trunc = self.prob * over1
        if np.any(trunc > 0.0):
            np.add.at(self.trunc_coef, (self.pair_a, self.pair_b), trunc)
        self.truncated_pairs = self.trunc_coef > 0.0
        self.has_truncation = bool(np.any(trunc > 0.0))
        if self.has_truncation:
            log.warning(
                "kernel truncates wealth at the top cell for %d of %d pairs; "
                "integration will track the lost wealth",
                int(self.truncated_pairs.sum()),
                n * n,
            )

        # Gini-rate lookups: position of each represented post-wealth in the
        # sorted center axis, for prefix-sum evaluation of the inner
        # |x + delta - x1| integral.
        self.post_idx = np.searchsorted(c, self.post_repr, side="right")

    def joint_entries(self, a: int, b: int) -> list[tuple[tuple[int, int], float]]:
        """Destination-pair probabilities for ordered source pair (a, b)."""
        mask = (self.pair_a == a) & (self.pair_b == b)
        out: dict[tuple[int, int], float] = {}
        for e in np.nonzero(mask)[0]:
            p = self.prob[e]
            d1 = [(int(self.d1_lo[e]), self.d1_w[e])]
            if self.d1_hi[e] != self.d1_lo[e]:
                d1.append((int(self.d1_hi[e]), 1.0 - self.d1_w[e]))
            d2 = [(int(self.d2_lo[e]), self.d2_w[e])]
            if self.d2_hi[e] != self.d2_lo[e]:
                d2.append((int(self.d2_hi[e]), 1.0 - self.d2_w[e]))
            for m1, w1 in d1:
                for m2, w2 in d2:
                    pv = p * w1 * w2
                    if pv != 0.0:
                        out[(m1, m2)] = out.get((m1, m2), 0.0) + pv
        return sorted(out.items())


def _rule_atoms(rule: RuleSpec, ca: np.ndarray, cb: np.ndarray):
    """Delta atoms for all ordered pairs: list of (delta, prob) array pairs."""
    atoms = []
    for lam, wnode in _lambda_mixture(rule):
        kind = rule.kind
        if kind is RuleKind.YARD_SALE:
            d = lam * np.minimum(ca, cb)
            atoms.append((d, np.full_like(d, 0.5 * wnode)))
            atoms.append((-d + 0.0, np.full_like(d, 0.5 * wnode)))
        elif kind is RuleKind.CLASSIC_LOSER:
            atoms.append((lam * cb, np.full_like(ca, 0.5 * wnode)))
            atoms.append((-(lam * ca) + 0.0, np.full_like(ca, 0.5 * wnode)))
        elif kind is RuleKind.UNBIASED_LOSER:
            s = ca + cb
            safe = np.where(s > 0.0, s, 1.0)
            p_win = np.where(s > 0.0, ca / safe, 0.0)
            atoms.append((lam * cb, p_win * wnode))
            atoms.append((-(lam * ca) + 0.0, (1.0 - p_win) * wnode))
        else:  # Iglesias-Almeida: lambda mixture collapses to one node
            d = harmonic_transfer(ca, cb)
            atoms.append((d, np.full_like(d, 0.5 * wnode)))
            atoms.append((-d + 0.0, np.full_like(d, 0.5 * wnode)))
    return atoms


def build_kernel(rule: RuleSpec, grid: WealthGrid) -> DiscreteKernel:
    """Discretize the rule's transfer kernel on the grid.

    Each delta atom of each ordered cell pair maps both post-exchange
    wealths to grid cells by the mean-exact two-point split, so per-pair
    normalization is exact and the represented expected gain is zero to
    rounding error for the unbiased rules. Post-wealths above the top
    representative point are assigned to the top cell; the resulting wealth
    loss is tracked by the integrator and flags the run non-conservative
    beyond 1e-8 relative.
    """
    c = grid.centers
    n = c.size
    ca = np.repeat(c, n)
    cb = np.tile(c, n)
    pair_a = np.repeat(np.arange(n, dtype=np.int64), n)
    pair_b = np.tile(np.arange(n, dtype=np.int64), n)

    deltas = []
    probs = []
    pas = []
    pbs = []
    for d, p in _rule_atoms(rule, ca, cb):
        keep = p != 0.0
        deltas.append(d[keep])
        probs.append(p[keep])
        pas.append(pair_a[keep])
        pbs.append(pair_b[keep])
    delta = np.concatenate(deltas)
    prob = np.concatenate(probs)
    pa = np.concatenate(pas)
    pb = np.concatenate(pbs)

    post1 = c[pa] + delta
    post2 = c[pb] - delta
    d1_lo, d1_hi, d1_w, over1 = _split_points(c, post1)
    d2_lo, d2_hi, d2_w, over2 = _split_points(c, post2)

    return DiscreteKernel(
        rule,
        grid,
        {
            "pair_a": pa,
            "pair_b": pb,
            "prob": prob,
            "delta": delta,
            "d1_lo": d1_lo,
            "d1_hi": d1_hi,
            "d1_w": d1_w,
            "d2_lo": d2_lo,
            "d2_hi": d2_hi,
            "d2_w": d2_w,
            "over1": over1,
            "over2": over2,
        },
    )


@dataclass
class KernelCheckReport:
    """Exhaustive per-pair normalization and bias audit of a kernel."""

    max_norm_error: float
    max_bias: float
    max_bias_rel: float
    passed: bool
    norm_error: np.ndarray
    bias: np.ndarray
    has_truncation: bool
    truncated_pairs: int = 0

    NORM_TOL = 1e-12
    BIAS_REL_TOL = 1e-10


def check_kernel(kernel: DiscreteKernel) -> KernelCheckReport:
    """Sum every pair's probabilities and represented first moment.

    Passes iff all pair rows are normalized within 1e-12 and, for unbiased
    rules, the represented expected gain is within 1e-10 * (x_k + x_k') of
    zero on every pair whose post-wealths fit the grid. Pairs truncated at
    the top cell are necessarily biased; they are excluded from the pass
    gate, counted in the report, and their wealth loss is tracked by the
    integrator. The classic loser rule reports its bias but is exempt from
    the bias gate.
    """
    n = kernel.cells
    c = kernel.centers
    norm = np.zeros((n, n))
    np.add.at(norm, (kernel.pair_a, kernel.pair_b), kernel.prob)
    bias = np.zeros((n, n))
    np.add.at(
        bias, (kernel.pair_a, kernel.pair_b), kernel.prob * kernel.repr_delta
    )
    norm_error = np.abs(norm - 1.0)
    scale = np.maximum(c[:, None] + c[None, :], 1e-300)
    bias_rel = np.abs(bias) / scale
    passed = bool(norm_error.max() <= KernelCheckReport.NORM_TOL)
    if kernel.rule.unbiased:
        faithful = bias_rel[~kernel.truncated_pairs]
        worst = float(faithful.max()) if faithful.size else 0.0
        passed = passed and worst <= KernelCheckReport.BIAS_REL_TOL
    return KernelCheckReport(
        max_norm_error=float(norm_error.max()),
        max_bias=float(np.abs(bias).max()),
        max_bias_rel=float(bias_rel.max()),
        passed=passed,
        norm_error=norm_error,
        bias=bias,
        has_truncation=kernel.has_truncation,
        truncated_pairs=int(kernel.truncated_pairs.sum()),
    )


def rhs(grid: WealthGrid, kernel: DiscreteKernel) -> np.ndarray:
    """Gain-minus-loss bilinear form: dm_k/dt over all cells.

    Total mass of the result is zero to rounding (per-pair probabilities
    and split weights both sum to one) and total wealth is zero within
    1e-12 relative for unbiased kernels (mean-exact splitting).
    """
    m = grid.masses
    return _rhs_masses(kernel, m)


def _rhs_masses(kernel: DiscreteKernel, m: np.ndarray) -> np.ndarray:
    v = np.multiply.outer(m, m).ravel()
    return kernel.gain @ v - m * m.sum()


def _weighted_gini(m: np.ndarray, c: np.ndarray) -> float:
    """Gini of masses at sorted points; normalized by the current mean."""
    mean = float(np.dot(m, c))
    if mean <= 0.0:  # all mass at zero wealth: no pairwise differences
        return 0.0
    cum_m = np.concatenate(([0.0], np.cumsum(m)))[:-1]
    cum_mc = np.concatenate(([0.0], np.cumsum(m * c)))[:-1]
    pair_sum = 2.0 * float(np.dot(m, c * cum_m - cum_mc))
    return pair_sum / (2.0 * mean)


def gini_rate(grid: WealthGrid, kernel: DiscreteKernel) -> float:
    """dG/dt: quadrature of the triple sum of the Gini evolution functional.

    The inner integral over x1 is evaluated exactly via prefix sums of the
    sorted cell masses (phi(y) = sum_k m_k |y - c_k| is piecewise linear
    with kinks only at grid points, so this is an algebraic regrouping of
    the triple sum, not an approximation). Non-negative for unbiased
    kernels up to rounding error.
    """
    return _gini_rate_masses(kernel, grid.masses)


def _gini_rate_masses(kernel: DiscreteKernel, m: np.ndarray) -> float:
    c = kernel.centers
    cum_m = np.concatenate(([0.0], np.cumsum(m)))
    cum_mc = np.concatenate(([0.0], np.cumsum(m * c)))
    m_tot = cum_m[-1]
    m1_tot = cum_mc[-1]

    idx = kernel.post_idx
    post = kernel.post_repr
    phi_post = post * (2.0 * cum_m[idx] - m_tot) + (m1_tot - 2.0 * cum_mc[idx])
    phi_c = c * (2.0 * cum_m[1:] - m_tot) + (m1_tot - 2.0 * cum_mc[1:])
    weight = kernel.prob * m[kernel.pair_a] * m[kernel.pair_b]
    return float(np.dot(weight, phi_post - phi_c[kernel.pair_a]) / m1_tot)


def mobility_bound_check(grid: WealthGrid, kernel: DiscreteKernel) -> float:
    """max_k l(x_k) / (2 <x>) from kernel atoms; <= 1 for unbiased kernels."""
    l = kernel.abs_delta @ grid.masses
    return float(l.max() / (2.0 * grid.mean))


class IntegrationAbort(RuntimeError):
    """Raised when a per-step invariant breach exceeds its tolerance."""

    def __init__(self, message: str, report: "IntegrationReport"):
        super().__init__(message)
        self.report = report


@dataclass
class IntegrationReport:
    """Per-step integration diagnostics plus run-level flags."""

    t: np.ndarray = field(default_factory=lambda: np.empty(0))
    dt: np.ndarray = field(default_factory=lambda: np.empty(0))
    gini: np.ndarray = field(default_factory=lambda: np.empty(0))
    gini_rate: np.ndarray = field(default_factory=lambda: np.empty(0))
    liquidity: np.ndarray = field(default_factory=lambda: np.empty(0))
    bound_ratio: np.ndarray = field(default_factory=lambda: np.empty(0))
    mass_drift: np.ndarray = field(default_factory=lambda: np.empty(0))
    mean_drift: np.ndarray = field(default_factory=lambda: np.empty(0))
    truncated_wealth: float = 0.0
    non_conservative: bool = False
    stopped_early: bool = False
    steps: int = 0


def integrate(
    grid: WealthGrid,
    kernel: DiscreteKernel,
    dt: float,
    t_end: float,
    adaptive: bool = True,
    stop_gini: float | None = None,
    stop_liquidity: float | None = None,
    snapshot_every: int = 0,
    max_steps: int = 2_000_000,
) -> tuple[list[tuple[float, WealthGrid]], IntegrationReport]:
    """Explicit Euler integration of the master equation.

    ``dt`` is the maximum step; the effective step is additionally capped
    so at most 10% of total mass moves per step and halved to preserve
    positivity and Gini monotonicity. With ``adaptive=False`` the given dt
    is used as-is and a step that would drive any mass negative aborts with
    the offending step's report. Per-step mass drift beyond 1e-12 or mean
    drift beyond 1e-10 relative (net of tracked top-cell wealth truncation)
    aborts. Snapshots of the grid are returned at the start, the end, and
    every ``snapshot_every`` accepted steps if positive.

    When both stop thresholds are given, integration stops early once
    G >= stop_gini and L <= stop_liquidity; a single given threshold stops
    on its own condition.
    """
    if dt <= 0 or t_end <= 0:
        raise ValueError("dt and t_end must be positive")
    c = kernel.centers
    if c.shape != grid.centers.shape or not np.array_equal(c, grid.centers):
        raise ValueError("kernel was built for a different grid")
    m = grid.masses.copy()
    mass0 = math.fsum(m)
    mean0 = float(np.dot(m, c))
    two_mean0 = 2.0 * mean0

    report = IntegrationReport()
    rows: list[tuple[float, ...]] = []
    snapshots: list[tuple[float, WealthGrid]] = [(0.0, grid.with_masses(m))]
    t = 0.0
    cum_trunc = 0.0
    g_prev = _weighted_gini(m, c)
    mass_prev = mass0
    mean_prev = mean0

    def _finish(rows) -> None:
        if rows:
            cols = np.array(rows).T
        else:
            cols = np.empty((8, 0))
        (
            report.t,
            report.dt,
            report.gini,
            report.gini_rate,
            report.liquidity,
            report.bound_ratio,
            report.mass_drift,
            report.mean_drift,
        ) = cols
        report.steps = len(rows)
        report.truncated_wealth = cum_trunc
        report.non_conservative = cum_trunc > TRUNCATION_TOL * mean0

    step_no = 0
    while t < t_end:
        if step_no >= max_steps:
            _finish(rows)
            raise IntegrationAbort(f"step budget {max_steps} exceeded", report)
        step_no += 1

        v = np.multiply.outer(m, m).ravel()
        r = kernel.gain @ v - m * m.sum()
        rate = _gini_rate_masses(kernel, m)
        trunc_rate = float(v @ kernel.trunc_coef.ravel()) if kernel.has_truncation else 0.0

        norm1 = float(np.abs(r).sum())
        dt_eff = min(dt, t_end - t)
        if adaptive and norm1 > 0.0:
            dt_eff = min(dt_eff, STEP_MASS_FRACTION * m.sum() / norm1)

        candidate = m + dt_eff * r
        if candidate.min() < 0.0:
            if not adaptive:
                _finish(rows)
                raise IntegrationAbort(
                    f"negative mass at t={t!r} with dt={dt_eff!r} "
                    f"(min mass {candidate.min()!r})",
                    report,
                )
            for _ in range(100):
                dt_eff *= 0.5
                candidate = m + dt_eff * r
                if candidate.min() >= 0.0:
                    break
            else:
                _finish(rows)
                raise IntegrationAbort("positivity unreachable by halving", report)

        g_new = _weighted_gini(candidate, c)
        # Gini is a Lyapunov function only for unbiased kernels; a decrease
        # there is pure time-discretization error and shrinks away with dt.
        if adaptive and kernel.rule.unbiased:
            halvings = 0
            while g_new < g_prev - 1e-12 and halvings < 60:
                dt_eff *= 0.5
                candidate = m + dt_eff * r
                g_new = _weighted_gini(candidate, c)
                halvings += 1
            if g_new < g_prev - 1e-12:
                _finish(rows)
                raise IntegrationAbort(
                    f"Gini decrease {g_new - g_prev!r} persists at t={t!r}", report
                )

        m = candidate
        t += dt_eff
        cum_trunc += dt_eff * trunc_rate

        mass = math.fsum(m)
        mean = float(np.dot(m, c))
        step_trunc = dt_eff * trunc_rate
        if abs(mass - mass_prev) > STEP_MASS_TOL:
            _finish(rows)
            raise IntegrationAbort(
                f"mass drift {mass - mass_prev!r} in one step at t={t!r}", report
            )
        if abs(mean - mean_prev + step_trunc) > STEP_MEAN_TOL * mean0:
            _finish(rows)
            raise IntegrationAbort(
                f"unexplained mean drift {mean - mean_prev!r} at t={t!r}", report
            )

        l = kernel.abs_delta @ m
        liquidity = float(np.dot(m, l)) / two_mean0
        bound_ratio = float(l.max()) / two_mean0
        rows.append(
            (
                t,
                dt_eff,
                g_new,
                rate,
                liquidity,
                bound_ratio,
                (mass - mass0) / mass0,
                (mean - mean0) / mean0,
            )
        )
        if snapshot_every and step_no % snapshot_every == 0:
            snapshots.append((t, grid.with_masses(m)))

        g_prev = g_new
        mass_prev = mass
        mean_prev = mean

        stop_hit = stop_gini is not None or stop_liquidity is not None
        if stop_gini is not None:
            stop_hit = stop_hit and g_new >= stop_gini
        if stop_liquidity is not None:
            stop_hit = stop_hit and liquidity <= stop_liquidity
        if stop_hit:
            report.stopped_early = True
            break

    snapshots.append((t, grid.with_masses(m)))
    _finish(rows)
    return snapshots, report
