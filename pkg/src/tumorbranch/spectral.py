"""Perron triples on truncations, with convergence and conditioning checks.

Only the leading eigenpair is ever computed, by two-sided power iteration
with a deterministic all-ones start.  Normalization is fixed once and used
everywhere: the left vector ``nu`` sums to one, the right vector ``mu``
satisfies ``sum(nu * mu) = 1``.

No bare discrete-time decay parameter is exposed anywhere: growth is
reported as the continuous-time rate ``lambda_star`` together with
``skeleton_growth = exp(lambda_star)`` for the time-1 kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph

from .chain import AbsorbedRates, DistributionOverTypes, time_one_kernel
from .errors import (
    DimensionMismatch,
    InvalidParameter,
    NoConvergence,
    ReducibleChain,
)

_RESIDUAL_CHECK_EVERY = 100


@dataclass(frozen=True)
class SpectralTriple:
    """Leading eigenvalue and normalized left/right eigenvectors.

    ``lambda_star`` is the growth rate of the rates-matrix semigroup; the
    associated time-1 kernel grows like ``skeleton_growth ** n``.
    ``residual_left = ||nu A - lambda nu||_1`` and
    ``residual_right = ||A mu - lambda mu||_inf`` are stored as achieved.
    """

    lambda_star: float
    nu: np.ndarray
    mu: np.ndarray
    residual_left: float
    residual_right: float
    k: int

    def __post_init__(self):
        for name in ("nu", "mu"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.nu.shape != (self.k,) or self.mu.shape != (self.k,):
            raise DimensionMismatch("triple vectors must have length k")
        if abs(self.nu.sum() - 1.0) > 1e-12:
            raise InvalidParameter("nu must be normalized to sum one")
        if np.any(self.nu < 0) or np.any(self.mu <= 0):
            raise InvalidParameter("nu must be nonnegative and mu positive")

    @property
    def skeleton_growth(self) -> float:
        return float(np.exp(self.lambda_star))

    @property
    def mu_ratio(self) -> float:
        return float(self.mu.max() / self.mu.min())

    def nu_distribution(self) -> DistributionOverTypes:
        return DistributionOverTypes(self.nu / self.nu.sum(), normalized=True)


def _as_csr(mx) -> sp.csr_matrix:
    if isinstance(mx, AbsorbedRates):
        return mx.matrix
    if sp.issparse(mx):
        return mx.tocsr()
    arr = np.asarray(mx, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionMismatch(f"need a square matrix, got shape {arr.shape}")
    return sp.csr_matrix(arr)


def perron_triple(mx, tol=1e-10, max_iter=2_000_000) -> SpectralTriple:
    """Leading eigentriple of a matrix with nonnegative off-diagonal.

    Two-sided power iteration on the shifted matrix ``mx + sigma I`` with
    ``sigma = max |diag| + 1`` (which is entrywise nonnegative and primitive
    for an irreducible input).  Deterministic all-ones start; stops when both
    stored residuals are below ``tol`` in absolute terms.
    """
    a = _as_csr(mx)
    k = a.shape[0]
    diag = a.diagonal()
    off = a - sp.diags(diag)
    off.eliminate_zeros()
    if off.nnz and off.data.min() < 0:
        raise InvalidParameter("off-diagonal entries must be nonnegative")
    ncomp, _ = csgraph.connected_components(
        off, directed=True, connection="strong"
    )
    if ncomp != 1:
        raise ReducibleChain(
            f"matrix support is not strongly connected ({ncomp} components)"
        )

    sigma = float(np.abs(diag).max()) + 1.0
    b = (a + sigma * sp.identity(k, format="csr")).tocsr()
    bt = b.T.tocsr()
    a_dense = None
    if k <= 1024:
        b = b.toarray()
        bt = bt.toarray()
        a_dense = a.toarray()

    def residuals(lam, nu, mu):
        if a_dense is not None:
            left = np.abs(nu @ a_dense - lam * nu).sum()
            right = np.abs(a_dense @ mu - lam * mu).max()
        else:
            left = np.abs(nu @ a - lam * nu).sum()
            right = np.abs(a @ mu - lam * mu).max()
        return float(left), float(right)

    v = np.full(k, 1.0 / k)
    w = np.full(k, 1.0 / k)
    lam = float("nan")
    for it in range(max_iter + 1):
        bv = b @ v
        bw = bt @ w
        denom = w @ v
        lam = float((w @ bv) / denom) - sigma
        if it % _RESIDUAL_CHECK_EVERY == 0:
            nu = w / w.sum()
            overlap = nu @ v
            mu = v / overlap
            res_l, res_r = residuals(lam, nu, mu)
            if res_l < tol and res_r < tol:
                return SpectralTriple(lam, nu, mu, res_l, res_r, k)
        sv, sw = bv.sum(), bw.sum()
        if sv <= 0 or sw <= 0:
            raise NoConvergence("power iterate lost positivity")
        v = bv / sv
        w = bw / sw
    raise NoConvergence(
        f"power iteration residuals {res_l:g}/{res_r:g} above {tol:g} "
        f"after {max_iter} iterations"
    )


@dataclass(frozen=True)
class TruncationSweep:
    """Triples across growing truncations plus convergence diagnostics.

    ``nu_tv[i]`` is the total-variation distance between the left vectors at
    ``k_list[i]`` and ``k_list[i+1]`` (shorter vector zero-padded);
    ``mu_ratio[i]`` is ``max(mu)/min(mu)`` at ``k_list[i]``.
    """

    k_list: tuple
    matrix: str
    triples: tuple
    lambdas: np.ndarray
    nu_tv: np.ndarray
    mu_ratio: np.ndarray


_SWEEP_MATRICES = ("A", "Q", "A_shift", "M")


def truncation_sweep(
    make_model, k_list: Sequence[int], matrix="A", tol=1e-10, max_iter=2_000_000
) -> TruncationSweep:
    """Perron triples of the selected matrix across truncations.

    ``make_model`` maps a truncation size to a
    :class:`~tumorbranch.branching.BranchingModel`; ``matrix`` picks the mean
    rates matrix (``A``), the driving generator (``Q``), the sub-Markovian
    shift (``A_shift``), or the skeleton mean matrix (``M``).  Under the
    ``kill`` tail policy the growth rate is nondecreasing in the truncation
    (principal-submatrix monotonicity), which callers may assert exactly.
    """
    from .branching import mean_rates as _mean_rates

    ks = list(k_list)
    if not ks or any(b < a for a, b in zip(ks, ks[1:])):
        raise InvalidParameter("k_list must be nondecreasing and nonempty")
    if matrix not in _SWEEP_MATRICES:
        raise InvalidParameter(f"matrix must be one of {_SWEEP_MATRICES}")
    triples = []
    for k in ks:
        model = make_model(int(k))
        if matrix == "Q":
            mx = model.rates
        else:
            mm = _mean_rates(model)
            mx = {
                "A": mm.mean_rates,
                "A_shift": mm.shifted,
                "M": mm.skeleton,
            }[matrix]
        triples.append(perron_triple(mx, tol=tol, max_iter=max_iter))
    nu_tv = np.array(
        [
            t1.nu_distribution().tv_distance(t2.nu_distribution())
            for t1, t2 in zip(triples, triples[1:])
        ]
    )
    return TruncationSweep(
        k_list=tuple(ks),
        matrix=matrix,
        triples=tuple(triples),
        lambdas=np.array([t.lambda_star for t in triples]),
        nu_tv=nu_tv,
        mu_ratio=np.array([t.mu_ratio for t in triples]),
    )


@dataclass(frozen=True)
class ConditionedLimitReport:
    """Deviation of conditioned laws and survival ratios from a triple.

    For each time ``n`` in the grid: ``dev_nu[n]`` is the worst entrywise
    deviation of ``P_x(X_n = y | alive)`` from ``nu(y)``, and ``dev_mu[n]``
    the worst deviation of ``growth^{-n} P_x(alive at n)`` from ``mu(x)``.
    """

    t_grid: np.ndarray
    dev_nu: np.ndarray
    dev_mu: np.ndarray
    tolerance: float

    @property
    def max_deviation(self) -> float:
        return float(max(self.dev_nu[-1], self.dev_mu[-1]))

    @property
    def passed(self) -> bool:
        return self.max_deviation < self.tolerance


def svj_consistency(
    rates: AbsorbedRates,
    triple: SpectralTriple,
    t_grid: Sequence[int],
    tolerance=1e-6,
    kernel_tol=1e-13,
) -> ConditionedLimitReport:
    """Check the conditioned-limit identities of the killed time-1 kernel.

    Conditioned on survival the law converges to ``nu``, and the survival
    probability scaled by the growth factor converges to ``mu``; both are
    tracked from every start state via exact powers of the time-1 kernel.
    """
    if not isinstance(rates, AbsorbedRates):
        raise InvalidParameter("svj_consistency needs an AbsorbedRates input")
    if triple.k != rates.k:
        raise DimensionMismatch("triple was computed for a different size")
    grid = np.asarray(t_grid, dtype=int)
    if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise InvalidParameter("t_grid must be positive and increasing")

    kernel = time_one_kernel(rates, kernel_tol)
    growth = triple.skeleton_growth
    power = np.eye(rates.k)
    dev_nu = np.empty(grid.size)
    dev_mu = np.empty(grid.size)
    pos = 0
    for n in range(1, int(grid[-1]) + 1):
        power = power @ kernel
        if n == grid[pos]:
            survival = power.sum(axis=1)
            conditioned = power / survival[:, None]
            dev_nu[pos] = np.abs(conditioned - triple.nu[None, :]).max()
            dev_mu[pos] = np.abs(survival * growth ** (-n) - triple.mu).max()
            pos += 1
    return ConditionedLimitReport(grid, dev_nu, dev_mu, float(tolerance))


def triple_rows(triples) -> list:
    """Flatten triples into CSV rows ``(k, lambda, res_l, res_r, x, nu_x, mu_x)``."""
    rows = []
    for t in triples:
        for i in range(t.k):
            rows.append(
                (
                    t.k,
                    t.lambda_star,
                    t.residual_left,
                    t.residual_right,
                    i + 1,
                    t.nu[i],
                    t.mu[i],
                )
            )
    return rows
