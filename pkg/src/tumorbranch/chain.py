"""Absorbed continuous-time Markov chains on a finite truncation.

State space convention: the non-absorbing types are labeled ``1..k`` and the
trap state is ``0``.  Internally every vector over types is a plain numpy
array of length ``k`` with position ``i`` holding the value for type ``i+1``;
type labels appear only at I/O boundaries (triple lists, CSV columns).

The generator restricted to ``1..k`` is kept as a sparse CSR matrix whose
diagonal already accounts for absorption, so every full row of the extended
generator sums to zero exactly as stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .errors import (
    DimensionMismatch,
    EmptyChain,
    InvalidParameter,
    NegativeRate,
    NoConvergence,
    ReducibleChain,
    SingularSystem,
    ToleranceUnachievable,
)

TAIL_POLICIES = ("kill", "reflect")

# Poissonized power series: mean jumps per sub-step (must stay well below
# -log(double minimum) ~ 745 so exp(-chunk) is representable) and a total
# term budget guarding against absurd horizons.
_UNIFORMIZATION_CHUNK = 512.0
_MAX_TOTAL_TERMS = 50_000_000


@dataclass(frozen=True)
class DistributionOverTypes:
    """Nonnegative weights over types ``1..k``; sub-probability unless flagged.

    ``weights[i]`` is the mass on type ``i+1``.  When ``normalized`` is set the
    weights must sum to one within 1e-12.
    """

    weights: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise DimensionMismatch("weights must be a nonempty 1-d array")
        if not np.all(np.isfinite(w)):
            raise InvalidParameter("weights must be finite")
        if np.any(w < -1e-15):
            raise InvalidParameter("weights must be nonnegative")
        w = np.clip(w, 0.0, None)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        if self.normalized and abs(w.sum() - 1.0) > 1e-12:
            raise InvalidParameter(
                f"normalized distribution sums to {w.sum()!r}, not 1"
            )

    @property
    def k(self) -> int:
        return self.weights.size

    def mass(self) -> float:
        return float(self.weights.sum())

    def tv_distance(self, other: "DistributionOverTypes") -> float:
        """Total-variation distance, padding the shorter vector with zeros."""
        a, b = self.weights, other.weights
        n = max(a.size, b.size)
        pa = np.zeros(n)
        pb = np.zeros(n)
        pa[: a.size] = a
        pb[: b.size] = b
        return 0.5 * float(np.abs(pa - pb).sum())


class AbsorbedRates:
    """Rates matrix of a pure-jump process on ``{1..k}`` absorbed at ``0``.

    Immutable after construction; safe to share between workers.

    Attributes
    ----------
    k : int
        Number of non-absorbing types.
    matrix : scipy.sparse.csr_matrix, shape (k, k)
        Generator restricted to ``1..k`` including the diagonal
        ``q(x,x) = -(sum of off-diagonal row + absorption)``.
    absorption : ndarray, shape (k,)
        Rates ``q(x, 0)``.
    exit_rates : ndarray, shape (k,)
        Total exit rate ``q(x) = -q(x,x)``.
    tail_policy : str
        How builder rates beyond the truncation were folded
        (``kill``: into absorption; ``reflect``: into the boundary state).
    """

    def __init__(self, k, off_diagonal, absorption, tail_policy="kill"):
        if not isinstance(k, (int, np.integer)) or k <= 0:
            raise EmptyChain(f"need at least one non-absorbing type, got k={k!r}")
        if tail_policy not in TAIL_POLICIES:
            raise InvalidParameter(f"tail_policy must be one of {TAIL_POLICIES}")
        self.k = int(k)
        self.tail_policy = tail_policy

        absorption = np.asarray(absorption, dtype=float)
        if absorption.shape != (self.k,):
            raise DimensionMismatch(
                f"absorption must have shape ({self.k},), got {absorption.shape}"
            )
        _check_rates_finite_nonneg(absorption)

        rows, cols, vals = [], [], []
        for (x, y), rate in off_diagonal.items():
            if not (1 <= x <= self.k and 1 <= y <= self.k):
                raise InvalidParameter(f"off-diagonal entry ({x},{y}) out of 1..{k}")
            if x == y:
                raise InvalidParameter(f"diagonal entry ({x},{x}) may not be supplied")
            rows.append(x - 1)
            cols.append(y - 1)
            vals.append(float(rate))
        vals = np.asarray(vals, dtype=float)
        _check_rates_finite_nonneg(vals)

        off = sp.csr_matrix(
            (vals, (rows, cols)), shape=(self.k, self.k), dtype=float
        )
        off.sum_duplicates()
        off.eliminate_zeros()
        self.offdiag = off

        n_components, _ = csgraph.connected_components(
            off, directed=True, connection="strong"
        )
        if n_components != 1:
            raise ReducibleChain(
                f"support graph on 1..{self.k} has {n_components} strongly "
                "connected components"
            )

        exit_rates = np.asarray(off.sum(axis=1)).ravel() + absorption
        diag = sp.diags(-exit_rates, format="csr")
        self.matrix = (off + diag).tocsr()
        self.absorption = absorption
        self.exit_rates = exit_rates
        for arr in (self.absorption, self.exit_rates):
            arr.flags.writeable = False
        self.matrix.data.flags.writeable = False
        self.offdiag.data.flags.writeable = False
        # Row-uniformization constant: max total exit rate.
        self.uniformization_rate = float(exit_rates.max()) if self.k else 0.0

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def _jump_kernel_t(self):
        """Transposed uniformized jump kernel ``(I + Q/L)^T``, cached.

        Dense below 256 states: the semigroup loops are matvec-bound and the
        sparse-call overhead dominates at small sizes.
        """
        cached = getattr(self, "_pt_cache", None)
        if cached is None:
            lam = self.uniformization_rate
            pt = (
                sp.identity(self.k, format="csr") + self.matrix * (1.0 / lam)
            ).T.tocsr()
            if self.k <= 256:
                pt = pt.toarray()
            object.__setattr__(self, "_pt_cache", pt)
            cached = pt
        return cached

    def is_birth_death(self) -> bool:
        """True iff every off-diagonal rate sits on the first sub/super diagonal."""
        coo = self.offdiag.tocoo()
        return bool(np.all(np.abs(coo.row - coo.col) == 1))

    def __repr__(self):
        return (
            f"AbsorbedRates(k={self.k}, nnz={self.offdiag.nnz}, "
            f"tail_policy={self.tail_policy!r})"
        )


def _check_rates_finite_nonneg(vals: np.ndarray) -> None:
    if vals.size == 0:
        return
    if not np.all(np.isfinite(vals)):
        raise NegativeRate("rates must be finite")
    if np.any(vals < 0):
        raise NegativeRate(f"rates must be nonnegative, min={vals.min()}")


def build_sparse_rates(entries, k, tail_policy="kill") -> AbsorbedRates:
    """Validate and assemble an :class:`AbsorbedRates` from rate triples.

    Parameters
    ----------
    entries : iterable of (x, y, rate)
        ``x`` in ``1..k``; ``y`` in ``0..inf`` with ``y = 0`` meaning
        absorption.  Entries with ``y > k`` are folded per ``tail_policy``:
        ``kill`` adds them to ``q(x, 0)``, ``reflect`` to ``q(x, k)``.
    k : int
        Truncation size.
    """
    if not isinstance(k, (int, np.integer)) or k <= 0:
        raise EmptyChain(f"need at least one non-absorbing type, got k={k!r}")
    if tail_policy not in TAIL_POLICIES:
        raise InvalidParameter(f"tail_policy must be one of {TAIL_POLICIES}")
    off: dict[tuple[int, int], float] = {}
    absorption = np.zeros(k)
    for entry in entries:
        try:
            x, y, rate = entry
        except (TypeError, ValueError) as exc:
            raise InvalidParameter(f"bad entry {entry!r}, need (x, y, rate)") from exc
        x, y, rate = int(x), int(y), float(rate)
        if not math.isfinite(rate):
            raise NegativeRate(f"rate for ({x},{y}) is not finite")
        if rate < 0:
            raise NegativeRate(f"rate for ({x},{y}) is negative: {rate}")
        if not 1 <= x <= k:
            raise InvalidParameter(f"source state {x} outside 1..{k}")
        if y < 0:
            raise InvalidParameter(f"target state {y} is negative")
        if y == x:
            raise InvalidParameter(f"self-rate ({x},{x}) is not a valid entry")
        if y > k:
            if tail_policy == "kill":
                y = 0
            else:
                y = k
        if y == x:
            # reflect folded the boundary birth onto itself: a null jump
            continue
        if rate == 0.0:
            continue
        if y == 0:
            absorption[x - 1] += rate
        else:
            off[(x, y)] = off.get((x, y), 0.0) + rate
    return AbsorbedRates(k, off, absorption, tail_policy)


def build_gompertz_bd(a, n, k, tail_policy="kill") -> AbsorbedRates:
    """Birth-death chain with Gompertzian drift.

    Birth rate ``a*x*ln(n+1)``, death rate ``a*x*ln(x+1)``; the death from
    state 1 is the absorption ``q(1,0) = a*ln 2``.  The drift
    ``a*x*ln((n+1)/(x+1))`` is positive below the carrying size ``n`` and
    negative above it.
    """
    if a <= 0:
        raise InvalidParameter(f"rate scale must be positive, got a={a}")
    if n < 1:
        raise InvalidParameter(f"carrying size must be >= 1, got n={n}")
    if not isinstance(k, (int, np.integer)) or k < 2:
        raise InvalidParameter(f"truncation must be >= 2, got k={k!r}")
    log_up = math.log(n + 1.0)
    entries = []
    for x in range(1, k + 1):
        entries.append((x, x + 1, a * x * log_up))
        entries.append((x, x - 1, a * x * math.log(x + 1.0)))
    return build_sparse_rates(entries, k, tail_policy)


def load_triple_file(path, k=None, tail_policy="kill") -> AbsorbedRates:
    """Read a plain-text triple list ``x y rate`` (one per line, y=0 absorbs).

    Blank lines and ``#`` comments are skipped.  When ``k`` is omitted it
    defaults to the largest source state in the file.
    """
    triples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise InvalidParameter(
                    f"{path}:{lineno}: expected 'x y rate', got {line!r}"
                )
            triples.append((int(parts[0]), int(parts[1]), float(parts[2])))
    if not triples:
        raise EmptyChain(f"{path}: no rate entries")
    if k is None:
        k = max(x for x, _, _ in triples)
    return build_sparse_rates(triples, k, tail_policy)


# --- semigroup via uniformization ------------------------------------------


def evolve(rates: AbsorbedRates, weights, t, tol=1e-12):
    """Propagate a row vector through the semigroup: returns ``w = v e^{tQ}``.

    Uses the Poissonized power series (uniformization) with the jump kernel
    ``P = I + Q/L``, ``L`` the maximal exit rate.  The series is truncated
    once the Poisson weights cover ``1 - tol``; since ``P`` is sub-stochastic
    this certifies an l1 error of at most ``tol * ||v||_1``.  Long horizons
    are split into sub-steps so the Poisson weights stay representable.
    """
    v = np.asarray(weights, dtype=float)
    if v.shape != (rates.k,):
        raise DimensionMismatch(f"weights must have shape ({rates.k},)")
    if t < 0:
        raise InvalidParameter(f"time must be nonnegative, got {t}")
    if tol <= 0:
        raise InvalidParameter("tol must be positive")
    lam = rates.uniformization_rate
    if t == 0.0 or lam == 0.0:
        return v.copy()

    n_steps = max(1, int(math.ceil(lam * t / _UNIFORMIZATION_CHUNK)))
    tau = t / n_steps
    a = lam * tau
    step_tol = tol / n_steps
    # Transposed jump kernel so that (pt @ u) computes the row product u P.
    pt = rates._jump_kernel_t()

    budget = _MAX_TOTAL_TERMS
    for _ in range(n_steps):
        term = v
        weight = math.exp(-a)
        covered = weight
        acc = weight * term
        n = 0
        while covered < 1.0 - step_tol:
            n += 1
            budget -= 1
            if budget <= 0:
                raise ToleranceUnachievable(
                    "uniformization series cap hit before the tail bound "
                    f"reached {tol:g} (lam*t = {lam * t:g})"
                )
            term = pt @ term
            weight *= a / n
            covered += weight
            acc = acc + weight * term
        v = acc
    return v


def semigroup_row(rates: AbsorbedRates, x0, t, tol=1e-12):
    """Row ``(e^{tQ})(x0, .)`` of the killed semigroup.

    Returns
    -------
    (DistributionOverTypes, float)
        The sub-probability row and the absorbed mass ``1 - sum(row)``.
    """
    _check_type_label(rates, x0)
    v = np.zeros(rates.k)
    v[x0 - 1] = 1.0
    w = evolve(rates, v, t, tol)
    absorbed = max(0.0, 1.0 - float(w.sum()))
    return DistributionOverTypes(w), absorbed


def _check_type_label(rates: AbsorbedRates, x) -> None:
    if not (isinstance(x, (int, np.integer)) and 1 <= x <= rates.k):
        raise InvalidParameter(f"type label {x!r} outside 1..{rates.k}")


# --- Green's function and hitting times -------------------------------------


def green_solve(rates: AbsorbedRates, source, side="occupation"):
    """Apply the Green operator ``(-Q)^{-1}`` to a vector.

    ``side='occupation'`` solves ``(-Q^T) g = source``: ``g(y)`` is the
    expected time spent at ``y`` when started from the source distribution.
    ``side='reward'`` solves ``(-Q) h = source``: ``h(x)`` is the expected
    accumulated reward ``E_x int_0^{tau_0} source(X_s) ds``.
    """
    src = np.asarray(source, dtype=float)
    if src.shape != (rates.k,):
        raise DimensionMismatch(f"source must have shape ({rates.k},)")
    if side not in ("occupation", "reward"):
        raise InvalidParameter("side must be 'occupation' or 'reward'")
    if rates.absorption.sum() == 0.0:
        raise SingularSystem("chain has no absorption; -Q is singular")
    mat = -rates.matrix
    if side == "occupation":
        mat = mat.T
    return _sparse_solve(mat.tocsc(), src)


def _sparse_solve(mat_csc, rhs):
    try:
        lu = spla.splu(mat_csc)
        sol = lu.solve(rhs)
    except RuntimeError as exc:
        raise SingularSystem(f"sparse factorization failed: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularSystem("linear solve produced non-finite values")
    resid = np.abs(mat_csc @ sol - rhs).max()
    scale = max(1.0, np.abs(rhs).max(), np.abs(sol).max())
    if resid > 1e-8 * scale:
        raise SingularSystem(f"linear solve residual {resid:g} too large")
    return sol


def expected_hitting_time(rates: AbsorbedRates, target):
    """Expected time to reach ``target`` (or be absorbed on the way).

    Solves ``(-Q_SS) h = 1`` on ``S = {1..k} - {target}`` and sets
    ``h(target) = 0``.  For a birth-death chain started above the target this
    is exactly ``E_x(tau_target)`` since the trap can only be reached through
    the target.
    """
    _check_type_label(rates, target)
    h = np.zeros(rates.k)
    if rates.k == 1:
        return h
    keep = np.arange(rates.k) != (target - 1)
    sub = rates.matrix[keep][:, keep].tocsc()
    h[keep] = _sparse_solve(-sub, np.ones(rates.k - 1))
    return h


# --- conditioned limits ------------------------------------------------------


def yaglom_iterate(rates: AbsorbedRates, x0, dt=1.0, tol=1e-10, max_steps=100_000):
    """Distribution of the chain conditioned on survival, as t -> infinity.

    Iterates ``phi <- normalize(phi e^{dt Q})`` from the point mass at ``x0``
    until the total-variation change of one step drops below ``tol``.
    """
    _check_type_label(rates, x0)
    if dt <= 0:
        raise InvalidParameter(f"dt must be positive, got {dt}")
    inner_tol = min(1e-13, tol * 1e-3)
    phi = np.zeros(rates.k)
    phi[x0 - 1] = 1.0
    for _ in range(max_steps):
        nxt = evolve(rates, phi, dt, inner_tol)
        mass = nxt.sum()
        if mass <= 0.0:
            raise SingularSystem(
                "conditioned mass vanished; dt too large for this chain"
            )
        nxt /= mass
        tv = 0.5 * float(np.abs(nxt - phi).sum())
        phi = nxt
        if tv < tol:
            return DistributionOverTypes(phi / phi.sum(), normalized=True)
    raise NoConvergence(
        f"Yaglom iteration still moving {tv:g} in TV after {max_steps} steps"
    )


class DecayEstimate(NamedTuple):
    """Extrapolated decay rate with its one-sided per-time diagnostics."""

    gamma_hat: float
    per_t: np.ndarray
    t_grid: np.ndarray


def decay_estimate(rates: AbsorbedRates, x, t_grid, tol=1e-13, slack=1e-9):
    """Kingman decay parameter of the killed semigroup from return probabilities.

    Computes ``seq(t) = -log P_x(X_t = x)/t`` on the grid and extrapolates
    with the difference quotient of the last two points, which cancels the
    constant prefactor.  Every ``seq(t)`` must stay above ``gamma_hat -
    slack`` (the return probability is a one-sided bound on the decay rate);
    a violation means the grid is too short to extrapolate and raises.
    """
    _check_type_label(rates, x)
    grid = np.asarray(t_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise InvalidParameter("t_grid must be a nonempty 1-d sequence")
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise InvalidParameter("t_grid must be increasing and positive")

    v = np.zeros(rates.k)
    v[x - 1] = 1.0
    probs = np.empty(grid.size)
    prev_t = 0.0
    for i, t in enumerate(grid):
        v = evolve(rates, v, t - prev_t, tol)
        prev_t = t
        p = v[x - 1]
        if p <= 10.0 * tol:
            raise ToleranceUnachievable(
                f"return probability at t={t:g} fell below the semigroup "
                f"resolution ({p:g} <= 10*tol)"
            )
        probs[i] = p

    seq = -np.log(probs) / grid
    if grid.size == 1:
        gamma_hat = float(seq[0])
    else:
        gamma_hat = float(
            -(math.log(probs[-1]) - math.log(probs[-2])) / (grid[-1] - grid[-2])
        )
    if seq.min() < gamma_hat - slack:
        raise ToleranceUnachievable(
            "per-t decay sequence dips below the extrapolated rate; "
            "t_grid too coarse for a reliable extrapolation"
        )
    return DecayEstimate(gamma_hat, seq, grid)


def time_one_kernel(rates: AbsorbedRates, tol=1e-12) -> np.ndarray:
    """Dense time-1 transition kernel ``exp(Q)`` of the killed chain."""
    kernel = np.empty((rates.k, rates.k))
    for x in range(rates.k):
        v = np.zeros(rates.k)
        v[x] = 1.0
        kernel[x] = evolve(rates, v, 1.0, tol)
    return kernel
