"""Branching-process view of the particle system.

A particle of type ``x`` carries two clocks: its own chain moves (rates
``q(x, .)``, absorption included) and the creation clock of rate ``beta(x)``
that drops a new particle at type 1.  Folding both into one exponential of
rate ``a(x) = beta(x) + q(x)`` identifies the population with a multitype
branching process whose offspring law at type ``x`` is

* with probability ``beta(x)/a(x)``: one child of type 1 plus one child of
  type ``x`` (the parent survives its creation event),
* with probability ``q(x,y)/a(x)``: one child of type ``y`` (the move),
* with probability ``q(x,0)/a(x)``: no children (absorption).

This module derives the per-generation mean matrix of that skeleton, the
continuous-time mean-rates matrix ``A`` and its sub-Markovian shift, the
criticality constant ``kappa0`` (expected total offspring of one particle),
extinction probabilities, and the second-moment functional used by the
Kesten-Stigum-type limit.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.integrate
import scipy.sparse as sp

from .chain import AbsorbedRates, evolve, green_solve, semigroup_row
from .errors import (
    DimensionMismatch,
    IdentityViolation,
    InvalidParameter,
    NoConvergence,
    ToleranceUnachievable,
)

# Relative agreement required between the two constructions of the mean
# rates matrix; a violation is a bug, not a data property.
_RANK_ONE_RTOL = 1e-14


@dataclass(frozen=True)
class BranchingModel:
    """Driving chain plus creation rates.

    ``beta[i]`` is the creation rate of type ``i+1``.  ``beta_info`` is free-
    form provenance metadata (family name, scale, cap) echoed into outputs.
    """

    rates: AbsorbedRates
    beta: np.ndarray
    beta_info: dict = field(default_factory=dict)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.shape != (self.rates.k,):
            raise DimensionMismatch(
                f"beta must have shape ({self.rates.k},), got {beta.shape}"
            )
        if not np.all(np.isfinite(beta)) or np.any(beta < 0):
            raise InvalidParameter("beta must be finite and nonnegative")
        beta = beta.copy()
        beta.flags.writeable = False
        object.__setattr__(self, "beta", beta)
        if np.any(self.jump_rates <= 0):
            raise InvalidParameter(
                "every type needs a positive total event rate beta(x) + q(x)"
            )

    @property
    def k(self) -> int:
        return self.rates.k

    @property
    def jump_rates(self) -> np.ndarray:
        """Total event rate per type: ``a(x) = beta(x) + q(x)``."""
        return self.beta + self.rates.exit_rates


@dataclass(frozen=True)
class MeanMatrices:
    """Mean matrices derived from a model.

    ``skeleton``: per-generation expected offspring counts ``m(x, y)``.
    ``mean_rates``: continuous-time mean matrix ``A`` with
    ``exp(tA)(x,y) = E_x eta_t(y)``; equals the chain generator plus the
    creation rates in column 1.
    ``shifted``: ``A - max(beta) I`` reinterpreted as an absorbed chain
    (rows then sum to at most zero), the object the certificates act on.
    """

    skeleton: sp.csr_matrix
    mean_rates: sp.csr_matrix
    shifted: AbsorbedRates
    beta_bar: float


def _creation_column(model: BranchingModel) -> sp.csr_matrix:
    k = model.k
    return sp.csr_matrix(
        (model.beta, (np.arange(k), np.zeros(k, dtype=int))), shape=(k, k)
    )


def skeleton_mean(model: BranchingModel) -> sp.csr_matrix:
    """Per-generation mean offspring matrix of the embedded skeleton.

    ``m(x,y) = [q(x,y) 1{y != x} + beta(x) (1{y=1} + 1{y=x})] / a(x)``;
    in particular ``m(1,1) = 2 beta(1)/a(1)`` (both children of a type-1
    branching are of type 1), which is what makes the rank-one identity in
    :func:`mean_rates` exact.
    """
    numer = model.rates.offdiag + _creation_column(model) + sp.diags(model.beta)
    return (sp.diags(1.0 / model.jump_rates) @ numer).tocsr()


def mean_rates(model: BranchingModel) -> MeanMatrices:
    """Both constructions of the mean rates matrix, checked against each other.

    The defining form ``a(x,y) = a(x) (m(x,y) - delta(x,y))`` must reproduce
    the chain generator plus creation in column 1 to machine precision; any
    disagreement indicates an implementation bug and raises
    :class:`IdentityViolation`.
    """
    m = skeleton_mean(model)
    a_def = (
        sp.diags(model.jump_rates) @ (m - sp.identity(model.k, format="csr"))
    ).tocsr()
    a_id = (model.rates.matrix + _creation_column(model)).tocsr()
    diff = abs(a_def - a_id).max() if model.k else 0.0
    scale = max(1.0, abs(a_id).max())
    if diff > _RANK_ONE_RTOL * scale:
        raise IdentityViolation(
            f"mean-rates constructions disagree by {diff:g} (scale {scale:g})"
        )

    beta_bar = float(model.beta.max())
    off = {}
    coo = a_id.tocoo()
    for i, j, v in zip(coo.row, coo.col, coo.data):
        if i != j and v != 0.0:
            off[(i + 1, j + 1)] = off.get((i + 1, j + 1), 0.0) + float(v)
    shifted_absorption = model.rates.absorption + (beta_bar - model.beta)
    shifted = AbsorbedRates(
        model.k, off, shifted_absorption, model.rates.tail_policy
    )
    return MeanMatrices(
        skeleton=m, mean_rates=a_id, shifted=shifted, beta_bar=beta_bar
    )


# --- creation-rate profile and kappa0 ---------------------------------------


def gamma1(model: BranchingModel, t, tol=1e-12) -> float:
    """Expected creation rate at time t of one particle started at type 1."""
    row, _ = semigroup_row(model.rates, 1, t, tol)
    return float(model.beta @ row.weights)


class Gamma1Evaluator:
    """Cached evaluation of ``t -> gamma1(t)`` along a checkpoint lattice.

    Quadrature probes times in arbitrary order; evolving from scratch each
    time would redo the whole Poisson series.  Checkpoints of the occupation
    row are laid down lazily at a spacing of one uniformization chunk, so an
    arbitrary evaluation only pays for the fraction past the last checkpoint.
    """

    def __init__(self, model: BranchingModel, tol=1e-13):
        self.model = model
        self.tol = tol
        lam = model.rates.uniformization_rate
        self._spacing = 512.0 / lam if lam > 0 else math.inf
        start = np.zeros(model.k)
        start[0] = 1.0
        self._times = [0.0]
        self._rows = [start]

    def _extend_to(self, t: float) -> None:
        while self._times[-1] + self._spacing <= t:
            nxt = evolve(
                self.model.rates, self._rows[-1], self._spacing, self.tol
            )
            self._times.append(self._times[-1] + self._spacing)
            self._rows.append(nxt)

    def row_at(self, t: float) -> np.ndarray:
        if t < 0:
            raise InvalidParameter("time must be nonnegative")
        self._extend_to(t)
        i = bisect.bisect_right(self._times, t) - 1
        dt = t - self._times[i]
        if dt == 0.0:
            return self._rows[i]
        return evolve(self.model.rates, self._rows[i], dt, self.tol)

    def __call__(self, t: float) -> float:
        return float(self.model.beta @ self.row_at(t))

    def survival_mass(self, t: float) -> float:
        return float(self.row_at(t).sum())


class Kappa0Result(NamedTuple):
    """The criticality constant by two independent routes.

    ``green`` applies the Green operator of the chain to the creation rates;
    ``quadrature`` integrates the creation-rate profile in time.  ``quad_error``
    is the quadrature error estimate plus the bounded exponential tail that
    was not integrated.
    """

    green: float
    quadrature: float
    quad_error: float

    @property
    def value(self) -> float:
        return self.green

    def verdict(self, critical_band=1e-6) -> str:
        if abs(self.green - 1.0) < critical_band:
            return "critical"
        return "subcritical" if self.green < 1.0 else "supercritical"


def kappa0_green(model: BranchingModel) -> float:
    """Criticality constant by the Green route alone.

    Solves ``(-Q^T) g = delta_1`` for the expected occupation measure of one
    particle and returns ``beta . g``.  Cheap enough for bisection loops; use
    :func:`kappa0` when the independent quadrature cross-check is wanted.
    """
    delta1 = np.zeros(model.k)
    delta1[0] = 1.0
    occupation = green_solve(model.rates, delta1, side="occupation")
    return float(model.beta @ occupation)


def kappa0(model: BranchingModel, quad_tol=1e-10) -> Kappa0Result:
    """Expected total offspring of a single particle started at type 1.

    The Green route solves ``(-Q^T) g = delta_1`` and returns ``beta . g``;
    the quadrature route adaptively integrates ``gamma1`` over ``[0, T]``
    with ``T`` chosen from the chain's decay rate so the remaining
    exponential tail is below the requested tolerance.  The two routes must
    agree within the combined quadrature error or the call raises.
    """
    green = kappa0_green(model)
    quadrature, quad_error = _integrate_gamma1(model, shift=0.0, quad_tol=quad_tol)

    agree_tol = max(10.0 * quad_error, quad_tol * max(1.0, abs(green)))
    if abs(green - quadrature) > agree_tol:
        raise ToleranceUnachievable(
            f"kappa0 routes disagree: green={green!r} quadrature={quadrature!r} "
            f"(allowed {agree_tol:g})"
        )
    return Kappa0Result(green, quadrature, quad_error)


def gamma1_laplace(model: BranchingModel, lam, quad_tol=1e-9) -> float:
    """Laplace transform ``int_0^inf exp(-lam t) gamma1(t) dt``.

    Finite for ``lam`` above the top eigenvalue of the chain generator; the
    growth rate of the mean matrix is its unique root equal to one.
    """
    value, _ = _integrate_gamma1(model, shift=float(lam), quad_tol=quad_tol)
    return value


def _integrate_gamma1(model, shift, quad_tol):
    """Adaptive quadrature of ``exp(-shift t) gamma1(t)`` with a tail bound."""
    ev = Gamma1Evaluator(model, tol=min(1e-13, quad_tol * 1e-3))
    beta_max = float(model.beta.max())
    if beta_max == 0.0:
        return 0.0, 0.0

    # Horizon: march until the certified envelope beta_max * survival
    # (tilted by the shift) can be tail-bounded below the tolerance budget.
    gamma_hat = _survival_decay_rate(ev)
    decay = gamma_hat + shift
    if decay <= 0:
        raise ToleranceUnachievable(
            f"integrand does not decay (decay rate {decay:g}); "
            "shift below the chain's growth threshold"
        )
    scale = max(abs(ev(0.0)), 1.0)
    tail_target = max(1e-14, 0.05 * quad_tol * scale)
    horizon = ev._spacing
    for _ in range(10_000):
        envelope = beta_max * ev.survival_mass(horizon) * math.exp(-shift * horizon)
        tail_bound = envelope / decay
        if tail_bound <= tail_target:
            break
        horizon += max(ev._spacing, math.log(2.0) / decay)
    else:
        raise ToleranceUnachievable("could not bound the quadrature tail")

    integrand = (lambda t: ev(t)) if shift == 0.0 else (
        lambda t: math.exp(-shift * t) * ev(t)
    )
    value, abserr = scipy.integrate.quad(
        integrand,
        0.0,
        horizon,
        epsabs=0.1 * quad_tol * scale,
        epsrel=0.1 * quad_tol,
        limit=500,
    )
    return value, abserr + tail_bound


def _survival_decay_rate(ev: Gamma1Evaluator) -> float:
    """Crude exponential decay rate of the survival mass, for horizon sizing."""
    t = max(ev._spacing, 1.0)
    prev_rate = None
    for _ in range(200):
        m0, m1 = ev.survival_mass(t), ev.survival_mass(2.0 * t)
        if m1 <= 0 or m0 <= 0:
            return 1.0 / t
        rate = math.log(m0 / m1) / t
        if prev_rate is not None and rate > 0 and abs(rate - prev_rate) < 0.05 * rate:
            return rate
        prev_rate = rate
        t *= 2.0
    raise ToleranceUnachievable("survival decay rate did not stabilize")


# --- extinction and second moments ------------------------------------------


def extinction_fixed_point(model: BranchingModel, tol=1e-12, max_iter=1_000_000):
    """Extinction probability per starting type: the minimal fixed point.

    Iterates the offspring generating map from zero; the iterates increase
    componentwise to the extinction vector.  The limit is identically one
    exactly in the subcritical/critical regime.
    """
    if tol <= 0:
        raise InvalidParameter("tol must be positive")
    a = model.jump_rates
    beta = model.beta
    offdiag_t = model.rates.offdiag
    absorption = model.rates.absorption
    s = np.zeros(model.k)
    for _ in range(max_iter):
        nxt = (beta * (s[0] * s) + offdiag_t @ s + absorption) / a
        delta = float(np.abs(nxt - s).max())
        s = nxt
        if delta < tol:
            return np.minimum(s, 1.0)
    raise NoConvergence(
        f"extinction iteration still moving {delta:g} after {max_iter} steps "
        "(near-critical models converge arbitrarily slowly)"
    )


def moy_condition(model: BranchingModel, nu, mu) -> float:
    """Second-moment functional of the skeleton against a spectral pair.

    ``sum_y nu(y) E_y[(sum_x Z_1(x) mu(x))^2]`` with the offspring law of the
    identification; finiteness (stability under growing truncation) is what
    licenses the almost-sure proportions limit.
    """
    nu = np.asarray(nu, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if nu.shape != (model.k,) or mu.shape != (model.k,):
        raise DimensionMismatch(
            f"nu and mu must have shape ({model.k},), got {nu.shape}, {mu.shape}"
        )
    a = model.jump_rates
    pair = (mu[0] + mu) ** 2
    second = (model.beta * pair + model.rates.offdiag @ (mu**2)) / a
    return float(nu @ second)


# --- criticality threshold ---------------------------------------------------


def critical_scale(model: BranchingModel) -> float:
    """Multiplier on the creation rates that makes the model exactly critical.

    ``kappa0`` is linear in a global scaling of ``beta``, so the critical
    scale is simply ``1/kappa0`` of the given model.
    """
    base = kappa0_green(model)
    if base <= 0:
        raise InvalidParameter("model has identically zero creation rates")
    return 1.0 / base


def bisect_critical_kappa(
    make_model: Callable[[float], BranchingModel],
    lo=1e-12,
    hi=None,
    tol=1e-10,
    max_iter=200,
) -> float:
    """Solve ``kappa0(kappa) = 1`` by bisection over the creation scale.

    ``make_model`` maps a scale ``kappa`` to a model; ``kappa0`` must be
    monotone in it (true whenever the scale multiplies a fixed shape).
    Expands ``hi`` geometrically until it brackets, then bisects to ``tol``
    relative width.
    """
    def surplus(kappa):
        return kappa0_green(make_model(kappa)) - 1.0

    if hi is None:
        hi = 1.0
        for _ in range(200):
            if surplus(hi) > 0:
                break
            hi *= 2.0
        else:
            raise NoConvergence("could not bracket the critical scale from above")
    f_lo = surplus(lo)
    if f_lo > 0:
        raise InvalidParameter(f"lower bracket {lo} is already supercritical")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if (hi - lo) <= tol * max(1.0, mid):
            return mid
        if surplus(mid) > 0:
            hi = mid
        else:
            lo = mid
    raise NoConvergence("critical-scale bisection did not reach tolerance")
