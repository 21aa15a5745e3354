"""Machine-checkable R-positivity criteria on a truncation.

Each checker evaluates one sufficient condition with explicit witnesses and
returns a certificate record.  Verdicts are always relative to the truncation
``1..k``: the conditions are asymptotic in the type, so callers (and the CLI)
re-run at a doubled truncation and require the verdict to be stable before
claiming an overall pass.  The two routes (Lyapunov drift vs column
minorization) are never conflated: each certificate reports its own verdict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .chain import AbsorbedRates
from .errors import (
    DimensionMismatch,
    InvalidParameter,
    NonpositiveV,
    NotBirthDeath,
)

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"

# Tail shorter than this cannot support a trend judgement.
_MIN_TAIL = 3


def _kv_block(pairs) -> str:
    lines = []
    for key, value in pairs:
        if isinstance(value, float):
            value = f"{value:.12g}"
        elif isinstance(value, (list, tuple, np.ndarray)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines)


@dataclass(frozen=True)
class LyapunovCertificate:
    """Outcome of the drift criterion ``Vdot/V -> -inf`` on a truncation.

    ``ratio`` holds ``Vdot(x)/V(x)`` for every x; ``witness_set`` the states
    where it exceeds ``log(rho)`` (must form a finite prefix for a pass);
    ``offending`` the states that broke the verdict, empty on pass.
    """

    v: np.ndarray
    ratio: np.ndarray
    witness_set: tuple
    rho: float
    verdict: str
    offending: tuple
    note: str = ""

    def to_kv(self) -> str:
        return _kv_block(
            [
                ("certificate", "lyapunov"),
                ("verdict", self.verdict),
                ("rho", self.rho),
                ("witness_size", len(self.witness_set)),
                ("witness_max", max(self.witness_set) if self.witness_set else 0),
                ("ratio_at_truncation", float(self.ratio[-1])),
                ("offending", list(self.offending)),
                ("note", self.note),
            ]
        )


def check_lyapunov(a_like: AbsorbedRates, v, rho_target) -> LyapunovCertificate:
    """Evaluate the Lyapunov drift condition for a candidate function.

    ``Vdot(x) = sum_y a(x,y) V(y)`` with ``V(0) = 0`` is computed exactly
    from the stored matrix.  Pass requires the witness set
    ``{x: Vdot/V > log rho}`` to be a proper prefix of ``1..k`` with at least
    ``3`` tail states beyond it, the ratio nonincreasing over that tail, and
    ``V`` strictly increasing there (the truncation's proxy for
    ``V -> inf``).  Too short a tail is inconclusive rather than a failure.
    """
    if not isinstance(a_like, AbsorbedRates):
        raise InvalidParameter("check_lyapunov needs an AbsorbedRates input")
    vv = np.asarray(v, dtype=float)
    if vv.shape != (a_like.k,):
        raise DimensionMismatch(f"V must have shape ({a_like.k},)")
    if np.any(vv <= 0) or not np.all(np.isfinite(vv)):
        raise NonpositiveV("V must be strictly positive and finite on 1..k")
    if not 0.0 < rho_target < 1.0:
        raise InvalidParameter(f"rho_target must be in (0,1), got {rho_target}")

    log_rho = math.log(rho_target)
    vdot = a_like.matrix @ vv
    ratio = vdot / vv
    above = np.flatnonzero(ratio > log_rho)
    witness = tuple(int(i) + 1 for i in above)

    def cert(verdict, offending=(), note=""):
        return LyapunovCertificate(
            v=vv,
            ratio=ratio,
            witness_set=witness,
            rho=float(rho_target),
            verdict=verdict,
            offending=tuple(offending),
            note=note,
        )

    if len(above) == a_like.k:
        return cert(
            FAIL,
            offending=witness,
            note="drift condition fails everywhere on the truncation",
        )
    m = int(above.max()) + 1 if above.size else 0
    gaps = [x + 1 for x in range(m) if ratio[x] <= log_rho]
    if gaps:
        return cert(
            FAIL,
            offending=[x for x in witness if x > gaps[0]],
            note="witness set is not a prefix of the type axis",
        )
    tail = np.arange(m, a_like.k)
    if tail.size < _MIN_TAIL:
        return cert(
            INCONCLUSIVE,
            note=f"only {tail.size} states beyond the witness set",
        )
    diffs = np.diff(ratio[tail])
    rising = np.flatnonzero(diffs > 1e-12)
    if rising.size or not ratio[tail[-1]] < ratio[tail[0]]:
        return cert(
            FAIL,
            offending=[int(tail[i]) + 2 for i in rising],
            note="ratio does not decrease toward the truncation boundary",
        )
    v_steps = np.diff(vv[tail])
    flat = np.flatnonzero(v_steps <= 0)
    if flat.size:
        return cert(
            INCONCLUSIVE,
            offending=[int(tail[i]) + 2 for i in flat],
            note="V is not strictly increasing beyond the witness set",
        )
    return cert(PASS)


@dataclass(frozen=True)
class DoeblinCertificate:
    """Column-minorization criterion: total uniform inflow vs worst absorption.

    ``alpha`` accumulates, over target states z, the infimum over sources
    ``x != z`` of the rate into z; pass means it exceeds the largest
    absorption rate.  ``positive_columns`` lists the z actually contributing.
    """

    alpha: float
    absorption_sup: float
    per_state_alpha: np.ndarray
    verdict: str

    @property
    def positive_columns(self) -> tuple:
        return tuple(int(i) + 1 for i in np.flatnonzero(self.per_state_alpha > 0))

    def to_kv(self) -> str:
        return _kv_block(
            [
                ("certificate", "doeblin"),
                ("verdict", self.verdict),
                ("alpha", self.alpha),
                ("absorption_sup", self.absorption_sup),
                ("positive_columns", list(self.positive_columns)),
            ]
        )


def check_doeblin(a_like: AbsorbedRates) -> DoeblinCertificate:
    """Evaluate the minorization criterion ``alpha > C`` on the truncation.

    A column only contributes if every other state feeds it at a positive
    rate; absent entries count as zero.  With a single state the infimum
    ranges over an empty set and is taken as zero (conservative: the
    degenerate chain never passes this route).
    """
    if not isinstance(a_like, AbsorbedRates):
        raise InvalidParameter("check_doeblin needs an AbsorbedRates input")
    k = a_like.k
    per_state = np.zeros(k)
    cols = a_like.offdiag.tocsc()
    for z in range(k):
        col = cols.getcol(z)
        # diagonal is excluded from offdiag, so a full column has k-1 entries
        if col.nnz == k - 1 and k > 1:
            per_state[z] = col.data.min()
    alpha = float(per_state.sum())
    c_sup = float(a_like.absorption.max())
    return DoeblinCertificate(
        alpha=alpha,
        absorption_sup=c_sup,
        per_state_alpha=per_state,
        verdict=PASS if alpha > c_sup else FAIL,
    )


@dataclass(frozen=True)
class BirthDeathCertificate:
    """The three one-dimensional conditions, each with its own verdict.

    ``ratio_limit`` extrapolates the up/down ratio to infinite size by a
    least-squares fit against ``1/log(x+1)`` over the tail;
    ``ratio_tail_max`` is the conservative tail maximum that gates the
    verdict.  ``reciprocal_tail_fraction`` is the share of the partial sum
    ``sum 1/q(x,x-1)`` contributed by the second half of the truncation; the
    series is only accepted as convergent when the term-ratio test certifies
    it or that share is below 1e-3.
    """

    monotone_down: bool
    ratio_limit: float
    ratio_tail_max: float
    reciprocal_sum: float
    reciprocal_tail_fraction: float
    verdict_monotone: str
    verdict_ratio: str
    verdict_reciprocal: str
    verdict: str

    def to_kv(self) -> str:
        return _kv_block(
            [
                ("certificate", "birth_death"),
                ("verdict", self.verdict),
                ("monotone_down", self.verdict_monotone),
                ("ratio", self.verdict_ratio),
                ("reciprocal_sum", self.verdict_reciprocal),
                ("ratio_limit", self.ratio_limit),
                ("ratio_tail_max", self.ratio_tail_max),
                ("reciprocal_partial_sum", self.reciprocal_sum),
                ("reciprocal_tail_fraction", self.reciprocal_tail_fraction),
            ]
        )


def check_bd_conditions(rates: AbsorbedRates) -> BirthDeathCertificate:
    """Evaluate the birth-death route on a tridiagonal chain.

    Raises :class:`NotBirthDeath` unless all off-diagonal support sits on the
    first sub/super diagonals.
    """
    if not isinstance(rates, AbsorbedRates):
        raise InvalidParameter("check_bd_conditions needs an AbsorbedRates input")
    if not rates.is_birth_death():
        raise NotBirthDeath("chain support is not tridiagonal")
    k = rates.k
    dense_off = rates.offdiag
    # down-rates q(x, x-1) for x = 1..k; the x = 1 entry is the absorption
    # q(1,0) (dropped when the chain has no death at 1)
    down = np.array(
        [rates.absorption[0]] + [dense_off[x, x - 1] for x in range(1, k)]
    )
    up = np.array([dense_off[x, x + 1] for x in range(0, k - 1)])  # x = 1..k-1
    first = 0 if down[0] > 0 else 1
    down = down[first:]
    down_x = np.arange(first + 1, k + 1)

    monotone = bool(np.all(np.diff(down) >= 0)) if down.size else False
    verdict_a = PASS if monotone else FAIL

    # ratios q(x,x+1)/q(x,x-1) where both neighbours exist: x = first+1..k-1
    xs = down_x[:-1]
    ratios = up[first:] / down[:-1] if down.size > 1 else np.array([])
    if ratios.size >= _MIN_TAIL:
        tail_len = max(_MIN_TAIL, ratios.size // 10)
        tail_x = xs[-tail_len:]
        tail_r = ratios[-tail_len:]
        ratio_tail_max = float(tail_r.max())
        # extrapolate against the natural decay variable of the rate families
        design = 1.0 / np.log(tail_x + 1.0)
        slope, intercept = np.polyfit(design, tail_r, 1)
        ratio_limit = float(max(intercept, 0.0))
        verdict_b = PASS if (ratio_tail_max < 1.0 and ratio_limit < 1.0) else FAIL
    else:
        ratio_tail_max = float("nan")
        ratio_limit = float("nan")
        verdict_b = FAIL

    if down.size:
        terms = 1.0 / down
        partial = float(terms.sum())
        half = terms[: max(1, terms.size // 2)].sum()
        tail_fraction = float((partial - half) / partial) if partial > 0 else 1.0
        term_ratios = terms[1:] / terms[:-1] if terms.size > 1 else np.array([1.0])
        tail_tr = term_ratios[-max(_MIN_TAIL, term_ratios.size // 10):]
        ratio_test_certifies = bool(tail_tr.max() < 0.99)
        converges = ratio_test_certifies or tail_fraction < 1e-3
        verdict_c = PASS if converges else FAIL
    else:
        partial, tail_fraction = float("nan"), float("nan")
        verdict_c = FAIL

    overall = PASS if (verdict_a, verdict_b, verdict_c) == (PASS,) * 3 else FAIL
    return BirthDeathCertificate(
        monotone_down=monotone,
        ratio_limit=ratio_limit,
        ratio_tail_max=ratio_tail_max,
        reciprocal_sum=partial,
        reciprocal_tail_fraction=tail_fraction,
        verdict_monotone=verdict_a,
        verdict_ratio=verdict_b,
        verdict_reciprocal=verdict_c,
        verdict=overall,
    )


@dataclass(frozen=True)
class EscapeProfile:
    """Exact probabilities of avoiding a core set while surviving.

    ``sequence[n-1] = P_x0(alive at n, X_1..X_n all outside the core)``;
    ``rho_hat`` is the geometric rate fitted to the tail half by log-linear
    regression (zero when the sequence vanishes).
    """

    sequence: np.ndarray
    rho_hat: float
    core: tuple
    x0: int


def escape_prob_profile(kernel, core, x0, n_max=50) -> EscapeProfile:
    """Iterate the sub-stochastic kernel restricted to the core's complement.

    ``kernel`` is a one-step (time-1 or uniformized) transition matrix of an
    absorbed chain; ``core`` the witness set (1-based labels) containing the
    start ``x0``.
    """
    p = np.asarray(
        kernel.toarray() if sp.issparse(kernel) else kernel, dtype=float
    )
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise DimensionMismatch(f"kernel must be square, got {p.shape}")
    k = p.shape[0]
    core = sorted(set(int(z) for z in core))
    if not core:
        raise InvalidParameter("core set must be nonempty")
    if any(not 1 <= z <= k for z in core):
        raise DimensionMismatch("core labels outside 1..k")
    if x0 not in core:
        raise InvalidParameter(f"start {x0} must belong to the core set")
    if n_max < 1:
        raise InvalidParameter("n_max must be >= 1")

    outside = np.setdiff1d(np.arange(k), np.asarray(core) - 1)
    seq = np.zeros(n_max)
    if outside.size:
        v = p[x0 - 1, outside]
        sub = p[np.ix_(outside, outside)]
        seq[0] = v.sum()
        for n in range(1, n_max):
            v = v @ sub
            seq[n] = v.sum()

    tail = np.arange(n_max // 2, n_max)
    if np.all(seq[tail] > 0):
        slope = np.polyfit(tail + 1.0, np.log(seq[tail]), 1)[0]
        rho_hat = float(math.exp(slope))
    else:
        rho_hat = 0.0
    return EscapeProfile(
        sequence=seq, rho_hat=rho_hat, core=tuple(core), x0=int(x0)
    )
