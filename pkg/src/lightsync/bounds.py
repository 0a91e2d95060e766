"""Analytic security and complexity calculators.

Covers the challenge-race failure bound (Chernoff-style, optimized exponent
m0, worst case over difficulty-change times and adversary targets), an exact
Poisson race oracle, the velvet-fork vote bounds, parameter solvers for the
challenge period and for alpha/beta, and the proof-size comparison tables.

Tail and bound arithmetic runs in log space; binomial sums use exact big
rationals so tiny probabilities never underflow or round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import poisson


@dataclass(frozen=True)
class RaceConfig:
    """Two-segment race parameters: honest and adversary rates and targets
    before/after each side's single difficulty change, the challenge period
    t, and the change times t1 (honest) and t1p (adversary)."""

    lambda1: float
    lambda2: float
    lambda1p: float
    lambda2p: float
    T1: float
    T2: float
    T1p: float
    T2p: float
    t: float
    t1: float
    t1p: float

    def __post_init__(self):
        if min(self.T1, self.T2, self.T1p, self.T2p) <= 0:
            raise ValueError("targets must be positive")
        if self.T2 < self.T1 or self.T2p < self.T1p:
            raise ValueError("segments must be ordered with the lower target first")
        if min(self.lambda1, self.lambda2, self.lambda1p, self.lambda2p) < 0:
            raise ValueError("rates must be nonnegative")
        if self.t < 0 or not 0 <= self.t1 <= self.t or not 0 <= self.t1p <= self.t:
            raise ValueError("change times must lie inside [0, t]")
        if not math.isclose(self.lambda1 * self.T2, self.lambda2 * self.T1, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError("honest mining power must stay constant across the change")
        if not math.isclose(self.lambda1p * self.T2p, self.lambda2p * self.T1p, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError("adversary mining power must stay constant across the change")
        if self.lambda1 / self.T1 <= self.lambda1p / self.T1p:
            raise ValueError("honest mining power must exceed the adversary's")

    @classmethod
    def equal_targets(cls, lam: float, lam_p: float, t: float, target: float = 1.0) -> "RaceConfig":
        return cls(lam, lam, lam_p, lam_p, target, target, target, target, t, t, t)

    @property
    def honest_power(self) -> float:
        return self.lambda1 / self.T1

    @property
    def adversary_power(self) -> float:
        return self.lambda1p / self.T1p


@dataclass(frozen=True)
class SecurityParams:
    k: int
    alpha: int
    beta: int
    M_a: float
    M_h: float
    epsilon: float
    upgraded_fraction: float = 1.0

    def __post_init__(self):
        if not math.isclose(self.M_a + self.M_h, 1.0, rel_tol=1e-9):
            raise ValueError("M_a + M_h must equal 1")
        if self.M_h <= self.M_a:
            raise ValueError("upgraded honest majority required")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must be in (0, 1)")
        if not 0 < self.upgraded_fraction <= 1:
            raise ValueError("upgraded_fraction must be in (0, 1]")


def m0_of(cfg: RaceConfig) -> float:
    """Exponent minimizing the equal-reduction race bound:
    ln(T1' lam1 / (T1 lam1')) / (1 + T1'/T1)."""
    if cfg.lambda1p <= 0:
        raise ValueError("m0 needs a positive adversary rate")
    ratio = cfg.T1p * cfg.lambda1 / (cfg.T1 * cfg.lambda1p)
    if ratio <= 1:
        raise ValueError("m0 undefined unless honest power strictly dominates")
    return math.log(ratio) / (1 + cfg.T1p / cfg.T1)


def chernoff_tail(n1: int, n2: int, n2p: int, m: float, cfg: RaceConfig) -> float:
    """Markov/Chernoff bound on the adversary's first-segment count exceeding
    n1*T1'/T1 + n2*T1'/T2 - n2'*T1'/T2', at exponent m > 0."""
    if m <= 0:
        raise ValueError("m must be positive")
    exponent = (
        (math.exp(m) - 1) * cfg.lambda1p * cfg.t1p
        - m * n1 * cfg.T1p / cfg.T1
        - m * n2 * cfg.T1p / cfg.T2
        + m * n2p * cfg.T1p / cfg.T2p
    )
    return math.exp(exponent) if exponent < 700 else math.inf


def bound_factors(m: float, cfg: RaceConfig) -> tuple[float, float, float]:
    """Per-unit-time exponent rates of the three factors of the race bound:
    the honest-change factor (weight t1), the adversary-change factor
    (weight t1p), and the base factor (weight t)."""
    r1 = cfg.T1p / cfg.T1
    r2 = cfg.T1p / cfg.T2
    r2p = cfg.T1p / cfg.T2p
    f1 = -cfg.lambda1 + cfg.lambda2 + cfg.lambda1 * math.exp(-m * r1) - cfg.lambda2 * math.exp(-m * r2)
    f2 = cfg.lambda1p * math.exp(m) - cfg.lambda2p * math.exp(m * r2p) - cfg.lambda1p + cfg.lambda2p
    f3 = (
        cfg.lambda2p * math.exp(m * r2p)
        - cfg.lambda2
        - cfg.lambda2p
        + cfg.lambda2 * math.exp(-m * r2)
    )
    return f1, f2, f3


def log_bound_T(m: float, cfg: RaceConfig) -> float:
    if m <= 0:
        raise ValueError("m must be positive")
    f1, f2, f3 = bound_factors(m, cfg)
    return cfg.t1 * f1 + cfg.t1p * f2 + cfg.t * f3


def bound_T(m: float, cfg: RaceConfig) -> float:
    """Closed-form bound on the adversary winning the difficulty race."""
    lb = log_bound_T(m, cfg)
    return math.exp(lb) if lb < 700 else math.inf


@dataclass(frozen=True)
class Theorem1Bound:
    bound: float
    m0: float
    t1: float
    t1p: float
    T1p: float
    T2p: float


def theorem1_failure_bound(
    cfg: RaceConfig,
    grid: int = 64,
    adversary_targets: Iterable[tuple[float, float]] | None = None,
) -> Theorem1Bound:
    """Worst case of the race bound at m0 over a grid of change times
    (t1, t1p) in [0, t]^2 and over the supplied adversary target choices.

    Adversary rates rescale with his targets at constant mining power; each
    target pair is ordered low-first per the symmetry reduction.
    """
    if grid < 1:
        raise ValueError("grid must have at least one point")
    pairs = list(adversary_targets) if adversary_targets is not None else [(cfg.T1p, cfg.T2p)]
    if not pairs:
        raise ValueError("adversary target sweep must be non-empty")
    adv_power = cfg.adversary_power
    times = [cfg.t * i / (grid - 1) for i in range(grid)] if grid > 1 else [cfg.t]
    best = None
    for pair in pairs:
        T1p, T2p = sorted(pair)
        sub = replace(
            cfg,
            T1p=T1p,
            T2p=T2p,
            lambda1p=adv_power * T1p,
            lambda2p=adv_power * T2p,
            t1=0.0,
            t1p=0.0,
        )
        m0 = m0_of(sub)
        f1, f2, f3 = bound_factors(m0, sub)
        base = cfg.t * f3
        for t1 in times:
            for t1p in times:
                lb = base + t1 * f1 + t1p * f2
                if best is None or lb > best[0]:
                    best = (lb, m0, t1, t1p, T1p, T2p)
    lb, m0, t1, t1p, T1p, T2p = best
    return Theorem1Bound(math.exp(lb) if lb < 700 else math.inf, m0, t1, t1p, T1p, T2p)


def equal_target_log_rate(lam: float, lam_p: float) -> float:
    """d(log bound)/dt for the equal-target race at the optimal exponent:
    2*sqrt(lam*lam') - lam - lam', strictly negative below honest power."""
    if lam <= 0 or lam_p < 0 or lam_p >= lam:
        raise ValueError("need 0 <= lam' < lam")
    if lam_p == 0:
        return -lam
    m0 = 0.5 * math.log(lam / lam_p)
    return (math.exp(m0) - 1) * lam_p + lam * (math.exp(-m0) - 1)


def exact_race_failure(lam: float, lam_p: float, t: float) -> float:
    """Pr{N' >= N} for independent Poisson counts N(lam*t), N'(lam'*t).

    Truncated double summation with the truncation error kept below 1e-3 of
    the result; ties count as adversary wins.
    """
    if lam < 0 or lam_p < 0 or t < 0:
        raise ValueError("rates and time must be nonnegative")
    mu, mup = lam * t, lam_p * t
    if mu == 0:
        return 1.0
    hi = int(mu + mup + 10 * math.sqrt(mu + mup) + 30)
    while True:
        ns = np.arange(hi + 1)
        total = float(np.sum(poisson.pmf(ns, mu) * poisson.sf(ns - 1, mup)))
        tail = float(poisson.sf(hi, mu)) * float(poisson.sf(hi, mup))
        if tail <= 1e-4 * total or hi > 10**7:
            return total
        hi *= 2


def candidates_miss_prob(M_a: float, beta: int) -> float:
    """Probability that none of the beta candidates was mined honestly: M_a^beta."""
    if not 0 <= M_a < 1:
        raise ValueError("M_a must be in [0, 1)")
    if beta < 1:
        raise ValueError("beta must be at least 1")
    return float(M_a) ** beta


@dataclass(frozen=True)
class VoteTail:
    exact: Fraction
    closed_form: float


def invalid_root_vote_tail(M_a, alpha: int) -> VoteTail:
    """Chance that adversary voters reach the acceptance threshold for a bad
    root among the next alpha upgraded blocks.

    ``exact`` sums the binomial upper tail from ceil(alpha/2) in big
    rationals; ``closed_form`` is the (M_a*M_h)^((alpha-1)/2) * 2^(alpha-1)
    relaxation, always >= exact.
    """
    if alpha < 1:
        raise ValueError("alpha must be at least 1")
    p = Fraction(M_a)
    if not 0 < p < Fraction(1, 2):
        raise ValueError("M_a must be in (0, 0.5)")
    a, d = p.numerator, p.denominator
    b = d - a
    lo = (alpha + 1) // 2
    num = sum(math.comb(alpha, i) * a**i * b ** (alpha - i) for i in range(lo, alpha + 1))
    exact = Fraction(num, d**alpha)
    log2_closed = (alpha - 1) / 2 * math.log2(float(p) * float(1 - p)) + (alpha - 1)
    return VoteTail(exact, 2.0**log2_closed)


class BoundsSearchError(Exception):
    pass


def solve_challenge_period(
    epsilon: float, lam: float, lam_p: float, method: str = "chernoff"
) -> tuple[float, float]:
    """Smallest t with equal-target race failure <= epsilon, by bisection.

    Returns (t, expected_headers = lam * t); callers floor the header count
    at k+1. ``chernoff`` uses the closed-form bound, ``exact`` the Poisson
    race oracle, which the bound dominates, so it yields a shorter period.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must be in (0, 1)")
    if lam <= 0 or lam_p < 0 or lam_p >= lam:
        raise ValueError("need adversary rate strictly below the honest rate")
    if method not in ("chernoff", "exact"):
        raise ValueError(f"unknown method {method!r}")
    rate = equal_target_log_rate(lam, lam_p)

    def failure(t: float) -> float:
        if method == "chernoff":
            return math.exp(rate * t)
        return exact_race_failure(lam, lam_p, t)

    hi = math.log(epsilon) / rate  # Chernoff solution, valid upper start for both
    for _ in range(64):
        if failure(hi) <= epsilon:
            break
        hi *= 2
    lo = 0.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if failure(mid) <= epsilon:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-9 * hi:
            break
    return hi, lam * hi


def solve_alpha(epsilon: float, M_a: float, cap: int = 2048) -> int:
    """Smallest vote-buffer length whose exact acceptance tail is <= epsilon.

    The tail zigzags between odd and even lengths, so this scans linearly up
    to the cap rather than bisecting.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must be in (0, 1)")
    if M_a == 0:
        return 1
    eps = Fraction(epsilon)
    for alpha in range(1, cap + 1):
        if invalid_root_vote_tail(M_a, alpha).exact <= eps:
            return alpha
    raise BoundsSearchError(f"no alpha up to {cap} reaches epsilon={epsilon} at M_a={M_a}")


def solve_beta(epsilon: float, M_a: float, cap: int = 10**6) -> int:
    """Smallest candidate count with miss probability M_a^beta <= epsilon."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must be in (0, 1)")
    if not 0 <= M_a < 1:
        raise ValueError("M_a must be in [0, 1)")
    if M_a == 0:
        return 1
    beta = max(1, math.ceil(math.log(epsilon) / math.log(M_a)) - 1)
    while candidates_miss_prob(M_a, beta) > epsilon:
        beta += 1
        if beta > cap:
            raise BoundsSearchError(f"no beta up to {cap}")
    return beta


# --- proof-size comparison tables ---


@dataclass(frozen=True)
class SizeModel:
    header_bytes: int = 508
    chain_length: int = 10**6
    expected_proof_headers: int = 140


def proof_size_table(model: SizeModel, chain_lengths: Sequence[int]) -> list[dict]:
    """SPV grows linearly with the chain; the challenge proof stays put."""
    light_mb = model.expected_proof_headers * model.header_bytes / 1e6
    rows = []
    for n in chain_lengths:
        rows.append(
            {
                "protocol": "SPV",
                "chain_length": n,
                "proof_MB": n * model.header_bytes / 1e6,
                "complexity_class": "O(n)",
            }
        )
    for n in chain_lengths:
        rows.append(
            {
                "protocol": "LightSync",
                "chain_length": n,
                "proof_MB": light_mb,
                "complexity_class": "O(1)",
            }
        )
    return rows


def protocol_comparison() -> list[dict]:
    """Static verifier-complexity comparison across light-client families."""
    return [
        {"protocol": "SPV", "complexity_class": "O(n)", "added_structure": None},
        {"protocol": "NIPoPoW", "complexity_class": "O(polylog n)", "added_structure": "Interlink"},
        {"protocol": "FlyClient", "complexity_class": "O(polylog n)", "added_structure": "MMR"},
        {"protocol": "LightSync", "complexity_class": "O(1)", "added_structure": "MMR"},
    ]
