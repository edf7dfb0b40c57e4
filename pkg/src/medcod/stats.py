"""Five-run confidence intervals and block-baseline significance marking.

The CI path uses a static two-sided 95% t-table (no special-function
dependency); the Welch p-value evaluates the t CDF through a
continued-fraction regularized incomplete beta, good to ~1e-10.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# Two-sided 95% critical values of Student's t, df 1..30, then normal limit.
T_TABLE_95 = {
    1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571,
    6: 2.447, 7: 2.365, 8: 2.306, 9: 2.262, 10: 2.228,
    11: 2.201, 12: 2.179, 13: 2.160, 14: 2.145, 15: 2.131,
    16: 2.120, 17: 2.110, 18: 2.101, 19: 2.093, 20: 2.086,
    21: 2.080, 22: 2.074, 23: 2.069, 24: 2.064, 25: 2.060,
    26: 2.056, 27: 2.052, 28: 2.048, 29: 2.045, 30: 2.042,
}
T_NORMAL_LIMIT_95 = 1.960

ALPHA = 0.05


def t_star_95(df: int) -> float:
    if df < 1:
        raise ValueError("degrees of freedom must be >= 1")
    return T_TABLE_95.get(df, T_NORMAL_LIMIT_95)


@dataclass
class ConfidenceInterval:
    mean: float
    std: float
    se: float
    t_star: float
    margin: float
    lo: float
    hi: float
    n: int


@dataclass
class SampleSet:
    metric: str
    condition: tuple  # (model, strategy, block)
    values: list[float]

    def __post_init__(self):
        if not self.values:
            raise ValueError("values must be non-empty")
        if any(not math.isfinite(v) for v in self.values):
            raise ValueError("values must be finite")


@dataclass
class SignificanceResult:
    condition_a: tuple
    condition_b: tuple
    statistic: float
    p_value: float
    significant: bool


def ci95(values: list[float]) -> ConfidenceInterval:
    """Mean, sample std, SE, t-table margin, and the 95% interval."""
    n = len(values)
    if n < 2:
        raise ValueError("need at least two values")
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    std = math.sqrt(var)
    se = std / math.sqrt(n)
    t_star = t_star_95(n - 1)
    margin = t_star * se
    return ConfidenceInterval(
        mean=mean, std=std, se=se, t_star=t_star, margin=margin,
        lo=mean - margin, hi=mean + margin, n=n,
    )


# ---------------------------------------------------------------------------
# t distribution via the regularized incomplete beta


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    max_iterations = 300
    eps = 1e-15
    fpmin = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iterations + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def _betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with (possibly fractional) df, t >= 0."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return 0.5 * _betainc(df / 2.0, 0.5, x)


def welch_t_test(a: SampleSet, b: SampleSet) -> SignificanceResult:
    """Welch two-sample t-test, two-sided, significant at p < 0.05.

    Both samples constant and equal means p = 1 by convention; constant
    but different means an infinite statistic and p = 0.
    """
    na, nb = len(a.values), len(b.values)
    if na < 2 or nb < 2:
        raise ValueError("each sample needs at least two values")
    mean_a = sum(a.values) / na
    mean_b = sum(b.values) / nb
    var_a = sum((v - mean_a) ** 2 for v in a.values) / (na - 1)
    var_b = sum((v - mean_b) ** 2 for v in b.values) / (nb - 1)
    pooled = var_a / na + var_b / nb
    if pooled == 0.0:
        if mean_a == mean_b:
            return SignificanceResult(a.condition, b.condition, 0.0, 1.0, False)
        statistic = math.copysign(math.inf, mean_a - mean_b)
        return SignificanceResult(a.condition, b.condition, statistic, 0.0, True)
    statistic = (mean_a - mean_b) / math.sqrt(pooled)
    df = pooled**2 / (
        (var_a / na) ** 2 / (na - 1) + (var_b / nb) ** 2 / (nb - 1)
    )
    p_value = 2.0 * t_sf(abs(statistic), df)
    p_value = min(1.0, max(0.0, p_value))
    return SignificanceResult(
        a.condition, b.condition, statistic, p_value, p_value < ALPHA
    )


# ---------------------------------------------------------------------------
# summary with block baselines


# Comparisons exactly as captioned: blocks 2 and 3 against block 1, block 4
# against block 3. Baseline rows are the direct-translation rows.
DEFAULT_BASELINE_MAP = {"B2": "B1", "B3": "B1", "B4": "B3"}
DIRECT_STRATEGY_ID = "direct-translation"


@dataclass
class SummaryRow:
    model: str
    block: str
    strategy: str
    metric: str
    mean: float
    ci_lo: float
    ci_hi: float
    starred: bool
    p_value: float | None = None


def summarize(
    samples: list[SampleSet],
    baseline_map: dict[str, str] | None = None,
    baseline_strategy: str = DIRECT_STRATEGY_ID,
) -> list[SummaryRow]:
    """One row per (model, strategy, block, metric) with CI and asterisks."""
    baseline_map = DEFAULT_BASELINE_MAP if baseline_map is None else baseline_map
    index: dict[tuple, SampleSet] = {}
    for sample in samples:
        model, strategy, block = sample.condition
        index[(model, strategy, block, sample.metric)] = sample

    rows: list[SummaryRow] = []
    for sample in samples:
        model, strategy, block = sample.condition
        interval = ci95(sample.values)
        starred = False
        p_value: float | None = None
        baseline_block = baseline_map.get(block)
        if baseline_block is not None:
            baseline = index.get((model, baseline_strategy, baseline_block, sample.metric))
            if baseline is None:
                raise ValueError(
                    f"baseline block {baseline_block!r} missing for "
                    f"({model}, {sample.metric})"
                )
            outcome = welch_t_test(sample, baseline)
            starred = outcome.significant
            p_value = outcome.p_value
        rows.append(
            SummaryRow(
                model=model,
                block=block,
                strategy=strategy,
                metric=sample.metric,
                mean=interval.mean,
                ci_lo=interval.lo,
                ci_hi=interval.hi,
                starred=starred,
                p_value=p_value,
            )
        )
    return rows
