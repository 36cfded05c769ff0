"""Group statistics: ASPC, power calculations, voxelwise tests, FDR.

The distribution functions are implemented here from the usual erfc,
rational-quantile and continued-fraction expansions so the core carries no
statistics dependency. Accuracy is driven well below 1e-9 by Halley
refinement of the quantile and a tight convergence threshold in the
incomplete beta fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    GridMismatch,
    InsufficientSamples,
    InvalidDesign,
    NumericalFailure,
    ValidationFailure,
    ZeroDenominator,
)
from .geometry import Svf, grids_close
from .volume_io import MaskVolume, Volume


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


_QA = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
       1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_QB = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
       6.680131188771972e+01, -1.328068155288572e+01)
_QC = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
       -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_QD = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
       3.754408661907416e+00)


def _quantile_lower_half(p: float) -> float:
    if p < 0.02425:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((_QC[0] * q + _QC[1]) * q + _QC[2]) * q + _QC[3]) * q + _QC[4]) * q + _QC[5])
             / ((((_QD[0] * q + _QD[1]) * q + _QD[2]) * q + _QD[3]) * q + 1.0))
    else:
        q = p - 0.5
        r = q * q
        x = ((((((_QA[0] * r + _QA[1]) * r + _QA[2]) * r + _QA[3]) * r + _QA[4]) * r + _QA[5]) * q
             / (((((_QB[0] * r + _QB[1]) * r + _QB[2]) * r + _QB[3]) * r + _QB[4]) * r + 1.0))
    # Halley refinement; the lower-tail CDF keeps full relative precision
    for _ in range(2):
        err = normal_cdf(x) - p
        u = err * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
        x = x - u / (1.0 + x * u / 2.0)
    return x


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF, rational approximation plus Halley steps.

    Upper-tail arguments reflect through the exact 1 - p so both tails keep
    relative accuracy far beyond the 1e-9 the callers rely on.
    """
    if not 0.0 < p < 1.0:
        raise InvalidDesign(f"quantile probability must lie strictly in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        return -_quantile_lower_half(1.0 - p)
    return _quantile_lower_half(p)


def _beta_cf(a: float, b: float, x: float) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            return h
    raise NumericalFailure(f"incomplete beta fraction did not converge for a={a}, b={b}, x={x}")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) by the Lentz continued fraction."""
    if not (a > 0 and b > 0):
        raise ValidationFailure("incomplete beta needs positive shape parameters")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_bt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
              + a * math.log(x) + b * math.log1p(-x))
    bt = math.exp(log_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _beta_cf(a, b, x) / a
    return 1.0 - bt * _beta_cf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided p-value of a t statistic."""
    if df <= 0:
        raise ValidationFailure("t distribution needs positive degrees of freedom")
    return betainc_reg(df / 2.0, 0.5, df / (df + float(t) ** 2))


def f_sf(f: float, d1: float, d2: float) -> float:
    """Upper tail of the F distribution."""
    if d1 <= 0 or d2 <= 0:
        raise ValidationFailure("F distribution needs positive degrees of freedom")
    if f <= 0:
        return 1.0
    return betainc_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * float(f)))


def aspc(v1, v2):
    """Absolute symmetrised percent change between two volumes, bounded by 200."""
    a = np.asarray(v1, dtype=np.float64)
    b = np.asarray(v2, dtype=np.float64)
    denom = a + b
    if np.any(denom <= 0):
        raise ZeroDenominator("aspc needs strictly positive volume sums")
    out = 100.0 * 2.0 * np.abs(b - a) / denom
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class StudyDesign:
    alpha: float
    power: float
    effect_size: float
    n_timepoints: int
    time_variance: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidDesign(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.power < 1.0:
            raise InvalidDesign(f"power must lie in (0, 1), got {self.power}")
        if self.effect_size == 0:
            raise InvalidDesign("effect size must be nonzero")
        if self.n_timepoints < 2:
            raise InvalidDesign("a longitudinal design needs at least 2 timepoints")
        if not self.time_variance > 0:
            raise InvalidDesign("within-subject time variance must be positive")


@dataclass(frozen=True)
class SampleSize:
    raw: float
    subjects: int


def sample_size(design: StudyDesign, sigma: float, rho: float) -> SampleSize:
    """Minimum subjects per arm to detect the design's rate difference.

    m = 2 (z_alpha + z_power)^2 sigma^2 (1 - rho) / (N s_x^2 d^2), reported
    raw and ceiled. Higher correlation between repeated measures, more
    timepoints or wider time spread all shrink the requirement.
    """
    if not sigma > 0:
        raise InvalidDesign("residual standard deviation must be positive")
    if not 0.0 <= rho < 1.0:
        raise InvalidDesign(f"repeated-measure correlation must lie in [0, 1), got {rho}")
    z = normal_quantile(1.0 - design.alpha) + normal_quantile(design.power)
    m = (2.0 * z**2 * sigma**2 * (1.0 - rho)
         / (design.n_timepoints * design.time_variance * design.effect_size**2))
    return SampleSize(raw=m, subjects=int(math.ceil(m)))


def sample_size_reduction(sigma_a: float, rho_a: float, sigma_b: float, rho_b: float) -> float:
    """Required-sample ratio of method a to method b, as a percentage."""
    num = sigma_a**2 * (1.0 - rho_a)
    den = sigma_b**2 * (1.0 - rho_b)
    if not (num > 0 and den > 0):
        raise ZeroDenominator("sample size reduction needs positive variance terms")
    return 100.0 * num / den


_t_sf_vec = np.vectorize(t_sf_two_sided, otypes=[np.float64])
_f_sf_vec = np.vectorize(f_sf, otypes=[np.float64])


def _group_stack(group: list, what: str) -> np.ndarray:
    if len(group) < 2:
        raise InsufficientSamples(f"{what} needs at least 2 subjects per group, got {len(group)}")
    grid = group[0].grid
    for member in group[1:]:
        if not grids_close(member.grid, grid):
            raise GridMismatch(f"{what} group members live on different grids")
    if isinstance(group[0], (Volume, MaskVolume)):
        return np.stack([m.data for m in group])
    return np.stack([m.values for m in group])


def _mask_array(mask: MaskVolume | None, grid) -> np.ndarray:
    if mask is None:
        return np.ones(grid.shape, dtype=bool)
    if not grids_close(mask.grid, grid):
        raise GridMismatch("analysis mask grid differs from the data grid")
    return mask.data > 0.5


@dataclass(frozen=True)
class TTestResult:
    t: Volume
    p: Volume
    df: Volume


def voxelwise_ttest(
    group_a: list[Volume], group_b: list[Volume], mask: MaskVolume | None = None
) -> TTestResult:
    """Welch two-sample t-test per voxel, two-sided p-values.

    Voxels with zero variance in both groups get t = 0 and p = 1; voxels
    outside the mask likewise.
    """
    a = _group_stack(group_a, "t-test")
    b = _group_stack(group_b, "t-test")
    grid = group_a[0].grid
    if not grids_close(grid, group_b[0].grid):
        raise GridMismatch("the two groups live on different grids")
    inside = _mask_array(mask, grid)
    na, nb = a.shape[0], b.shape[0]
    mean_a, mean_b = a.mean(axis=0), b.mean(axis=0)
    var_a = a.var(axis=0, ddof=1)
    var_b = b.var(axis=0, ddof=1)
    se2 = var_a / na + var_b / nb
    ok = inside & (se2 > 0)
    t = np.zeros(grid.shape)
    t[ok] = (mean_a[ok] - mean_b[ok]) / np.sqrt(se2[ok])
    df = np.full(grid.shape, float(na + nb - 2))
    df_den = (var_a / na) ** 2 / (na - 1) + (var_b / nb) ** 2 / (nb - 1)
    df[ok] = se2[ok] ** 2 / df_den[ok]
    p = np.ones(grid.shape)
    p[ok] = _t_sf_vec(t[ok], df[ok])
    return TTestResult(Volume(grid, t), Volume(grid, p), Volume(grid, df))


@dataclass(frozen=True)
class HotellingResult:
    t2: Volume
    p: Volume
    singular: MaskVolume


def hotelling_t2(
    group_a: list[Svf], group_b: list[Svf], mask: MaskVolume | None = None
) -> HotellingResult:
    """Two-sample Hotelling T² on 3-vector fields with pooled covariance.

    Significance comes from the exact F transformation. Voxels where the
    pooled covariance is numerically singular are flagged and reported as
    p = 1 rather than aborting the map.
    """
    a = _group_stack(group_a, "Hotelling test")
    b = _group_stack(group_b, "Hotelling test")
    grid = group_a[0].grid
    if not grids_close(grid, group_b[0].grid):
        raise GridMismatch("the two groups live on different grids")
    na, nb = a.shape[0], b.shape[0]
    dim = a.shape[-1]
    if min(na, nb) <= dim:
        raise InsufficientSamples(
            f"Hotelling test needs more than {dim} subjects per group, got {na} and {nb}"
        )
    inside = _mask_array(mask, grid)
    n = na + nb
    diff = a.mean(axis=0) - b.mean(axis=0)
    dev_a = a - a.mean(axis=0)
    dev_b = b - b.mean(axis=0)
    scatter = (np.einsum("n...i,n...j->...ij", dev_a, dev_a)
               + np.einsum("n...i,n...j->...ij", dev_b, dev_b))
    pooled = scatter / (n - 2)

    det = np.linalg.det(pooled)
    scale = np.trace(pooled, axis1=-2, axis2=-1) / dim
    singular = ~(det > (1e-12 * np.maximum(scale, 1e-30) ** dim))
    solvable = pooled.copy()
    solvable[singular] = np.eye(dim)
    solved = np.linalg.solve(solvable, diff[..., None])[..., 0]
    t2 = (na * nb / n) * np.einsum("...i,...i->...", diff, solved)
    if singular.any():
        # rank-deficient voxels still get the statistic restricted to the
        # informative subspace, but no trustworthy F tail
        flat = singular & inside
        pinv = np.linalg.pinv(pooled[flat])
        d = diff[flat]
        t2[flat] = (na * nb / n) * np.einsum("vi,vij,vj->v", d, pinv, d)
    t2 = np.where(inside, t2, 0.0)

    fstat = t2 * (n - dim - 1) / (dim * (n - 2))
    p = np.ones(grid.shape)
    ok = inside & ~singular
    p[ok] = _f_sf_vec(fstat[ok], float(dim), float(n - dim - 1))
    return HotellingResult(
        Volume(grid, t2),
        Volume(grid, p),
        MaskVolume(grid, (singular & inside).astype(np.float64)),
    )


@dataclass(frozen=True)
class FdrResult:
    threshold: float
    mask: np.ndarray
    n_significant: int


def fdr_bh(pvals, q: float) -> FdrResult:
    """Benjamini-Hochberg step-up threshold over a flat collection of p-values."""
    p = np.asarray(pvals, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValidationFailure("FDR needs at least one p-value")
    if np.any((p < 0) | (p > 1)) or not np.isfinite(p).all():
        raise ValidationFailure("p-values must lie in [0, 1]")
    if not 0.0 < q < 1.0:
        raise ValidationFailure(f"FDR rate must lie in (0, 1), got {q}")
    order = np.sort(p)
    crit = q * np.arange(1, p.size + 1) / p.size
    passing = np.nonzero(order <= crit)[0]
    threshold = float(order[passing[-1]]) if passing.size else 0.0
    mask = p <= threshold if passing.size else np.zeros(p.size, dtype=bool)
    mask = mask.reshape(np.asarray(pvals, dtype=np.float64).shape)
    return FdrResult(threshold=threshold, mask=mask, n_significant=int(mask.sum()))
