"""Post-fit inferential battery.

Covers likelihood-ratio tests on the covariance structures, parametric
bootstrap tests for the pROM-vs-fROM variance and ICC contrasts, and the
log-scale analysis that expresses the pROM condition as a percentage of
full range of motion with per-exercise deviations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.stats import chi2

from .errors import ConvergenceError, DatasetBuildError
from .metareg import (
    CovarianceStructure,
    MetaDataset,
    ModelFit,
    R_MAX,
    VARIANCE_FLOOR_UNIT,
    ZERO_SD_TOLERANCE,
    blup_effects,
    fit_reml,
)
from .setmetrics import OutcomeKind, SetSummary, aggregate_summaries
from .synth import make_rng, simulate_response, _chol2

DEFAULT_BOOTSTRAP_B = 2000


class Hypothesis(Enum):
    RHO_ZERO = "rho_zero"  # exercise intercept/slope correlation is zero
    UV_EQUAL = "uv_equal"  # exercise intercept and slope variances equal
    XI_ZERO = "xi_zero"  # participant correlation is zero
    PQ_EQUAL = "pq_equal"  # participant variances equal


_REDUCTIONS = {
    Hypothesis.RHO_ZERO: ("exercise", CovarianceStructure.DIAG),
    Hypothesis.UV_EQUAL: ("exercise", CovarianceStructure.CS),
    Hypothesis.XI_ZERO: ("participant", CovarianceStructure.DIAG),
    Hypothesis.PQ_EQUAL: ("participant", CovarianceStructure.CS),
}


@dataclass(frozen=True)
class LrtResult:
    hypothesis: Hypothesis
    lam: float
    df: int
    p_value: float
    loglik_full: float
    loglik_reduced: float


def lrt(data: MetaDataset, hypothesis: Hypothesis, full_fit: ModelFit | None = None) -> LrtResult:
    """Likelihood-ratio test of one covariance restriction against UN/UN.

    Both fits keep identical fixed effects, so the REML likelihoods are
    comparable; the statistic is clamped at zero after retrying the full fit
    from the reduced optimum if optimization noise made it negative.
    """
    if full_fit is None:
        full_fit = fit_reml(data, CovarianceStructure.UN, CovarianceStructure.UN)
    if not (full_fit.structure_p is CovarianceStructure.UN and full_fit.structure_e is CovarianceStructure.UN):
        raise ValueError("the full model must use UN/UN structures")
    level, reduced_structure = _REDUCTIONS[hypothesis]
    if level == "exercise":
        sp, se = CovarianceStructure.UN, reduced_structure
    else:
        sp, se = reduced_structure, CovarianceStructure.UN
    try:
        reduced = fit_reml(data, sp, se)
    except ConvergenceError as exc:
        raise ConvergenceError(
            f"reduced model {sp.value}/{se.value} for {hypothesis.value} failed: {exc}",
            trace=exc.trace,
        ) from exc
    if full_fit.fixed_names != reduced.fixed_names or full_fit.n_rows != reduced.n_rows:
        raise ValueError("LRT requires identical fixed effects in both models")

    lam = 2.0 * (full_fit.loglik - reduced.loglik)
    if lam < -1e-6:
        # embed the reduced optimum as a warm start for the full model
        retry = fit_reml(data, CovarianceStructure.UN, CovarianceStructure.UN,
                         warm_start=_embed_reduced(reduced))
        if retry.loglik > full_fit.loglik:
            full_fit = retry
            lam = 2.0 * (full_fit.loglik - reduced.loglik)
    lam = max(0.0, lam)
    return LrtResult(
        hypothesis=hypothesis,
        lam=lam,
        df=1,
        p_value=float(chi2.sf(lam, 1)),
        loglik_full=full_fit.loglik,
        loglik_reduced=reduced.loglik,
    )


def _embed_reduced(reduced: ModelFit) -> np.ndarray:
    """Map a reduced fit's components into the UN/UN parameter vector."""
    def level(tau1_sq, tau2_sq, corr):
        t1 = math.sqrt(max(tau1_sq, 1e-16))
        t2 = math.sqrt(max(tau2_sq, 1e-16))
        z = math.atanh(max(-0.99, min(0.99, corr)) / R_MAX)
        return [math.log(t1), math.log(t2), z]

    return np.array(
        level(reduced.tau_p2, reduced.tau_q2, reduced.xi)
        + level(reduced.tau_u2, reduced.tau_v2, reduced.rho)
    )


def variance_contrasts(fit: ModelFit) -> dict:
    """Total between-participant / between-exercise variability per condition
    and the pROM-minus-fROM differences."""
    tp, tq = math.sqrt(fit.tau_p2), math.sqrt(fit.tau_q2)
    tu, tv = math.sqrt(fit.tau_u2), math.sqrt(fit.tau_v2)
    v_p_from = fit.tau_p2
    v_p_prom = fit.tau_p2 + fit.tau_q2 + 2.0 * fit.xi * tp * tq
    v_e_from = fit.tau_u2
    v_e_prom = fit.tau_u2 + fit.tau_v2 + 2.0 * fit.rho * tu * tv
    return {
        "V_p_fROM": v_p_from,
        "V_p_pROM": v_p_prom,
        "V_e_fROM": v_e_from,
        "V_e_pROM": v_e_prom,
        "D_p": v_p_prom - v_p_from,
        "D_e": v_e_prom - v_e_from,
    }


def icc_contrasts(fit: ModelFit, data: MetaDataset) -> dict:
    """Condition-specific intraclass correlations and their pROM-fROM shifts."""
    comps = variance_contrasts(fit)
    out = dict(comps)
    for label, mask in (("fROM", data.prom == 0.0), ("pROM", data.prom == 1.0)):
        sbar = float(data.sigma2[mask].mean()) if mask.any() else 0.0
        total = comps[f"V_p_{label}"] + comps[f"V_e_{label}"] + sbar
        out[f"mean_sigma2_{label}"] = sbar
        out[f"T_{label}"] = total
        out[f"ICC_p_{label}"] = comps[f"V_p_{label}"] / total if total > 0 else 0.0
        out[f"ICC_e_{label}"] = comps[f"V_e_{label}"] / total if total > 0 else 0.0
    out["delta_icc_p"] = out["ICC_p_pROM"] - out["ICC_p_fROM"]
    out["delta_icc_e"] = out["ICC_e_pROM"] - out["ICC_e_fROM"]
    return out


class ContrastKind(Enum):
    D_P = "D_p"
    D_E = "D_e"
    DELTA_ICC_P = "delta_icc_p"
    DELTA_ICC_E = "delta_icc_e"


def contrast_value(kind: ContrastKind, fit: ModelFit, data: MetaDataset) -> float:
    if kind is ContrastKind.D_P:
        return variance_contrasts(fit)["D_p"]
    if kind is ContrastKind.D_E:
        return variance_contrasts(fit)["D_e"]
    return icc_contrasts(fit, data)[kind.value]


@dataclass(frozen=True)
class ContrastResult:
    kind: ContrastKind
    estimate: float
    p_one_sided: float
    boot_replicates: int
    ci_low: float
    ci_high: float
    components: dict
    n_dropped: int = 0
    warning: str | None = None


def _parent_cholesky(fit: ModelFit) -> tuple[np.ndarray, np.ndarray]:
    return _chol2(fit.tau_p2, fit.tau_q2, fit.xi), _chol2(fit.tau_u2, fit.tau_v2, fit.rho)


def _bootstrap_refits(data: MetaDataset, fit: ModelFit, b: int, seed: int):
    """Yield (replicate_fit, replicate_data, generating_truth) triples;
    non-convergent replicates are dropped and counted."""
    chol_p, chol_e = _parent_cholesky(fit)
    dropped = 0
    fits = []
    for rep in range(b):
        rng = make_rng(seed, 3, rep)
        y_star, truth = simulate_response(data, fit.beta, chol_p, chol_e, rng)
        data_b = replace(data, y=y_star)
        try:
            fit_b = fit_reml(data_b, fit.structure_p, fit.structure_e, warm_start=fit.eta)
        except ConvergenceError:
            dropped += 1
            continue
        fits.append((fit_b, data_b, truth))
    return fits, dropped


def bootstrap_contrasts(
    data: MetaDataset,
    fit: ModelFit,
    kinds: tuple[ContrastKind, ...] = tuple(ContrastKind),
    b: int = DEFAULT_BOOTSTRAP_B,
    seed: int = 0,
) -> dict[ContrastKind, ContrastResult]:
    """One-sided parametric bootstrap tests for several contrasts at once.

    Replicates are simulated from the fitted model with the design and
    weights fixed, refit with the parent estimates as warm starts, and every
    requested contrast is recomputed per replicate; results are therefore
    identical to running each contrast with the same seed separately.
    """
    if b < 1:
        raise ValueError("bootstrap needs B >= 1")
    if not fit.converged:
        raise ConvergenceError("bootstrap requires a converged parent fit")
    refits, dropped = _bootstrap_refits(data, fit, b, seed)
    warning = None
    if dropped > 0.1 * b:
        warning = f"{dropped} of {b} bootstrap replicates failed to converge"
    components = icc_contrasts(fit, data)
    out = {}
    for kind in kinds:
        values = np.array([contrast_value(kind, fb, db) for fb, db, _ in refits])
        estimate = contrast_value(kind, fit, data)
        n_ok = len(values)
        p = (1.0 + float(np.count_nonzero(values <= 0.0))) / (n_ok + 1.0)
        ci_low, ci_high = (
            (float(np.percentile(values, 2.5)), float(np.percentile(values, 97.5)))
            if n_ok
            else (float("nan"), float("nan"))
        )
        out[kind] = ContrastResult(
            kind=kind,
            estimate=estimate,
            p_one_sided=p,
            boot_replicates=n_ok,
            ci_low=ci_low,
            ci_high=ci_high,
            components=components,
            n_dropped=dropped,
            warning=warning,
        )
    return out


def bootstrap_contrast(
    data: MetaDataset,
    fit: ModelFit,
    kind: ContrastKind,
    b: int = DEFAULT_BOOTSTRAP_B,
    seed: int = 0,
) -> ContrastResult:
    return bootstrap_contrasts(data, fit, (kind,), b, seed)[kind]


@dataclass(frozen=True)
class PercentRomExercise:
    exercise: str
    v_e: float
    delta_e: float
    pct_rom: float
    ci_low: float
    ci_high: float
    p_raw: float
    p_bh: float


@dataclass(frozen=True)
class PercentRomResult:
    overall_pct_rom: float
    beta1: float
    fit: ModelFit
    per_exercise: tuple[PercentRomExercise, ...]
    boot_replicates: int
    n_dropped: int
    warning: str | None = None


def build_log_rom_dataset(
    summaries: list[SetSummary],
    sex_by_participant: dict[str, str] | None = None,
    floor_unit: float = VARIANCE_FLOOR_UNIT,
) -> MetaDataset:
    """Log-transformed mean-ROM dataset with delta-method sampling variances
    sigma2 = s^2 / (k * Rbar^2)."""
    rows = aggregate_summaries(
        [s for s in summaries if s.outcome is OutcomeKind.RANGE_OF_MOTION]
    )
    if not rows:
        raise DatasetBuildError("no range-of-motion summaries supplied")
    bad = [s for s in rows if s.mean <= 0]
    if bad:
        raise DatasetBuildError(
            f"mean ROM must be positive for the log model; offending participant(s): "
            f"{sorted({s.participant_id for s in bad})}"
        )
    sex_map = sex_by_participant or {}
    participants, exercises = [], []
    p_index, e_index = {}, {}
    y, sigma2, prom, female, pid, eid, floored = [], [], [], [], [], [], []
    for s in rows:
        if s.participant_id not in p_index:
            p_index[s.participant_id] = len(participants)
            participants.append(s.participant_id)
        if s.exercise.name not in e_index:
            e_index[s.exercise.name] = len(exercises)
            exercises.append(s.exercise.name)
        var = s.sd * s.sd / (s.k * s.mean * s.mean)
        hit = s.sd <= ZERO_SD_TOLERANCE
        if hit:
            var = floor_unit * floor_unit / (s.k * s.mean * s.mean)
        y.append(math.log(s.mean))
        sigma2.append(var)
        prom.append(1.0 if s.rom_condition.value == "pROM" else 0.0)
        female.append(1.0 if sex_map.get(s.participant_id, s.sex) == "F" else 0.0)
        pid.append(p_index[s.participant_id])
        eid.append(e_index[s.exercise.name])
        floored.append(hit)
    return MetaDataset(
        y=np.array(y),
        sigma2=np.array(sigma2),
        prom=np.array(prom),
        female=np.array(female),
        pid_idx=np.array(pid),
        eid_idx=np.array(eid),
        participants=tuple(participants),
        exercises=tuple(exercises),
        outcome=OutcomeKind.LOG_MEAN_ROM.value,
        floored=np.array(floored),
    )


def percent_rom_analysis(
    summaries: list[SetSummary],
    b: int = DEFAULT_BOOTSTRAP_B,
    seed: int = 0,
    sex_by_participant: dict[str, str] | None = None,
) -> PercentRomResult:
    """Overall %ROM = 100*exp(beta1) plus exercise-level deviations.

    Exercise effects delta_e = beta1 + v_e use empirical-Bayes slope
    predictions. Bootstrap replicates simulated from the fitted model serve
    two roles: recentred percentile spreads of delta_e give each %ROM_e
    confidence interval, and regressing each replicate's slope prediction on
    the slope value that generated it isolates the prediction's conditional
    sampling noise, which is the null reference for a two-sided test of
    H0: v_e = 0. Raw p-values are Benjamini-Hochberg adjusted across the
    exercises.
    """
    data = build_log_rom_dataset(summaries, sex_by_participant)
    fit = fit_reml(data, CovarianceStructure.UN, CovarianceStructure.UN)
    beta1 = float(fit.beta[1])
    _, eff_e = blup_effects(fit, data)
    v_hat = eff_e[:, 1]
    delta = beta1 + v_hat

    refits, dropped = _bootstrap_refits(data, fit, b, seed)
    n_ok = len(refits)
    warning = None
    if dropped > 0.1 * b:
        warning = f"{dropped} of {b} bootstrap replicates failed to converge"

    v_star = np.empty((n_ok, len(data.exercises)))
    v_true = np.empty((n_ok, len(data.exercises)))
    delta_star = np.empty((n_ok, len(data.exercises)))
    for i, (fb, db, truth) in enumerate(refits):
        _, eff = blup_effects(fb, db)
        v_star[i] = eff[:, 1]
        v_true[i] = truth.exercise_effects[:, 1]
        delta_star[i] = fb.beta[1] + eff[:, 1]

    p_raw = []
    ci = []
    for j in range(len(data.exercises)):
        # conditional sampling noise of the slope prediction: remove the part
        # explained by the slope value each replicate was generated with
        truth_var = float(np.var(v_true[:, j]))
        slope = float(np.cov(v_star[:, j], v_true[:, j])[0, 1] / truth_var) if truth_var > 0 else 0.0
        noise = v_star[:, j] - slope * v_true[:, j]
        noise = noise - np.mean(noise)
        lower = 1 + int(np.count_nonzero(noise <= v_hat[j]))
        upper = 1 + int(np.count_nonzero(noise >= v_hat[j]))
        p_raw.append(min(1.0, 2.0 * min(lower, upper) / (n_ok + 1.0)))
        centred = delta_star[:, j] - np.mean(delta_star[:, j])
        lo, hi = np.percentile(centred, [2.5, 97.5])
        ci.append((delta[j] + lo, delta[j] + hi))
    p_bh = benjamini_hochberg(p_raw)

    rows = tuple(
        PercentRomExercise(
            exercise=data.exercises[j],
            v_e=float(v_hat[j]),
            delta_e=float(delta[j]),
            pct_rom=100.0 * math.exp(float(delta[j])),
            ci_low=100.0 * math.exp(ci[j][0]),
            ci_high=100.0 * math.exp(ci[j][1]),
            p_raw=float(p_raw[j]),
            p_bh=float(p_bh[j]),
        )
        for j in range(len(data.exercises))
    )
    return PercentRomResult(
        overall_pct_rom=100.0 * math.exp(beta1),
        beta1=beta1,
        fit=fit,
        per_exercise=rows,
        boot_replicates=n_ok,
        n_dropped=dropped,
        warning=warning,
    )


def benjamini_hochberg(p_values) -> np.ndarray:
    """Step-up FDR adjustment: adjusted_(i) = min_{j >= i} m p_(j) / j, capped at 1."""
    p = np.asarray(p_values, dtype=float)
    if p.ndim != 1 or len(p) == 0:
        raise ValueError("p_values must be a non-empty 1-D sequence")
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    adjusted_sorted = np.minimum.accumulate(ranked[::-1])[::-1]
    adjusted_sorted = np.minimum(adjusted_sorted, 1.0)
    out = np.empty(m)
    out[order] = adjusted_sorted
    return out
