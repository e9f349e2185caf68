"""Crossed random-effects meta-regression fit by REML.

The model is

    Y = b0 + b1*pROM + b2*female + p_i + u_e + (q_i + v_e)*pROM + eps,

with bivariate normal (intercept, slope) effects per participant and per
exercise and known row variances sigma2 = s^2/k giving inverse-variance
weights. Variance-side parameters are optimized on an unconstrained scale
(log standard deviations, scaled-tanh correlations) with an analytic
gradient; the marginal covariance is handled through its low-rank-plus-
diagonal form so fits stay fast enough for bootstrap inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import optimize
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import chi2, norm, t as t_dist
from threadpoolctl import threadpool_limits

from .errors import ConvergenceError, DatasetBuildError, DesignError
from .setmetrics import OutcomeKind, SetSummary

FIXED_EFFECT_NAMES = ("intercept", "pROM", "female")
R_MAX = 0.999  # correlation magnitude cap, enforced by the tanh transform
VARIANCE_FLOOR_UNIT = 0.1  # in outcome units, applied when a set has sd ~ 0
# Spreads below any plausible measurement resolution count as zero: they
# would otherwise produce astronomically large weights that break the
# marginal covariance factorization without carrying real information.
ZERO_SD_TOLERANCE = 1e-5


class CovarianceStructure(Enum):
    UN = "UN"  # unstructured 2x2
    DIAG = "DIAG"  # correlation fixed at zero
    CS = "CS"  # equal intercept/slope variances, free correlation
    INTERCEPT = "INTERCEPT"  # intercept variance only
    NONE = "NONE"  # level absent

    @property
    def n_params(self) -> int:
        return {"UN": 3, "DIAG": 2, "CS": 2, "INTERCEPT": 1, "NONE": 0}[self.value]


@dataclass(frozen=True)
class MetaDataset:
    """Design table for the meta-regression: one row per (participant,
    exercise, condition)."""

    y: np.ndarray
    sigma2: np.ndarray
    prom: np.ndarray  # 1.0 for pROM rows
    female: np.ndarray  # 1.0 for female participants
    pid_idx: np.ndarray  # dense participant index per row
    eid_idx: np.ndarray  # dense exercise index per row
    participants: tuple[str, ...]
    exercises: tuple[str, ...]
    outcome: str
    floored: np.ndarray = field(default=None)  # rows that hit the variance floor

    def __post_init__(self):
        arrays = {}
        n = len(self.y)
        for name in ("y", "sigma2", "prom", "female"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise DatasetBuildError(f"{name} must have shape ({n},)")
            arrays[name] = arr
        for name in ("pid_idx", "eid_idx"):
            arr = np.asarray(getattr(self, name), dtype=int)
            if arr.shape != (n,):
                raise DatasetBuildError(f"{name} must have shape ({n},)")
            arrays[name] = arr
        floored = self.floored if self.floored is not None else np.zeros(n, dtype=bool)
        arrays["floored"] = np.asarray(floored, dtype=bool)
        if not np.all(np.isfinite(arrays["y"])):
            raise DatasetBuildError("non-finite outcome value")
        if np.any(arrays["sigma2"] <= 0) or not np.all(np.isfinite(arrays["sigma2"])):
            raise DatasetBuildError("sampling variances must be positive and finite")
        if len(self.participants) < 2 or len(self.exercises) < 2:
            raise DatasetBuildError("the crossed fit needs >= 2 participants and >= 2 exercises")
        if arrays["pid_idx"].max() >= len(self.participants) or arrays["pid_idx"].min() < 0:
            raise DatasetBuildError("participant indices out of range")
        if arrays["eid_idx"].max() >= len(self.exercises) or arrays["eid_idx"].min() < 0:
            raise DatasetBuildError("exercise indices out of range")
        keys = set()
        for pid, eid, g in zip(arrays["pid_idx"], arrays["eid_idx"], arrays["prom"]):
            key = (int(pid), int(eid), float(g))
            if key in keys:
                raise DatasetBuildError(
                    f"duplicate row for participant {self.participants[pid]}, "
                    f"exercise {self.exercises[eid]}, condition index {g}"
                )
            keys.add(key)
        for name, arr in arrays.items():
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "participants", tuple(self.participants))
        object.__setattr__(self, "exercises", tuple(self.exercises))

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.sigma2

    @property
    def design_matrix(self) -> np.ndarray:
        return np.column_stack([np.ones(self.n), self.prom, self.female])

    def scaled(self, c: float) -> "MetaDataset":
        return replace(self, y=self.y * c, sigma2=self.sigma2 * c * c)

    def canonical(self) -> "MetaDataset":
        """Rows sorted by (participant, exercise, condition).

        Every estimator canonicalizes first so permuting input rows cannot
        change floating-point summation order, keeping estimates bitwise
        stable under row permutations.
        """
        order = np.lexsort((self.prom, self.eid_idx, self.pid_idx))
        if np.array_equal(order, np.arange(self.n)):
            return self
        return MetaDataset(
            y=self.y[order],
            sigma2=self.sigma2[order],
            prom=self.prom[order],
            female=self.female[order],
            pid_idx=self.pid_idx[order],
            eid_idx=self.eid_idx[order],
            participants=self.participants,
            exercises=self.exercises,
            outcome=self.outcome,
            floored=self.floored[order],
        )


def build_dataset(
    summaries: list[SetSummary],
    sex_by_participant: dict[str, str] | None = None,
    outcome: OutcomeKind | None = None,
    floor_unit: float = VARIANCE_FLOOR_UNIT,
) -> MetaDataset:
    """Assemble the design table from aggregated set summaries.

    Rows whose sd is zero (below measurement resolution) receive the
    variance floor (floor_unit^2 / k) and are flagged. Duplicate
    (participant, exercise, condition) rows are an error; aggregate first.
    """
    rows = [s for s in summaries if outcome is None or s.outcome is outcome]
    if not rows:
        raise DatasetBuildError(f"no summaries for outcome {outcome}")
    kinds = {s.outcome for s in rows}
    if len(kinds) > 1:
        raise DatasetBuildError(f"mixed outcomes in one dataset: {sorted(k.value for k in kinds)}")
    sex_map = sex_by_participant or {}

    participants, exercises = [], []
    p_index: dict[str, int] = {}
    e_index: dict[str, int] = {}
    y, sigma2, prom, female, pid, eid, floored = [], [], [], [], [], [], []
    for s in rows:
        if s.participant_id not in p_index:
            p_index[s.participant_id] = len(participants)
            participants.append(s.participant_id)
        if s.exercise.name not in e_index:
            e_index[s.exercise.name] = len(exercises)
            exercises.append(s.exercise.name)
        var = s.sd * s.sd / s.k
        hit_floor = s.sd <= ZERO_SD_TOLERANCE
        if hit_floor:
            var = floor_unit * floor_unit / s.k
        y.append(s.mean)
        sigma2.append(var)
        prom.append(1.0 if s.rom_condition.value == "pROM" else 0.0)
        sex = sex_map.get(s.participant_id, s.sex)
        female.append(1.0 if sex == "F" else 0.0)
        pid.append(p_index[s.participant_id])
        eid.append(e_index[s.exercise.name])
        floored.append(hit_floor)

    return MetaDataset(
        y=np.array(y),
        sigma2=np.array(sigma2),
        prom=np.array(prom),
        female=np.array(female),
        pid_idx=np.array(pid),
        eid_idx=np.array(eid),
        participants=tuple(participants),
        exercises=tuple(exercises),
        outcome=rows[0].outcome.value,
        floored=np.array(floored),
    )


@dataclass(frozen=True)
class ModelFit:
    outcome: str
    structure_p: CovarianceStructure
    structure_e: CovarianceStructure
    fixed_names: tuple[str, ...]
    beta: np.ndarray
    se: np.ndarray
    zval: np.ndarray
    pval: np.ndarray
    vcov_beta: np.ndarray
    tau_p2: float
    tau_q2: float
    xi: float
    tau_u2: float
    tau_v2: float
    rho: float
    loglik: float
    aic: float
    bic: float
    qe_stat: float
    qe_df: int
    qe_p: float
    qm_stat: float
    qm_df: int
    qm_p: float
    converged: bool
    grad_norm: float
    n_rows: int
    eta: np.ndarray
    messages: tuple[str, ...] = ()

    @property
    def g_participant(self) -> np.ndarray:
        tp, tq = math.sqrt(self.tau_p2), math.sqrt(self.tau_q2)
        return np.array([[self.tau_p2, self.xi * tp * tq], [self.xi * tp * tq, self.tau_q2]])

    @property
    def g_exercise(self) -> np.ndarray:
        tu, tv = math.sqrt(self.tau_u2), math.sqrt(self.tau_v2)
        return np.array([[self.tau_u2, self.rho * tu * tv], [self.rho * tu * tv, self.tau_v2]])


def _level_g_and_derivs(structure: CovarianceStructure, theta: np.ndarray):
    """(tau1, tau2, r), the 2x2 G, and dG/dtheta list for one level."""
    if structure is CovarianceStructure.NONE:
        return (0.0, 0.0, 0.0), np.zeros((2, 2)), []
    if structure is CovarianceStructure.UN:
        t1, t2 = math.exp(theta[0]), math.exp(theta[1])
        th = math.tanh(theta[2])
        r = R_MAX * th
        dr = R_MAX * (1.0 - th * th)
        g = np.array([[t1 * t1, r * t1 * t2], [r * t1 * t2, t2 * t2]])
        d1 = np.array([[2 * t1 * t1, r * t1 * t2], [r * t1 * t2, 0.0]])
        d2 = np.array([[0.0, r * t1 * t2], [r * t1 * t2, 2 * t2 * t2]])
        d3 = dr * np.array([[0.0, t1 * t2], [t1 * t2, 0.0]])
        return (t1, t2, r), g, [d1, d2, d3]
    if structure is CovarianceStructure.DIAG:
        t1, t2 = math.exp(theta[0]), math.exp(theta[1])
        g = np.diag([t1 * t1, t2 * t2])
        d1 = np.array([[2 * t1 * t1, 0.0], [0.0, 0.0]])
        d2 = np.array([[0.0, 0.0], [0.0, 2 * t2 * t2]])
        return (t1, t2, 0.0), g, [d1, d2]
    if structure is CovarianceStructure.CS:
        t1 = math.exp(theta[0])
        th = math.tanh(theta[1])
        r = R_MAX * th
        dr = R_MAX * (1.0 - th * th)
        g = t1 * t1 * np.array([[1.0, r], [r, 1.0]])
        d1 = 2.0 * g
        d2 = t1 * t1 * dr * np.array([[0.0, 1.0], [1.0, 0.0]])
        return (t1, t1, r), g, [d1, d2]
    # INTERCEPT
    t1 = math.exp(theta[0])
    g = np.array([[t1 * t1, 0.0], [0.0, 0.0]])
    d1 = np.array([[2 * t1 * t1, 0.0], [0.0, 0.0]])
    return (t1, 0.0, 0.0), g, [d1]


class _Level:
    """Per-level design quantities reused across evaluations."""

    def __init__(self, idx: np.ndarray, prom: np.ndarray, sigma2: np.ndarray, n_clusters: int):
        self.idx = idx
        self.prom = prom
        self.n_clusters = n_clusters
        n = len(idx)
        rows = np.arange(n)
        self.dinv_z = np.zeros((n, 2 * n_clusters))
        self.dinv_z[rows, 2 * idx] = 1.0 / sigma2
        self.dinv_z[rows, 2 * idx + 1] = prom / sigma2


class _RemlProblem:
    """Evaluates the restricted log-likelihood and its gradient.

    V = D + U U' with U the cluster designs scaled by the Cholesky factors
    of the level covariance matrices, so every solve is O(n q^2) with
    q = 2(P + E).
    """

    def __init__(self, data: MetaDataset, structure_p: CovarianceStructure, structure_e: CovarianceStructure):
        self.data = data
        self.sp = structure_p
        self.se = structure_e
        self.X = data.design_matrix
        if np.linalg.matrix_rank(self.X) < self.X.shape[1]:
            raise DesignError(
                "fixed-effects design (intercept, pROM, female) is rank deficient; "
                "check that both conditions and both sexes are present"
            )
        self.y = data.y
        self.sigma2 = data.sigma2
        self.n, self.p = self.X.shape
        self.level_p = _Level(data.pid_idx, data.prom, data.sigma2, len(data.participants))
        self.level_e = _Level(data.eid_idx, data.prom, data.sigma2, len(data.exercises))
        self.n_params = structure_p.n_params + structure_e.n_params
        self.const = (self.n - self.p) * math.log(2.0 * math.pi)
        self._rows = np.arange(self.n)
        self._sqrt_sigma2 = np.sqrt(self.sigma2)
        self._rhs_yx = np.column_stack([self.y, self.X])
        self._dinv_z_all = np.hstack([self.level_p.dinv_z, self.level_e.dinv_z])
        # column offsets of each level inside the stacked U / Z blocks
        self._off_e = 2 * self.level_p.n_clusters
        self._u_buf = np.zeros((self.n, self._off_e + 2 * self.level_e.n_clusters))

    def split(self, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k = self.sp.n_params
        return eta[:k], eta[k:]

    def _factorize(self, eta: np.ndarray):
        theta_p, theta_e = self.split(eta)
        par_p = _level_g_and_derivs(self.sp, theta_p)
        par_e = _level_g_and_derivs(self.se, theta_e)
        u = self._u_buf
        for level, params, off in (
            (self.level_p, par_p, 0),
            (self.level_e, par_e, self._off_e),
        ):
            (t1, t2, r), _, derivs = params
            if not derivs:
                continue  # absent level: its block stays zero
            other = math.sqrt(max(0.0, 1.0 - r * r))
            u[self._rows, off + 2 * level.idx] = t1 + r * t2 * level.prom
            u[self._rows, off + 2 * level.idx + 1] = t2 * other * level.prom
        w = u / self._sqrt_sigma2[:, None]
        c = w.T @ w
        c[np.diag_indices_from(c)] += 1.0
        c_fac = cho_factor(c, lower=True)
        logdet_c = 2.0 * float(np.sum(np.log(np.diag(c_fac[0]))))
        dinv_u = u / self.sigma2[:, None]
        logdet_v = float(np.sum(np.log(self.sigma2))) + logdet_c
        return par_p, par_e, u, dinv_u, c_fac, logdet_v

    def _solve_v(self, core, rhs: np.ndarray, dinv_rhs: np.ndarray) -> np.ndarray:
        """V^-1 rhs given the current factorization."""
        t = core["dinv_u"].T @ rhs
        s = cho_solve(core["c_fac"], t)
        return dinv_rhs - core["dinv_u"] @ s

    def _core(self, eta: np.ndarray):
        par_p, par_e, u, dinv_u, c_fac, logdet_v = self._factorize(eta)
        core = {"par_p": par_p, "par_e": par_e, "u": u, "dinv_u": dinv_u, "c_fac": c_fac}
        rhs = self._rhs_yx
        vinv = self._solve_v(core, rhs, rhs / self.sigma2[:, None])
        vinv_y, vinv_x = vinv[:, 0], vinv[:, 1:]
        a = self.X.T @ vinv_x
        a = 0.5 * (a + a.T)
        a_fac = cho_factor(a, lower=True)
        beta = cho_solve(a_fac, self.X.T @ vinv_y)
        vinv_r = vinv_y - vinv_x @ beta
        resid = self.y - self.X @ beta
        quad = float(resid @ vinv_r)
        logdet_a = 2.0 * float(np.sum(np.log(np.diag(a_fac[0]))))
        core.update(
            ll=-0.5 * (self.const + logdet_v + logdet_a + quad),
            beta=beta,
            a=a,
            a_fac=a_fac,
            vinv_x=vinv_x,
            vinv_r=vinv_r,
            resid=resid,
        )
        return core

    def _e_matrices(self, core) -> tuple[np.ndarray, np.ndarray]:
        """E = S_w - S_H per level; gradient is 0.5 tr(dG E) per parameter."""
        vinv_r = core["vinv_r"]
        # U' D^-1 Z == (D^-1 U)' Z == U' (D^-1 Z), so the precomputed D^-1 Z
        # serves both roles of the Woodbury solve
        t = core["u"].T @ self._dinv_z_all
        f = self._dinv_z_all - core["dinv_u"] @ cho_solve(core["c_fac"], t)
        pz = f - core["vinv_x"] @ cho_solve(core["a_fac"], self.X.T @ f)
        out = []
        for level, off in ((self.level_p, 0), (self.level_e, self._off_e)):
            w0 = np.bincount(level.idx, weights=vinv_r, minlength=level.n_clusters)
            w1 = np.bincount(level.idx, weights=level.prom * vinv_r, minlength=level.n_clusters)
            s_w = np.array(
                [[float(w0 @ w0), float(w0 @ w1)], [float(w0 @ w1), float(w1 @ w1)]]
            )
            own0 = pz[self._rows, off + 2 * level.idx]
            own1 = pz[self._rows, off + 2 * level.idx + 1]
            s_h = np.array(
                [
                    [float(own0.sum()), float(own1.sum())],
                    [float((level.prom * own0).sum()), float((level.prom * own1).sum())],
                ]
            )
            s_h = 0.5 * (s_h + s_h.T)
            out.append(s_w - s_h)
        return out[0], out[1]

    def loglik(self, eta: np.ndarray) -> float:
        return self._core(eta)["ll"]

    def loglik_and_grad(self, eta: np.ndarray) -> tuple[float, np.ndarray]:
        core = self._core(eta)
        grad = np.zeros(self.n_params)
        if self.n_params:
            e_p, e_e = self._e_matrices(core)
            pos = 0
            for params, e_mat in ((core["par_p"], e_p), (core["par_e"], e_e)):
                _, _, derivs = params
                for dg in derivs:
                    grad[pos] = 0.5 * (
                        dg[0, 0] * e_mat[0, 0]
                        + dg[1, 1] * e_mat[1, 1]
                        + dg[0, 1] * (e_mat[0, 1] + e_mat[1, 0])
                    )
                    pos += 1
        return core["ll"], grad


def _wls_beta(data: MetaDataset) -> tuple[np.ndarray, np.ndarray]:
    x = data.design_matrix
    w = data.weights
    a = x.T @ (x * w[:, None])
    beta = np.linalg.solve(a, x.T @ (w * data.y))
    return beta, data.y - x @ beta


def _response_scale(data: MetaDataset) -> float:
    _, resid = _wls_beta(data)
    scale = float(np.std(resid))
    if scale <= 0 or not np.isfinite(scale):
        scale = max(1e-8, 1e-8 * float(np.abs(data.y).max() or 1.0))
    return scale


def _moment_starts(data: MetaDataset, scale: float) -> dict:
    _, resid = _wls_beta(data)

    def level_moments(idx: np.ndarray, n_clusters: int) -> tuple[float, float]:
        means = np.full(n_clusters, np.nan)
        diffs = np.full(n_clusters, np.nan)
        for i in range(n_clusters):
            rows = idx == i
            if rows.any():
                means[i] = resid[rows].mean()
            on = rows & (data.prom == 1.0)
            off = rows & (data.prom == 0.0)
            if on.any() and off.any():
                diffs[i] = resid[on].mean() - resid[off].mean()
        t_int = float(np.nanstd(means)) if np.isfinite(means).sum() > 1 else 0.3 * scale
        t_slope = float(np.nanstd(diffs)) if np.isfinite(diffs).sum() > 1 else 0.3 * scale
        clip = lambda v: float(np.clip(v, 0.05 * scale, 3.0 * scale))
        return clip(t_int), clip(t_slope)

    tp, tq = level_moments(data.pid_idx, len(data.participants))
    tu, tv = level_moments(data.eid_idx, len(data.exercises))
    return {"scale": scale, "tau_p": tp, "tau_q": tq, "tau_u": tu, "tau_v": tv}


def _pack_bounds_scale(scale: float) -> tuple[float, float]:
    return math.log(1e-8 * scale), math.log(1e4 * scale + 1e-300)


def _structure_theta(structure: CovarianceStructure, t_int: float, t_slope: float, corr_z: float) -> list[float]:
    if structure is CovarianceStructure.NONE:
        return []
    if structure is CovarianceStructure.UN:
        return [math.log(t_int), math.log(t_slope), corr_z]
    if structure is CovarianceStructure.DIAG:
        return [math.log(t_int), math.log(t_slope)]
    if structure is CovarianceStructure.CS:
        pooled = math.sqrt(0.5 * (t_int * t_int + t_slope * t_slope))
        return [math.log(pooled), corr_z]
    return [math.log(t_int)]


def _default_starts(problem: _RemlProblem, moments: dict) -> list[np.ndarray]:
    z_half = math.atanh(0.5 / R_MAX)
    scale = moments["scale"]
    recipes = [
        (0.01 * scale, 0.01 * scale, 0.01 * scale, 0.01 * scale, 0.0),
        (moments["tau_p"], moments["tau_q"], moments["tau_u"], moments["tau_v"], 0.0),
        (moments["tau_p"], moments["tau_q"], moments["tau_u"], moments["tau_v"], z_half),
        (moments["tau_p"], moments["tau_q"], moments["tau_u"], moments["tau_v"], -z_half),
        (scale, scale, scale, scale, 0.0),
    ]
    starts = []
    for tp, tq, tu, tv, cz in recipes:
        eta = np.array(
            _structure_theta(problem.sp, tp, tq, cz) + _structure_theta(problem.se, tu, tv, cz)
        )
        if not any(np.array_equal(eta, s) for s in starts):
            starts.append(eta)
    return starts


def _bounds(problem: _RemlProblem, scale: float) -> list[tuple]:
    lo, hi = _pack_bounds_scale(scale)
    bounds = []
    for structure in (problem.sp, problem.se):
        if structure is CovarianceStructure.NONE:
            continue
        if structure is CovarianceStructure.UN:
            bounds += [(lo, hi), (lo, hi), (None, None)]
        elif structure is CovarianceStructure.DIAG:
            bounds += [(lo, hi), (lo, hi)]
        elif structure is CovarianceStructure.CS:
            bounds += [(lo, hi), (None, None)]
        else:
            bounds += [(lo, hi)]
    return bounds


def _projected_grad_norm(grad: np.ndarray, eta: np.ndarray, bounds: list[tuple]) -> float:
    """KKT residual: gradient components pointing outside an active bound are zeroed."""
    if len(grad) == 0:
        return 0.0
    proj = grad.copy()
    for i, (lo, hi) in enumerate(bounds):
        if lo is not None and eta[i] <= lo + 1e-12 and grad[i] < 0:
            proj[i] = 0.0
        if hi is not None and eta[i] >= hi - 1e-12 and grad[i] > 0:
            proj[i] = 0.0
    return float(np.linalg.norm(proj))


GRAD_TOL = 1e-6  # internal target; reported optima must satisfy 1e-5
MAX_ITER = 500


def _newton_polish(problem: _RemlProblem, x: np.ndarray, bounds: list[tuple], max_steps: int = 6) -> np.ndarray:
    """Damped Newton steps on the analytic gradient.

    L-BFGS-B can quit on ftol while the gradient is ~1e-5: near the optimum
    the achievable objective gain (~|g|^2/curvature) drops below the f
    tolerance. Root-finding on the gradient with a finite-difference
    Jacobian closes that last stretch.
    """
    k = len(x)
    ll, g = problem.loglik_and_grad(x)
    for _ in range(max_steps):
        if _projected_grad_norm(g, x, bounds) <= 0.1 * GRAD_TOL:
            break
        jac = np.empty((k, k))
        h = 1e-4
        for i in range(k):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            _, gp = problem.loglik_and_grad(xp)
            _, gm = problem.loglik_and_grad(xm)
            jac[:, i] = (gp - gm) / (2 * h)
        jac = 0.5 * (jac + jac.T)
        try:
            step = np.linalg.lstsq(jac, -g, rcond=1e-10)[0]
        except np.linalg.LinAlgError:
            break
        norm = np.linalg.norm(step)
        if not np.isfinite(norm) or norm == 0.0:
            break
        if norm > 1.0:
            step *= 1.0 / norm
        improved = False
        for _ in range(8):
            cand = x + step
            for i, (lo, hi) in enumerate(bounds):
                if lo is not None:
                    cand[i] = max(cand[i], lo)
                if hi is not None:
                    cand[i] = min(cand[i], hi)
            try:
                ll_new, g_new = problem.loglik_and_grad(cand)
            except np.linalg.LinAlgError:
                step *= 0.5
                continue
            if np.isfinite(ll_new) and (
                ll_new >= ll - 1e-9 and np.linalg.norm(g_new) < np.linalg.norm(g)
            ):
                x, ll, g = cand, ll_new, g_new
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    return x


def fit_reml(
    data: MetaDataset,
    structure_p: CovarianceStructure = CovarianceStructure.UN,
    structure_e: CovarianceStructure = CovarianceStructure.UN,
    warm_start: np.ndarray | None = None,
    raise_on_failure: bool = True,
) -> ModelFit:
    """Maximize the restricted likelihood over the variance-side parameters.

    Five deterministic multi-starts (near-zero variances, moment-based,
    moment-based with correlations at +-0.5, response-scale) guard against
    local optima; a warm start replaces them for bootstrap refits.
    """
    data = data.canonical()
    problem = _RemlProblem(data, structure_p, structure_e)
    scale = _response_scale(data)
    bounds = _bounds(problem, scale)

    if problem.n_params == 0:
        eta = np.array([])
        ll, _ = problem.loglik_and_grad(eta)
        return _assemble_fit(problem, eta, ll, 0.0, True, ("no variance parameters",))

    if warm_start is not None:
        starts = [np.asarray(warm_start, dtype=float)]
    else:
        starts = _default_starts(problem, _moment_starts(data, scale))

    def objective(eta):
        try:
            ll, grad = problem.loglik_and_grad(eta)
        except np.linalg.LinAlgError:
            return 1e12, np.zeros(problem.n_params)
        if not np.isfinite(ll):
            return 1e12, np.zeros(problem.n_params)
        return -ll, -grad

    best = None
    messages = []
    # Multithreaded BLAS only hurts at these matrix sizes; pin it for the
    # whole optimization.
    with threadpool_limits(limits=1):
        for k, start in enumerate(starts):
            x = np.clip(start, [b[0] if b[0] is not None else -np.inf for b in bounds],
                        [b[1] if b[1] is not None else np.inf for b in bounds])
            res = None
            for _ in range(4):  # polish until the projected gradient is tiny
                res = optimize.minimize(
                    objective,
                    x,
                    jac=True,
                    method="L-BFGS-B",
                    bounds=bounds,
                    options={"maxiter": MAX_ITER, "ftol": 1e-13, "gtol": 1e-9, "maxcor": 25},
                )
                x = res.x
                gnorm = _projected_grad_norm(-res.jac, x, bounds)
                if gnorm <= GRAD_TOL:
                    break
            ll = -float(res.fun)
            gnorm = _projected_grad_norm(-res.jac, x, bounds)
            if gnorm > GRAD_TOL and np.isfinite(ll):
                x = _newton_polish(problem, x, bounds)
                ll, grad = problem.loglik_and_grad(x)
                gnorm = _projected_grad_norm(grad, x, bounds)
            messages.append(f"start {k}: ll={ll:.6f} grad={gnorm:.2e} {res.message}")
            if np.isfinite(ll) and (best is None or ll > best[1] + 1e-12):
                best = (x.copy(), ll, gnorm)

    if best is None:
        if raise_on_failure:
            raise ConvergenceError("all REML starts failed", trace=messages)
        return _assemble_fit(problem, starts[0], float("nan"), float("inf"), False, tuple(messages))

    eta, ll, gnorm = best
    converged = gnorm <= 1e-5
    if not converged and raise_on_failure:
        raise ConvergenceError(
            f"REML gradient norm {gnorm:.3e} above tolerance after multi-start", trace=messages
        )
    return _assemble_fit(problem, eta, ll, gnorm, converged, tuple(messages))


def _assemble_fit(problem: _RemlProblem, eta: np.ndarray, ll: float, gnorm: float, converged: bool, messages: tuple) -> ModelFit:
    try:
        core = problem._core(eta)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(
            f"marginal covariance factorization failed at the reported optimum "
            f"({exc}); the weight scale is likely degenerate", trace=list(messages)
        ) from exc
    data = problem.data
    (tp1, tp2, xi), _, _ = core["par_p"]
    (te1, te2, rho), _, _ = core["par_e"]
    a_inv = cho_solve(core["a_fac"], np.eye(problem.p))
    beta = core["beta"]
    se = np.sqrt(np.diag(a_inv))
    zval = beta / se
    pval = 2.0 * norm.sf(np.abs(zval))
    k_params = problem.n_params + problem.p
    aic = -2.0 * ll + 2.0 * k_params
    bic = -2.0 * ll + math.log(problem.n) * k_params
    qe_stat, qe_df, qe_p = _q_e(data)
    qm_stat, qm_df, qm_p = _q_m(beta, a_inv)
    return ModelFit(
        outcome=data.outcome,
        structure_p=problem.sp,
        structure_e=problem.se,
        fixed_names=FIXED_EFFECT_NAMES,
        beta=beta,
        se=se,
        zval=zval,
        pval=pval,
        vcov_beta=a_inv,
        tau_p2=tp1 * tp1,
        tau_q2=tp2 * tp2,
        xi=xi,
        tau_u2=te1 * te1,
        tau_v2=te2 * te2,
        rho=rho,
        loglik=float(ll),
        aic=float(aic),
        bic=float(bic),
        qe_stat=qe_stat,
        qe_df=qe_df,
        qe_p=qe_p,
        qm_stat=qm_stat,
        qm_df=qm_df,
        qm_p=qm_p,
        converged=converged,
        grad_norm=float(gnorm),
        n_rows=problem.n,
        eta=np.asarray(eta, dtype=float),
        messages=messages,
    )


def _q_e(data: MetaDataset) -> tuple[float, int, float]:
    """Residual heterogeneity: weighted RSS of the fixed-effects-only model."""
    _, resid = _wls_beta(data)
    stat = float(np.sum(resid * resid * data.weights))
    df = data.n - data.design_matrix.shape[1]
    return stat, df, float(chi2.sf(stat, df))


def _q_m(beta: np.ndarray, vcov: np.ndarray) -> tuple[float, int, float]:
    """Omnibus Wald test that all moderator coefficients are zero."""
    b = beta[1:]
    v = vcov[1:, 1:]
    stat = float(b @ np.linalg.solve(v, b))
    df = len(b)
    return stat, df, float(chi2.sf(stat, df))


def q_tests(fit: ModelFit, data: MetaDataset) -> tuple[tuple[float, int, float], tuple[float, int, float]]:
    """(Q_E, Q_M) with their dfs and chi-square p-values."""
    if not fit.converged:
        raise ConvergenceError("q_tests requires a converged fit")
    return _q_e(data.canonical()), _q_m(fit.beta, fit.vcov_beta)


def blup_effects(fit: ModelFit, data: MetaDataset) -> tuple[np.ndarray, np.ndarray]:
    """Empirical-Bayes (BLUP) predictions of the (intercept, slope) effects,
    shaped (P, 2) and (E, 2)."""
    data = data.canonical()
    problem = _RemlProblem(data, fit.structure_p, fit.structure_e)
    core = problem._core(fit.eta)
    vinv_r = core["vinv_r"]
    out = []
    for level, g in (
        (problem.level_p, fit.g_participant),
        (problem.level_e, fit.g_exercise),
    ):
        w0 = np.bincount(level.idx, weights=vinv_r, minlength=level.n_clusters)
        w1 = np.bincount(level.idx, weights=level.prom * vinv_r, minlength=level.n_clusters)
        out.append(np.column_stack([w0, w1]) @ g.T)
    return out[0], out[1]


def cluster_robust_se(fit: ModelFit, data: MetaDataset, cluster_by: str = "participant") -> dict:
    """Sandwich standard errors over participant or exercise clusters with
    G/(G-1) small-sample scaling; p-values use t with G-1 df."""
    if cluster_by not in ("participant", "exercise"):
        raise ValueError("cluster_by must be 'participant' or 'exercise'")
    data = data.canonical()
    idx = data.pid_idx if cluster_by == "participant" else data.eid_idx
    n_clusters = len(np.unique(idx))
    if n_clusters < 2:
        raise DesignError("cluster-robust errors need >= 2 clusters")
    problem = _RemlProblem(data, fit.structure_p, fit.structure_e)
    core = problem._core(fit.eta)
    s = core["vinv_x"].T  # p x n rows of X'Vinv
    resid = core["resid"]
    meat = np.zeros((problem.p, problem.p))
    for g in range(n_clusters):
        rows = idx == g
        u = s[:, rows] @ resid[rows]
        meat += np.outer(u, u)
    a_inv = cho_solve(core["a_fac"], np.eye(problem.p))
    scale = n_clusters / (n_clusters - 1)
    vcov = scale * a_inv @ meat @ a_inv
    se = np.sqrt(np.diag(vcov))
    tval = fit.beta / se
    pval = 2.0 * t_dist.sf(np.abs(tval), df=n_clusters - 1)
    return {
        "cluster_by": cluster_by,
        "n_clusters": n_clusters,
        "se": se,
        "tval": tval,
        "pval": pval,
        "vcov": vcov,
    }


MODEL_CANDIDATES: tuple[tuple[str, CovarianceStructure, CovarianceStructure], ...] = (
    ("full_crossed", CovarianceStructure.UN, CovarianceStructure.UN),
    ("participant_intercept_only", CovarianceStructure.INTERCEPT, CovarianceStructure.NONE),
    ("exercise_intercept_only", CovarianceStructure.NONE, CovarianceStructure.INTERCEPT),
    ("participant_slopes_only", CovarianceStructure.UN, CovarianceStructure.INTERCEPT),
    ("exercise_slopes_only", CovarianceStructure.INTERCEPT, CovarianceStructure.UN),
)


def model_selection(data: MetaDataset) -> list[dict]:
    """Fit the candidate random-effects structures and rank by AIC (ties by BIC).

    Failures are kept in the listing with their error message so a partial
    ranking is still visible.
    """
    results = []
    for name, sp, se in MODEL_CANDIDATES:
        try:
            fit = fit_reml(data, sp, se)
            results.append({"name": name, "fit": fit, "error": None})
        except (ConvergenceError, DesignError) as exc:
            results.append({"name": name, "fit": None, "error": str(exc)})
    ok = [r for r in results if r["fit"] is not None]
    failed = [r for r in results if r["fit"] is None]
    ok.sort(key=lambda r: (r["fit"].aic, r["fit"].bic, r["name"]))
    return ok + failed
