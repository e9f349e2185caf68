"""Deterministic output rendering: CSVs, report JSON, text tables, plots.

All numeric formatting is pinned so repeated runs with the same inputs and
seed produce byte-identical files.
"""

from __future__ import annotations

import base64
import csv
import io
import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .inference import LrtResult, PercentRomResult
from .kinematics import AngleSeries
from .metareg import ModelFit
from .pipeline import VideoAnalysis
from .segmentation import EvaluationReport, Repetition
from .setmetrics import DescriptiveRow, OutcomeKind

REPETITION_CSV_COLUMNS = [
    "video_id",
    "rep_index",
    "start_s",
    "end_s",
    "start_angle",
    "end_angle",
    "rom_deg",
    "duration_s",
    "concentric_s",
    "eccentric_s",
    "side",
]


def angles_csv(signal: AngleSeries) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "angle", "valid", "joint", "side", "mode"])
    joint = signal.joint.name
    side = signal.side.value
    mode = signal.source_mode.value
    for t, angle, valid in zip(signal.timestamps, signal.angles, signal.valid):
        writer.writerow(
            [f"{t:.6f}", f"{angle:.6f}" if valid else "", int(valid), joint, side, mode]
        )
    return buf.getvalue()


def repetitions_csv(video_id: str, side: str, reps: list[Repetition]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPETITION_CSV_COLUMNS)
    for i, rep in enumerate(reps):
        writer.writerow(
            [
                video_id,
                i,
                f"{rep.start_time:.6f}",
                f"{rep.end_time:.6f}",
                f"{rep.start_angle:.6f}",
                f"{rep.end_angle:.6f}",
                f"{rep.rom:.6f}",
                f"{rep.duration:.6f}",
                f"{rep.concentric_duration:.6f}",
                f"{rep.eccentric_duration:.6f}",
                side,
            ]
        )
    return buf.getvalue()


def _stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    if p < 0.1:
        return "."
    return ""


def model_report_dict(fit: ModelFit) -> dict:
    return {
        "outcome": fit.outcome,
        "fixed_effects": [
            {
                "name": name,
                "est": float(fit.beta[i]),
                "se": float(fit.se[i]),
                "z": float(fit.zval[i]),
                "p": float(fit.pval[i]),
            }
            for i, name in enumerate(fit.fixed_names)
        ],
        "participant": {"tau_p2": fit.tau_p2, "tau_q2": fit.tau_q2, "xi": fit.xi},
        "exercise": {"tau_u2": fit.tau_u2, "tau_v2": fit.tau_v2, "rho": fit.rho},
        "loglik": fit.loglik,
        "aic": fit.aic,
        "bic": fit.bic,
        "qe": {"stat": fit.qe_stat, "df": fit.qe_df, "p": fit.qe_p},
        "qm": {"stat": fit.qm_stat, "df": fit.qm_df, "p": fit.qm_p},
        "converged": fit.converged,
        "n_rows": fit.n_rows,
        "structures": {
            "participant": fit.structure_p.value,
            "exercise": fit.structure_e.value,
        },
    }


def render_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, allow_nan=False) + "\n"


def model_table_text(fit: ModelFit) -> str:
    lines = [
        f"Model fit: outcome={fit.outcome}  n={fit.n_rows}  "
        f"structures={fit.structure_p.value}/{fit.structure_e.value}",
        "",
        "Fixed effects",
        f"{'term':<12} {'estimate':>10} {'se':>9} {'z':>8} {'p':>10}",
    ]
    for i, name in enumerate(fit.fixed_names):
        lines.append(
            f"{name:<12} {fit.beta[i]:>10.3f} {fit.se[i]:>9.3f} "
            f"{fit.zval[i]:>8.2f} {fit.pval[i]:>10.4g} {_stars(fit.pval[i])}"
        )
    lines += [
        "",
        "Random effects",
        f"  participant: tau_int^2={fit.tau_p2:.3f}  tau_slope^2={fit.tau_q2:.3f}  corr={fit.xi:.3f}",
        f"  exercise:    tau_int^2={fit.tau_u2:.3f}  tau_slope^2={fit.tau_v2:.3f}  corr={fit.rho:.3f}",
        "",
        "Model fit",
        f"  loglik={fit.loglik:.3f}  AIC={fit.aic:.3f}  BIC={fit.bic:.3f}",
        f"  Q_E={fit.qe_stat:.2f} (df={fit.qe_df}, p={fit.qe_p:.4g}){_stars(fit.qe_p)}",
        f"  Q_M={fit.qm_stat:.2f} (df={fit.qm_df}, p={fit.qm_p:.4g}){_stars(fit.qm_p)}",
    ]
    return "\n".join(lines) + "\n"


def lrt_block(results: list[LrtResult]) -> list[dict]:
    return [
        {
            "hypothesis": r.hypothesis.value,
            "lambda": r.lam,
            "df": r.df,
            "p": r.p_value,
            "loglik_full": r.loglik_full,
            "loglik_reduced": r.loglik_reduced,
        }
        for r in results
    ]


def lrt_table_text(results: list[LrtResult]) -> str:
    lines = [
        "Covariance-structure likelihood-ratio tests",
        f"{'hypothesis':<12} {'lambda':>9} {'df':>3} {'p':>10}",
    ]
    for r in results:
        lines.append(
            f"{r.hypothesis.value:<12} {r.lam:>9.3f} {r.df:>3d} {r.p_value:>10.4g} {_stars(r.p_value)}"
        )
    return "\n".join(lines) + "\n"


def contrast_block(results: dict) -> list[dict]:
    out = []
    for kind, res in results.items():
        out.append(
            {
                "kind": kind.value,
                "estimate": res.estimate,
                "p_one_sided": res.p_one_sided,
                "ci_low": res.ci_low,
                "ci_high": res.ci_high,
                "boot_replicates": res.boot_replicates,
                "n_dropped": res.n_dropped,
                "warning": res.warning,
                "components": {k: float(v) for k, v in res.components.items()},
            }
        )
    return out


def contrast_table_text(results: dict) -> str:
    lines = [
        "Variance and ICC contrasts (pROM - fROM), one-sided bootstrap",
        f"{'contrast':<14} {'estimate':>10} {'p':>10} {'95% CI':>24}",
    ]
    for kind, res in results.items():
        ci = f"[{res.ci_low:.4g}, {res.ci_high:.4g}]"
        lines.append(
            f"{kind.value:<14} {res.estimate:>10.4g} {res.p_one_sided:>10.4g} {ci:>24} {_stars(res.p_one_sided)}"
        )
    return "\n".join(lines) + "\n"


def pct_rom_block(result: PercentRomResult) -> dict:
    return {
        "overall_pct_rom": result.overall_pct_rom,
        "beta1": result.beta1,
        "boot_replicates": result.boot_replicates,
        "n_dropped": result.n_dropped,
        "warning": result.warning,
        "per_exercise": [
            {
                "exercise": row.exercise,
                "delta_e": row.delta_e,
                "pct_rom": row.pct_rom,
                "ci_low": row.ci_low,
                "ci_high": row.ci_high,
                "p_raw": row.p_raw,
                "p_bh": row.p_bh,
            }
            for row in result.per_exercise
        ],
    }


def pct_rom_table_text(result: PercentRomResult) -> str:
    lines = [
        f"Percent of full ROM achieved under pROM: overall {result.overall_pct_rom:.1f}%",
        f"{'exercise':<28} {'%ROM':>7} {'95% CI':>18} {'p':>9} {'p(BH)':>9}",
    ]
    for row in result.per_exercise:
        ci = f"[{row.ci_low:.1f}, {row.ci_high:.1f}]"
        lines.append(
            f"{row.exercise:<28} {row.pct_rom:>7.1f} {ci:>18} "
            f"{row.p_raw:>9.4g} {row.p_bh:>9.4g} {_stars(row.p_bh)}"
        )
    return "\n".join(lines) + "\n"


def descriptive_csv(rows: list[DescriptiveRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["exercise", "rom_condition", "n_sets"]
    for outcome in (
        OutcomeKind.RANGE_OF_MOTION,
        OutcomeKind.REP_DURATION,
        OutcomeKind.ECCENTRIC_DURATION,
        OutcomeKind.CONCENTRIC_DURATION,
    ):
        header += [f"{outcome.value}_mean", f"{outcome.value}_sd"]
    header += ["reps_mean", "reps_sd", "left_fraction"]
    writer.writerow(header)
    for row in rows:
        record = [row.exercise.name, row.rom_condition.value, row.n_records]
        for outcome in (
            OutcomeKind.RANGE_OF_MOTION,
            OutcomeKind.REP_DURATION,
            OutcomeKind.ECCENTRIC_DURATION,
            OutcomeKind.CONCENTRIC_DURATION,
        ):
            mean = row.outcome_mean.get(outcome)
            sd = row.outcome_sd.get(outcome)
            record += [
                f"{mean:.6f}" if mean is not None else "",
                f"{sd:.6f}" if sd is not None else "",
            ]
        record += [f"{row.mean_reps:.6f}", f"{row.sd_reps:.6f}", f"{row.left_fraction:.6f}"]
        writer.writerow(record)
    return buf.getvalue()


def evaluation_report_dict(report: EvaluationReport) -> dict:
    return {
        "n_videos": report.n_videos,
        "side_accuracy": report.side_accuracy,
        "mean_abs_deviation": report.mean_abs_deviation,
        "within_two_fraction": report.within_two_fraction,
        "per_video": [
            {
                "video_id": vid,
                "predicted_side": ps,
                "true_side": ts,
                "predicted_count": pc,
                "true_count": tc,
                "abs_deviation": dev,
            }
            for vid, ps, ts, pc, tc, dev in report.per_video
        ],
    }


def _figure_png(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def angle_trace_png(analysis: VideoAnalysis) -> bytes:
    """Smoothed angle trace with detected repetition boundaries."""
    signal = analysis.signal
    fig, ax = plt.subplots(figsize=(9, 3.2))
    ax.plot(signal.timestamps, signal.angles, lw=0.9, color="#2b6cb0", label="angle")
    for rep in analysis.repetitions:
        ax.axvline(rep.start_time, color="#c53030", lw=0.6, alpha=0.6)
        ax.plot([rep.split_time], [rep.peak_angle], "v", color="#2f855a", ms=4)
    if analysis.repetitions:
        ax.axvline(analysis.repetitions[-1].end_time, color="#c53030", lw=0.6, alpha=0.6)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("angle (deg)")
    ax.set_title(
        f"{analysis.video_id}: {signal.joint.name} ({signal.source_mode.value}), "
        f"{len(analysis.repetitions)} repetitions"
    )
    fig.tight_layout()
    return _figure_png(fig)


def forest_png(result: PercentRomResult) -> bytes:
    """Per-exercise %ROM point estimates with bootstrap confidence intervals."""
    rows = list(result.per_exercise)
    fig, ax = plt.subplots(figsize=(7, 0.55 * len(rows) + 1.6))
    ys = np.arange(len(rows))[::-1]
    for y, row in zip(ys, rows):
        ax.plot([row.ci_low, row.ci_high], [y, y], color="#4a5568", lw=1.4)
        ax.plot([row.pct_rom], [y], "o", color="#2b6cb0", ms=5)
    ax.axvline(result.overall_pct_rom, color="#c53030", lw=1.0, ls="--",
               label=f"overall {result.overall_pct_rom:.1f}%")
    ax.set_yticks(ys)
    ax.set_yticklabels([row.exercise for row in rows])
    ax.set_xlabel("% of full ROM under pROM")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return _figure_png(fig)


def png_base64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")
