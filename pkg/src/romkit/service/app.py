"""FastAPI service wrapping the analysis pipeline.

All computation and file-content rendering happens here; clients only move
bytes. Responses embed fully rendered file contents (CSV text, JSON text,
base64 PNGs) so outputs are byte-stable regardless of the client.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..config import PipelineConfig, parse_config, parse_joint_map
from ..core import (
    BodySide,
    RomCondition,
    parse_exercise,
    parse_landmark_text,
    render_landmark_text,
)
from ..errors import RomkitError
from ..inference import (
    ContrastKind,
    Hypothesis,
    bootstrap_contrasts,
    lrt,
    percent_rom_analysis,
)
from ..kinematics import JOINT_TRIPLES
from ..metareg import build_dataset, fit_reml
from ..inference import build_log_rom_dataset
from ..pipeline import analyze_video
from ..reports import (
    angle_trace_png,
    angles_csv,
    contrast_block,
    contrast_table_text,
    descriptive_csv,
    evaluation_report_dict,
    forest_png,
    lrt_block,
    lrt_table_text,
    model_report_dict,
    model_table_text,
    pct_rom_block,
    pct_rom_table_text,
    png_base64,
    render_json,
    repetitions_csv,
)
from ..segmentation import evaluate_against_annotations, read_annotations_csv
from ..setmetrics import (
    OutcomeKind,
    aggregate_summaries,
    read_participant_metadata,
    summaries_from_csv,
    summaries_to_csv,
)
from ..synth import MetaParams, SignalSpec, generate_landmark_scene, simulate_meta_dataset
from . import models


def _config(text: str | None) -> PipelineConfig:
    return parse_config(text) if text else PipelineConfig()


def _analyze(req) -> tuple:
    cfg = _config(req.config_text)
    series = parse_landmark_text(req.landmarks_jsonl)
    override = None
    if req.joint_map_text:
        override = parse_joint_map(req.joint_map_text).get(series.exercise.name)
    analysis = analyze_video(
        series,
        smoothing=cfg.signal.smoothing,
        detection=cfg.detection,
        visibility_threshold=cfg.signal.visibility_threshold,
        mapped_coverage_threshold=cfg.signal.mapped_coverage_threshold,
        joint_override=override,
    )
    return series, analysis


def _load_summaries(req):
    metadata = read_participant_metadata(req.metadata_csv) if req.metadata_csv else {}
    rows = summaries_from_csv(req.summary_csv, metadata)
    return aggregate_summaries(rows), metadata


def _build(outcome: OutcomeKind, rows, metadata):
    if outcome is OutcomeKind.LOG_MEAN_ROM:
        return build_log_rom_dataset(rows, metadata)
    return build_dataset(rows, metadata, outcome=outcome)


def create_app() -> FastAPI:
    app = FastAPI(title="romkit", version=__version__)

    @app.exception_handler(RomkitError)
    async def romkit_error_handler(request: Request, exc: RomkitError):
        return JSONResponse(
            status_code=422,
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    @app.get("/health", response_model=models.HealthResponse)
    def health():
        return models.HealthResponse(status="ok", version=__version__)

    @app.post("/v1/angles", response_model=models.AnglesResponse)
    def angles(req: models.AnglesRequest):
        series, analysis = _analyze(req)
        signal = analysis.signal
        return models.AnglesResponse(
            video_id=series.video_id,
            participant_id=series.participant_id,
            exercise=series.exercise.name,
            rom_condition=series.rom_condition.value,
            joint=signal.joint.name,
            side=signal.side.value,
            mode=signal.source_mode.value,
            coverage=signal.coverage,
            angles_csv=angles_csv(signal),
        )

    @app.post("/v1/segment", response_model=models.SegmentResponse)
    def segment(req: models.SegmentRequest):
        series, analysis = _analyze(req)
        rows = [
            models.SummaryRow(
                participant_id=s.participant_id,
                exercise=s.exercise.name,
                rom_condition=s.rom_condition.value,
                outcome=s.outcome.value,
                mean=s.mean,
                sd=s.sd,
                k=s.k,
                side_left_fraction=s.side_left_fraction,
            )
            for s in analysis.summaries
        ]
        return models.SegmentResponse(
            video_id=analysis.video_id,
            side=analysis.side.value,
            n_repetitions=len(analysis.repetitions),
            n_trimmed=len(analysis.trimmed),
            repetitions_csv=repetitions_csv(
                analysis.video_id, analysis.side.value, analysis.trimmed
            ),
            angles_csv=angles_csv(analysis.signal),
            summary_rows=rows,
            trace_png_b64=png_base64(angle_trace_png(analysis)) if req.include_plot else None,
        )

    @app.post("/v1/fit", response_model=models.FitResponse)
    def fit(req: models.FitRequest):
        cfg = _config(req.config_text)
        rows, metadata = _load_summaries(req)
        outcome = OutcomeKind.parse(req.outcome)
        data = _build(outcome, rows, metadata)
        result = fit_reml(
            data, cfg.model.participant_structure, cfg.model.exercise_structure
        )
        from ..setmetrics import descriptive_table

        return models.FitResponse(
            report_json=render_json(model_report_dict(result)),
            table_txt=model_table_text(result),
            descriptive_csv=descriptive_csv(descriptive_table(rows)),
        )

    @app.post("/v1/infer", response_model=models.InferResponse)
    def infer(req: models.InferRequest):
        cfg = _config(req.config_text)
        rows, metadata = _load_summaries(req)
        outcome = OutcomeKind.parse(req.outcome)
        seed = req.seed if req.seed is not None else cfg.model.seed
        b = req.bootstrap_b if req.bootstrap_b is not None else cfg.model.bootstrap_b

        data = _build(outcome, rows, metadata)
        full = fit_reml(data)
        lrts = [lrt(data, hyp, full_fit=full) for hyp in Hypothesis]
        contrasts = bootstrap_contrasts(data, full, tuple(ContrastKind), b=b, seed=seed)

        pct = None
        if any(r.outcome is OutcomeKind.RANGE_OF_MOTION for r in rows):
            pct = percent_rom_analysis(rows, b=b, seed=seed, sex_by_participant=metadata)

        report = {
            "outcome": outcome.value,
            "model": model_report_dict(full),
            "lrt": lrt_block(lrts),
            "contrasts": contrast_block(contrasts),
            "pct_rom": pct_rom_block(pct) if pct is not None else None,
            "seed": seed,
            "bootstrap_b": b,
        }
        tables = [model_table_text(full), lrt_table_text(lrts), contrast_table_text(contrasts)]
        if pct is not None:
            tables.append(pct_rom_table_text(pct))
        return models.InferResponse(
            report_json=render_json(report),
            tables_txt="\n".join(tables),
            forest_png_b64=(
                png_base64(forest_png(pct)) if (pct is not None and req.include_plot) else None
            ),
        )

    @app.post("/v1/synth", response_model=models.SynthResponse)
    def synth(req: models.SynthRequest):
        sig = req.signal
        spec = SignalSpec(
            cadence=sig.cadence,
            amplitude=sig.amplitude,
            baseline=sig.baseline,
            duration=sig.duration,
            fps=sig.fps,
            noise_sd=sig.noise_sd,
            tempo_asymmetry=sig.tempo_asymmetry,
        )
        files: list[models.SynthFile] = []
        if req.kind == "scene":
            side = BodySide.parse(req.side)
            exercise = parse_exercise(req.exercise)
            joint = JOINT_TRIPLES[(exercise.focal_joint, side)]
            series, truth = generate_landmark_scene(
                spec,
                joint=joint,
                video_id=req.video_id,
                participant_id=req.participant_id,
                exercise=exercise,
                rom_condition=RomCondition.parse(req.rom_condition),
                seed=req.seed,
            )
            files.append(
                models.SynthFile(
                    name=f"{req.video_id}.landmarks.jsonl",
                    text=render_landmark_text(series),
                )
            )
            truth_payload = {
                "rep_count": truth.rep_count,
                "rom": truth.rom,
                "period": truth.period,
                "eccentric_duration": truth.eccentric_duration,
                "concentric_duration": truth.concentric_duration,
            }
        elif req.kind == "signal":
            from ..synth import generate_angle_signal

            series, truth = generate_angle_signal(spec, seed=req.seed)
            files.append(
                models.SynthFile(name=f"{req.video_id}.angles.csv", text=angles_csv(series))
            )
            truth_payload = {
                "rep_count": truth.rep_count,
                "rom": truth.rom,
                "period": truth.period,
                "eccentric_duration": truth.eccentric_duration,
                "concentric_duration": truth.concentric_duration,
            }
        else:
            data, truth = simulate_meta_dataset(
                MetaParams(),
                n_participants=req.n_participants,
                n_exercises=req.n_exercises,
                n_female=req.n_female,
                seed=req.seed,
            )
            from ..setmetrics import SetSummary

            rows = []
            for i in range(data.n):
                rows.append(
                    SetSummary(
                        participant_id=data.participants[data.pid_idx[i]],
                        exercise=parse_exercise(data.exercises[data.eid_idx[i]]),
                        rom_condition=RomCondition.PROM if data.prom[i] else RomCondition.FROM,
                        outcome=OutcomeKind.REP_DURATION,
                        mean=float(data.y[i]),
                        sd=float(truth.s[i]),
                        k=int(truth.k[i]),
                        side_left_fraction=1.0,
                    )
                )
            files.append(models.SynthFile(name="summaries.csv", text=summaries_to_csv(rows)))
            metadata_lines = ["participant_id,sex"] + [
                f"{pid},{'F' if i < req.n_female else 'M'}"
                for i, pid in enumerate(data.participants)
            ]
            files.append(
                models.SynthFile(name="participants.csv", text="\n".join(metadata_lines) + "\n")
            )
            truth_payload = {
                "beta": [float(b) for b in truth.beta],
                "n_rows": data.n,
            }
        return models.SynthResponse(files=files, truth_json=render_json(truth_payload))

    @app.post("/v1/evaluate", response_model=models.EvaluateResponse)
    def evaluate(req: models.EvaluateRequest):
        predictions_raw = read_annotations_csv(req.predictions_csv)
        annotations = read_annotations_csv(req.annotations_csv)
        report = evaluate_against_annotations(predictions_raw, annotations)
        return models.EvaluateResponse(
            report_json=render_json(evaluation_report_dict(report))
        )

    return app
