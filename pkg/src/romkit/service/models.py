"""Request/response schemas for the analysis service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class AnglesRequest(BaseModel):
    landmarks_jsonl: str
    config_text: str | None = None
    joint_map_text: str | None = None


class AnglesResponse(BaseModel):
    video_id: str
    participant_id: str
    exercise: str
    rom_condition: str
    joint: str
    side: str
    mode: str
    coverage: float
    angles_csv: str


class SegmentRequest(BaseModel):
    landmarks_jsonl: str
    config_text: str | None = None
    joint_map_text: str | None = None
    include_plot: bool = False


class SummaryRow(BaseModel):
    participant_id: str
    exercise: str
    rom_condition: str
    outcome: str
    mean: float
    sd: float
    k: int
    side_left_fraction: float


class SegmentResponse(BaseModel):
    video_id: str
    side: str
    n_repetitions: int
    n_trimmed: int
    repetitions_csv: str
    angles_csv: str
    summary_rows: list[SummaryRow]
    trace_png_b64: str | None = None


class FitRequest(BaseModel):
    summary_csv: str
    outcome: str = "rep_duration"
    metadata_csv: str | None = None
    config_text: str | None = None


class FitResponse(BaseModel):
    report_json: str
    table_txt: str
    descriptive_csv: str


class InferRequest(BaseModel):
    summary_csv: str
    outcome: str = "rep_duration"
    metadata_csv: str | None = None
    config_text: str | None = None
    seed: int | None = None
    bootstrap_b: int | None = None
    include_plot: bool = True


class InferResponse(BaseModel):
    report_json: str
    tables_txt: str
    forest_png_b64: str | None = None


class SynthSignalParams(BaseModel):
    cadence: float = 0.25
    amplitude: float = 40.0
    baseline: float = 90.0
    duration: float = 40.0
    fps: float = 30.0
    noise_sd: float = 0.0
    tempo_asymmetry: float = 1.0


class SynthRequest(BaseModel):
    kind: str = Field(pattern="^(signal|scene|dataset)$")
    seed: int = 0
    signal: SynthSignalParams = Field(default_factory=SynthSignalParams)
    video_id: str = "synthetic"
    participant_id: str = "P00"
    exercise: str = "dumbbell_curl"
    rom_condition: str = "fROM"
    side: str = "left"
    n_participants: int = 26
    n_exercises: int = 8
    n_female: int = 4


class SynthFile(BaseModel):
    name: str
    text: str


class SynthResponse(BaseModel):
    files: list[SynthFile]
    truth_json: str


class EvaluateRequest(BaseModel):
    predictions_csv: str
    annotations_csv: str


class EvaluateResponse(BaseModel):
    report_json: str


class ErrorResponse(BaseModel):
    error: str
    detail: str
