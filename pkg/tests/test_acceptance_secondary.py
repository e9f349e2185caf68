"""Extractor contract: the TypeScript adapter's output must validate under
the primary reader, preserve the container's frame count, and stay within
the source resolution. The primary suite never depends on this module."""

import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from romkit.core import read_landmark_file
from romkit.pipeline import analyze_video
from romkit.synth import SignalSpec

from y4m_fixtures import write_marker_y4m

REPO_ROOT = Path(__file__).resolve().parent.parent
EXTRACTOR = REPO_ROOT / "extractor"


def _ensure_extractor_built() -> Path | None:
    node = shutil.which("node")
    if node is None:
        return None
    cli = EXTRACTOR / "dist" / "cli.js"
    if cli.exists():
        return cli
    npx = shutil.which("npx")
    if npx is None:
        return None
    if not (EXTRACTOR / "node_modules").exists():
        install = subprocess.run(
            ["npm", "install", "--no-audit", "--no-fund"],
            cwd=EXTRACTOR, capture_output=True, timeout=600,
        )
        if install.returncode != 0:
            return None
    build = subprocess.run(
        [npx, "tsc", "-p", "."], cwd=EXTRACTOR, capture_output=True, timeout=300
    )
    return cli if build.returncode == 0 and cli.exists() else None


CLI_JS = _ensure_extractor_built()

pytestmark = pytest.mark.skipif(
    CLI_JS is None, reason="node toolchain unavailable; extractor cannot be built"
)

WIDTH, HEIGHT = 160, 120

FIXTURES = [
    ("clip_a", "P01", "dumbbell_curl", "fROM",
     SignalSpec(cadence=0.30, amplitude=32.0, duration=24.0, fps=30.0)),
    ("clip_b", "P02", "dumbbell_curl", "pROM",
     SignalSpec(cadence=0.25, amplitude=20.0, duration=30.0, fps=30.0)),
    ("clip_c", "P03", "cable_pushdown", "fROM",
     SignalSpec(cadence=0.40, amplitude=28.0, tempo_asymmetry=1.5, duration=20.0, fps=30.0)),
]


@pytest.fixture(scope="module")
def extracted(tmp_path_factory):
    base = tmp_path_factory.mktemp("extractor")
    videos = base / "videos"
    out = base / "landmarks"
    videos.mkdir()
    rows = ["video_path,participant_id,exercise,rom_condition,video_id"]
    truths = {}
    for video_id, pid, exercise, cond, spec in FIXTURES:
        path = videos / f"{video_id}.y4m"
        n_frames, truth = write_marker_y4m(path, spec, WIDTH, HEIGHT)
        truths[video_id] = (n_frames, truth)
        rows.append(f"{path},{pid},{exercise},{cond},{video_id}")
    manifest = base / "manifest.csv"
    manifest.write_text("\n".join(rows) + "\n")
    run = subprocess.run(
        [
            "node", str(CLI_JS), "--manifest", str(manifest),
            "--out-dir", str(out), "--backend", "markers", "--stride", "1",
        ],
        capture_output=True, text=True, timeout=300,
    )
    assert run.returncode == 0, run.stderr
    return out, truths


def test_outputs_validate_under_primary_reader(extracted):
    out, truths = extracted
    for video_id, pid, exercise, cond, spec in FIXTURES:
        series = read_landmark_file(out / f"{video_id}.landmarks.jsonl")
        assert series.video_id == video_id
        assert series.participant_id == pid
        assert series.exercise.name == exercise
        assert series.rom_condition.value == cond
        n_frames, _ = truths[video_id]
        assert abs(len(series) - n_frames) <= 2


def test_coordinates_within_source_resolution(extracted):
    out, _ = extracted
    for video_id, *_ in FIXTURES:
        series = read_landmark_file(out / f"{video_id}.landmarks.jsonl")
        lm = series.landmark_array
        visible = lm[:, :, 2] > 0
        assert np.all(lm[:, :, 0][visible] >= 0) and np.all(lm[:, :, 0][visible] <= WIDTH)
        assert np.all(lm[:, :, 1][visible] >= 0) and np.all(lm[:, :, 1][visible] <= HEIGHT)


def test_canonical_form_round_trips_byte_exact(extracted):
    from romkit.core import write_landmark_file

    out, _ = extracted
    for video_id, *_ in FIXTURES:
        path = out / f"{video_id}.landmarks.jsonl"
        series = read_landmark_file(path)
        rewritten = out / f"{video_id}.rewritten.jsonl"
        write_landmark_file(series, rewritten)
        assert rewritten.read_bytes() == path.read_bytes()


def test_primary_pipeline_recovers_repetitions(extracted):
    out, truths = extracted
    for video_id, *_ in FIXTURES:
        series = read_landmark_file(out / f"{video_id}.landmarks.jsonl")
        analysis = analyze_video(series)
        n_frames, truth = truths[video_id]
        assert len(analysis.repetitions) == truth.rep_count
        assert analysis.side.value == "left"
        for rep in analysis.repetitions:
            assert abs(rep.rom - truth.rom) < 3.0  # blob centroids add ~1px noise


def test_no_detection_video_errors(extracted, tmp_path):
    blank = tmp_path / "blank.y4m"
    n = 30
    chroma = bytes([128]) * ((WIDTH // 2) * (HEIGHT // 2))
    with open(blank, "wb") as fh:
        fh.write(f"YUV4MPEG2 W{WIDTH} H{HEIGHT} F30:1 Ip A1:1 C420jpeg\n".encode())
        for _ in range(n):
            fh.write(b"FRAME\n")
            fh.write(bytes([16]) * (WIDTH * HEIGHT))
            fh.write(chroma)
            fh.write(chroma)
    run = subprocess.run(
        [
            "node", str(CLI_JS), "--video", str(blank), "--participant", "P09",
            "--exercise", "dumbbell_curl", "--rom-condition", "fROM",
            "--out-dir", str(tmp_path), "--backend", "markers",
        ],
        capture_output=True, text=True, timeout=120,
    )
    assert run.returncode == 1
    assert "no person detected" in run.stderr
