"""Command-line client for the analysis service.

Every command talks to the HTTP API: either a remote server (``--server``)
or an in-process instance of the app. File I/O, batching and parallelism
live here; all computation and content rendering happen service-side, so a
given command writes byte-identical outputs either way.
"""

from __future__ import annotations

import argparse
import asyncio
import base64
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import httpx

from .config import ENV_CONFIG
from .errors import ConfigError

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2


class ServiceClient:
    """Minimal sync JSON client; in-process ASGI when no server is given."""

    def __init__(self, server: str | None):
        self._server = server
        self._transport = None
        if server is None:
            from .service import create_app

            self._transport = httpx.ASGITransport(app=create_app())

    def post(self, path: str, payload: dict) -> dict:
        if self._server is not None:
            with httpx.Client(base_url=self._server, timeout=3600.0) as client:
                response = client.post(path, json=payload)
        else:
            async def _go():
                async with httpx.AsyncClient(
                    transport=self._transport, base_url="http://romkit", timeout=3600.0
                ) as client:
                    return await client.post(path, json=payload)

            response = asyncio.run(_go())
        if response.status_code != 200:
            try:
                body = response.json()
            except json.JSONDecodeError:
                body = {"error": "HTTPError", "detail": response.text}
            raise ServiceError(body.get("error", "HTTPError"), body.get("detail", ""))
        return response.json()


class ServiceError(Exception):
    def __init__(self, kind: str, detail: str):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail

    @property
    def is_usage(self) -> bool:
        return self.kind in ("ConfigError", "RequestValidationError")


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_text(path: str | None) -> str | None:
    if path is None:
        return None
    return Path(path).read_text(encoding="utf-8")


def _common_payload_fields(args) -> dict:
    payload = {}
    config_path = args.config or os.environ.get(ENV_CONFIG)
    if config_path:
        payload["config_text"] = read_text(config_path)
    return payload


def _io_paths(args) -> tuple[str | None, str | None]:
    """(joint_map, participant_metadata) from flags, falling back to [io]."""
    from .config import load_config

    cfg = load_config(args.config)
    joint_map = getattr(args, "joint_map", None) or cfg.io.joint_map
    metadata = getattr(args, "metadata", None) or cfg.io.participant_metadata
    return joint_map, metadata


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".landmarks.jsonl", ".jsonl"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def _run_batch(args, inputs: list[Path], worker) -> tuple[int, dict]:
    failures = []
    results = {}

    def handle(path: Path):
        try:
            return path, worker(path), None
        except (ServiceError, OSError) as exc:
            return path, None, exc

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(handle, inputs))
    else:
        outcomes = [handle(p) for p in inputs]

    usage_error = False
    for path, result, error in outcomes:
        if error is None:
            results[path] = result
        else:
            failures.append((path, error))
            if isinstance(error, ServiceError) and error.is_usage:
                usage_error = True

    for path, error in failures:
        print(f"FAILED {path}: {error}", file=sys.stderr)
    code = EXIT_OK
    if failures:
        code = EXIT_USAGE if usage_error else EXIT_PARTIAL
    return code, results


def cmd_angles(args) -> int:
    client = ServiceClient(args.server)
    out_dir = Path(args.out_dir)
    base = _common_payload_fields(args)
    joint_map, _ = _io_paths(args)
    if joint_map:
        base["joint_map_text"] = read_text(joint_map)

    def worker(path: Path):
        payload = dict(base, landmarks_jsonl=read_text(str(path)))
        result = client.post("/v1/angles", payload)
        atomic_write(out_dir / f"{_stem(path)}.angles.csv", result["angles_csv"].encode())
        print(
            f"{result['video_id']}: joint={result['joint']} side={result['side']} "
            f"mode={result['mode']} coverage={result['coverage']:.3f}"
        )
        return result

    code, _ = _run_batch(args, [Path(p) for p in args.inputs], worker)
    return code


def cmd_segment(args) -> int:
    client = ServiceClient(args.server)
    out_dir = Path(args.out_dir)
    base = _common_payload_fields(args)
    joint_map, _ = _io_paths(args)
    if joint_map:
        base["joint_map_text"] = read_text(joint_map)
    base["include_plot"] = bool(args.plots)

    def worker(path: Path):
        payload = dict(base, landmarks_jsonl=read_text(str(path)))
        result = client.post("/v1/segment", payload)
        stem = _stem(path)
        atomic_write(out_dir / f"{stem}.reps.csv", result["repetitions_csv"].encode())
        atomic_write(out_dir / f"{stem}.angles.csv", result["angles_csv"].encode())
        if result.get("trace_png_b64"):
            atomic_write(out_dir / f"{stem}.trace.png", base64.b64decode(result["trace_png_b64"]))
        print(
            f"{result['video_id']}: {result['n_repetitions']} repetitions "
            f"({result['n_trimmed']} after trimming), side={result['side']}"
        )
        return result

    inputs = [Path(p) for p in args.inputs]
    code, results = _run_batch(args, inputs, worker)

    # combined per-set summary table, in input order
    lines = ["participant_id,exercise,rom_condition,outcome,mean,sd,k,side_left_fraction"]
    for path in inputs:
        for row in (results.get(path) or {}).get("summary_rows", []):
            lines.append(
                f"{row['participant_id']},{row['exercise']},{row['rom_condition']},"
                f"{row['outcome']},{row['mean']:.10g},{row['sd']:.10g},{row['k']},"
                f"{row['side_left_fraction']:.10g}"
            )
    summary_path = Path(args.summaries_out) if args.summaries_out else out_dir / "set_summaries.csv"
    atomic_write(summary_path, ("\n".join(lines) + "\n").encode())
    print(f"wrote {summary_path} ({len(lines) - 1} rows)")

    # per-video predictions, ready for `romkit evaluate` against annotations
    pred_lines = ["video_id,side,rep_count"]
    for path in inputs:
        result = results.get(path)
        if result is not None:
            pred_lines.append(f"{result['video_id']},{result['side']},{result['n_repetitions']}")
    atomic_write(out_dir / "predictions.csv", ("\n".join(pred_lines) + "\n").encode())
    return code


def cmd_fit(args) -> int:
    client = ServiceClient(args.server)
    out_dir = Path(args.out_dir)
    payload = _common_payload_fields(args)
    payload["summary_csv"] = read_text(args.summaries)
    payload["outcome"] = args.outcome
    _, metadata = _io_paths(args)
    if metadata:
        payload["metadata_csv"] = read_text(metadata)
    try:
        result = client.post("/v1/fit", payload)
    except ServiceError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_USAGE if exc.is_usage else EXIT_PARTIAL
    atomic_write(out_dir / "model_report.json", result["report_json"].encode())
    atomic_write(out_dir / "model_table.txt", result["table_txt"].encode())
    atomic_write(out_dir / "descriptive.csv", result["descriptive_csv"].encode())
    print(result["table_txt"])
    return EXIT_OK


def cmd_infer(args) -> int:
    client = ServiceClient(args.server)
    out_dir = Path(args.out_dir)
    payload = _common_payload_fields(args)
    payload["summary_csv"] = read_text(args.summaries)
    payload["outcome"] = args.outcome
    _, metadata = _io_paths(args)
    if metadata:
        payload["metadata_csv"] = read_text(metadata)
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.bootstrap_b is not None:
        payload["bootstrap_b"] = args.bootstrap_b
    try:
        result = client.post("/v1/infer", payload)
    except ServiceError as exc:
        print(f"infer failed: {exc}", file=sys.stderr)
        return EXIT_USAGE if exc.is_usage else EXIT_PARTIAL
    atomic_write(out_dir / "inference_report.json", result["report_json"].encode())
    atomic_write(out_dir / "inference_tables.txt", result["tables_txt"].encode())
    if result.get("forest_png_b64"):
        atomic_write(out_dir / "pct_rom_forest.png", base64.b64decode(result["forest_png_b64"]))
    print(result["tables_txt"])
    return EXIT_OK


def cmd_synth(args) -> int:
    client = ServiceClient(args.server)
    out_dir = Path(args.out_dir)
    payload = {
        "kind": args.kind,
        "seed": args.seed if args.seed is not None else 0,
        "video_id": args.video_id,
        "participant_id": args.participant,
        "exercise": args.exercise,
        "rom_condition": args.rom_condition,
        "side": args.side,
        "n_participants": args.participants,
        "n_exercises": args.exercises,
        "n_female": args.female,
        "signal": {
            "cadence": args.cadence,
            "amplitude": args.amplitude,
            "baseline": args.baseline,
            "duration": args.duration,
            "fps": args.fps,
            "noise_sd": args.noise_sd,
            "tempo_asymmetry": args.tempo_asymmetry,
        },
    }
    try:
        result = client.post("/v1/synth", payload)
    except ServiceError as exc:
        print(f"synth failed: {exc}", file=sys.stderr)
        return EXIT_USAGE if exc.is_usage else EXIT_PARTIAL
    for entry in result["files"]:
        atomic_write(out_dir / entry["name"], entry["text"].encode())
        print(f"wrote {out_dir / entry['name']}")
    truth_name = (
        f"{args.video_id}.truth.json" if args.kind in ("scene", "signal")
        else f"{args.kind}_truth.json"
    )
    atomic_write(out_dir / truth_name, result["truth_json"].encode())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    client = ServiceClient(args.server)
    payload = {
        "predictions_csv": read_text(args.predictions),
        "annotations_csv": read_text(args.annotations),
    }
    try:
        result = client.post("/v1/evaluate", payload)
    except ServiceError as exc:
        print(f"evaluate failed: {exc}", file=sys.stderr)
        return EXIT_USAGE if exc.is_usage else EXIT_PARTIAL
    report = json.loads(result["report_json"])
    atomic_write(Path(args.out_dir) / "evaluation_report.json", result["report_json"].encode())
    print(
        f"side accuracy {report['side_accuracy']:.3f}, "
        f"mean |deviation| {report['mean_abs_deviation']:.2f}, "
        f"within +/-2 reps {report['within_two_fraction']:.3f} "
        f"({report['n_videos']} videos)"
    )
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="romkit",
        description="Joint-angle kinematics, repetition segmentation and "
        "meta-regression inference for resistance-training videos.",
    )
    parser.add_argument("--server", help="analysis service URL (default: run in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_jobs=False):
        p.add_argument("--config", help=f"configuration file (or ${ENV_CONFIG})")
        p.add_argument("--out-dir", default=".", help="output directory")
        if with_jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel workers")

    p = sub.add_parser("angles", help="landmark files -> per-video angle CSVs")
    p.add_argument("inputs", nargs="+", help="landmark .jsonl files")
    p.add_argument("--joint-map", help="exercise -> joint override file")
    add_common(p, with_jobs=True)
    p.set_defaults(func=cmd_angles)

    p = sub.add_parser("segment", help="landmark files -> repetitions + set summaries")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--joint-map")
    p.add_argument("--plots", action="store_true", help="emit angle-trace plots")
    p.add_argument("--summaries-out", default=None,
                   help="combined set-summary CSV path (default <out-dir>/set_summaries.csv)")
    add_common(p, with_jobs=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("fit", help="set-summary CSV -> model report")
    p.add_argument("summaries", help="set-summary CSV")
    p.add_argument("--outcome", default="rep_duration",
                   choices=["rep_duration", "eccentric", "concentric", "rom", "log_rom"])
    p.add_argument("--metadata", help="participant metadata CSV (participant_id, sex)")
    add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("infer", help="set-summary CSV -> LRTs, contrasts, %ROM")
    p.add_argument("summaries")
    p.add_argument("--outcome", default="rep_duration",
                   choices=["rep_duration", "eccentric", "concentric", "rom", "log_rom"])
    p.add_argument("--metadata")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--bootstrap-b", type=int, default=None)
    add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", help="generate synthetic fixtures")
    p.add_argument("kind", choices=["signal", "scene", "dataset"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--video-id", default="synthetic")
    p.add_argument("--participant", default="P00")
    p.add_argument("--exercise", default="dumbbell_curl")
    p.add_argument("--rom-condition", default="fROM")
    p.add_argument("--side", default="left")
    p.add_argument("--cadence", type=float, default=0.25)
    p.add_argument("--amplitude", type=float, default=40.0)
    p.add_argument("--baseline", type=float, default=90.0)
    p.add_argument("--duration", type=float, default=40.0)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--tempo-asymmetry", type=float, default=1.0)
    p.add_argument("--participants", type=int, default=26)
    p.add_argument("--exercises", type=int, default=8)
    p.add_argument("--female", type=int, default=4)
    add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("evaluate", help="compare predictions against annotations")
    p.add_argument("predictions", help="CSV: video_id, side, rep_count")
    p.add_argument("annotations", help="CSV: video_id, side, rep_count")
    add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="run the analysis service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ServiceError as exc:
        print(f"service error: {exc}", file=sys.stderr)
        return EXIT_USAGE if exc.is_usage else EXIT_PARTIAL
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
