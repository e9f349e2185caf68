"""Synthetic signal, landmark-scene and model-dataset generators.

Every generator carries its analytic ground truth so property tests consume
exact expected values instead of re-deriving them. All randomness flows
through explicitly seeded counter-based generators (Philox); there is no
global RNG state anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ExerciseKind,
    LandmarkFrame,
    LandmarkSeries,
    NUM_LANDMARKS,
    RomCondition,
    BodySide,
    STANDARD_EXERCISES,
)
from .kinematics import AngleSeries, JointTriple, JOINT_TRIPLES, LEFT_ELBOW_TRIPLE
from .metareg import MetaDataset


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Philox generator keyed by (seed, *key); replicate streams stay independent."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=key)))


@dataclass(frozen=True)
class SignalSpec:
    cadence: float = 0.25  # Hz
    amplitude: float = 40.0  # degrees, half peak-to-peak swing
    baseline: float = 90.0  # degrees
    duration: float = 40.0  # seconds
    fps: float = 30.0
    noise_sd: float = 0.0  # degrees
    tempo_asymmetry: float = 1.0  # eccentric / concentric duration ratio
    occlusion_windows: tuple = field(default_factory=tuple)  # (start_s, end_s, indices|None)

    def __post_init__(self):
        if self.amplitude < 0 or self.fps <= 0 or self.cadence <= 0 or self.duration <= 0:
            raise ValueError("amplitude >= 0 and cadence, fps, duration > 0 required")
        if self.tempo_asymmetry <= 0:
            raise ValueError("tempo_asymmetry must be positive")
        for window in self.occlusion_windows:
            start, end = window[0], window[1]
            if not (0 <= start < end <= self.duration):
                raise ValueError(f"occlusion window {window} outside signal duration")


@dataclass(frozen=True)
class SignalTruth:
    rep_count: int
    rom: float
    period: float
    rise_duration: float  # trough-to-peak (eccentric when lengthening raises the angle)
    fall_duration: float
    trough_times: tuple[float, ...]
    eccentric_duration: float
    concentric_duration: float


def _waveform(spec: SignalSpec, t: np.ndarray) -> tuple[np.ndarray, SignalTruth]:
    """Piecewise half-cosine waveform: descend from a peak, run complete
    trough-to-trough cycles, ascend to a final peak, hold. C1-continuous."""
    period = 1.0 / spec.cadence
    r = spec.tempo_asymmetry
    d_up = period * r / (1.0 + r)
    d_down = period / (1.0 + r)
    amp, base = spec.amplitude, spec.baseline

    if amp == 0.0 or spec.duration < d_down + period + d_up:
        n_reps = 0
    else:
        n_reps = int(math.floor((spec.duration - d_down - d_up) / period))

    theta = np.full_like(t, base + amp)
    if amp > 0.0:
        lead = t < d_down
        theta[lead] = base + amp * np.cos(math.pi * t[lead] / d_down)
        tp = t - d_down
        m = np.floor(tp / period)
        s = tp - m * period
        cyc = (t >= d_down) & (m < n_reps)
        rising = cyc & (s < d_up)
        theta[rising] = base - amp * np.cos(math.pi * s[rising] / d_up)
        falling = cyc & ~rising
        theta[falling] = base + amp * np.cos(math.pi * (s[falling] - d_up) / d_down)
        tail = (t >= d_down) & (m >= n_reps)
        s2 = tp - n_reps * period
        tail_rise = tail & (s2 < d_up)
        theta[tail_rise] = base - amp * np.cos(math.pi * s2[tail_rise] / d_up)

    troughs = tuple(d_down + k * period for k in range(n_reps + 1)) if n_reps > 0 else ()
    truth = SignalTruth(
        rep_count=n_reps,
        rom=2.0 * amp,
        period=period,
        rise_duration=d_up,
        fall_duration=d_down,
        trough_times=troughs,
        eccentric_duration=d_up,
        concentric_duration=d_down,
    )
    return theta, truth


def generate_angle_signal(
    spec: SignalSpec,
    seed: int = 0,
    joint: JointTriple = LEFT_ELBOW_TRIPLE,
) -> tuple[AngleSeries, SignalTruth]:
    """Angle series plus exact ground truth; occlusion windows mark samples invalid."""
    n = int(round(spec.duration * spec.fps))
    t = np.arange(n) / spec.fps
    theta, truth = _waveform(spec, t)
    if spec.noise_sd > 0:
        theta = theta + spec.noise_sd * make_rng(seed, 0).standard_normal(n)
        theta = np.clip(theta, 0.0, 180.0)
    valid = np.ones(n, dtype=bool)
    for window in spec.occlusion_windows:
        valid &= ~((t >= window[0]) & (t < window[1]))
    angles = np.where(valid, theta, np.nan)
    series = AngleSeries(timestamps=t, angles=angles, valid=valid, joint=joint, fps=spec.fps)
    return series, truth


def _rotate(vec: np.ndarray, angle_rad: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.stack([c * vec[0] - s * vec[1], s * vec[0] + c * vec[1]], axis=-1)


def generate_landmark_scene(
    spec: SignalSpec,
    joint: JointTriple = LEFT_ELBOW_TRIPLE,
    secondary_amplitude_scale: float = 0.0,
    opposite_visibility: float = 0.2,
    video_id: str = "synthetic",
    participant_id: str = "P00",
    exercise: ExerciseKind | None = None,
    rom_condition: RomCondition = RomCondition.FROM,
    seed: int = 0,
) -> tuple[LandmarkSeries, SignalTruth]:
    """Planar hip-shoulder-elbow-wrist limb whose focal joint articulates per
    the signal spec; inverting the three-point angle recovers the drive.

    The companion joint on the chain follows a scaled copy of the drive so
    fallback reconstructions have something to work with; the opposite body
    side is rendered at low visibility.
    """
    exercise = exercise or STANDARD_EXERCISES["dumbbell_curl"]
    n = int(round(spec.duration * spec.fps))
    t = np.arange(n) / spec.fps
    theta, truth = _waveform(spec, t)
    if spec.noise_sd > 0:
        theta = np.clip(theta + spec.noise_sd * make_rng(seed, 1).standard_normal(n), 1.0, 179.0)

    companion = 90.0 + secondary_amplitude_scale * (theta - spec.baseline)
    if "elbow" in joint.name:
        elbow_angle, shoulder_angle = theta, companion
    else:
        elbow_angle, shoulder_angle = companion, theta

    side = joint.side
    chain = {
        "hip": JOINT_TRIPLES[("shoulder", side)].proximal,
        "shoulder": JOINT_TRIPLES[("elbow", side)].proximal,
        "elbow": JOINT_TRIPLES[("elbow", side)].center,
        "wrist": JOINT_TRIPLES[("elbow", side)].distal,
    }
    other = BodySide.RIGHT if side is BodySide.LEFT else BodySide.LEFT
    opposite_chain = [
        JOINT_TRIPLES[("shoulder", other)].proximal,
        JOINT_TRIPLES[("elbow", other)].proximal,
        JOINT_TRIPLES[("elbow", other)].center,
        JOINT_TRIPLES[("elbow", other)].distal,
    ]

    hip = np.array([320.0, 400.0])
    shoulder = np.array([320.0, 250.0])
    torso_dir = (hip - shoulder) / np.linalg.norm(hip - shoulder)
    upper = 100.0 * _rotate(torso_dir, np.radians(shoulder_angle))
    elbow = shoulder + upper
    to_shoulder = -upper / 100.0
    fore = 90.0 * _rotate(to_shoulder.T, np.radians(elbow_angle))
    wrist = elbow + fore

    landmarks = np.zeros((n, NUM_LANDMARKS, 3))
    for i in range(NUM_LANDMARKS):
        landmarks[:, i, 0] = 50.0 + 7.0 * i
        landmarks[:, i, 1] = 40.0 + 5.0 * i
        landmarks[:, i, 2] = 1.0
    landmarks[:, chain["hip"], :2] = hip
    landmarks[:, chain["shoulder"], :2] = shoulder
    landmarks[:, chain["elbow"], :2] = elbow
    landmarks[:, chain["wrist"], :2] = wrist
    for idx in opposite_chain:
        landmarks[:, idx, 2] = opposite_visibility

    # Default occlusion target: the landmark unique to the focal triple, so
    # the companion joint's signal stays intact for fallback tests.
    default_occluded = chain["wrist"] if "elbow" in joint.name else chain["hip"]
    for window in spec.occlusion_windows:
        indices = window[2] if len(window) > 2 and window[2] is not None else (default_occluded,)
        in_window = (t >= window[0]) & (t < window[1])
        for idx in indices:
            landmarks[in_window, idx, 2] = 0.0

    frames = [
        LandmarkFrame(frame_index=i, timestamp=float(t[i]), landmarks=landmarks[i])
        for i in range(n)
    ]
    series = LandmarkSeries(
        video_id=video_id,
        participant_id=participant_id,
        exercise=exercise,
        rom_condition=rom_condition,
        fps=spec.fps,
        frames=frames,
    )
    return series, truth


@dataclass(frozen=True)
class MetaParams:
    """Generating parameters for the crossed meta-regression model."""

    beta: tuple[float, float, float] = (3.831, -0.303, 0.220)
    tau_p2: float = 0.169
    tau_q2: float = 0.254
    xi: float = 0.759
    tau_u2: float = 0.209
    tau_v2: float = 0.172
    rho: float = 0.846

    def __post_init__(self):
        if min(self.tau_p2, self.tau_q2, self.tau_u2, self.tau_v2) < 0:
            raise ValueError("variance components must be non-negative")
        if abs(self.xi) > 1 or abs(self.rho) > 1:
            raise ValueError("correlations must give positive semidefinite covariance")

    def chol_participant(self) -> np.ndarray:
        return _chol2(self.tau_p2, self.tau_q2, self.xi)

    def chol_exercise(self) -> np.ndarray:
        return _chol2(self.tau_u2, self.tau_v2, self.rho)


def _chol2(var1: float, var2: float, corr: float) -> np.ndarray:
    t1, t2 = math.sqrt(var1), math.sqrt(var2)
    return np.array([[t1, 0.0], [corr * t2, t2 * math.sqrt(max(0.0, 1.0 - corr * corr))]])


@dataclass(frozen=True)
class MetaTruth:
    beta: np.ndarray
    participant_effects: np.ndarray  # (P, 2) intercept/slope draws
    exercise_effects: np.ndarray  # (E, 2)
    s: np.ndarray | None = None  # per-row sd draws when the generator chose them
    k: np.ndarray | None = None  # per-row repetition counts


def simulate_response(
    data: MetaDataset,
    beta: np.ndarray,
    chol_p: np.ndarray,
    chol_e: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, MetaTruth]:
    """Draw a response vector from the model, keeping design and weights fixed."""
    n_p, n_e = len(data.participants), len(data.exercises)
    eff_p = rng.standard_normal((n_p, 2)) @ chol_p.T
    eff_e = rng.standard_normal((n_e, 2)) @ chol_e.T
    eps = rng.standard_normal(data.n) * np.sqrt(data.sigma2)
    y = (
        data.design_matrix @ np.asarray(beta)
        + eff_p[data.pid_idx, 0]
        + eff_p[data.pid_idx, 1] * data.prom
        + eff_e[data.eid_idx, 0]
        + eff_e[data.eid_idx, 1] * data.prom
        + eps
    )
    return y, MetaTruth(beta=np.asarray(beta, dtype=float), participant_effects=eff_p, exercise_effects=eff_e)


def simulate_meta_dataset(
    params: MetaParams,
    n_participants: int = 26,
    n_exercises: int = 8,
    n_female: int = 4,
    seed: int = 0,
    sigma2: np.ndarray | None = None,
    s_range: tuple[float, float] = (0.4, 1.2),
    k_range: tuple[int, int] = (6, 15),
    outcome: str = "rep_duration",
) -> tuple[MetaDataset, MetaTruth]:
    """Complete crossed design (participants x exercises x 2 conditions) drawn
    from the model; deterministic given the seed."""
    rng = make_rng(seed, 2)
    rows_p, rows_e, prom = [], [], []
    for i in range(n_participants):
        for e in range(n_exercises):
            for g in (0.0, 1.0):
                rows_p.append(i)
                rows_e.append(e)
                prom.append(g)
    n = len(rows_p)
    pid = np.array(rows_p)
    eid = np.array(rows_e)
    prom_arr = np.array(prom)
    female = (pid < n_female).astype(float)

    s_drawn = k_drawn = None
    if sigma2 is None:
        s_drawn = rng.uniform(*s_range, size=n)
        k_drawn = rng.integers(k_range[0], k_range[1] + 1, size=n)
        sigma2 = s_drawn * s_drawn / k_drawn
    sigma2 = np.asarray(sigma2, dtype=float).reshape(n)

    data = MetaDataset(
        y=np.zeros(n),
        sigma2=sigma2,
        prom=prom_arr,
        female=female,
        pid_idx=pid,
        eid_idx=eid,
        participants=tuple(f"P{i:02d}" for i in range(n_participants)),
        exercises=tuple(f"E{e}" for e in range(n_exercises)),
        outcome=outcome,
    )
    y, truth = simulate_response(
        data, np.asarray(params.beta), params.chol_participant(), params.chol_exercise(), rng
    )
    from dataclasses import replace

    truth = replace(truth, s=s_drawn, k=k_drawn)
    return replace(data, y=y), truth
