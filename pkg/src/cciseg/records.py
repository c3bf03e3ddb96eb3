"""Signal records: data model, on-disk format, synthetic generators, episode slicing.

A record is a single-channel sampled signal plus event annotations. Two tasks are
supported: ``qrs`` (point annotations marking ventricular beats in an ECG-like
signal) and ``heartsound`` (segment-onset annotations tiling the record with the
four cardiac-cycle states S1 / systole / S2 / diastole).

On disk a record is a triple of files sharing a stem:

    <id>.meta.json   UTF-8 JSON: id, task, fs_hz, n_samples, annotation_kind
    <id>.f32         raw little-endian float32 samples, length n_samples
    <id>.ann         text, one "sample_index<TAB>label" line per annotation
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

TASK_QRS = "qrs"
TASK_HEARTSOUND = "heartsound"
TASKS = (TASK_QRS, TASK_HEARTSOUND)

BEAT_LABEL = "beat"
HS_STATES = ("S1", "systole", "S2", "diastole")
HS_STATE_INDEX = {s: i for i, s in enumerate(HS_STATES)}

# Samples per latent frame = the encoder's total temporal downsample factor.
FRAME_LEN = {TASK_QRS: 4, TASK_HEARTSOUND: 16}
TARGET_FS = {TASK_QRS: 250.0, TASK_HEARTSOUND: 800.0}
EPISODE_SECONDS = {TASK_QRS: 10.0, TASK_HEARTSOUND: 5.0}
EPISODE_LEN = {TASK_QRS: 2500, TASK_HEARTSOUND: 4000}
NUM_CLASSES = {TASK_QRS: 1, TASK_HEARTSOUND: 4}

# A frame counts as beat-positive when its center lies within this distance of
# an annotated beat. Sized to a typical ventricular complex; configurable per call.
QRS_TARGET_HALF_MS = 75.0

ANNOTATION_KIND = {TASK_QRS: "beat", TASK_HEARTSOUND: "state_onset"}


@dataclass(frozen=True)
class Annotation:
    sample_index: int
    label: str


@dataclass
class SignalRecord:
    id: str
    task: str
    fs_hz: float
    samples: np.ndarray  # float32, shape (n,)
    annotations: list[Annotation] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs_hz

    def validate(self) -> None:
        """Raise ValueError naming the offending field on any invariant violation."""
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not (self.fs_hz > 0):
            raise ValueError(f"fs_hz must be positive, got {self.fs_hz}")
        if self.samples.ndim != 1:
            raise ValueError("samples must be a 1-D sequence")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")
        allowed = {BEAT_LABEL} if self.task == TASK_QRS else set(HS_STATES)
        prev = -1
        for a in self.annotations:
            if a.label not in allowed:
                raise ValueError(f"annotation label {a.label!r} invalid for task {self.task!r}")
            if not (0 <= a.sample_index < self.n_samples):
                raise ValueError(
                    f"annotation out of range: index {a.sample_index} not in [0, {self.n_samples})"
                )
            if a.sample_index <= prev:
                raise ValueError("annotation sample indices must be strictly increasing")
            prev = a.sample_index
        if self.task == TASK_HEARTSOUND and len(self.annotations) >= 2:
            for a, b in zip(self.annotations, self.annotations[1:]):
                want = HS_STATES[(HS_STATE_INDEX[a.label] + 1) % 4]
                if b.label != want:
                    raise ValueError(
                        f"heart-sound states must cycle {'→'.join(HS_STATES)}: "
                        f"{a.label!r} followed by {b.label!r}"
                    )


def save_record(record: SignalRecord, out_dir) -> Path:
    """Write the three-file representation of ``record`` under ``out_dir``.

    Byte-deterministic for a given record. Returns the meta-file path.
    """
    record.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "id": record.id,
        "task": record.task,
        "fs_hz": float(record.fs_hz),
        "n_samples": record.n_samples,
        "annotation_kind": ANNOTATION_KIND[record.task],
    }
    meta_path = out_dir / f"{record.id}.meta.json"
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    record.samples.astype("<f4").tofile(out_dir / f"{record.id}.f32")
    lines = [f"{a.sample_index}\t{a.label}\n" for a in record.annotations]
    (out_dir / f"{record.id}.ann").write_text("".join(lines), encoding="utf-8")
    return meta_path


def load_record(path) -> SignalRecord:
    """Load a record given its meta-file path or the bare stem path."""
    path = Path(path)
    if path.name.endswith(".meta.json"):
        meta_path = path
        stem = path.name[: -len(".meta.json")]
        base = path.parent
    else:
        meta_path = path.parent / f"{path.name}.meta.json"
        stem = path.name
        base = path.parent
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing metadata file {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    for key in ("id", "task", "fs_hz", "n_samples"):
        if key not in meta:
            raise ValueError(f"metadata missing field {key!r} in {meta_path}")

    f32_path = base / f"{stem}.f32"
    if not f32_path.is_file():
        raise FileNotFoundError(f"missing sample file {f32_path}")
    samples = np.fromfile(f32_path, dtype="<f4")
    if samples.shape[0] != int(meta["n_samples"]):
        raise ValueError(
            f"length mismatch: metadata n_samples={meta['n_samples']} but "
            f"{f32_path.name} holds {samples.shape[0]} samples"
        )

    ann_path = base / f"{stem}.ann"
    if not ann_path.is_file():
        raise FileNotFoundError(f"missing annotation file {ann_path}")
    annotations = []
    for lineno, line in enumerate(ann_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            idx_str, label = line.split("\t")
            idx = int(idx_str)
        except ValueError as e:
            raise ValueError(f"malformed annotation line {lineno} in {ann_path.name}") from e
        annotations.append(Annotation(idx, label))

    record = SignalRecord(
        id=str(meta["id"]),
        task=str(meta["task"]),
        fs_hz=float(meta["fs_hz"]),
        samples=samples,
        annotations=annotations,
    )
    record.validate()
    return record


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs for the synthetic signal generators. All timing fields in seconds/bpm.

    ECG-specific: Gaussian-bump P/QRS/T morphology, an optional fraction of
    amplitude-inverted beats, and an optional P-wave train running on its own
    rhythm (decoupled from the ventricular beats, like a high-grade block).
    Heart-sound-specific: damped-sinusoid S1/S2 bursts over low-amplitude
    systole/diastole floors.
    """

    duration_s: float = 10.0
    fs_hz: float = 250.0
    mean_hr_bpm: float = 60.0
    hr_std_bpm: float = 3.0
    noise_std: float = 0.02

    # ECG morphology
    p_amp: float = 0.15
    qrs_amp: float = 1.0
    t_amp: float = 0.3
    inverted_frac: float = 0.0
    decoupled_p: bool = False
    p_rate_bpm: float = 75.0

    # heart-sound morphology
    s1_amp: float = 1.0
    s2_amp: float = 0.7
    s1_freq_hz: float = 50.0
    s2_freq_hz: float = 60.0
    floor_amp: float = 0.02


def default_synth_config(task: str) -> SynthConfig:
    if task == TASK_QRS:
        return SynthConfig(duration_s=10.0, fs_hz=TARGET_FS[TASK_QRS])
    if task == TASK_HEARTSOUND:
        return SynthConfig(duration_s=5.0, fs_hz=TARGET_FS[TASK_HEARTSOUND])
    raise ValueError(f"unknown task {task!r}")


def _check_synth_cfg(cfg: SynthConfig) -> None:
    if cfg.duration_s <= 0:
        raise ValueError("duration_s must be positive")
    if cfg.fs_hz <= 0:
        raise ValueError("fs_hz must be positive")
    if cfg.mean_hr_bpm <= 0:
        raise ValueError("mean_hr_bpm must be positive")


def _rr_sequence(cfg: SynthConfig, rng: np.random.Generator, t_end: float) -> np.ndarray:
    """Cumulative beat times with per-beat jitter, covering [0, t_end)."""
    rr_mean = 60.0 / cfg.mean_hr_bpm
    rr_std = rr_mean * cfg.hr_std_bpm / cfg.mean_hr_bpm
    times = []
    t = 0.55 * rr_mean
    while t < t_end:
        times.append(t)
        t += float(np.clip(rng.normal(rr_mean, rr_std), 0.35, 2.5))
    return np.asarray(times)


def _add_bump(x: np.ndarray, fs: float, center_s: float, amp: float, sigma_s: float) -> None:
    """Accumulate a Gaussian bump in place, evaluated only on its ±4σ support."""
    n = x.shape[0]
    lo = max(0, int((center_s - 4 * sigma_s) * fs))
    hi = min(n, int((center_s + 4 * sigma_s) * fs) + 1)
    if hi <= lo:
        return
    t = np.arange(lo, hi) / fs
    x[lo:hi] += amp * np.exp(-0.5 * ((t - center_s) / sigma_s) ** 2)


def synth_ecg(cfg: SynthConfig, seed: int) -> SignalRecord:
    """Generate an ECG-like record with one "beat" annotation per ventricular complex.

    Pure function of (cfg, seed).
    """
    _check_synth_cfg(cfg)
    rng = np.random.default_rng(seed)
    n = int(round(cfg.duration_s * cfg.fs_hz))
    x = np.zeros(n, dtype=np.float64)

    beat_times = _rr_sequence(cfg, rng, cfg.duration_s - 0.05)
    inverted = rng.random(beat_times.shape[0]) < cfg.inverted_frac

    if cfg.decoupled_p:
        p_cfg = replace(cfg, mean_hr_bpm=cfg.p_rate_bpm, hr_std_bpm=cfg.hr_std_bpm / 2)
        p_times = _rr_sequence(p_cfg, rng, cfg.duration_s - 0.05)
        for tp in p_times:
            _add_bump(x, cfg.fs_hz, tp, cfg.p_amp, 0.025)

    for tb, inv in zip(beat_times, inverted):
        sign = -1.0 if inv else 1.0
        if not cfg.decoupled_p:
            _add_bump(x, cfg.fs_hz, tb - 0.16, cfg.p_amp, 0.025)
        _add_bump(x, cfg.fs_hz, tb - 0.028, -0.12 * cfg.qrs_amp * sign, 0.010)  # Q dip
        _add_bump(x, cfg.fs_hz, tb, cfg.qrs_amp * sign, 0.016)                  # R peak
        _add_bump(x, cfg.fs_hz, tb + 0.030, -0.18 * cfg.qrs_amp * sign, 0.012)  # S dip
        _add_bump(x, cfg.fs_hz, tb + 0.25, cfg.t_amp * sign, 0.055)

    if cfg.noise_std > 0:
        x += rng.normal(0.0, cfg.noise_std, n)

    annotations = []
    prev = -1
    for tb in beat_times:
        idx = int(round(tb * cfg.fs_hz))
        if 0 <= idx < n and idx > prev:
            annotations.append(Annotation(idx, BEAT_LABEL))
            prev = idx
    rec = SignalRecord(
        id=f"ecg-{seed}", task=TASK_QRS, fs_hz=cfg.fs_hz,
        samples=x.astype(np.float32), annotations=annotations,
    )
    rec.validate()
    return rec


# Fractions of each cardiac cycle occupied by S1 / systole / S2 (diastole = rest).
_HS_FRACTIONS = (0.12, 0.21, 0.10)


def synth_pcg(cfg: SynthConfig, seed: int) -> SignalRecord:
    """Generate a heart-sound-like record whose state annotations tile it.

    Each cycle is S1 burst → systolic floor → S2 burst → diastolic floor, with
    segment-onset annotations starting at sample 0. Pure function of (cfg, seed).
    """
    _check_synth_cfg(cfg)
    rng = np.random.default_rng(seed)
    n = int(round(cfg.duration_s * cfg.fs_hz))
    x = rng.normal(0.0, cfg.floor_amp, n)

    rr_mean = 60.0 / cfg.mean_hr_bpm
    rr_std = rr_mean * cfg.hr_std_bpm / cfg.mean_hr_bpm

    def burst(t0: float, dur: float, amp: float, freq: float) -> None:
        lo = int(round(t0 * cfg.fs_hz))
        hi = min(n, int(round((t0 + dur) * cfg.fs_hz)))
        if hi <= lo:
            return
        tl = np.arange(hi - lo) / cfg.fs_hz
        envelope = (1.0 - np.exp(-tl / 0.004)) * np.exp(-tl / 0.022)
        x[lo:hi] += amp * envelope * np.sin(2 * np.pi * freq * tl)

    annotations = []
    prev_idx = -1

    def emit(t0: float, label: str) -> None:
        nonlocal prev_idx
        idx = int(round(t0 * cfg.fs_hz))
        if idx < n and idx > prev_idx:
            annotations.append(Annotation(idx, label))
            prev_idx = idx

    t = 0.0
    while t < cfg.duration_s:
        rr = float(np.clip(rng.normal(rr_mean, rr_std), 0.35, 2.5))
        f1, f2, f3 = _HS_FRACTIONS
        onsets = (t, t + f1 * rr, t + (f1 + f2) * rr, t + (f1 + f2 + f3) * rr)
        for t0, label in zip(onsets, HS_STATES):
            if t0 < cfg.duration_s:
                emit(t0, label)
        burst(onsets[0], f1 * rr, cfg.s1_amp * rng.uniform(0.9, 1.1),
              cfg.s1_freq_hz * rng.uniform(0.95, 1.05))
        burst(onsets[2], f3 * rr, cfg.s2_amp * rng.uniform(0.9, 1.1),
              cfg.s2_freq_hz * rng.uniform(0.95, 1.05))
        t += rr

    rec = SignalRecord(
        id=f"pcg-{seed}", task=TASK_HEARTSOUND, fs_hz=cfg.fs_hz,
        samples=x.astype(np.float32), annotations=annotations,
    )
    rec.validate()
    return rec


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    """One fixed-length training/eval window with per-frame labels.

    ``signal`` has length T × frame_len_samples; ``frame_labels`` has length T
    (QRS: 0/1 beat mask; heart sound: state index 0..3).
    """

    signal: np.ndarray
    frame_labels: np.ndarray
    frame_len_samples: int
    source_id: str
    offset_samples: int
    task: str

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float32)
        self.frame_labels = np.asarray(self.frame_labels, dtype=np.int64)
        if self.signal.shape[0] != self.frame_labels.shape[0] * self.frame_len_samples:
            raise ValueError("episode length must equal n_frames × frame_len_samples")

    @property
    def n_frames(self) -> int:
        return int(self.frame_labels.shape[0])


def labelize(window_start: int, window_len: int, annotations: list[Annotation],
             task: str, fs_hz: float, frame_len: int | None = None,
             qrs_half_ms: float = QRS_TARGET_HALF_MS,
             record_len: int | None = None) -> np.ndarray:
    """Per-frame targets for one window at the latent-frame grid.

    QRS: frame t is 1 iff its center sample (window_start + (t+0.5)·frame_len)
    lies within ±qrs_half_ms of an annotated beat. Heart sound: frame t carries
    the index of the state segment containing its center; raises if any center
    falls outside all segments.
    """
    if frame_len is None:
        frame_len = FRAME_LEN[task]
    if window_len % frame_len != 0:
        raise ValueError("window length must be a multiple of the frame length")
    n_frames = window_len // frame_len
    centers = window_start + (np.arange(n_frames) + 0.5) * frame_len

    if task == TASK_QRS:
        labels = np.zeros(n_frames, dtype=np.int64)
        half = qrs_half_ms * fs_hz / 1000.0
        for a in annotations:
            labels |= np.abs(centers - a.sample_index) <= half
        return labels

    if task == TASK_HEARTSOUND:
        if not annotations:
            raise ValueError("heart-sound window not covered by any state segment")
        onsets = np.array([a.sample_index for a in annotations], dtype=np.float64)
        states = np.array([HS_STATE_INDEX[a.label] for a in annotations], dtype=np.int64)
        if centers[0] < onsets[0]:
            raise ValueError("heart-sound window starts before the first state segment")
        end = record_len if record_len is not None else window_start + window_len
        if centers[-1] >= end:
            raise ValueError("heart-sound window extends past the record")
        seg = np.searchsorted(onsets, centers, side="right") - 1
        return states[seg]

    raise ValueError(f"unknown task {task!r}")


def slice_episodes(record: SignalRecord, episode_seconds: float | None = None,
                   qrs_half_ms: float = QRS_TARGET_HALF_MS) -> list[Episode]:
    """Cut a preprocessed record into consecutive non-overlapping episodes.

    The record must already be at the task's target rate; a trailing remainder
    shorter than one episode is dropped rather than padded.
    """
    if episode_seconds is None:
        episode_seconds = EPISODE_SECONDS[record.task]
    if not math.isclose(record.fs_hz, TARGET_FS[record.task], rel_tol=1e-6):
        raise ValueError(
            f"record fs {record.fs_hz} Hz differs from the {record.task} target "
            f"{TARGET_FS[record.task]} Hz; preprocess first"
        )
    frame_len = FRAME_LEN[record.task]
    ep_len = int(round(episode_seconds * record.fs_hz))
    if ep_len % frame_len != 0:
        raise ValueError("episode length must be a multiple of the frame length")

    episodes = []
    for start in range(0, record.n_samples - ep_len + 1, ep_len):
        labels = labelize(start, ep_len, record.annotations, record.task,
                          record.fs_hz, frame_len, qrs_half_ms,
                          record_len=record.n_samples)
        episodes.append(Episode(
            signal=record.samples[start:start + ep_len],
            frame_labels=labels,
            frame_len_samples=frame_len,
            source_id=record.id,
            offset_samples=start,
            task=record.task,
        ))
    return episodes


def save_episodes(episodes: list[Episode], path) -> None:
    """Bundle episodes into one .npz (signals, labels, offsets, ids, frame_len, task)."""
    if not episodes:
        raise ValueError("no episodes to save")
    task = episodes[0].task
    frame_len = episodes[0].frame_len_samples
    if any(e.task != task or e.frame_len_samples != frame_len for e in episodes):
        raise ValueError("episodes must share one task and frame length")
    np.savez(
        path,
        signals=np.stack([e.signal for e in episodes]),
        labels=np.stack([e.frame_labels for e in episodes]),
        offsets=np.array([e.offset_samples for e in episodes], dtype=np.int64),
        source_ids=np.array([e.source_id for e in episodes]),
        frame_len=np.int64(frame_len),
        task=np.str_(task),
    )


def load_episodes(path) -> list[Episode]:
    with np.load(path, allow_pickle=False) as z:
        task = str(z["task"])
        frame_len = int(z["frame_len"])
        return [
            Episode(signal=s, frame_labels=l, frame_len_samples=frame_len,
                    source_id=str(sid), offset_samples=int(off), task=task)
            for s, l, off, sid in zip(z["signals"], z["labels"], z["offsets"], z["source_ids"])
        ]
