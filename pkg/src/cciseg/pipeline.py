"""Task preprocessing pipelines: raw record → target-rate, filtered, scaled.

Beat task: resample to 250 Hz, 0.5–50 Hz zero-phase band-pass, per-record
standardization; each sliced episode is additionally mean-subtracted.
Heart-sound task: resample to 800 Hz, local Wiener denoising (50 ms window),
per-record standardization.

Annotation indices are rescaled with the sampling rate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import dsp
from .records import (Annotation, Episode, SignalRecord, TARGET_FS,
                      TASK_HEARTSOUND, TASK_QRS, slice_episodes)

QRS_BAND_HZ = (0.5, 50.0)
HS_WIENER_MS = 50.0

# Band used when synthesizing "in-band" Gaussian contamination per task.
INBAND_NOISE_HZ = {TASK_QRS: QRS_BAND_HZ, TASK_HEARTSOUND: (20.0, 200.0)}


def _rescale_annotations(annotations: list[Annotation], fs_in: float,
                         fs_out: float, n_out: int) -> list[Annotation]:
    out = []
    prev = -1
    for a in annotations:
        idx = int(round(a.sample_index * fs_out / fs_in))
        idx = min(max(idx, 0), n_out - 1)
        if idx > prev:
            out.append(Annotation(idx, a.label))
            prev = idx
    return out


def preprocess_record(record: SignalRecord) -> SignalRecord:
    """Apply the task pipeline; returns a new record at the target rate."""
    fs_out = TARGET_FS[record.task]
    x = dsp.resample(record.samples, record.fs_hz, fs_out)
    if record.task == TASK_QRS:
        x = dsp.bandpass(x, fs_out, *QRS_BAND_HZ)
    else:
        window = int(round(HS_WIENER_MS / 1000.0 * fs_out))
        window += 1 - window % 2  # odd
        if window <= x.shape[0]:
            x = dsp.wiener_local(x, window)
    x = dsp.standardize(x)
    rec = SignalRecord(
        id=record.id, task=record.task, fs_hz=fs_out,
        samples=x.astype(np.float32),
        annotations=_rescale_annotations(record.annotations, record.fs_hz,
                                         fs_out, x.shape[0]),
    )
    rec.validate()
    return rec


def prepare_episodes(records: list[SignalRecord],
                     episode_seconds: float | None = None) -> list[Episode]:
    """Preprocess and slice a batch of records; episode signals are zero-mean."""
    episodes = []
    for rec in records:
        for ep in slice_episodes(preprocess_record(rec), episode_seconds):
            sig = ep.signal.astype(np.float64)
            ep.signal = (sig - sig.mean()).astype(np.float32)
            episodes.append(ep)
    return episodes
