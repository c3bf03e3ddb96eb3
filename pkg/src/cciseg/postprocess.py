"""Turn per-frame probabilities into discrete events.

Beat decisions: maximal runs of frames above threshold become candidates; a
candidate's time is the probability-weighted center of its run, and candidates
closer than the refractory gap are thinned by dropping the weaker (smaller
summed probability) until all survivors are separated.

Heart-sound onsets: per-frame argmax (ties toward the lower state index), one
event at frame 0 and at every frame where the winning state changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .records import HS_STATES

QRS_THRESHOLD = 0.5
QRS_REFRACTORY_MS = 200.0


@dataclass
class EventList:
    events: list[tuple[float, str]] = field(default_factory=list)  # (time_ms, label)

    def __post_init__(self):
        for (t0, _), (t1, _) in zip(self.events, self.events[1:]):
            if not t1 > t0:
                raise ValueError("event times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.events)

    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.events], dtype=np.float64)

    def labels(self) -> list[str]:
        return [l for _, l in self.events]

    def to_ann_lines(self, fs_hz: float) -> list[str]:
        """Serialize as "sample_index<TAB>label" lines at the given rate."""
        return [f"{int(round(t * fs_hz / 1000.0))}\t{label}\n" for t, label in self.events]


def _candidate_runs(p: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """[start, end) frame spans of maximal runs with p > threshold."""
    above = p > threshold
    runs = []
    start = None
    for i, a in enumerate(above):
        if a and start is None:
            start = i
        elif not a and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(above)))
    return runs


def qrs_decisions(probs: np.ndarray, frame_ms: float,
                  threshold: float = QRS_THRESHOLD,
                  refractory_ms: float = QRS_REFRACTORY_MS) -> EventList:
    """Beat events from (T,) or (T, 1) frame probabilities."""
    if frame_ms <= 0:
        raise ValueError("frame_ms must be positive")
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    centers = (np.arange(p.shape[0]) + 0.5) * frame_ms

    candidates = []  # (time_ms, strength)
    for start, end in _candidate_runs(p, threshold):
        weights = p[start:end]
        t = float(np.sum(weights * centers[start:end]) / np.sum(weights))
        candidates.append((t, float(np.sum(weights))))

    # Refractory thinning: repeatedly drop the weaker of the closest offending
    # pair (the later one on a strength tie) until all gaps are legal.
    while True:
        gaps = [(candidates[i + 1][0] - candidates[i][0], i)
                for i in range(len(candidates) - 1)]
        offending = [(g, i) for g, i in gaps if g < refractory_ms]
        if not offending:
            break
        _, i = min(offending)
        a, b = candidates[i], candidates[i + 1]
        drop = i + 1 if b[1] <= a[1] else i
        candidates.pop(drop)

    return EventList([(t, "beat") for t, _ in candidates])


def hs_onsets(probs: np.ndarray, frame_ms: float) -> EventList:
    """State-onset events from (T, 4) frame probabilities."""
    if frame_ms <= 0:
        raise ValueError("frame_ms must be positive")
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != len(HS_STATES):
        raise ValueError(f"expected (T, {len(HS_STATES)}) probabilities")
    states = p.argmax(axis=1)  # argmax takes the first (lowest-index) maximum
    events = [(0.0, HS_STATES[states[0]])]
    for t in range(1, len(states)):
        if states[t] != states[t - 1]:
            events.append((t * frame_ms, HS_STATES[states[t]]))
    return EventList(events)


def frame_states_from_onsets(events: EventList, n_frames: int, frame_ms: float) -> np.ndarray:
    """Reconstruct the per-frame argmax state sequence from its onset events."""
    states = np.zeros(n_frames, dtype=np.int64)
    idx = {s: i for i, s in enumerate(HS_STATES)}
    for t_ms, label in events.events:
        start = int(round(t_ms / frame_ms))
        states[start:] = idx[label]
    return states
