"""Grace-period event matching and segmentation metrics.

A predicted event counts as a true positive when it can be paired one-to-one
with a reference event of the same label no farther than the grace period
away. Matching is greedy in time order, which attains the maximum number of
pairs for interval matching on a line. Counts pool across records before any
ratio is taken (micro-averaging).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import torch

from .postprocess import EventList, hs_onsets, qrs_decisions
from .records import (BEAT_LABEL, EPISODE_SECONDS, HS_STATES, SignalRecord,
                      TASK_QRS, slice_episodes)

GRACE_MS = {"qrs": 150.0, "heartsound": 100.0}


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    se: float | None       # 100·TP/(TP+FN)
    ppr: float | None      # 100·TP/(TP+FP)
    er: float | None       # 100·(FP+FN)/(TP+FP+FN)
    f1: float | None       # 2·se·ppr/(se+ppr)
    grace_ms: float
    scope: str = ""

    def row(self) -> list:
        fmt = lambda v: "" if v is None else f"{v:.2f}"
        return [self.scope, self.tp, self.fp, self.fn,
                fmt(self.se), fmt(self.ppr), fmt(self.er), fmt(self.f1),
                f"{self.grace_ms:g}"]


CSV_COLUMNS = ("scope", "tp", "fp", "fn", "se", "ppr", "er", "f1", "grace_ms")


def metrics_from_counts(tp: int, fp: int, fn: int, grace_ms: float,
                        scope: str = "") -> MetricsReport:
    """Ratios from pooled counts; zero-denominator quotients come back absent."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    se = 100.0 * tp / (tp + fn) if tp + fn > 0 else None
    ppr = 100.0 * tp / (tp + fp) if tp + fp > 0 else None
    er = 100.0 * (fp + fn) / (tp + fp + fn) if tp + fp + fn > 0 else None
    if se is not None and ppr is not None and se + ppr > 0:
        f1 = 2.0 * se * ppr / (se + ppr)
    else:
        f1 = None
    return MetricsReport(tp=tp, fp=fp, fn=fn, se=se, ppr=ppr, er=er, f1=f1,
                         grace_ms=grace_ms, scope=scope)


def _match_times(ref: list[float], pred: list[float], grace_ms: float) -> int:
    """Greedy two-pointer pairing of sorted time lists; returns matched count."""
    i = j = tp = 0
    while i < len(ref) and j < len(pred):
        dt = pred[j] - ref[i]
        if abs(dt) <= grace_ms:
            tp += 1
            i += 1
            j += 1
        elif dt < 0:
            j += 1
        else:
            i += 1
    return tp


def match_events(ref: EventList, pred: EventList, grace_ms: float) -> tuple[int, int, int]:
    """(TP, FP, FN) under one-to-one matching within the grace period, per label."""
    for ev in (ref, pred):
        times = ev.times()
        if times.size > 1 and not (times[1:] > times[:-1]).all():
            raise ValueError("event lists must be sorted by time")
    labels = sorted({l for _, l in ref.events} | {l for _, l in pred.events})
    tp = 0
    for label in labels:
        r = [t for t, l in ref.events if l == label]
        p = [t for t, l in pred.events if l == label]
        tp += _match_times(r, p, grace_ms)
    return tp, len(pred) - tp, len(ref) - tp


def record_events(record: SignalRecord) -> EventList:
    """Reference events from a record's annotations, in milliseconds."""
    ms = 1000.0 / record.fs_hz
    return EventList([(a.sample_index * ms, a.label) for a in record.annotations])


@dataclass
class EvalConfig:
    episode_seconds: float | None = None   # task default when None
    grace_ms: float | None = None          # task default when None
    threshold: float = 0.5
    refractory_ms: float = 200.0
    batch_size: int = 32


def predict_record_events(bundle, record: SignalRecord,
                          cfg: EvalConfig | None = None) -> tuple[EventList, float]:
    """Run encode → decode → event extraction over a preprocessed record.

    Returns the merged event list and the evaluated span in ms (full episodes
    only; a trailing remainder is not scored).
    """
    cfg = cfg or EvalConfig()
    episodes = slice_episodes(record, cfg.episode_seconds)
    if not episodes:
        return EventList([]), 0.0
    frame_ms = bundle.frame_ms
    events: list[tuple[float, str]] = []
    x = torch.from_numpy(np.stack([e.signal for e in episodes]).astype(np.float32))
    with torch.no_grad():
        probs_all = []
        for lo in range(0, x.shape[0], cfg.batch_size):
            probs_all.append(bundle.decoder(bundle.encoder(x[lo:lo + cfg.batch_size])))
        probs = torch.cat(probs_all).numpy()
    for ep, p in zip(episodes, probs):
        offset_ms = ep.offset_samples * 1000.0 / record.fs_hz
        if record.task == TASK_QRS:
            local = qrs_decisions(p, frame_ms, cfg.threshold, cfg.refractory_ms)
        else:
            local = hs_onsets(p, frame_ms)
        events.extend((offset_ms + t, label) for t, label in local.events)
    span_ms = episodes[-1].offset_samples * 1000.0 / record.fs_hz \
        + len(episodes[0].signal) * 1000.0 / record.fs_hz
    return EventList(events), span_ms


def evaluate_records(bundle, records: list[SignalRecord],
                     cfg: EvalConfig | None = None,
                     preprocess: bool = True
                     ) -> tuple[MetricsReport, list[MetricsReport]]:
    """Micro-averaged metrics over records, plus one per-record report.

    ``preprocess=True`` sends each record through its task pipeline first;
    pass False for records already at the target rate and scale.
    """
    if not records:
        raise ValueError("no records to evaluate")
    cfg = cfg or EvalConfig()
    task = bundle.task
    for r in records:
        if r.task != task:
            raise ValueError(f"record {r.id!r} has task {r.task!r}, model expects {task!r}")
    grace = cfg.grace_ms if cfg.grace_ms is not None else GRACE_MS[task]

    if preprocess:
        from .pipeline import preprocess_record
        records = [preprocess_record(r) for r in records]

    per_record = []
    tot_tp = tot_fp = tot_fn = 0
    for rec in records:
        pred, span_ms = predict_record_events(bundle, rec, cfg)
        ref_all = record_events(rec)
        ref = EventList([(t, l) for t, l in ref_all.events if t < span_ms])
        tp, fp, fn = match_events(ref, pred, grace)
        per_record.append(metrics_from_counts(tp, fp, fn, grace, scope=rec.id))
        tot_tp += tp
        tot_fp += fp
        tot_fn += fn
    aggregate = metrics_from_counts(tot_tp, tot_fp, tot_fn, grace, scope="all")
    return aggregate, per_record


def reports_to_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def reports_to_text(reports: list[MetricsReport]) -> str:
    """Aligned text table."""
    header = ["scope", "tp", "fp", "fn", "se", "ppr", "er", "f1", "grace"]
    rows = [header] + [[str(c) for c in r.row()] for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"
