"""Training drivers: plain segmentation, intervention-augmented segmentation,
and the contrastive-intervention mode with the variational MI penalty.

One training step in ``cci`` mode:

1. encode the batch, decode, and take the segmentation loss;
2. for each sampled window start (and each configured intervention kind),
   build the intervened batch and encode it; latent frames inside the window
   become MI-penalty pairs, frames outside become cosine-alignment pairs;
3. update the q-network by ascending the conditional log-likelihood on the
   (detached) covered pairs;
4. descend the composite loss: [flag]·l_seg + λ₁·mi_estimate − λ₂·alignment
   for the encoder, l_seg for the decoder; Adam everywhere.

Early stopping watches frame accuracy on the validation fold and halts when it
fails to improve for ``patience`` consecutive epochs; the best-epoch weights
are restored on exit.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import intervene, objective
from .network import LATENT_DIM, ModelBundle, init_params
from .records import Episode, TASKS, TASK_QRS

MODES = ("baseline", "cci", "augment")


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the last component values."""


@dataclass
class TrainConfig:
    task: str = TASK_QRS
    mode: str = "cci"
    alpha: float = 1e-3          # q-network learning rate
    beta: float = 1e-3           # encoder/decoder learning rate
    lambda1: float = objective.DEFAULT_LAMBDA1
    lambda2: float = objective.DEFAULT_LAMBDA2
    batch_n: int = 16
    frames_per_step: int | str = 1   # window starts sampled per episode; "exhaustive" sweeps all
    intervention_kinds: tuple[str, ...] = intervene.KINDS
    intervention_w: int = 20
    epochs_max: int = 100
    patience: int = 20
    folds: int = 5
    seed: int = 0
    encoder_gets_seg_grad: bool = True
    d: int = LATENT_DIM
    width_mult: float = 1.0
    qnet_hidden: int | None = None

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "cci" and self.batch_n < 2:
            raise ValueError("batch_n must be ≥ 2 in cci mode")
        if self.batch_n < 1:
            raise ValueError("batch_n must be ≥ 1")
        if self.patience < 1:
            raise ValueError("patience must be ≥ 1")
        if self.folds < 2:
            raise ValueError("folds must be ≥ 2")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.intervention_w < 1:
            raise ValueError("intervention_w must be ≥ 1")
        for kind in self.intervention_kinds:
            if kind not in intervene.KINDS:
                raise ValueError(f"unknown intervention kind {kind!r}")
        if self.frames_per_step != "exhaustive":
            if not isinstance(self.frames_per_step, int) or self.frames_per_step < 1:
                raise ValueError('frames_per_step must be a positive integer or "exhaustive"')
        if self.epochs_max < 0:
            raise ValueError("epochs_max must be ≥ 0")

    def to_json(self, path) -> None:
        data = asdict(self)
        data["intervention_kinds"] = list(self.intervention_kinds)
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if "intervention_kinds" in data:
            data["intervention_kinds"] = tuple(data["intervention_kinds"])
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class EpochStats:
    epoch: int
    l_seg: float
    i_vcci: float
    l_sim: float
    val_metric: float
    examples_seen: int = field(default=0, compare=False)


HISTORY_COLUMNS = ("epoch", "l_seg", "i_vcci", "l_sim", "val_metric")


def save_history(history: list[EpochStats], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_COLUMNS)
        for h in history:
            writer.writerow([h.epoch, repr(h.l_seg), repr(h.i_vcci),
                             repr(h.l_sim), repr(h.val_metric)])


def load_history(path) -> list[EpochStats]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            rows.append(EpochStats(
                epoch=int(row["epoch"]), l_seg=float(row["l_seg"]),
                i_vcci=float(row["i_vcci"]), l_sim=float(row["l_sim"]),
                val_metric=float(row["val_metric"]),
            ))
    return rows


# ---------------------------------------------------------------------------
# Cross-validation splitting
# ---------------------------------------------------------------------------

def kfold_split(episodes: list[Episode], folds: int = 5,
                seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Grouped k-fold: validation folds are disjoint, exhaustive, and no source
    record contributes to both sides of a split. Deterministic per seed.

    Groups are dealt to the currently-lightest fold (largest first), so fold
    sizes differ by at most one whenever group sizes allow it.
    """
    if len(episodes) < folds:
        raise ValueError(f"need at least {folds} episodes for {folds} folds")
    by_source: dict[str, list[int]] = {}
    for i, ep in enumerate(episodes):
        by_source.setdefault(ep.source_id, []).append(i)
    if len(by_source) < folds:
        raise ValueError(
            f"need at least {folds} distinct source records for {folds} grouped folds, "
            f"got {len(by_source)}"
        )
    rng = np.random.default_rng(seed)
    keys = sorted(by_source)
    rng.shuffle(keys)
    keys.sort(key=lambda k: -len(by_source[k]))  # stable: keeps shuffled order within a size
    fold_members: list[list[int]] = [[] for _ in range(folds)]
    for key in keys:
        lightest = min(range(folds), key=lambda f: (len(fold_members[f]), f))
        fold_members[lightest].extend(by_source[key])
    splits = []
    for f in range(folds):
        val = np.array(sorted(fold_members[f]), dtype=np.int64)
        train = np.array(sorted(set(range(len(episodes))) - set(fold_members[f])), dtype=np.int64)
        splits.append((train, val))
    return splits


# ---------------------------------------------------------------------------
# Training internals
# ---------------------------------------------------------------------------

def _episode_tensors(episodes: list[Episode]) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([e.signal for e in episodes]).astype(np.float32))
    y = torch.from_numpy(np.stack([e.frame_labels for e in episodes]))
    return x, y


def frame_accuracy(bundle: ModelBundle, x: torch.Tensor, y: torch.Tensor,
                   batch: int = 64) -> float:
    """Fraction of frames whose hard decision matches the label."""
    correct = 0
    total = 0
    with torch.no_grad():
        for lo in range(0, x.shape[0], batch):
            xb, yb = x[lo:lo + batch], y[lo:lo + batch]
            probs = bundle.decoder(bundle.encoder(xb))
            if probs.shape[-1] == 1:
                pred = (probs[..., 0] > 0.5).long()
            else:
                pred = probs.argmax(dim=-1)
            correct += int((pred == yb).sum())
            total += int(yb.numel())
    return correct / total


def _do_batch(xb: torch.Tensor, taus: np.ndarray, w: int, frame_len: int,
              kind: str) -> torch.Tensor:
    """Apply one intervention kind at per-episode window starts, vectorized."""
    lo = torch.as_tensor(taus * frame_len, dtype=torch.long)[:, None]
    hi = lo + w * frame_len
    pos = torch.arange(xb.shape[-1])[None, :]
    inside = (pos >= lo) & (pos < hi)
    if kind == intervene.KIND_ZERO_RHYTHM:
        return torch.where(inside, torch.zeros((), dtype=xb.dtype), xb)
    return torch.where(inside, -xb, xb)


def _covered_mask(taus: np.ndarray, w: int, n_frames: int) -> torch.Tensor:
    lo = torch.as_tensor(taus, dtype=torch.long)[:, None]
    pos = torch.arange(n_frames)[None, :]
    return (pos >= lo) & (pos < lo + w)


def _cci_step(bundle: ModelBundle, cfg: TrainConfig, xb: torch.Tensor,
              yb: torch.Tensor, frame_len: int, w: int,
              tau_rng: np.random.Generator, neg_rng: np.random.Generator,
              opt_q: torch.optim.Optimizer):
    z = bundle.encoder(xb)
    n_frames = z.shape[1]
    probs = bundle.decoder(z if cfg.encoder_gets_seg_grad else z.detach())
    l_seg = objective.seg_loss(probs, yb)

    if not cfg.intervention_kinds:
        zero = torch.zeros((), dtype=z.dtype)
        return l_seg, zero, zero

    if cfg.frames_per_step == "exhaustive":
        start_rows = [np.full(xb.shape[0], tau, dtype=np.int64)
                      for tau in range(n_frames - w + 1)]
    else:
        start_rows = [tau_rng.integers(0, n_frames - w + 1, size=xb.shape[0])
                      for _ in range(cfg.frames_per_step)]

    cov_pairs = []       # (z_frames, z_do_frames) per (start row, kind)
    sim_terms = []
    for taus in start_rows:
        covered = _covered_mask(taus, w, n_frames)
        for kind in cfg.intervention_kinds:
            z_do = bundle.encoder(_do_batch(xb, taus, w, frame_len, kind))
            cov_pairs.append((z[covered], z_do[covered]))
            sim_terms.append(objective.frame_cosine_mean(z[~covered], z_do[~covered]))

    # Fit the conditional before estimating the bound; gradients to the encoder
    # are cut here so this step trains the q-network alone.
    q_z = torch.cat([p[0] for p in cov_pairs]).detach()
    q_zdo = torch.cat([p[1] for p in cov_pairs]).detach()
    opt_q.zero_grad()
    nll = -objective.qnet_ll(bundle.qnet, q_z, q_zdo)
    nll.backward()
    opt_q.step()

    mi_terms = [objective.vcci(bundle.qnet, zc, zdoc, rng=neg_rng)
                for zc, zdoc in cov_pairs]
    i_vcci = torch.stack(mi_terms).mean()
    l_sim = torch.stack(sim_terms).mean()
    return l_seg, i_vcci, l_sim


def train_model(cfg: TrainConfig, train_eps: list[Episode],
                val_eps: list[Episode] | None = None
                ) -> tuple[ModelBundle, list[EpochStats]]:
    """Train one model per ``cfg.mode``; returns the bundle and epoch history."""
    cfg.validate()
    if not train_eps:
        raise ValueError("empty training set")
    frame_len = train_eps[0].frame_len_samples
    n_frames = train_eps[0].n_frames
    w = cfg.intervention_w
    if cfg.mode != "baseline" and cfg.intervention_kinds and w > n_frames:
        raise ValueError(f"intervention_w={w} exceeds the {n_frames}-frame episode")

    bundle = init_params(cfg.task, cfg.seed, d=cfg.d, width_mult=cfg.width_mult,
                         qnet_hidden=cfg.qnet_hidden)
    order_rng, tau_rng, neg_rng, aug_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(4)
    )
    x_all, y_all = _episode_tensors(train_eps)
    if val_eps:
        x_val, y_val = _episode_tensors(val_eps)

    opt_ed = torch.optim.Adam(bundle.seg_parameters(), lr=cfg.beta)
    opt_q = torch.optim.Adam(bundle.qnet.parameters(), lr=cfg.alpha)

    history: list[EpochStats] = []
    best_metric = -np.inf
    best_epoch = 0
    best_state = None

    for epoch in range(1, cfg.epochs_max + 1):
        if cfg.mode == "augment" and cfg.intervention_kinds:
            taus = tau_rng.integers(0, n_frames - w + 1, size=x_all.shape[0])
            kind_pick = aug_rng.integers(0, len(cfg.intervention_kinds), size=x_all.shape[0])
            variants = torch.empty_like(x_all)
            for ki, kind in enumerate(cfg.intervention_kinds):
                rows = np.nonzero(kind_pick == ki)[0]
                if rows.size:
                    variants[rows] = _do_batch(x_all[rows], taus[rows], w, frame_len, kind)
            x_epoch = torch.cat([x_all, variants])
            y_epoch = torch.cat([y_all, y_all])
        else:
            x_epoch, y_epoch = x_all, y_all

        perm = order_rng.permutation(x_epoch.shape[0])
        sums = {"l_seg": 0.0, "i_vcci": 0.0, "l_sim": 0.0}
        n_steps = 0
        for lo in range(0, len(perm), cfg.batch_n):
            idx = torch.as_tensor(perm[lo:lo + cfg.batch_n])
            xb, yb = x_epoch[idx], y_epoch[idx]
            if cfg.mode == "cci":
                l_seg, i_vcci, l_sim = _cci_step(
                    bundle, cfg, xb, yb, frame_len, w, tau_rng, neg_rng, opt_q)
                total = l_seg + cfg.lambda1 * i_vcci - cfg.lambda2 * l_sim
            else:
                z = bundle.encoder(xb)
                probs = bundle.decoder(z if cfg.encoder_gets_seg_grad else z.detach())
                l_seg = objective.seg_loss(probs, yb)
                i_vcci = l_sim = torch.zeros((), dtype=l_seg.dtype)
                total = l_seg
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}: l_seg={float(l_seg)}, "
                    f"i_vcci={float(i_vcci)}, l_sim={float(l_sim)}"
                )
            opt_ed.zero_grad()
            bundle.qnet.zero_grad(set_to_none=True)  # vcci leaks grads into q; discard
            total.backward()
            opt_ed.step()
            sums["l_seg"] += float(l_seg)
            sums["i_vcci"] += float(i_vcci)
            sums["l_sim"] += float(l_sim)
            n_steps += 1

        val_metric = frame_accuracy(bundle, x_val, y_val) if val_eps else float("nan")
        history.append(EpochStats(
            epoch=epoch,
            l_seg=sums["l_seg"] / n_steps,
            i_vcci=sums["i_vcci"] / n_steps,
            l_sim=sums["l_sim"] / n_steps,
            val_metric=val_metric,
            examples_seen=int(x_epoch.shape[0]),
        ))

        if val_eps:
            if val_metric > best_metric:
                best_metric = val_metric
                best_epoch = epoch
                best_state = {
                    name: copy.deepcopy(getattr(bundle, name).state_dict())
                    for name in ("encoder", "decoder", "qnet")
                }
            elif epoch - best_epoch >= cfg.patience:
                break

    if best_state is not None:
        for name in ("encoder", "decoder", "qnet"):
            getattr(bundle, name).load_state_dict(best_state[name])
    return bundle, history


def train_cci(cfg: TrainConfig, train_eps, val_eps=None):
    return train_model(replace(cfg, mode="cci"), train_eps, val_eps)


def train_baseline(cfg: TrainConfig, train_eps, val_eps=None):
    return train_model(replace(cfg, mode="baseline"), train_eps, val_eps)


def train_augment(cfg: TrainConfig, train_eps, val_eps=None):
    return train_model(replace(cfg, mode="augment"), train_eps, val_eps)


def train_kfold(cfg: TrainConfig, episodes: list[Episode]
                ) -> list[tuple[ModelBundle, list[EpochStats], tuple[np.ndarray, np.ndarray]]]:
    """Train one model per grouped fold; returns (bundle, history, split) triples."""
    results = []
    for train_idx, val_idx in kfold_split(episodes, cfg.folds, cfg.seed):
        bundle, history = train_model(
            cfg,
            [episodes[i] for i in train_idx],
            [episodes[i] for i in val_idx],
        )
        results.append((bundle, history, (train_idx, val_idx)))
    return results
