"""Encoder / decoder / q-network definitions and parameter containers.

The encoder is a three-branch 1-D CNN: the branches share kernel sizes and
channel counts but use increasingly large dilation rates, so they cover short-,
mid-, and long-range context in parallel. Each stage ends with instance
normalization and a stride-2 max pool; convolutions use same-padding, so only
the pools shrink time. After the final stage the branch features are
concatenated and fused by a 1×1 convolution into d channels, giving one
d-vector per latent frame (input length / 4 frames for the beat task, / 16 for
the heart-sound task).

The decoder is a per-frame two-layer dense head (sigmoid for the binary beat
task, softmax over the four heart-sound states). The q-network maps one latent
frame to the mean and (positive, clamped) diagonal variance of a Gaussian over
companion latent frames.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .records import FRAME_LEN, NUM_CLASSES, TARGET_FS, TASKS, TASK_QRS

LATENT_DIM = 192
FRAME_MS = {task: 1000.0 * FRAME_LEN[task] / TARGET_FS[task] for task in TASKS}

# Per task: stages of (kernel, channels, (dilation branch I, II, III)) conv layers.
# Instance norm + MaxPool1d(2) close every stage; downsample factor = 2^len(stages).
_ARCH = {
    "qrs": [
        [(11, 16, (1, 2, 4)), (7, 32, (1, 2, 4)), (7, 32, (1, 4, 8))],
        [(5, 64, (1, 8, 16)), (5, 64, (1, 8, 32)), (5, 64, (1, 8, 64))],
    ],
    "heartsound": [
        [(11, 8, (1, 2, 4))] * 3,
        [(7, 16, (1, 4, 8))] * 3,
        [(5, 32, (1, 8, 16))] * 3,
        [(3, 64, (1, 16, 32))] * 3,
    ],
}


@dataclass(frozen=True)
class LatentSequence:
    """Encoder output for one episode: values[t] is the d-vector of frame t."""

    values: np.ndarray  # (T, d)
    frame_ms: float


def _scaled(ch: int, width_mult: float) -> int:
    return max(1, int(round(ch * width_mult)))


class _Branch(nn.Module):
    def __init__(self, branch_idx: int, stages, width_mult: float):
        super().__init__()
        blocks = []
        in_ch = 1
        for stage in stages:
            layers = []
            for kernel, ch, dils in stage:
                out_ch = _scaled(ch, width_mult)
                dil = dils[branch_idx]
                layers.append(nn.Conv1d(in_ch, out_ch, kernel,
                                        padding=dil * (kernel - 1) // 2, dilation=dil))
                layers.append(nn.ReLU())
                in_ch = out_ch
            layers.append(nn.InstanceNorm1d(in_ch))
            layers.append(nn.MaxPool1d(2))
            blocks.append(nn.Sequential(*layers))
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = in_ch

    def forward(self, x):
        return self.blocks(x)


class MBCNNEncoder(nn.Module):
    """Multi-branch dilated 1-D CNN producing a (T, d) latent sequence."""

    def __init__(self, task: str, d: int = LATENT_DIM, width_mult: float = 1.0):
        super().__init__()
        if task not in _ARCH:
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.d = d
        self.width_mult = width_mult
        stages = _ARCH[task]
        self.downsample = 2 ** len(stages)
        self.branches = nn.ModuleList(_Branch(b, stages, width_mult) for b in range(3))
        fused_in = sum(br.out_channels for br in self.branches)
        self.fuse = nn.Conv1d(fused_in, d, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L) or (B, 1, L) → (B, L / downsample, d)."""
        if x.dim() == 2:
            x = x.unsqueeze(1)
        if x.dim() != 3 or x.shape[1] != 1:
            raise ValueError("expected input of shape (batch, length) or (batch, 1, length)")
        if x.shape[-1] % self.downsample != 0:
            raise ValueError(
                f"input length {x.shape[-1]} is not a multiple of the "
                f"downsample factor {self.downsample}"
            )
        feats = torch.cat([br(x) for br in self.branches], dim=1)
        return self.fuse(feats).transpose(1, 2)


class FrameDecoder(nn.Module):
    """Per-frame two-layer dense head emitting class probabilities."""

    def __init__(self, task: str, d: int = LATENT_DIM):
        super().__init__()
        self.task = task
        self.n_classes = NUM_CLASSES[task]
        self.hidden = nn.Linear(d, d)
        self.out = nn.Linear(d, self.n_classes)

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        return self.out(torch.relu(self.hidden(z)))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """(..., T, d) → (..., T, C) probabilities."""
        raw = self.logits(z)
        if self.task == TASK_QRS:
            return torch.sigmoid(raw)
        return torch.softmax(raw, dim=-1)


class QNet(nn.Module):
    """Gaussian conditional head: latent frame → (μ, σ²) with σ² in [e⁻⁷, e⁷]."""

    LOGVAR_CLAMP = 7.0

    def __init__(self, d: int = LATENT_DIM, hidden: int | None = None):
        super().__init__()
        h = d if hidden is None else hidden
        self.d = d
        self.hidden_width = h
        self.body = nn.Sequential(nn.Linear(d, h), nn.ReLU(), nn.Linear(h, h), nn.ReLU())
        self.mu_head = nn.Linear(h, d)
        self.logvar_head = nn.Linear(h, d)

    def forward(self, z_do: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if z_do.shape[-1] != self.d:
            raise ValueError(f"expected last dimension {self.d}, got {z_do.shape[-1]}")
        hid = self.body(z_do)
        mu = self.mu_head(hid)
        logvar = torch.clamp(self.logvar_head(hid), -self.LOGVAR_CLAMP, self.LOGVAR_CLAMP)
        return mu, torch.exp(logvar)


@dataclass
class ModelBundle:
    """Encoder + decoder + q-network with the metadata needed to rebuild them."""

    task: str
    d: int
    seed: int
    width_mult: float
    qnet_hidden: int | None
    encoder: MBCNNEncoder
    decoder: FrameDecoder
    qnet: QNet

    @property
    def frame_ms(self) -> float:
        return FRAME_MS[self.task]

    @property
    def frame_len(self) -> int:
        return FRAME_LEN[self.task]

    def seg_parameters(self):
        yield from self.encoder.parameters()
        yield from self.decoder.parameters()

    def param_hash(self) -> str:
        """Digest over all parameter bytes; cheap tamper/mutation check."""
        h = hashlib.sha256()
        for module in (self.encoder, self.decoder, self.qnet):
            for name, t in sorted(module.state_dict().items()):
                h.update(name.encode())
                h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def init_params(task: str, seed: int, d: int = LATENT_DIM, width_mult: float = 1.0,
                qnet_hidden: int | None = None) -> ModelBundle:
    """Fresh fan-in-scaled parameters, deterministic per seed.

    The q-network variance head starts zeroed so σ² = 1 exactly at init.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    torch.manual_seed(seed)
    encoder = MBCNNEncoder(task, d=d, width_mult=width_mult)
    decoder = FrameDecoder(task, d=d)
    qnet = QNet(d, hidden=qnet_hidden)
    with torch.no_grad():
        qnet.logvar_head.weight.zero_()
        qnet.logvar_head.bias.zero_()
    return ModelBundle(task=task, d=d, seed=seed, width_mult=width_mult,
                       qnet_hidden=qnet_hidden, encoder=encoder, decoder=decoder,
                       qnet=qnet)


def mbcnn_encode(bundle: ModelBundle, x) -> LatentSequence:
    """Encode one episode signal into its latent frame sequence."""
    with torch.no_grad():
        t = torch.as_tensor(np.asarray(x, dtype=np.float32)).reshape(1, -1)
        z = bundle.encoder(t)[0]
    return LatentSequence(values=z.numpy(), frame_ms=bundle.frame_ms)


def decode(bundle: ModelBundle, z: LatentSequence | np.ndarray) -> np.ndarray:
    """Latent sequence → per-frame class probabilities, shape (T, C)."""
    values = z.values if isinstance(z, LatentSequence) else np.asarray(z, dtype=np.float32)
    if values.shape[-1] != bundle.d:
        raise ValueError(f"expected {bundle.d}-dimensional frames, got {values.shape[-1]}")
    with torch.no_grad():
        probs = bundle.decoder(torch.as_tensor(values, dtype=torch.float32))
    return probs.numpy()


def qnet_forward(bundle_or_qnet, z_do) -> tuple[np.ndarray, np.ndarray]:
    """Latent frame(s) → (μ, σ²) of the conditional Gaussian."""
    qnet = bundle_or_qnet.qnet if isinstance(bundle_or_qnet, ModelBundle) else bundle_or_qnet
    with torch.no_grad():
        mu, var = qnet(torch.as_tensor(np.asarray(z_do, dtype=np.float32)))
    return mu.numpy(), var.numpy()


# ---------------------------------------------------------------------------
# Checkpoints: one .npz archive of little-endian float32 tensors + JSON manifest
# ---------------------------------------------------------------------------

_MODULE_PREFIXES = ("encoder", "decoder", "qnet")


def save_checkpoint(bundle: ModelBundle, path) -> None:
    config = {
        "task": bundle.task,
        "d": bundle.d,
        "seed": bundle.seed,
        "width_mult": bundle.width_mult,
        "qnet_hidden": bundle.qnet_hidden,
    }
    manifest = dict(config)
    manifest["config_hash"] = hashlib.sha256(
        json.dumps(config, sort_keys=True).encode()
    ).hexdigest()[:16]
    arrays = {}
    for prefix in _MODULE_PREFIXES:
        module = getattr(bundle, prefix)
        for name, tensor in module.state_dict().items():
            arrays[f"{prefix}.{name}"] = tensor.detach().cpu().numpy().astype("<f4")
    np.savez(path, manifest=np.str_(json.dumps(manifest, sort_keys=True)), **arrays)


def load_checkpoint(path) -> ModelBundle:
    with np.load(path, allow_pickle=False) as z:
        manifest = json.loads(str(z["manifest"]))
        arrays = {k: np.asarray(z[k]) for k in z.files if k != "manifest"}
    bundle = init_params(
        task=manifest["task"], seed=manifest["seed"], d=manifest["d"],
        width_mult=manifest["width_mult"], qnet_hidden=manifest["qnet_hidden"],
    )
    for prefix in _MODULE_PREFIXES:
        module = getattr(bundle, prefix)
        state = {
            name[len(prefix) + 1:]: torch.from_numpy(arr.astype(np.float32))
            for name, arr in arrays.items() if name.startswith(prefix + ".")
        }
        module.load_state_dict(state)
    return bundle
