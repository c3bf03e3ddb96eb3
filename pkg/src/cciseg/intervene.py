"""Frame-level do-operations on episode signals.

Two surgical edits are defined over a window of latent frames:

* ``zero_rhythm``   — erase the window (set samples to zero), removing its
  local waveform while leaving the surrounding recurrence pattern intact.
* ``invert_morph``  — flip the sign of the window, altering how the local
  waveform relates to its context without introducing extraneous content.

With mask m (0 on the target window, 1 elsewhere), these equal x⊗m and
x⊗m − x⊗(1−m) respectively; both act on whole samples of the frame grid and
leave everything outside the window bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KIND_ZERO_RHYTHM = "zero_rhythm"
KIND_INVERT_MORPH = "invert_morph"
KINDS = (KIND_ZERO_RHYTHM, KIND_INVERT_MORPH)


@dataclass(frozen=True)
class InterventionSpec:
    kind: str
    target_frame: int
    frames_covered: int = 1
    frame_len_samples: int = 4

    def validate(self, n_frames: int) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown intervention kind {self.kind!r}")
        if self.frames_covered < 1:
            raise ValueError("frames_covered must be ≥ 1")
        if not (0 <= self.target_frame and self.target_frame + self.frames_covered <= n_frames):
            raise ValueError(
                f"target window [{self.target_frame}, "
                f"{self.target_frame + self.frames_covered}) outside [0, {n_frames})"
            )


def build_mask(n_frames: int, target_frame: int, frames_covered: int = 1) -> np.ndarray:
    """Binary frame mask: 0 on [target, target+covered), 1 elsewhere."""
    if frames_covered < 1:
        raise ValueError("frames_covered must be ≥ 1")
    if not (0 <= target_frame and target_frame + frames_covered <= n_frames):
        raise ValueError(
            f"target window [{target_frame}, {target_frame + frames_covered}) "
            f"outside [0, {n_frames})"
        )
    mask = np.ones(n_frames, dtype=np.float32)
    mask[target_frame: target_frame + frames_covered] = 0.0
    return mask


def apply_do(x: np.ndarray, spec: InterventionSpec) -> np.ndarray:
    """Return a copy of ``x`` with the intervention applied to the target window."""
    x = np.asarray(x)
    if x.shape[-1] % spec.frame_len_samples != 0:
        raise ValueError("signal length is not a multiple of frame_len_samples")
    n_frames = x.shape[-1] // spec.frame_len_samples
    spec.validate(n_frames)
    lo = spec.target_frame * spec.frame_len_samples
    hi = (spec.target_frame + spec.frames_covered) * spec.frame_len_samples
    y = x.copy()
    if spec.kind == KIND_ZERO_RHYTHM:
        y[..., lo:hi] = 0
    else:
        y[..., lo:hi] = -y[..., lo:hi]
    return y
