"""Random time shift plus SpecAugment frequency/time masking.

Every function takes either a :class:`MelSpectrogram` or a bare
``(n_mels, n_frames)`` array and returns the same kind, never mutating its
input. Draw order is fixed: width first, then start offset.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .audio import MelSpectrogram


@dataclass(frozen=True)
class AugmentPolicy:
    F: int = 12
    T: int = 30
    n_freq_masks: int = 1
    n_time_masks: int = 1
    max_shift: int = 10
    mask_value: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        for name in ("F", "T", "n_freq_masks", "n_time_masks", "max_shift"):
            if getattr(self, name) < 0:
                raise ValueError(f"augment.{name} must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _unwrap(mel):
    if isinstance(mel, MelSpectrogram):
        return mel.values, lambda v: dataclasses.replace(mel, values=v)
    return np.asarray(mel, dtype=np.float64), lambda v: v


def shift_frames(values: np.ndarray, s: int) -> np.ndarray:
    out = np.zeros_like(values)
    n = values.shape[1]
    if s >= 0:
        out[:, s:] = values[:, : n - s]
    else:
        out[:, : n + s] = values[:, -s:]
    return out


def time_shift(mel, max_shift: int, rng: np.random.Generator):
    values, wrap = _unwrap(mel)
    if max_shift == 0:
        return wrap(values.copy())
    if max_shift >= values.shape[1]:
        raise ValueError(f"max_shift {max_shift} must be smaller than the frame count {values.shape[1]}")
    s = int(rng.integers(-max_shift, max_shift + 1))
    return wrap(shift_frames(values, s))


def draw_mask(limit: int, size: int, rng: np.random.Generator) -> tuple[int, int]:
    """(width, start) with width ~ U{0..limit} and start ~ U{0..size-width}."""
    width = int(rng.integers(0, limit + 1))
    start = int(rng.integers(0, size - width + 1))
    return width, start


def freq_mask(mel, F: int, rng: np.random.Generator, mask_value: float = 0.0):
    values, wrap = _unwrap(mel)
    if F > values.shape[0]:
        raise ValueError(f"F={F} exceeds the {values.shape[0]} mel bins")
    out = values.copy()
    if F == 0:
        return wrap(out)
    f, f0 = draw_mask(F, values.shape[0], rng)
    out[f0 : f0 + f, :] = mask_value
    return wrap(out)


def time_mask(mel, T: int, rng: np.random.Generator, mask_value: float = 0.0):
    values, wrap = _unwrap(mel)
    if T > values.shape[1]:
        raise ValueError(f"T={T} exceeds the {values.shape[1]} frames")
    out = values.copy()
    if T == 0:
        return wrap(out)
    t, t0 = draw_mask(T, values.shape[1], rng)
    out[:, t0 : t0 + t] = mask_value
    return wrap(out)


def augment(mel, policy: AugmentPolicy, rng: np.random.Generator):
    if not policy.enabled:
        return mel
    out = time_shift(mel, policy.max_shift, rng)
    for _ in range(policy.n_freq_masks):
        out = freq_mask(out, policy.F, rng, policy.mask_value)
    for _ in range(policy.n_time_masks):
        out = time_mask(out, policy.T, rng, policy.mask_value)
    return out
