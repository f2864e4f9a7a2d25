"""Tiny synthetic two-class corpus: tones in a low band vs. a high band."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import rng as rngmod
from .audio import DspConfig, Waveform, fit_frames, mel_spectrogram, write_wav
from .data import SCHEMAS, Manifest, ManifestRow, SpectrogramSet, write_manifest

FIXTURE_DSP = DspConfig(sample_rate=16000, n_fft=256, hop=128, n_mels=16, fmin=0.0, fmax=8000.0)
FIXTURE_FRAMES = 32
BANDS = ((300.0, 700.0), (2000.0, 3000.0))
SCHEMA = SCHEMAS["synthetic"]


def tone(label: int, gen: np.random.Generator, dsp: DspConfig = FIXTURE_DSP, n_frames: int = FIXTURE_FRAMES) -> np.ndarray:
    n = dsp.n_fft + (n_frames - 1) * dsp.hop
    t = np.arange(n) / dsp.sample_rate
    lo, hi = BANDS[label]
    f = gen.uniform(lo, hi)
    x = 0.5 * np.sin(2 * np.pi * f * t + gen.uniform(0, 2 * np.pi))
    x += 0.01 * gen.standard_normal(n)
    return np.clip(x, -1.0, 1.0)


def waveforms(n_per_class: int, seed: int = 0, offset: int = 0) -> list[tuple[np.ndarray, int]]:
    out = []
    for i in range(2 * n_per_class):
        gen = rngmod.make_rng(seed, offset + i)
        label = i % 2
        out.append((tone(label, gen), label))
    return out


def spectrogram_set(n_per_class: int = 8, seed: int = 0, offset: int = 0) -> SpectrogramSet:
    vals, labels, ids = [], [], []
    for i, (x, label) in enumerate(waveforms(n_per_class, seed, offset)):
        mel = mel_spectrogram(Waveform(x, FIXTURE_DSP.sample_rate), FIXTURE_DSP)
        vals.append(fit_frames(mel.values, FIXTURE_FRAMES))
        labels.append(label)
        ids.append(f"syn{offset + i:03d}")
    return SpectrogramSet(np.stack(vals), labels, ids)


def write_corpus(root, n_train_per_class: int = 8, n_eval_per_class: int = 2, seed: int = 0) -> Path:
    """Write WAVs plus ``manifest.tsv`` (train/val/test) under ``root``; returns the manifest path."""
    root = Path(root)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    rows = []
    offset = 0
    for split, n in (("train", n_train_per_class), ("val", n_eval_per_class), ("test", n_eval_per_class)):
        for i, (x, label) in enumerate(waveforms(n, seed, offset)):
            rel = f"wav/{split}_{i:03d}.wav"
            write_wav(root / rel, x, FIXTURE_DSP.sample_rate)
            rows.append(ManifestRow(rel, label, split, f"syn{offset + i:03d}"))
        offset += 2 * n
    path = root / "manifest.tsv"
    write_manifest(Manifest(SCHEMA, rows), path)
    return path


def fixture_config(manifest: str, epochs: int = 200, seed: int = 0) -> dict:
    """Engine config (as a JSON-able dict) for the tone corpus on the reference desk model."""
    return {
        "dsp": FIXTURE_DSP.to_dict(),
        "augment": {"F": 3, "T": 3, "n_freq_masks": 1, "n_time_masks": 1, "max_shift": 2},
        "model": {"stem_channels": 16, "n_stages": 3, "branch_channels": [16, 32, 64], "blocks_per_branch": 1, "fuse_channels": 64},
        "train": {"epochs": epochs, "batch_size": 64, "seed": seed},
        "data": {"manifest": manifest, "schema": "synthetic", "n_frames_target": FIXTURE_FRAMES},
    }
