"""Label schemas, corpus manifests, deterministic splits and batching."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import rng as rngmod
from .audio import DspConfig, fit_frames, load_wav, mel_spectrogram

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class LabelSchema:
    name: str
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"duplicate labels in schema {self.name}")

    def __len__(self):
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)


SCHEMAS = {
    "ravdess": LabelSchema(
        "ravdess", ("neutral", "calm", "happy", "sad", "angry", "fearful", "disgust", "surprised")
    ),
    # calm folded into neutral, for comparison with 7-class results
    "ravdess7": LabelSchema("ravdess7", ("neutral", "happy", "sad", "angry", "fearful", "disgust", "surprised")),
    "iemocap": LabelSchema("iemocap", ("happiness", "anger", "sadness", "frustration", "neutral")),
    "emovo": LabelSchema("emovo", ("disgust", "fear", "anger", "joy", "surprise", "sadness", "neutral")),
    # two-band tone fixture used by the test-suite and demos
    "synthetic": LabelSchema("synthetic", ("low", "high")),
}

EMOVO_CODES = {
    "dis": "disgust",
    "pau": "fear",
    "rab": "anger",
    "gio": "joy",
    "sor": "surprise",
    "tri": "sadness",
    "neu": "neutral",
}


def get_schema(name: str) -> LabelSchema:
    try:
        return SCHEMAS[name]
    except KeyError:
        raise ValueError(f"unknown schema {name!r}; choose from {sorted(SCHEMAS)}") from None


class FilenameError(ValueError):
    pass


@dataclass(frozen=True)
class RavdessCode:
    modality: int
    vocal_channel: int
    emotion: int
    intensity: int
    statement: int
    repetition: int
    actor: int
    class_id: int


def parse_ravdess_filename(name: str, merge_calm: bool = False) -> RavdessCode:
    """Parse ``MM-VV-EE-II-SS-RR-AA.wav`` (modality, channel, emotion, intensity,
    statement, repetition, actor)."""
    stem = os.path.basename(name)
    stem = stem.rsplit(".", 1)[0] if "." in stem else stem
    fields = stem.split("-")
    if len(fields) != 7 or not all(f.isdigit() and len(f) == 2 for f in fields):
        raise FilenameError(f"malformed RAVDESS name: {name!r}")
    vals = [int(f) for f in fields]
    emotion = vals[2]
    if not 1 <= emotion <= 8:
        raise FilenameError(f"emotion code {fields[2]} out of range in {name!r}")
    cid = emotion - 1
    if merge_calm:
        cid = 0 if emotion <= 2 else emotion - 2
    return RavdessCode(*vals, class_id=cid)


def parse_emovo_filename(name: str) -> tuple[int, str]:
    """``dis-f1-b1.wav`` -> (class id, speaker)."""
    stem = os.path.basename(name).rsplit(".", 1)[0]
    parts = stem.split("-")
    if len(parts) < 2 or parts[0].lower() not in EMOVO_CODES:
        raise FilenameError(f"unknown EMOVO emotion prefix in {name!r}")
    return SCHEMAS["emovo"].index(EMOVO_CODES[parts[0].lower()]), parts[1]


@dataclass(frozen=True)
class ManifestRow:
    path: str
    class_id: int
    split: str
    source_id: str


@dataclass
class Manifest:
    schema: LabelSchema
    rows: list[ManifestRow] = field(default_factory=list)
    skipped: int = 0

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            if not 0 <= r.class_id < len(self.schema):
                raise ValueError(f"class id {r.class_id} out of range for schema {self.schema.name}: {r.path}")
            if r.split not in SPLITS:
                raise ValueError(f"bad split tag {r.split!r} for {r.path}")
            if r.path in seen:
                raise ValueError(f"duplicate path in manifest: {r.path}")
            seen.add(r.path)

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def check_ready(self) -> None:
        """Every split non-empty; warn on classes without training samples."""
        for s in SPLITS:
            if not self.split(s):
                raise ValueError(f"split {s!r} is empty")
        present = {r.class_id for r in self.split("train")}
        missing = [self.schema.labels[c] for c in range(len(self.schema)) if c not in present]
        if missing:
            log.warning("classes with no training samples: %s", ", ".join(missing))


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the later split."""
    fr = [Fraction(str(r)) for r in ratios]
    total = sum(fr)
    quotas = [n * r / total for r in fr]
    counts = [int(q) for q in quotas]
    order = sorted(range(len(fr)), key=lambda i: (quotas[i] - counts[i], i), reverse=True)
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _label_file(path: Path, schema: LabelSchema, merge_calm: bool) -> tuple[int, str]:
    if schema.name in ("ravdess", "ravdess7"):
        code = parse_ravdess_filename(path.name, merge_calm=merge_calm or schema.name == "ravdess7")
        return code.class_id, f"actor{code.actor:02d}"
    if schema.name == "emovo":
        return parse_emovo_filename(path.name)
    raise ValueError(f"schema {schema.name!r} cannot be labelled from filenames; supply a manifest")


def build_manifest(
    root,
    schema: LabelSchema | str,
    ratios: Sequence[float] = (0.7, 0.15, 0.15),
    seed: int = 0,
    speaker_disjoint: bool = True,
    merge_calm: bool = False,
) -> Manifest:
    """Scan ``root`` for WAVs, label them from filenames and assign splits.

    Speaker-disjoint assignment apportions whole speakers when there are at
    least as many speakers as splits; otherwise it falls back to per-file.
    """
    if isinstance(schema, str):
        schema = get_schema(schema)
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() == ".wav")
    if not files:
        raise ValueError(f"no WAV files under {root}")

    labelled, skipped = [], 0
    for p in files:
        try:
            cid, speaker = _label_file(p, schema, merge_calm)
        except FilenameError as e:
            skipped += 1
            log.warning("skipping %s", e)
            continue
        labelled.append((str(p.relative_to(root)), cid, speaker))
    if skipped:
        log.warning("%d files skipped with unparseable names", skipped)
    if not labelled:
        raise ValueError(f"no labelled WAV files under {root}")

    counts_present = {c for _, c, _ in labelled}
    for c in range(len(schema)):
        if c not in counts_present:
            log.warning("class %r has zero samples", schema.labels[c])

    gen = rngmod.make_rng(seed, rngmod.stream_id(rngmod.SPLIT))
    speakers = sorted({s for _, _, s in labelled})
    if speaker_disjoint and len(speakers) >= len(SPLITS):
        perm = [speakers[i] for i in gen.permutation(len(speakers))]
        counts = split_counts(len(perm), ratios)
        for i in range(len(counts)):
            if counts[i] == 0:
                donor = max(range(len(counts)), key=lambda k: counts[k])
                counts[donor] -= 1
                counts[i] += 1
        tag_of, pos = {}, 0
        for split, c in zip(SPLITS, counts):
            for spk in perm[pos : pos + c]:
                tag_of[spk] = split
            pos += c
        tags = [tag_of[s] for _, _, s in labelled]
    else:
        if speaker_disjoint:
            log.warning("only %d speakers; splitting per file", len(speakers))
        perm = gen.permutation(len(labelled))
        counts = split_counts(len(labelled), ratios)
        bounds = np.cumsum(counts)
        tags = [""] * len(labelled)
        for rank, idx in enumerate(perm):
            tags[idx] = SPLITS[int(np.searchsorted(bounds, rank, side="right"))]

    rows = [ManifestRow(path, cid, tag, spk) for (path, cid, spk), tag in zip(labelled, tags)]
    return Manifest(schema, rows, skipped)


def write_manifest(manifest: Manifest, path) -> None:
    lines = [f"# schema={manifest.schema.name}", "# path\tclass_id\tsplit\tsource_id"]
    for r in manifest.rows:
        lines.append(f"{r.path}\t{r.class_id}\t{r.split}\t{r.source_id}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path, schema: LabelSchema | str | None = None) -> Manifest:
    rows, declared = [], None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("schema="):
                declared = body.split("=", 1)[1].strip()
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(parts)}")
        rows.append(ManifestRow(parts[0], int(parts[1]), parts[2], parts[3]))
    if schema is None:
        if declared is None:
            raise ValueError(f"{path}: no schema given and none declared in the file")
        schema = declared
    if isinstance(schema, str):
        schema = get_schema(schema)
    return Manifest(schema, rows)


def resolve_path(row: ManifestRow, base) -> Path:
    p = Path(row.path)
    return p if p.is_absolute() else Path(base) / p


def one_hot(labels: Sequence[int], n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels out of range for {n_classes} classes")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass
class SpectrogramSet:
    """Fixed-size spectrograms held in memory: values (N, n_mels, n_frames)."""

    values: np.ndarray
    labels: np.ndarray
    ids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.values) == len(self.labels) == len(self.ids)):
            raise ValueError("values, labels and ids must have equal length")

    def __len__(self):
        return len(self.labels)


def load_sample(row: ManifestRow, base, dsp: DspConfig, n_frames_target: int) -> np.ndarray:
    path = resolve_path(row, base)
    try:
        wave = load_wav(path)
    except (OSError, ValueError) as e:
        raise type(e)(f"cannot read {path}: {e}") from e
    return fit_frames(mel_spectrogram(wave, dsp, row.source_id).values, n_frames_target)


def load_split(rows: Sequence[ManifestRow], base, dsp: DspConfig, n_frames_target: int) -> SpectrogramSet:
    if not rows:
        raise ValueError("cannot load an empty split")
    vals = np.stack([load_sample(r, base, dsp, n_frames_target) for r in rows])
    return SpectrogramSet(vals, [r.class_id for r in rows], [r.path for r in rows])


@dataclass
class Batch:
    inputs: np.ndarray  # N x 1 x n_mels x n_frames
    labels: np.ndarray  # N x K one-hot
    ids: list[str]
    indices: np.ndarray  # positions in the source set


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return rngmod.make_rng(seed, rngmod.stream_id(rngmod.SHUFFLE, epoch)).permutation(n)


def batch_iter(
    data: SpectrogramSet,
    batch_size: int,
    n_classes: int,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Batches of an in-memory set; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(data), seed, epoch, shuffle)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield Batch(
            data.values[idx][:, None, :, :],
            one_hot(data.labels[idx], n_classes),
            [data.ids[i] for i in idx],
            idx,
        )


def manifest_batches(
    rows: Sequence[ManifestRow],
    base,
    dsp: DspConfig,
    n_frames_target: int,
    batch_size: int,
    n_classes: int,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Like :func:`batch_iter` but decodes audio lazily, batch by batch."""
    order = epoch_order(len(rows), seed, epoch, shuffle)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        chosen = [rows[i] for i in idx]
        vals = np.stack([load_sample(r, base, dsp, n_frames_target) for r in chosen])
        yield Batch(vals[:, None], one_hot([r.class_id for r in chosen], n_classes), [r.path for r in chosen], idx)
