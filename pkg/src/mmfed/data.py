"""Aligned multimodal datasets: storage, label alignment, splitting and client sharding."""

from __future__ import annotations

import logging
import math
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, FormatError
from .model import DEFAULT_ARCH, FULL, MODALITIES, ArchSpec, ModalityMask

log = logging.getLogger(__name__)

NUM_CLASSES = 10

# ---------------------------------------------------------------------------
# MMTF tensor container

MMTF_MAGIC = b"MMTF"
MMTF_VERSION = 1
DTYPE_F64 = 1
DTYPE_F32 = 2


def write_tensor_file(path, tensors: Iterable[tuple[str, np.ndarray]] | dict) -> None:
    """Write named tensors as little-endian MMTF (float64 payloads)."""
    if isinstance(tensors, dict):
        tensors = tensors.items()
    tensors = [(name, np.asarray(arr)) for name, arr in tensors]
    chunks = [MMTF_MAGIC, struct.pack("<II", MMTF_VERSION, len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} has too many dimensions")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensor_file(path) -> list[tuple[str, np.ndarray]]:
    """Read every tensor from an MMTF file; raises before returning anything on damage."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptionError(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    if len(buf) < 4 or buf[:4] != MMTF_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {MMTF_MAGIC!r}")
    pos = 4
    version, count = struct.unpack("<II", take(8, "header"))
    if version != MMTF_VERSION:
        raise FormatError(f"{path}: unsupported MMTF version {version}")
    out = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptionError(f"tensor name is not valid UTF-8: {exc}", pos - name_len) from None
        dtype_code, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
        n = math.prod(dims)
        if dtype_code == DTYPE_F64:
            arr = np.frombuffer(take(8 * n, f"payload of {name!r}"), dtype="<f8")
        elif dtype_code == DTYPE_F32:
            arr = np.frombuffer(take(4 * n, f"payload of {name!r}"), dtype="<f4")
        else:
            raise FormatError(f"{path}: tensor {name!r} has unknown dtype code {dtype_code}")
        out.append((name, arr.astype(np.float64).reshape(dims)))
    if pos != len(buf):
        raise CorruptionError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    return out


# ---------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class AlignedSample:
    image: np.ndarray
    spectrogram: np.ndarray
    sign: np.ndarray
    label: int


@dataclass
class AlignedDataset:
    """Stacked modality arrays; row i of every array belongs to the same sample."""

    image: np.ndarray
    spectrogram: np.ndarray
    sign: np.ndarray
    labels: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        for m in MODALITIES:
            if len(getattr(self, m)) != n:
                raise DataError(f"{m} has {len(getattr(self, m))} rows but there are {n} labels")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i: int) -> AlignedSample:
        return AlignedSample(self.image[i], self.spectrogram[i], self.sign[i], int(self.labels[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "AlignedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return AlignedDataset(self.image[idx], self.spectrogram[idx], self.sign[idx], self.labels[idx],
                              dict(self.manifest))

    def batches(self, size: int, order=None):
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(order), size):
            yield self.subset(order[start:start + size])

    def class_counts(self) -> dict[int, int]:
        return dict(sorted(Counter(self.labels.tolist()).items()))

    @classmethod
    def from_samples(cls, samples: Sequence[AlignedSample], manifest=None) -> "AlignedDataset":
        if not samples:
            raise DataError("cannot build a dataset from zero samples")
        return cls(
            np.stack([s.image for s in samples]),
            np.stack([s.spectrogram for s in samples]),
            np.stack([s.sign for s in samples]),
            np.array([s.label for s in samples]),
            manifest or {},
        )

    @classmethod
    def concat(cls, parts: Sequence["AlignedDataset"]) -> "AlignedDataset":
        return cls(*(np.concatenate([getattr(p, m) for p in parts]) for m in (*MODALITIES, "labels")))


@dataclass
class LabeledSet:
    """Single-modality samples with their labels (a source before alignment)."""

    data: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.data) != len(self.labels):
            raise DataError(f"{len(self.data)} samples but {len(self.labels)} labels")


def align_by_label(images: LabeledSet, spectrograms: LabeledSet, signs: LabeledSet, seed: int) -> AlignedDataset:
    """Pair samples across modalities that share a label.

    For each label the three class lists are shuffled (seeded per label and
    modality) and zipped, truncating to the smallest of the three counts.
    """
    sources = {"image": images, "spectrogram": spectrograms, "sign": signs}
    for m, src in sources.items():
        bad = np.flatnonzero((src.labels < 0) | (src.labels >= NUM_CLASSES))
        if bad.size:
            raise DataError(f"{m} source: label {src.labels[bad[0]]} at row {bad[0]} outside [0, {NUM_CLASSES})")
    warnings = []
    picks = {m: [] for m in MODALITIES}
    labels = []
    per_class = {}
    for c in range(NUM_CLASSES):
        members = {m: np.flatnonzero(src.labels == c) for m, src in sources.items()}
        missing = [m for m, idx in members.items() if idx.size == 0]
        if missing:
            warnings.append(f"label {c} absent from {', '.join(missing)}; skipped")
            log.warning("label %d absent from %s; skipped", c, ", ".join(missing))
            continue
        k = min(idx.size for idx in members.values())
        per_class[c] = k
        for mi, m in enumerate(MODALITIES):
            rng = np.random.default_rng([seed, c, mi])
            picks[m].append(rng.permutation(members[m])[:k])
        labels.append(np.full(k, c))
    if not labels:
        raise DataError("no label is present in all three sources")
    manifest = {
        "alignment_seed": seed,
        "source_counts": {m: len(s.labels) for m, s in sources.items()},
        "counts_per_class": per_class,
        "total": int(sum(per_class.values())),
        "warnings": warnings,
    }
    return AlignedDataset(
        *(sources[m].data[np.concatenate(picks[m])] for m in MODALITIES),
        np.concatenate(labels),
        manifest,
    )


def round_half_up(x: float) -> int:
    """Round to nearest, halves away from zero (Python's round() is banker's)."""
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def split_support_query(samples: AlignedDataset, support_fraction: float = 0.2, seed: int = 0):
    """Seeded shuffle; the first round(fraction * n) samples form the support set."""
    if not 0 < support_fraction < 1:
        raise ConfigError(f"support fraction must be in (0, 1), got {support_fraction}")
    n = len(samples)
    if n < 2:
        raise ConfigError(f"need at least 2 samples to split support/query, got {n}")
    k = round_half_up(support_fraction * n)
    if k == 0 or k == n:
        raise ConfigError(f"support fraction {support_fraction} of {n} samples leaves one side empty")
    order = np.random.default_rng(seed).permutation(n)
    return samples.subset(order[:k]), samples.subset(order[k:])


@dataclass
class ClientShard:
    client_id: int
    data: AlignedDataset
    support: AlignedDataset | None = None
    query: AlignedDataset | None = None
    mask: ModalityMask = FULL

    @property
    def query_mask(self) -> ModalityMask:
        return FULL

    def split(self, support_fraction: float, seed: int) -> "ClientShard":
        s, q = split_support_query(self.data, support_fraction, seed)
        return ClientShard(self.client_id, self.data, s, q, self.mask)


def partition_clients(dataset: AlignedDataset, m: int, seed: int) -> list[ClientShard]:
    """IID partition: seeded shuffle, then contiguous chunks whose sizes differ by at most one."""
    if m < 1:
        raise ConfigError(f"client count must be >= 1, got {m}")
    if m > len(dataset):
        raise ConfigError(f"cannot split {len(dataset)} samples across {m} clients")
    order = np.random.default_rng(seed).permutation(len(dataset))
    return [ClientShard(cid, dataset.subset(chunk)) for cid, chunk in enumerate(np.array_split(order, m))]


def split_shards(shards: Sequence[ClientShard], support_fraction: float, seed: int) -> list[ClientShard]:
    return [s.split(support_fraction, seed=np.random.SeedSequence([seed, s.client_id]).generate_state(1)[0])
            for s in shards]


# Scenario name -> modalities AVAILABLE on the support side.
SCENARIOS: dict[str, ModalityMask] = {
    "img/sign": ModalityMask(image=True, spectrogram=False, sign=True),
    "sp/sign": ModalityMask(image=False, spectrogram=True, sign=True),
    "img/sp": ModalityMask(image=True, spectrogram=True, sign=False),
    "img": ModalityMask(image=True, spectrogram=False, sign=False),
    "sp": ModalityMask(image=False, spectrogram=True, sign=False),
    "sign": ModalityMask(image=False, spectrogram=False, sign=True),
    "full": FULL,
}
MISSING_SCENARIOS = tuple(s for s in SCENARIOS if s != "full")


def scenario_mask(scenario: str) -> ModalityMask:
    try:
        return SCENARIOS[scenario]
    except KeyError:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}") from None


def apply_scenario(shards: Sequence[ClientShard], scenario: str) -> list[ClientShard]:
    mask = scenario_mask(scenario)
    return [ClientShard(s.client_id, s.data, s.support, s.query, mask) for s in shards]


def train_test_split(dataset: AlignedDataset, test_fraction: float = 0.2, seed: int = 0):
    """Stratified split: round(fraction * n_c) of each class goes to the test side."""
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test fraction must be in (0, 1), got {test_fraction}")
    train_idx, test_idx = [], []
    for c, count in dataset.class_counts().items():
        if count < 2:
            raise ConfigError(f"class {c} has {count} sample(s); need at least 2 for a stratified split")
        members = np.flatnonzero(dataset.labels == c)
        members = np.random.default_rng([seed, c]).permutation(members)
        k = min(max(round_half_up(test_fraction * count), 1), count - 1)
        test_idx.append(members[:k])
        train_idx.append(members[k:])
    return dataset.subset(np.sort(np.concatenate(train_idx))), dataset.subset(np.sort(np.concatenate(test_idx)))


# ---------------------------------------------------------------------------
# Synthetic data


def class_template(modality: str, label: int, shape: tuple[int, ...], template_seed: int = 0) -> np.ndarray:
    """Fixed pseudo-image for one (modality, class): uniform [0, 1) noise keyed by a hash."""
    key = zlib.crc32(f"{modality}:{label}".encode())
    return np.random.default_rng([template_seed, key]).random(shape)


def synth_generate(classes: int = NUM_CLASSES, per_class: int = 20, noise_sigma: float = 0.05, seed: int = 0,
                   arch: ArchSpec = DEFAULT_ARCH, template_seed: int = 0, scale: float = 1.0) -> AlignedDataset:
    """Aligned dataset of class templates plus i.i.d. Gaussian pixel noise.

    Templates take values in [0, scale); ``scale=255`` mimics raw 8-bit
    intensities. Noise is added in the same units.
    """
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    if not scale > 0:
        raise ConfigError(f"scale must be > 0, got {scale}")
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if not 1 <= classes <= NUM_CLASSES:
        raise ConfigError(f"classes must be in [1, {NUM_CLASSES}], got {classes}")
    rng = np.random.default_rng(seed)
    shapes = arch.input_shapes()
    arrays = {}
    for m in MODALITIES:
        templates = scale * np.stack([class_template(m, c, shapes[m], template_seed) for c in range(classes)])
        arr = np.repeat(templates, per_class, axis=0)
        if noise_sigma > 0:
            arr = arr + noise_sigma * rng.standard_normal(arr.shape)
        arrays[m] = arr
    labels = np.repeat(np.arange(classes), per_class)
    manifest = {"source": "synthetic", "seed": seed, "template_seed": template_seed,
                "noise_sigma": noise_sigma, "scale": scale, "counts_per_class": {c: per_class for c in range(classes)},
                "total": classes * per_class}
    return AlignedDataset(arrays["image"], arrays["spectrogram"], arrays["sign"], labels, manifest)


# ---------------------------------------------------------------------------
# On-disk dataset directories: one MMTF + label file per modality, plus a manifest.


def _fmt(value) -> str:
    if isinstance(value, dict):
        return ", ".join(f"{k}:{v}" for k, v in value.items())
    if isinstance(value, (list, tuple)):
        return "; ".join(map(str, value))
    return str(value)


def write_manifest(path, entries: dict) -> None:
    lines = [f"{k} = {_fmt(v)}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_labeled_set(directory, modality: str, src: LabeledSet) -> None:
    directory = Path(directory)
    write_tensor_file(directory / f"{modality}.mmtf", ((f"{modality}/{i:06d}", x) for i, x in enumerate(src.data)))
    (directory / f"{modality}.labels").write_text("".join(f"{int(y)}\n" for y in src.labels))


def read_labeled_set(directory, modality: str) -> LabeledSet:
    directory = Path(directory)
    tensors = read_tensor_file(directory / f"{modality}.mmtf")
    labels = []
    for lineno, line in enumerate((directory / f"{modality}.labels").read_text().splitlines(), start=1):
        if line.strip():
            try:
                labels.append(int(line))
            except ValueError:
                raise DataError(f"{modality}.labels line {lineno}: not an integer: {line!r}") from None
    if len(labels) != len(tensors):
        raise DataError(f"{modality}: {len(tensors)} tensors but {len(labels)} labels")
    if not tensors:
        raise DataError(f"{modality}: source is empty")
    return LabeledSet(np.stack([t for _, t in tensors]), np.array(labels))


def save_sources(directory, sources: dict[str, LabeledSet], extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for m in MODALITIES:
        write_labeled_set(directory, m, sources[m])
    entries = {f"source.{m}": f"{m}.mmtf" for m in MODALITIES}
    for m in MODALITIES:
        entries[f"counts.{m}"] = dict(sorted(Counter(sources[m].labels.tolist()).items()))
    entries.update(extra or {})
    write_manifest(directory / "manifest.txt", entries)


def load_aligned(directory, seed: int) -> AlignedDataset:
    """Read the three modality sources of a dataset directory and align them by label."""
    directory = Path(directory)
    sources = {m: read_labeled_set(directory, m) for m in MODALITIES}
    ds = align_by_label(sources["image"], sources["spectrogram"], sources["sign"], seed)
    ds.manifest["directory"] = str(directory)
    return ds


def dataset_as_sources(ds: AlignedDataset) -> dict[str, LabeledSet]:
    return {m: LabeledSet(getattr(ds, m), ds.labels) for m in MODALITIES}
