"""Loading, validation, batching and synthetic generation of pre-extracted
multimodal feature sets.

On disk a dataset directory holds ``manifest.json`` and one JSON-lines file
per split::

    {"dims": {"text": [L, d], "visual": [L, d], "acoustic": [L, d]},
     "splits": {"train": "train.jsonl", "valid": "valid.jsonl", "test": "test.jsonl"}}

Each data line is ``{"id": str, "label": float, "text": [[...], ...],
"visual": [...], "acoustic": [...]}`` with rows = sequence positions.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Modality",
    "MODALITIES",
    "Sample",
    "Dataset",
    "Batch",
    "DatasetError",
    "DatasetValidationError",
    "ConfigurationError",
    "load_dataset",
    "write_dataset",
    "generate_synthetic",
    "make_batches",
    "split_dataset",
]

LABEL_MIN, LABEL_MAX = -3.0, 3.0
SPLITS = ("train", "valid", "test")


class Modality(str, enum.Enum):
    TEXT = "text"
    VISUAL = "visual"
    ACOUSTIC = "acoustic"

    @property
    def short(self) -> str:
        return self.value[0]


# Canonical order used for every concatenation.
MODALITIES: Tuple[Modality, ...] = (Modality.TEXT, Modality.VISUAL, Modality.ACOUSTIC)


class DatasetError(Exception):
    """Raised when a dataset file cannot be read."""


class DatasetValidationError(DatasetError):
    """Raised when file contents violate the sample/dataset invariants."""


class ConfigurationError(ValueError):
    """Invalid configuration or arguments (batch size, flags, hyperparameters)."""


Dims = Dict[Modality, Tuple[int, int]]


@dataclass(frozen=True)
class Sample:
    id: str
    features: Dict[Modality, np.ndarray]
    label: float

    @property
    def polarity(self) -> int:
        return int(np.sign(self.label))

    def validate(self, dims: Optional[Dims] = None) -> None:
        if not (LABEL_MIN <= self.label <= LABEL_MAX):
            raise DatasetValidationError(
                f"sample {self.id!r}: label {self.label} outside [-3, 3]"
            )
        for m in MODALITIES:
            if m not in self.features:
                raise DatasetValidationError(f"sample {self.id!r}: missing modality {m.value}")
            x = self.features[m]
            if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
                raise DatasetValidationError(
                    f"sample {self.id!r}: {m.value} must be a non-empty matrix, got shape {x.shape}"
                )
            if not np.all(np.isfinite(x)):
                raise DatasetValidationError(
                    f"sample {self.id!r}: non-finite value in {m.value}"
                )
            if dims is not None and tuple(x.shape) != tuple(dims[m]):
                raise DatasetValidationError(
                    f"sample {self.id!r}: {m.value} shape {x.shape} != declared {tuple(dims[m])}"
                )

    def equals(self, other: "Sample") -> bool:
        return (
            self.id == other.id
            and self.label == other.label
            and all(np.array_equal(self.features[m], other.features[m]) for m in MODALITIES)
        )


@dataclass(frozen=True)
class Dataset:
    split: str
    samples: Tuple[Sample, ...]
    dims: Dims

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise DatasetValidationError(f"duplicate sample id {s.id!r} in split {self.split}")
            seen.add(s.id)
            s.validate(self.dims)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.float64)

    def stacked(self, modality: Modality) -> np.ndarray:
        L, d = self.dims[modality]
        if not self.samples:
            return np.zeros((0, L, d))
        return np.stack([s.features[modality] for s in self.samples])

    def subset(self, indices: Iterable[int], split: Optional[str] = None) -> "Dataset":
        return Dataset(split or self.split, [self.samples[i] for i in indices], self.dims)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.split == other.split
            and {m: tuple(v) for m, v in self.dims.items()} == {m: tuple(v) for m, v in other.dims.items()}
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self.samples, other.samples))
        )


@dataclass
class Batch:
    """Indices into a dataset plus the samples themselves; a batch doubles as
    the retrieval pool during training."""

    indices: List[int]
    samples: List[Sample] = field(repr=False)

    def __len__(self) -> int:
        return len(self.indices)


def _fit_length(x: np.ndarray, length: int) -> np.ndarray:
    if x.shape[0] >= length:
        return x[:length]
    pad = np.zeros((length - x.shape[0], x.shape[1]), dtype=x.dtype)
    return np.concatenate([x, pad], axis=0)


def _parse_dims(raw: dict) -> Dims:
    try:
        dims = {m: (int(raw[m.value][0]), int(raw[m.value][1])) for m in MODALITIES}
    except (KeyError, IndexError, TypeError) as exc:
        raise DatasetValidationError(f"manifest dims malformed: {raw!r}") from exc
    for m, (L, d) in dims.items():
        if L < 1 or d < 1:
            raise DatasetValidationError(f"manifest dims for {m.value} must be positive, got {(L, d)}")
    return dims


def read_manifest(path) -> dict:
    manifest_path = Path(path) / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as fh:
        return json.load(fh)


def load_dataset(path, split: str) -> Dataset:
    """Load one split. Sequences are zero-padded or truncated (prefix kept) to
    the manifest length; a feature-dimension mismatch is a validation error."""
    path = Path(path)
    manifest = read_manifest(path)
    dims = _parse_dims(manifest.get("dims", {}))
    splits = manifest.get("splits", {})
    if split not in splits:
        raise DatasetError(f"split {split!r} not declared in {path / 'manifest.json'}")
    data_path = path / splits[split]
    if not data_path.is_file():
        raise DatasetError(f"data file not found: {data_path}")

    samples = []
    with open(data_path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid = str(rec["id"])
                label = float(rec["label"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetValidationError(f"{data_path}:{lineno}: malformed record") from exc
            feats = {}
            for m in MODALITIES:
                if m.value not in rec:
                    raise DatasetValidationError(f"sample {sid!r}: missing modality {m.value}")
                x = np.asarray(rec[m.value], dtype=np.float64)
                if x.ndim != 2 or x.shape[0] < 1:
                    raise DatasetValidationError(
                        f"sample {sid!r}: {m.value} must be a non-empty matrix, got shape {x.shape}"
                    )
                if x.shape[1] != dims[m][1]:
                    raise DatasetValidationError(
                        f"sample {sid!r}: {m.value} feature dim {x.shape[1]} != declared {dims[m][1]}"
                    )
                if not np.all(np.isfinite(x)):
                    raise DatasetValidationError(f"sample {sid!r}: non-finite value in {m.value}")
                feats[m] = _fit_length(x, dims[m][0])
            sample = Sample(sid, feats, label)
            sample.validate(dims)
            samples.append(sample)
    return Dataset(split, samples, dims)


def _sample_record(sample: Sample) -> dict:
    rec = {"id": sample.id, "label": float(sample.label)}
    for m in MODALITIES:
        rec[m.value] = sample.features[m].tolist()
    return rec


def write_dataset(dataset: Dataset, path, *, filename: Optional[str] = None) -> None:
    """Write ``dataset`` as one split under ``path``; the manifest is created
    or updated in place. Python's float repr round-trips float64 exactly."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest_path = path / "manifest.json"
    dims_json = {m.value: list(dataset.dims[m]) for m in MODALITIES}
    if manifest_path.is_file():
        manifest = read_manifest(path)
        if _parse_dims(manifest.get("dims", {})) != {m: tuple(v) for m, v in dataset.dims.items()}:
            raise DatasetValidationError(f"{manifest_path}: dims differ from dataset being written")
    else:
        manifest = {"dims": dims_json, "splits": {}}
    filename = filename or f"{dataset.split}.jsonl"
    manifest["splits"][dataset.split] = filename
    with open(path / filename, "w") as fh:
        for s in dataset.samples:
            fh.write(json.dumps(_sample_record(s)))
            fh.write("\n")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def synthetic_directions(dims: Dims, seed: int) -> Dict[Modality, np.ndarray]:
    """Unit polarity direction per modality; depends only on seed and dims."""
    rng = np.random.default_rng([seed, 0xD1])
    out = {}
    for m in MODALITIES:
        u = rng.standard_normal(dims[m][1])
        out[m] = u / np.linalg.norm(u)
    return out


def generate_synthetic(
    n: int,
    dims: Dims,
    signal_strength: float,
    seed: int,
    *,
    split: str = "train",
    dead_zone: float = 0.2,
    id_prefix: str = "s",
) -> Dataset:
    """Noise plus ``signal_strength * label * direction`` on every row.

    Labels are uniform on [-3, 3] minus the open interval (-dead_zone/2, dead_zone/2).
    """
    if n < 0:
        raise ConfigurationError(f"n must be >= 0, got {n}")
    if signal_strength < 0:
        raise ConfigurationError(f"signal_strength must be >= 0, got {signal_strength}")
    dims = {Modality(m): (int(L), int(d)) for m, (L, d) in dims.items()}
    directions = synthetic_directions(dims, seed)
    rng = np.random.default_rng([seed, 0x5A])
    half = dead_zone / 2.0
    samples = []
    for i in range(n):
        mag = rng.uniform(half, LABEL_MAX)
        label = float(mag if rng.random() < 0.5 else -mag)
        feats = {}
        for m in MODALITIES:
            L, d = dims[m]
            feats[m] = rng.standard_normal((L, d)) + signal_strength * label * directions[m]
        samples.append(Sample(f"{id_prefix}{i}", feats, label))
    return Dataset(split, samples, dims)


def split_dataset(dataset: Dataset, sizes: Dict[str, int]) -> Dict[str, Dataset]:
    """Cut a dataset into consecutive named splits of the given sizes."""
    if sum(sizes.values()) > len(dataset):
        raise ConfigurationError(f"split sizes {sizes} exceed dataset size {len(dataset)}")
    out, start = {}, 0
    for name, k in sizes.items():
        out[name] = dataset.subset(range(start, start + k), split=name)
        start += k
    return out


def batch_sizes(n: int, batch_size: int) -> List[int]:
    sizes = [batch_size] * (n // batch_size)
    rem = n % batch_size
    if rem == 1 and sizes:
        sizes[-1] += 1
    elif rem:
        sizes.append(rem)
    return sizes


def make_batches(
    dataset: Dataset, batch_size: int, shuffle_seed: Optional[int] = None
) -> List[Batch]:
    """Partition into batches of ``batch_size``; a trailing singleton joins the
    previous batch so every batch can serve as a self-excluding pool."""
    if batch_size < 2:
        raise ConfigurationError(f"batch_size must be >= 2, got {batch_size}")
    n = len(dataset)
    if n < 2:
        raise ConfigurationError(f"need at least 2 samples to batch, got {n}")
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    batches, start = [], 0
    for size in batch_sizes(n, batch_size):
        idx = [int(i) for i in order[start:start + size]]
        batches.append(Batch(idx, [dataset.samples[i] for i in idx]))
        start += size
    return batches


def parse_dims_arg(text: str) -> Dims:
    """Parse ``text=4x8,visual=4x6,acoustic=4x5`` (modality initials accepted)."""
    by_name = {m.value: m for m in MODALITIES}
    by_name.update({m.short: m for m in MODALITIES})
    dims = {}
    for part in text.split(","):
        name, _, shape = part.partition("=")
        name = name.strip().lower()
        if name not in by_name or "x" not in shape:
            raise ConfigurationError(f"bad dims entry {part!r}; expected e.g. text=4x8")
        L, d = shape.lower().split("x")
        dims[by_name[name]] = (int(L), int(d))
    if set(dims) != set(MODALITIES):
        raise ConfigurationError(f"dims must cover text, visual and acoustic: {text!r}")
    return dims


def stack_features(samples: Sequence[Sample], modality: Modality) -> np.ndarray:
    return np.stack([s.features[modality] for s in samples])
