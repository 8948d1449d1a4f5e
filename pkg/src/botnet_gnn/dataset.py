"""N-BaIoT flow-statistics ingestion, deduplication, splitting and scaling."""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

N_FEATURES = 115
CLASS_NAMES = (
    "Normal",
    "mirai_udp",
    "mirai_syn",
    "mirai_ack",
    "mirai_scan",
    "mirai_udplain",
    "gafgyt_udp",
    "gafgyt_combo",
    "gafgyt_junk",
    "gafgyt_scan",
)
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}
BINARY_NAMES = ("Normal", "Attack")

# class counts after deduplication of the full corpus
NBAIOT_COUNTS = {
    "Normal": 513_497,
    "mirai_udp": 555_973,
    "mirai_syn": 317_115,
    "mirai_ack": 280_144,
    "mirai_scan": 256_151,
    "mirai_udplain": 230_508,
    "gafgyt_udp": 107_665,
    "gafgyt_combo": 62_213,
    "gafgyt_junk": 31_293,
    "gafgyt_scan": 31_087,
}
NBAIOT_TOTAL = 2_482_470

DATA_MAGIC = b"NBIO1"
STD_FLOOR = 1e-8


class DataError(ValueError):
    """Input data is missing, malformed or inconsistent."""


class UnknownLabel(DataError):
    pass


class TooFewRows(DataError):
    pass


def binary_labels(labels: np.ndarray) -> np.ndarray:
    """0 for Normal traffic, 1 for any attack class."""
    return (np.asarray(labels) != CLASS_IDS["Normal"]).astype(np.uint8)


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: str

    @property
    def class_id(self) -> int:
        return CLASS_IDS[self.label]


@dataclass
class DataMatrix:
    features: np.ndarray  # (N, 115) float32
    labels: np.ndarray  # (N,) uint8 class ids

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[1] != N_FEATURES:
            raise DataError(f"expected N x {N_FEATURES} features, got {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise DataError("feature and label counts differ")

    def __len__(self):
        return len(self.labels)

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=len(CLASS_NAMES))
        return {name: int(counts[i]) for i, name in enumerate(CLASS_NAMES)}


@dataclass(frozen=True)
class DatasetSplit:
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int


def load_manifest(manifest_path) -> list[ManifestEntry]:
    """Parse a JSON list of ``{"path": ..., "label": ...}`` entries.

    Relative paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    try:
        raw = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: malformed JSON ({exc})") from None
    if not isinstance(raw, list):
        raise DataError(f"{manifest_path}: expected a JSON list of entries")
    entries = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "path" not in item or "label" not in item:
            raise DataError(f"{manifest_path}: entry {i} needs 'path' and 'label': {item!r}")
        label = item["label"]
        if label not in CLASS_IDS:
            raise UnknownLabel(f"{manifest_path}: entry {i} has unknown label {label!r}")
        path = Path(item["path"])
        if not path.is_absolute():
            path = manifest_path.parent / path
        if not path.is_file():
            raise DataError(f"{manifest_path}: entry {i} file not found: {path}")
        entries.append(ManifestEntry(path, label))
    return entries


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _locate_bad_cell(path: Path, skip_header: bool) -> str:
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if skip_header and lineno == 1:
                continue
            if not row:
                continue
            if len(row) != N_FEATURES:
                return f"{path}:{lineno}: expected {N_FEATURES} columns, found {len(row)}"
            for col, token in enumerate(row):
                if not _is_number(token):
                    return f"{path}:{lineno}: non-numeric cell {token!r} in column {col}"
                if not np.isfinite(float(token)):
                    return f"{path}:{lineno}: non-finite value {token!r} in column {col}"
    return f"{path}: unreadable CSV"


def read_flow_csv(path) -> np.ndarray:
    """Read one 115-column CSV as float32; a non-numeric first row is a header."""
    path = Path(path)
    with open(path, newline="") as fh:
        first = next(csv.reader(fh), None)
    if first is None:
        return np.empty((0, N_FEATURES), dtype=np.float32)
    has_header = not all(_is_number(tok) for tok in first)
    try:
        frame = pd.read_csv(path, header=None, skiprows=1 if has_header else 0,
                            dtype=np.float64, skip_blank_lines=True)
    except (ValueError, pd.errors.ParserError):
        raise DataError(_locate_bad_cell(path, has_header)) from None
    except pd.errors.EmptyDataError:
        return np.empty((0, N_FEATURES), dtype=np.float32)
    values = frame.to_numpy()
    if values.shape[1] != N_FEATURES or not np.isfinite(values).all():
        raise DataError(_locate_bad_cell(path, has_header))
    return values.astype(np.float32)


def dedup_rows(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Indices of first occurrences of each distinct (features, label) row, in order."""
    feats = np.ascontiguousarray(features, dtype=np.float32) + np.float32(0.0)  # -0.0 -> 0.0
    packed = np.concatenate(
        [feats.view(np.uint8).reshape(len(feats), -1),
         np.asarray(labels, dtype=np.uint8).reshape(-1, 1)], axis=1)
    keys = np.ascontiguousarray(packed).view(np.dtype((np.void, packed.shape[1]))).ravel()
    _, first = np.unique(keys, return_index=True)
    return np.sort(first)


def ingest(entries: list[ManifestEntry]) -> DataMatrix:
    """Concatenate manifest CSVs in order and drop exact duplicate rows.

    Duplicates are judged on the float32 values that end up in the cache, so
    re-ingesting a serialized result never shrinks it further.
    """
    blocks, labels = [], []
    for entry in entries:
        rows = read_flow_csv(entry.path)
        log.info("read %s: %d rows (%s)", entry.path, len(rows), entry.label)
        blocks.append(rows)
        labels.append(np.full(len(rows), entry.class_id, dtype=np.uint8))
    if blocks:
        features = np.concatenate(blocks)
        label_arr = np.concatenate(labels)
    else:
        features = np.empty((0, N_FEATURES), dtype=np.float32)
        label_arr = np.empty(0, dtype=np.uint8)
    keep = dedup_rows(features, label_arr)
    data = DataMatrix(features[keep], label_arr[keep])
    log.info("ingested %d rows (%d duplicates dropped)", len(data), len(features) - len(data))
    return data


def save_data(path, data: DataMatrix) -> None:
    n = len(data)
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<QI", n, N_FEATURES))
        fh.write(np.ascontiguousarray(data.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(data.labels, dtype=np.uint8).tobytes())


def load_data(path) -> DataMatrix:
    raw = Path(path).read_bytes()
    if raw[:5] != DATA_MAGIC:
        raise DataError(f"{path}: not an NBIO1 dataset cache")
    n, nfeat = struct.unpack_from("<QI", raw, 5)
    if nfeat != N_FEATURES:
        raise DataError(f"{path}: feature count {nfeat}, expected {N_FEATURES}")
    offset = 17
    expected = offset + n * nfeat * 4 + n
    if len(raw) != expected:
        raise DataError(f"{path}: size {len(raw)} bytes, expected {expected}")
    feats = np.frombuffer(raw, dtype="<f4", count=n * nfeat, offset=offset).reshape(n, nfeat)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset + n * nfeat * 4)
    if labels.size and labels.max() >= len(CLASS_NAMES):
        raise DataError(f"{path}: label id {labels.max()} out of range")
    return DataMatrix(feats.astype(np.float32), labels.copy())


def split(n_rows: int, seed: int, train_fraction: float = 0.8) -> DatasetSplit:
    """Seeded uniform permutation; the first floor(0.8 N) indices train."""
    if n_rows < 10:
        raise TooFewRows(f"need at least 10 rows to split, got {n_rows}")
    perm = np.random.default_rng(seed).permutation(n_rows)
    n_train = int(np.floor(train_fraction * n_rows))
    return DatasetSplit(perm[:n_train], perm[n_train:], seed)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Standardizer":
        rows = np.asarray(rows, dtype=np.float64)
        mean = rows.mean(axis=0)
        std = np.maximum(rows.std(axis=0), STD_FLOOR)  # population std
        return cls(mean, std)

    def transform(self, rows: np.ndarray) -> np.ndarray:
        out = (np.asarray(rows, dtype=np.float64) - self.mean) / self.std
        return out.astype(np.float32)


def fit_standardizer(data: DataMatrix, split_: DatasetSplit) -> Standardizer:
    return Standardizer.fit(data.features[split_.train_idx])


def apply_standardizer(std: Standardizer, rows: np.ndarray) -> np.ndarray:
    return std.transform(rows)


def subsample_per_class(labels: np.ndarray, cap: int, seed: int) -> np.ndarray:
    """Sorted row indices keeping at most ``cap`` random rows of each label."""
    if cap < 1:
        raise ValueError("per-class cap must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    keep = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) > cap:
            idx = rng.choice(idx, size=cap, replace=False)
        keep.append(idx)
    return np.sort(np.concatenate(keep)) if keep else np.empty(0, dtype=np.int64)


def synthetic_blobs(n_per_class: int, n_classes: int = 3, seed: int = 0,
                    center_box: float = 10.0, cluster_std: float = 1.0) -> DataMatrix:
    """Isotropic Gaussian blobs in 115 dimensions labelled with class ids 0..n_classes-1."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-center_box, center_box, size=(n_classes, N_FEATURES))
    feats = np.concatenate([c + cluster_std * rng.standard_normal((n_per_class, N_FEATURES))
                            for c in centers])
    labels = np.repeat(np.arange(n_classes, dtype=np.uint8), n_per_class)
    order = rng.permutation(len(labels))
    return DataMatrix(feats[order].astype(np.float32), labels[order])
