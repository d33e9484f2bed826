"""Windowed dataset container, its binary file format, CSV import and the synthetic generator."""
from __future__ import annotations

import csv
import glob
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

DATASET_MAGIC = b"TCN1"
DATASET_VERSION = 1
_HEADER = np.dtype([("windows", "<u4"), ("channels", "<u4"), ("length", "<u4"), ("classes", "<u4"), ("fs", "<f8")])


class FormatError(ValueError):
    """Raised for files that cannot be decoded; ``kind`` names the failure."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


def atomic_write(path: str, writer, mode: str = "wb") -> None:
    """Call ``writer(fh)`` on a temporary file beside ``path`` and rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class WindowedDataset:
    windows: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    sampling_rate: float
    channel_names: list[str] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.windows = np.ascontiguousarray(self.windows, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        self.subjects = np.ascontiguousarray(self.subjects, dtype=np.int32)
        if self.windows.ndim != 3:
            raise ValueError(f"dataset: windows must be (count, C, L), got {self.windows.shape}")
        n = len(self.windows)
        if len(self.labels) != n or len(self.subjects) != n:
            raise ValueError("dataset: windows, labels and subjects counts differ")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.n_channels)]
        if len(self.channel_names) != self.n_channels:
            raise ValueError("dataset: channel name count does not match channels")
        if not self.class_names:
            top = int(self.labels.max()) + 1 if n else 0
            self.class_names = [f"class{i}" for i in range(top)]
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"dataset: labels must lie in [0, {self.n_classes})")

    @property
    def n_channels(self) -> int:
        return self.windows.shape[1]

    @property
    def length(self) -> int:
        return self.windows.shape[2]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.windows)

    def subset(self, index) -> "WindowedDataset":
        return WindowedDataset(self.windows[index], self.labels[index], self.subjects[index], self.sampling_rate,
                               list(self.channel_names), list(self.class_names), dict(self.metadata))

    def split_subjects(self, test_subjects) -> tuple["WindowedDataset", "WindowedDataset"]:
        test = np.isin(self.subjects, np.asarray(list(test_subjects)))
        return self.subset(~test), self.subset(test)


def default_test_subjects(ds: WindowedDataset, fraction: float = 0.2) -> list[int]:
    """The last ``fraction`` of distinct subject ids (at least one)."""
    ids = sorted(set(ds.subjects.tolist()))
    k = max(1, int(round(fraction * len(ids))))
    return ids[-k:]


def save_dataset(ds: WindowedDataset, path: str) -> None:
    meta = json.dumps({"channel_names": ds.channel_names, "class_names": ds.class_names,
                       "metadata": ds.metadata}, sort_keys=True).encode("utf-8")
    header = np.array([(len(ds), ds.n_channels, ds.length, ds.n_classes, ds.sampling_rate)], dtype=_HEADER)

    def write(fh):
        fh.write(DATASET_MAGIC + np.uint32(DATASET_VERSION).tobytes())
        fh.write(header.tobytes())
        fh.write(np.uint32(len(meta)).tobytes() + meta)
        fh.write(ds.windows.astype("<f4").tobytes())
        fh.write(ds.labels.astype("<i4").tobytes())
        fh.write(ds.subjects.astype("<i4").tobytes())

    atomic_write(path, write)


def load_dataset(path: str) -> WindowedDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != DATASET_MAGIC:
        raise FormatError("unrecognized format", f"{path} is not a dataset file")
    if len(raw) < 8:
        raise FormatError("truncated payload", f"{path} ends inside the header")
    version = int(np.frombuffer(raw[4:8], "<u4")[0])
    if version != DATASET_VERSION:
        raise FormatError("version mismatch", f"{path} has version {version}, expected {DATASET_VERSION}")
    pos = 8
    need = pos + _HEADER.itemsize + 4
    if len(raw) < need:
        raise FormatError("truncated payload", f"{path} ends inside the header")
    head = np.frombuffer(raw[pos:pos + _HEADER.itemsize], _HEADER)[0]
    pos += _HEADER.itemsize
    meta_len = int(np.frombuffer(raw[pos:pos + 4], "<u4")[0])
    pos += 4
    n, c, length = int(head["windows"]), int(head["channels"]), int(head["length"])
    total = pos + meta_len + 4 * n * c * length + 8 * n
    if len(raw) < total:
        raise FormatError("truncated payload", f"{path} holds {len(raw)} bytes, header promises {total}")
    if len(raw) > total:
        raise FormatError("corrupt header", f"{path} has {len(raw) - total} unexpected trailing bytes")
    try:
        meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("corrupt header", f"metadata blob does not decode: {exc}") from None
    pos += meta_len
    windows = np.frombuffer(raw[pos:pos + 4 * n * c * length], "<f4").reshape(n, c, length)
    pos += 4 * n * c * length
    labels = np.frombuffer(raw[pos:pos + 4 * n], "<i4")
    subjects = np.frombuffer(raw[pos + 4 * n:pos + 8 * n], "<i4")
    ds = WindowedDataset(windows.copy(), labels.copy(), subjects.copy(), float(head["fs"]),
                         meta.get("channel_names", []), meta.get("class_names", []), meta.get("metadata", {}))
    if ds.n_classes != int(head["classes"]):
        raise FormatError("corrupt header", "class count disagrees with class names")
    return ds


# -- CSV import --------------------------------------------------------------

def _window_starts(rows: int, length: int, stride: int) -> range:
    return range(0, max(rows - length + 1, 0), stride)


def _subject_id(text: str, seen: dict[str, int]) -> int:
    """Integer ids pass through; other ids are numbered in order of appearance."""
    if text.lstrip("-").isdigit():
        return int(text)
    return seen.setdefault(text, len(seen))


def import_csv(directory: str, manifest: dict) -> WindowedDataset:
    """Cut fixed-length windows from CSV recordings described by a manifest.

    Manifest keys: ``files`` (glob, relative to ``directory``), ``channels``
    (column names), ``label`` and ``subject`` columns, ``window`` (samples),
    ``overlap`` (fraction in [0, 1)), ``sampling_rate`` and optionally
    ``class_names``.  Rows with an empty or non-numeric cell are dropped and
    counted in ``metadata["dropped_rows"]``.  Windows never straddle a
    subject change; a window takes the most frequent label it covers.
    """
    for key in ("channels", "label", "subject", "window"):
        if key not in manifest:
            raise ValueError(f"manifest: missing key {key!r}")
    length = int(manifest["window"])
    overlap = float(manifest.get("overlap", 0.0))
    if not 0.0 <= overlap < 1.0 or length < 1:
        raise ValueError("manifest: need window >= 1 and 0 <= overlap < 1")
    stride = max(1, int(round(length * (1.0 - overlap))))
    channels = list(manifest["channels"])
    wanted = channels + [manifest["label"], manifest["subject"]]
    paths = sorted(glob.glob(os.path.join(directory, manifest.get("files", "*.csv"))))
    if not paths:
        raise ValueError(f"import: no CSV files match in {directory}")

    class_names = list(manifest.get("class_names", []))
    label_ids: dict[str, int] = {name: i for i, name in enumerate(class_names)}
    subject_ids: dict[str, int] = {}
    windows, labels, subjects = [], [], []
    dropped = 0
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in wanted if c not in (reader.fieldnames or [])]
            if missing:
                raise ValueError(f"import: column {missing[0]!r} missing from {os.path.basename(path)}")
            values, labs, subs = [], [], []
            for row in reader:
                cells = [row.get(c) for c in wanted]
                if any(v is None or v.strip() == "" for v in cells):
                    dropped += 1
                    continue
                try:
                    values.append([float(row[c]) for c in channels])
                except ValueError:
                    dropped += 1
                    continue
                labs.append(row[manifest["label"]].strip())
                subs.append(row[manifest["subject"]].strip())
        values = np.asarray(values, dtype=np.float64).reshape(-1, len(channels))
        start = 0
        while start < len(subs):
            stop = start
            while stop < len(subs) and subs[stop] == subs[start]:
                stop += 1
            seg = values[start:stop]
            for s in _window_starts(stop - start, length, stride):
                window_labels = labs[start + s:start + s + length]
                ids = [label_ids.setdefault(lab, len(label_ids)) for lab in window_labels]
                labels.append(int(np.bincount(ids).argmax()))
                windows.append(seg[s:s + length].T)
                subjects.append(_subject_id(subs[start], subject_ids))
            start = stop
    if not class_names:
        class_names = [name for name, _ in sorted(label_ids.items(), key=lambda kv: kv[1])]
    if len(label_ids) > len(class_names):
        extra = [n for n, i in sorted(label_ids.items(), key=lambda kv: kv[1]) if i >= len(class_names)]
        class_names += extra
    arr = np.asarray(windows, dtype=np.float32).reshape(-1, len(channels), length)
    return WindowedDataset(arr, np.asarray(labels, dtype=np.int32), np.asarray(subjects, dtype=np.int32),
                           float(manifest.get("sampling_rate", 1.0)), channels, class_names,
                           {"dropped_rows": dropped, "stride": stride})


# -- synthetic data ----------------------------------------------------------

def sawtooth(phase: np.ndarray) -> np.ndarray:
    """Slow rise over each cycle, instantaneous drop; values in [-1, 1)."""
    return 2.0 * (phase - np.floor(phase)) - 1.0


def synth_generate(n_classes: int = 3, per_class: int = 200, n_channels: int = 3, length: int = 128,
                   fs: float = 50.0, seed: int = 0, noise: float = 0.1, n_subjects: int = 10) -> WindowedDataset:
    """Class k: a sinusoid at 2(k+1) cycles per window with amplitude 1 + 0.5k,
    a sawtooth at 3(k+1) cycles per window, and Gaussian noise.

    Every window draws its own phases (per channel for the sinusoid).  The
    sawtooth makes the signals time-orientable.  Windows are ordered class by
    class and subjects are assigned round-robin.
    """
    if n_classes < 2:
        raise ValueError("synth: need at least 2 classes")
    rng = np.random.default_rng(seed)
    t = np.arange(length) / fs
    n = n_classes * per_class
    windows = np.empty((n, n_channels, length))
    labels = np.repeat(np.arange(n_classes), per_class)
    for i, k in enumerate(labels):
        freq = 2.0 * (k + 1) * fs / length
        saw_freq = 3.0 * (k + 1) * fs / length
        amp = 1.0 + 0.5 * k
        phases = rng.uniform(0, 2 * np.pi, size=(n_channels, 1))
        saw_phase = rng.uniform(0, 1)
        sine = amp * np.sin(2 * np.pi * freq * t[None, :] + phases)
        saw = 0.5 * sawtooth(saw_freq * t[None, :] + saw_phase)
        windows[i] = sine + saw + noise * rng.standard_normal((n_channels, length))
    subjects = np.arange(n) % n_subjects
    return WindowedDataset(windows, labels, subjects, fs, [f"axis{c}" for c in range(n_channels)],
                           [f"class{k}" for k in range(n_classes)], {"generator": "synthetic", "seed": seed})


def white_noise(count: int, n_channels: int = 3, length: int = 128, fs: float = 50.0, seed: int = 0) -> WindowedDataset:
    rng = np.random.default_rng(seed)
    windows = rng.standard_normal((count, n_channels, length))
    return WindowedDataset(windows, np.zeros(count), np.arange(count) % 10, fs,
                           class_names=["noise"], metadata={"generator": "white-noise", "seed": seed})
