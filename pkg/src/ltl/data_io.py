"""MNIST IDX files, model checkpoints and metrics CSV."""

from __future__ import annotations

import csv
import gzip
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from . import __version__
from .errors import FormatError
from .snn import HIDDEN, OUTPUT, LayerSpec, NeuronParams, SpikingModel
from .teacher import TeacherModel

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
CHECKPOINT_MAGIC = b"LTL1"

METRIC_COLUMNS = ("run_id", "epoch", "layer", "loss", "accuracy", "synops_ratio", "wall_seconds")

_SPLITS = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    images: np.ndarray  # (n, 784) floats in [0, 1]
    labels: np.ndarray  # (n,) ints in 0..9

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n])


@dataclass
class MNIST:
    train: Dataset
    test: Dataset


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: Union[str, Path], expected_magic: Optional[int] = None) -> np.ndarray:
    """Read an unsigned-byte IDX file into an array of its declared shape."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: only unsigned-byte IDX data is supported (magic 0x{magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if ndim == 0 or len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    size = math.prod(shape)
    if len(raw) - header != size:
        raise FormatError(
            f"{path}: truncated or oversized payload ({len(raw) - header} bytes, expected {size})"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(shape)


def write_idx(path: Union[str, Path], data: np.ndarray):
    data = np.ascontiguousarray(data, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | data.ndim) + struct.pack(f">{data.ndim}I", *data.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + data.tobytes())


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"no {stem}[.gz] under {root}")


def load_split(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError("images must be 3-D and labels 1-D")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float32) / np.float32(255.0)
    return Dataset(x, labels.astype(np.int64))


def load_mnist(path: Union[str, Path, None] = None) -> MNIST:
    """Load the train/test IDX files found in ``path`` (default ``$LTL_DATA_DIR``)."""
    if path is None:
        path = os.environ.get("LTL_DATA_DIR")
        if not path:
            raise FileNotFoundError("no dataset path given and LTL_DATA_DIR is unset")
    root = Path(path)
    splits = {k: load_split(_find(root, img), _find(root, lab)) for k, (img, lab) in _SPLITS.items()}
    return MNIST(splits["train"], splits["test"])


def write_mnist(path: Union[str, Path], train: tuple, test: tuple, compress: bool = False):
    """Write ``(images uint8 (n,28,28), labels uint8 (n,))`` pairs as IDX files."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    ext = ".gz" if compress else ""
    for (img_name, lab_name), (images, labels) in zip(_SPLITS.values(), (train, test)):
        write_idx(root / (img_name + ext), np.asarray(images).reshape(len(images), 28, 28))
        write_idx(root / (lab_name + ext), labels)


# -- checkpoints -----------------------------------------------------------

def _header_for(model, rule: str, seed: Optional[int], extra: Optional[dict]) -> tuple[dict, list]:
    if isinstance(model, TeacherModel):
        tensors = [t for w, b in model.layers for t in (w, b)]
        n = len(model.layers)
        header = {
            "model": "ann",
            "arch": model.arch,
            "kinds": ["relu"] * (n - 1) + ["linear"],
            "neuron": None,
        }
    elif isinstance(model, SpikingModel):
        tensors = [t for layer in model.layers for t in (layer.weights, layer.bias)]
        p = model.params
        header = {
            "model": "snn",
            "arch": model.arch,
            "kinds": [layer.kind for layer in model.layers],
            "neuron": {
                "alpha": p.alpha,
                "tau_m": None if math.isinf(p.tau_m) else p.tau_m,
                "threshold": p.threshold,
                "boxcar_width": p.boxcar_width,
                "dt": p.dt,
            },
        }
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    names = []
    for i in range(len(tensors) // 2):
        names += [f"layer{i}.weight", f"layer{i}.bias"]
    header.update({
        "rule": rule,
        "seed": seed,
        "created_by": f"ltl {__version__}",
        "dtype": "float32-le",
        "tensors": [{"name": nm, "shape": list(t.shape)} for nm, t in zip(names, tensors)],
    })
    if extra:
        header["meta"] = extra
    return header, tensors


def save_checkpoint(model, path: Union[str, Path], rule: str = "none", seed: Optional[int] = None,
                    extra: Optional[dict] = None):
    """Write ``LTL1 | u32 header length | JSON header | f32 LE tensors``."""
    header, tensors = _header_for(model, rule, seed, extra)
    text = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_checkpoint(path: Union[str, Path]) -> tuple[dict, list]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an LTL1 checkpoint (magic {raw[:4]!r})")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (length,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    payload = raw[8 + length:]
    shapes = [tuple(t["shape"]) for t in header.get("tensors", [])]
    expected = sum(4 * math.prod(s) for s in shapes)
    if expected != len(payload):
        raise FormatError(f"{path}: header declares {expected} payload bytes, found {len(payload)}")
    tensors, offset = [], 0
    for s in shapes:
        n = math.prod(s)
        tensors.append(np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(s).astype(np.float32))
        offset += 4 * n
    return header, tensors


def load_checkpoint(path: Union[str, Path]):
    """Inverse of ``save_checkpoint``: a ``TeacherModel`` or ``SpikingModel``."""
    header, tensors = read_checkpoint(path)
    pairs = list(zip(tensors[0::2], tensors[1::2]))
    arch = header["arch"]
    if [p[0].shape for p in pairs] != [(o, i) for i, o in zip(arch[:-1], arch[1:])]:
        raise FormatError(f"{path}: tensor shapes do not match arch {arch}")
    if header["model"] == "ann":
        return TeacherModel([(w, b) for w, b in pairs])
    if header["model"] != "snn":
        raise FormatError(f"{path}: unknown model type {header['model']!r}")
    nrn = header["neuron"]
    tau = math.inf if nrn["tau_m"] is None else nrn["tau_m"]
    params = NeuronParams(nrn["alpha"], tau, nrn["threshold"], nrn["boxcar_width"], nrn["dt"])
    kinds = header["kinds"]
    if any(k not in (HIDDEN, OUTPUT) for k in kinds):
        raise FormatError(f"{path}: unknown layer kinds {kinds}")
    return SpikingModel([LayerSpec(w, b, k) for (w, b), k in zip(pairs, kinds)], params)


# -- metrics ---------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".9g")
    return str(value)


def export_metrics_csv(rows: Iterable, path: Union[str, Path], columns=METRIC_COLUMNS):
    """Write rows (mappings or sequences) with a header; floats keep 9 significant digits."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            values = [row.get(c) for c in columns] if isinstance(row, dict) else list(row)
            writer.writerow([_fmt(v) for v in values])


def read_metrics_csv(path: Union[str, Path]) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def export_mnist_subset(path: Union[str, Path], test_per_class: int = 100, seed: int = 0) -> Path:
    """Write the 5000-image MNIST sample bundled with ``mlxtend`` as IDX files.

    Each class contributes ``500 - test_per_class`` training and
    ``test_per_class`` test images, shuffled with ``seed``. Needs the optional
    ``mlxtend`` package.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise RuntimeError("exporting the MNIST subset needs `pip install mlxtend`") from exc
    x, y = mnist_data()
    x = x.astype(np.uint8)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        test_idx.append(idx[:test_per_class])
        train_idx.append(idx[test_per_class:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    write_mnist(path, (x[train_idx], y[train_idx]), (x[test_idx], y[test_idx]))
    return Path(path)
