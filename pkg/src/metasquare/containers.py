"""Binary containers for weights and datasets, plus index-range splits.

Weight container ("MSAT"): magic, u16 version, u32 metadata length, UTF-8
JSON descriptor, then raw little-endian array payloads in descriptor
order.  Round-trips are bitwise.

Dataset container ("MSAD"): magic, u16 version, u32 counts (n, c, h, w,
num_classes), n u16 labels, n*c*h*w u8 pixels decoded as v / 255.
"""

import json
import struct

import numpy as np

from . import nn
from .classifier import ARCHITECTURES, Classifier
from .controller import ColorController, ControllerConfig, SizeController

WEIGHTS_MAGIC = b"MSAT"
DATASET_MAGIC = b"MSAD"
VERSION = 1

_DTYPES = {"f4": "<f4", "f8": "<f8"}


class ContainerError(ValueError):
    """Malformed container: bad magic, version, metadata or payload size."""


def save_weights(path, arrays, meta=None):
    """arrays: list of (name, ndarray); meta: extra JSON-serializable dict."""
    meta = dict(meta or {})
    desc = []
    payload = b""
    for name, arr in arrays:
        arr = np.asarray(arr)
        code = "f4" if arr.dtype == np.float32 else "f8"
        desc.append({"name": name, "shape": list(arr.shape), "dtype": code})
        payload += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    meta["arrays"] = desc
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_weights(path):
    """Returns (arrays, meta) with arrays as a list of (name, ndarray)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != WEIGHTS_MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    (mlen,) = struct.unpack_from("<I", raw, 6)
    try:
        meta = json.loads(raw[10:10 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt metadata ({exc})") from None
    off = 10 + mlen
    arrays = []
    for entry in meta["arrays"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * dt.itemsize
        if off + nbytes > len(raw):
            raise ContainerError(f"{path}: truncated payload at {entry['name']}")
        arr = np.frombuffer(raw[off:off + nbytes], dtype=dt).reshape(entry["shape"])
        arrays.append((entry["name"], arr.copy()))
        off += nbytes
    if off != len(raw):
        raise ContainerError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays, meta


def save_dataset(path, pixels_u8, labels, num_classes):
    pixels_u8 = np.asarray(pixels_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint16)
    n, c, h, w = pixels_u8.shape
    if labels.shape != (n,):
        raise ContainerError("labels length does not match image count")
    if labels.size and int(labels.max()) >= num_classes:
        raise ContainerError("label out of range")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<5I", n, c, h, w, num_classes))
        fh.write(labels.astype("<u2").tobytes())
        fh.write(pixels_u8.tobytes())


class Dataset:
    def __init__(self, images, labels, num_classes):
        self.images = images  # float64 in [0, 1], shape (n, c, h, w)
        self.labels = labels
        self.num_classes = num_classes

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]


def load_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DATASET_MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    n, c, h, w, k = struct.unpack_from("<5I", raw, 6)
    off = 6 + 20
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    count = n * c * h * w
    if off + count != len(raw):
        raise ContainerError(f"{path}: payload size mismatch")
    pix = np.frombuffer(raw, dtype=np.uint8, count=count, offset=off)
    if labels.size and labels.max() >= k:
        raise ContainerError(f"{path}: label exceeds num_classes")
    images = pix.reshape(n, c, h, w).astype(np.float64) / 255.0
    return Dataset(images, labels, k)


# ---------------------------------------------------------------------------
# model and controller serialization

def save_classifier(path, classifier, meta=None):
    meta = dict(meta or {})
    meta.update({"kind": "classifier", "architecture": classifier.architecture,
                 "input_shape": list(classifier.input_shape),
                 "num_classes": classifier.num_classes})
    arrays = [(f"p{i}", p) for i, p in enumerate(classifier.net.params)]
    save_weights(path, arrays, meta)


def load_classifier(path):
    arrays, meta = load_weights(path)
    if meta.get("kind") != "classifier":
        raise ContainerError(f"{path}: not a classifier container")
    rng = np.random.default_rng(0)
    f = ARCHITECTURES[meta["architecture"]](rng, tuple(meta["input_shape"]),
                                            meta["num_classes"])
    f.net.set_params([a for _, a in arrays])
    return f


def save_controllers(path, size_ctrl, color_ctrl, meta=None):
    meta = dict(meta or {})
    cfg = size_ctrl.cfg
    meta.update({"kind": "controllers", "num_colors": color_ctrl.num_colors,
                 "config": {"gamma": cfg.gamma, "r0": cfg.r0, "p_min": cfg.p_min,
                            "temperature": cfg.temperature, "horizon": cfg.horizon}})
    arrays = [(f"size.p{i}", p) for i, p in enumerate(size_ctrl.net.params)]
    arrays += [(f"color.p{i}", p) for i, p in enumerate(color_ctrl.net.params)]
    save_weights(path, arrays, meta)


def load_controllers(path):
    arrays, meta = load_weights(path)
    if meta.get("kind") != "controllers":
        raise ContainerError(f"{path}: not a controller container")
    cfg = ControllerConfig(**meta["config"])
    size_ctrl = SizeController(cfg=cfg)
    color_ctrl = ColorController(meta["num_colors"], cfg=cfg)
    by_name = dict(arrays)
    size_ctrl.net.set_params([by_name[f"size.p{i}"]
                              for i in range(len(size_ctrl.net.params))])
    color_ctrl.net.set_params([by_name[f"color.p{i}"]
                               for i in range(len(color_ctrl.net.params))])
    return size_ctrl, color_ctrl, meta


# ---------------------------------------------------------------------------
# splits

def split_indices(n, train_count, eval_count):
    """Fixed index ranges: the first train_count images for meta-training,
    the last eval_count for evaluation.  Never shuffled, always disjoint."""
    if train_count + eval_count > n:
        raise ValueError(f"splits overlap: {train_count} + {eval_count} > {n}")
    return list(range(train_count)), list(range(n - eval_count, n))
