"""Data ingestion and one-class split protocols.

Images are held as float32 numpy arrays shaped ``(C, H, W)`` with values
in [0, 1]. Collections are :class:`LabeledImageSet` (raw class-labelled
data) and :class:`OneClassTask` (a train/test split with roles and
binary labels).
"""

import gzip
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DataError, InvalidInputError, ParseError

log = logging.getLogger(__name__)

NORMAL, PSEUDO_ANOMALY, REAL_ANOMALY = "normal", "pseudo_anomaly", "real_anomaly"

# IDX dtype byte -> big-endian numpy dtype
IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


# --------------------------------------------------------------------------
# IDX format


def parse_idx(data, scale=True):
    """Decode an IDX byte string.

    Returns ``(array, shape)``. Unsigned-byte payloads are divided by 255
    when ``scale`` is true; every other dtype is returned in its native
    numeric type. Raises :class:`ParseError` carrying the byte offset of
    the first problem.
    """
    data = bytes(data)
    if len(data) < 4:
        raise ParseError(f"header needs 4 bytes, got {len(data)}", len(data))
    for offset in (0, 1):
        if data[offset] != 0:
            raise ParseError(f"bad magic: byte {offset} is 0x{data[offset]:02x}, expected 0x00", offset)
    code, ndim = data[2], data[3]
    if code not in IDX_DTYPES:
        raise ParseError(f"unsupported dtype code 0x{code:02x}", 2)
    if ndim == 0:
        raise ParseError("zero-dimensional IDX payloads are not supported", 3)
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise ParseError(
            f"truncated header: {ndim} dimensions need {header_len} bytes, got {len(data)}",
            len(data),
        )
    shape = struct.unpack(f">{ndim}I", data[4:header_len])
    dtype = IDX_DTYPES[code]
    expected = math.prod(shape) * dtype.itemsize
    available = len(data) - header_len
    if available < expected:
        raise ParseError(
            f"truncated payload: expected {expected} bytes, found {available}", len(data)
        )
    if available > expected:
        raise ParseError(
            f"{available - expected} trailing bytes after payload", header_len + expected
        )
    arr = np.frombuffer(data, dtype=dtype, offset=header_len).reshape(shape)
    if code == 0x08 and scale:
        return arr.astype(np.float64) / 255.0, shape
    return arr.astype(dtype.newbyteorder("=")), shape


def write_idx(array, code=0x08, scaled=True):
    """Encode ``array`` as IDX bytes; inverse of :func:`parse_idx`."""
    if code not in IDX_DTYPES:
        raise InvalidInputError(f"unsupported dtype code 0x{code:02x}")
    array = np.asarray(array)
    if array.ndim == 0 or array.ndim > 255:
        raise InvalidInputError("IDX arrays need 1..255 dimensions")
    if code == 0x08 and scaled:
        array = np.rint(array * 255.0)
    header = struct.pack(">BBBB", 0, 0, code, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=IDX_DTYPES[code]).tobytes()


def load_idx(path, scale=True):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise DataError(f"cannot read IDX file {path}: {exc}") from exc
    try:
        return parse_idx(raw, scale=scale)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}", exc.offset) from None


# --------------------------------------------------------------------------
# containers


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    class_ids: np.ndarray  # (N,) int64
    split: str
    ids: list = None
    sources: list = None  # provenance: file path or subcategory name

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.images.ndim != 4:
            raise InvalidInputError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.class_ids):
            raise InvalidInputError("images and class_ids differ in length")
        if (self.class_ids < 0).any():
            raise InvalidInputError("class ids must be nonnegative")
        if self.split not in ("train", "test"):
            raise InvalidInputError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.ids is None:
            self.ids = [f"{self.split}-{i:06d}" for i in range(len(self.images))]
        if self.sources is None:
            self.sources = [""] * len(self.images)

    def __len__(self):
        return len(self.images)


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray
    label: int  # 0 normal, 1 anomalous
    role: str = NORMAL
    class_id: int = -1
    source: str = ""

    def manifest_row(self):
        return {
            "id": self.id,
            "label": int(self.label),
            "role": self.role,
            "class_id": int(self.class_id),
            "source": self.source,
        }


@dataclass
class OneClassTask:
    target_class: int
    train: list
    test: list
    anomaly_pool: list = field(default_factory=list)
    seed: int = None

    def check(self, allow_train_anomalies=True):
        train_ids = {r.id for r in self.train}
        test_ids = {r.id for r in self.test}
        leaked = train_ids & test_ids
        if leaked:
            raise InvalidInputError(f"{len(leaked)} ids appear in both train and test")
        if not allow_train_anomalies and any(r.label for r in self.train):
            raise InvalidInputError("train split contains anomalous records")
        return self

    def train_arrays(self):
        """``(images, roles)`` where roles are 1 for real anomalies."""
        return (
            np.stack([r.image for r in self.train]),
            np.array([int(r.role == REAL_ANOMALY) for r in self.train], dtype=np.int64),
        )

    def test_arrays(self):
        """``(images, labels, ids)`` for the test split."""
        return (
            np.stack([r.image for r in self.test]),
            np.array([r.label for r in self.test], dtype=np.int64),
            [r.id for r in self.test],
        )

    def manifest(self):
        return {
            "target_class": self.target_class,
            "seed": self.seed,
            "train": [r.manifest_row() for r in self.train],
            "test": [r.manifest_row() for r in self.test],
        }

    def write_manifest(self, path):
        Path(path).write_text(json.dumps(self.manifest(), indent=1))


def _records(data, idx, label, role=NORMAL):
    return [
        SampleRecord(
            id=data.ids[i],
            image=data.images[i],
            label=label,
            role=role,
            class_id=int(data.class_ids[i]),
            source=data.sources[i],
        )
        for i in idx
    ]


# --------------------------------------------------------------------------
# split protocols


def one_class_split(train_set, test_set, target, rng):
    """One target class is normal; half the non-target test images are anomalies.

    Train = every training image of ``target``. Test = every test image
    of ``target`` (label 0) plus a uniform random ``floor(n/2)`` subset of
    the ``n`` non-target test images (label 1). Non-target training images
    are kept aside as ``anomaly_pool`` for :func:`inject_anomalies`.
    """
    train_idx = np.flatnonzero(train_set.class_ids == target)
    test_norm = np.flatnonzero(test_set.class_ids == target)
    if len(train_idx) == 0:
        raise InvalidInputError(f"target class {target} has no training images")
    if len(test_norm) == 0:
        raise InvalidInputError(f"target class {target} has no test images")
    others = np.flatnonzero(test_set.class_ids != target)
    chosen = np.sort(rng.choice(others, size=len(others) // 2, replace=False))
    pool_idx = np.flatnonzero(train_set.class_ids != target)
    task = OneClassTask(
        target_class=int(target),
        train=_records(train_set, train_idx, 0),
        test=_records(test_set, test_norm, 0) + _records(test_set, chosen, 1),
        anomaly_pool=_records(train_set, pool_idx, 1, REAL_ANOMALY),
    )
    return task.check(allow_train_anomalies=False)


def inject_anomalies(task, amount, rng, per_subcategory=False):
    """Move a few labelled anomalies into the training split.

    ``amount`` is a fraction of the current number of training normals
    (a float, count = floor(fraction * normals)) or an absolute count (an
    int). With ``per_subcategory`` the int count is taken from each
    distinct anomaly ``source`` separately. Candidates come from
    ``task.anomaly_pool`` when it is non-empty, otherwise from the test
    anomalies; either way the chosen records are absent from the returned
    test split.
    """
    n_normals = sum(1 for r in task.train if r.label == 0)
    if isinstance(amount, (int, np.integer)) and not isinstance(amount, bool):
        count = int(amount)
    else:
        if not 0.0 <= float(amount) <= 1.0:
            raise InvalidInputError(f"anomaly fraction {amount} outside [0, 1]")
        # tolerance guards against 0.01 * 6000 == 59.999...
        count = int(math.floor(float(amount) * n_normals + 1e-9))
    if count < 0:
        raise InvalidInputError("anomaly count must be nonnegative")
    if count == 0:
        return task

    from_pool = bool(task.anomaly_pool)
    candidates = task.anomaly_pool if from_pool else [r for r in task.test if r.label == 1]
    if per_subcategory:
        groups = {}
        for i, r in enumerate(candidates):
            groups.setdefault(r.source, []).append(i)
        picked = []
        for name in sorted(groups):
            members = groups[name]
            if count > len(members):
                raise InvalidInputError(
                    f"subcategory {name!r} has {len(members)} anomalies, {count} requested"
                )
            picked += sorted(rng.choice(members, size=count, replace=False).tolist())
    else:
        if count > len(candidates):
            raise InvalidInputError(
                f"requested {count} anomalies but only {len(candidates)} are available"
            )
        picked = sorted(rng.choice(len(candidates), size=count, replace=False).tolist())

    chosen_ids = {candidates[i].id for i in picked}
    injected = [
        SampleRecord(r.id, r.image, 1, REAL_ANOMALY, r.class_id, r.source)
        for r in (candidates[i] for i in picked)
    ]
    new = OneClassTask(
        target_class=task.target_class,
        train=task.train + injected,
        test=[r for r in task.test if r.id not in chosen_ids],
        anomaly_pool=[r for r in task.anomaly_pool if r.id not in chosen_ids],
        seed=task.seed,
    )
    return new.check()


# --------------------------------------------------------------------------
# image helpers


def resize_images(images, size):
    """Bilinear resize of an ``(N, C, H, W)`` array to ``size`` x ``size``."""
    if images.shape[-1] == size and images.shape[-2] == size:
        return images.astype(np.float32)
    t = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out.clamp_(0.0, 1.0).numpy()


def read_image(path, size, channels):
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr[None] if channels == 1 else arr.transpose(2, 0, 1)


def list_images(folder):
    return sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_folder_dataset(root, image_size=256, channels=3):
    """Read an MVTec-style category folder.

    Layout: ``root/train/good/*`` and ``root/test/<subcategory>/*``.
    Test class ids are 0 for ``good`` and 1 for every other subcategory;
    the subcategory name is kept in ``sources``. Files are read in
    lexicographic path order.
    """
    root = Path(root)
    good = root / "train" / "good"
    if not good.is_dir():
        raise DataError(f"missing training folder {good}")
    train_files = list_images(good)
    if not train_files:
        raise DataError(f"no images in {good}")
    test_root = root / "test"
    if not test_root.is_dir():
        raise DataError(f"missing test folder {test_root}")
    test_files, test_ids, test_sources = [], [], []
    for sub in sorted(p for p in test_root.iterdir() if p.is_dir()):
        for f in list_images(sub):
            test_files.append(f)
            test_sources.append(sub.name)
    if not test_files:
        raise DataError(f"no test images under {test_root}")
    rel = lambda p: p.relative_to(root).as_posix()  # noqa: E731
    train = LabeledImageSet(
        np.stack([read_image(f, image_size, channels) for f in train_files]),
        np.zeros(len(train_files), dtype=np.int64),
        "train",
        ids=[rel(f) for f in train_files],
        sources=["good"] * len(train_files),
    )
    test = LabeledImageSet(
        np.stack([read_image(f, image_size, channels) for f in test_files]),
        np.array([0 if s == "good" else 1 for s in test_sources], dtype=np.int64),
        "test",
        ids=[rel(f) for f in test_files],
        sources=test_sources,
    )
    return train, test


def folder_task(train_set, test_set):
    """OneClassTask for a folder dataset: train/good are normals, test defects are anomalies."""
    task = OneClassTask(
        target_class=0,
        train=_records(train_set, range(len(train_set)), 0),
        test=[
            SampleRecord(
                test_set.ids[i],
                test_set.images[i],
                int(test_set.class_ids[i] != 0),
                NORMAL if test_set.class_ids[i] == 0 else REAL_ANOMALY,
                int(test_set.class_ids[i]),
                test_set.sources[i],
            )
            for i in range(len(test_set))
        ],
    )
    return task.check(allow_train_anomalies=False)


# Per-category standard augmentation for industrial images:
# which flips are label-preserving, and whether a slight rigid jitter is applied.
STANDARD_AUGMENT = {
    "carpet": ("hv", True), "grid": ("hv", True), "leather": ("hv", True),
    "tile": ("hv", True), "wood": ("hv", True), "bottle": ("hv", True),
    "hazelnut": ("hv", True), "metal_nut": ("", True), "screw": ("hv", True),
    "pill": ("h", True), "capsule": ("", True), "cable": ("", True),
    "toothbrush": ("h", True), "transistor": ("", True), "zipper": ("hv", True),
}
RIGID_MAX_DEGREES = 5.0
RIGID_MAX_SHIFT = 0.02


def standard_augment(batch, category, rng):
    """Label-preserving augmentation: random flips plus a small rigid jitter.

    The jitter is a rotation of at most 5 degrees and a translation of at
    most 2% of the image side. Unknown categories get horizontal flips
    and the jitter.
    """
    flips, rigid = STANDARD_AUGMENT.get(category, ("h", True))
    n = batch.shape[0]
    out = batch.clone()
    if "h" in flips:
        sel = torch.as_tensor(rng.random(n) < 0.5)
        out[sel] = out[sel].flip(-1)
    if "v" in flips:
        sel = torch.as_tensor(rng.random(n) < 0.5)
        out[sel] = out[sel].flip(-2)
    if rigid:
        angle = np.deg2rad(rng.uniform(-RIGID_MAX_DEGREES, RIGID_MAX_DEGREES, n))
        shift = rng.uniform(-RIGID_MAX_SHIFT, RIGID_MAX_SHIFT, (n, 2)) * 2  # grid units span 2
        theta = np.zeros((n, 2, 3))
        theta[:, 0, 0] = theta[:, 1, 1] = np.cos(angle)
        theta[:, 0, 1] = -np.sin(angle)
        theta[:, 1, 0] = np.sin(angle)
        theta[:, :, 2] = shift
        theta = torch.as_tensor(theta, dtype=out.dtype)
        grid = F.affine_grid(theta, list(out.shape), align_corners=False)
        out = F.grid_sample(out, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out


# --------------------------------------------------------------------------
# bundled / synthetic corpora


def load_mnist_subset(image_size=32, n_train_per_class=400):
    """The 5,000-image MNIST subset that ships with mlxtend, resized to ``image_size``.

    Each digit has 500 images; the first ``n_train_per_class`` of every
    digit form the training split and the rest the test split.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover
        raise DataError("the bundled MNIST subset needs the 'mlxtend' package") from exc
    X, y = mnist_data()
    images = resize_images((X / 255.0).reshape(-1, 1, 28, 28), image_size)
    y = y.astype(np.int64)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        train_idx += idx[:n_train_per_class].tolist()
        test_idx += idx[n_train_per_class:].tolist()
    return (
        LabeledImageSet(images[train_idx], y[train_idx], "train",
                        ids=[f"mnist5k-{i:04d}" for i in train_idx]),
        LabeledImageSet(images[test_idx], y[test_idx], "test",
                        ids=[f"mnist5k-{i:04d}" for i in test_idx]),
    )


def load_idx_dataset(train_images, train_labels, test_images, test_labels, image_size=32):
    """Four IDX files (MNIST/fashion-MNIST layout) -> (train, test) sets."""
    sets = []
    for split, img_path, lab_path in (
        ("train", train_images, train_labels),
        ("test", test_images, test_labels),
    ):
        imgs, shape = load_idx(img_path)
        labels, _ = load_idx(lab_path, scale=False)
        if imgs.ndim != 3:
            raise DataError(f"{img_path}: expected (N, H, W) images, got shape {shape}")
        sets.append(LabeledImageSet(resize_images(imgs[:, None], image_size), labels, split))
    return tuple(sets)


SHAPES = ("disk", "cross", "hbar", "ring", "triangle", "diagonal")


def _render(shape, size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size / 2 - 0.5 + rng.uniform(-2, 2, 2)
    r = size * rng.uniform(0.26, 0.34)
    t = size * rng.uniform(0.07, 0.10)
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        m = np.hypot(dy, dx) <= r
    elif shape == "ring":
        d = np.hypot(dy, dx)
        m = (d <= r) & (d >= r - 1.2 * t)
    elif shape == "cross":
        m = ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    elif shape == "hbar":
        m = (np.abs(dy) <= 1.3 * t) & (np.abs(dx) <= r)
    elif shape == "triangle":
        m = (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    elif shape == "diagonal":
        m = (np.abs(dy - dx) <= 1.4 * t) & (np.abs(dy + dx) <= 1.6 * r)
    else:
        raise InvalidInputError(f"unknown shape {shape!r}")
    img = m * rng.uniform(0.75, 1.0) + rng.normal(0.0, 0.03, m.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthesize_shapes(n_per_class, classes, image_size=32, rng=None):
    """Deterministic glyph corpus: class k renders ``SHAPES[k]`` with random jitter.

    Returns ``(train, test)`` with ``n_per_class`` images per class in each split.
    """
    if image_size != 32:
        raise InvalidInputError("synthetic shapes are rendered at 32x32 only")
    if not 1 <= classes <= len(SHAPES):
        raise InvalidInputError(f"classes must be in 1..{len(SHAPES)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    out = []
    for split in ("train", "test"):
        imgs, labels = [], []
        for c in range(classes):
            for _ in range(n_per_class):
                imgs.append(_render(SHAPES[c], image_size, rng)[None])
                labels.append(c)
        out.append(LabeledImageSet(np.stack(imgs), labels, split,
                                   ids=[f"shapes-{split}-{i:05d}" for i in range(len(imgs))]))
    return tuple(out)
