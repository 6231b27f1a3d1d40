"""Reading and writing data: IDX files, patches, synthetic teachers, checkpoints, exports.

Class indices follow the model convention: slot 0 is the null class and real
classes are 1..C, so MNIST digit d is stored as class d + 1.
"""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    BadMagic,
    CorruptPayload,
    DimensionMismatch,
    DomainError,
    EmptyAfterFiltering,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
)
from .model import DamModel, LabeledDataset
from .numerics import normalize_to_sphere, sample_uniform_sphere, sample_vmf
from .polytope import TransportMatrix
from .training import OptimizerState

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CHECKPOINT_MAGIC = "dam-checkpoint"
CHECKPOINT_VERSION = 1


def _open_binary(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (gzip allowed by suffix).

    Returns:
        uint8 array of shape (M, H, W) for images or (M,) for labels.

    Raises:
        BadMagic: the magic number is neither the image nor the label code.
        TruncatedFile: the file is shorter than its header says.
        DimensionMismatch: the file has trailing bytes past the advertised size.
    """
    raw = _open_binary(path)
    if len(raw) < 4:
        raise TruncatedFile("file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise BadMagic(f"unexpected IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile("file too short for its dimension list")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    body = len(raw) - header
    if body < size:
        raise TruncatedFile(f"expected {size} data bytes, found {body}")
    if body > size:
        raise DimensionMismatch(f"expected {size} data bytes, found {body}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def normalize_dataset(
    images: np.ndarray,
    labels: Optional[np.ndarray] = None,
    label_smoothing: float = 0.0,
    n_classes: Optional[int] = None,
) -> LabeledDataset:
    """Flatten images to unit rows and turn class indices into soft labels.

    Args:
        images: array with one example per leading index.
        labels: real class indices in 1..C, or None for unlabeled data.
        label_smoothing: s in [0, 1]; the soft row is (1 - s) one-hot plus s / C
            on every real class, so it still sums to one. The null class gets 0.
        n_classes: C; inferred from the largest label when omitted.

    Returns:
        A dataset whose meta holds the number of dropped all-zero rows under
        "dropped" and the kept row indices under "kept". Without labels every
        row puts its mass on the null class as a placeholder.

    Raises:
        EmptyAfterFiltering: every row was zero.
    """
    flat = np.asarray(images, dtype=float).reshape(len(images), -1)
    if len(flat) == 0:
        raise EmptyAfterFiltering("no images given")
    if not 0.0 <= label_smoothing <= 1.0:
        raise DomainError("label_smoothing must lie in [0, 1]")
    norms = np.linalg.norm(flat, axis=1)
    kept = np.nonzero(norms > 0)[0]
    if kept.size == 0:
        raise EmptyAfterFiltering("every image has zero norm")
    inputs = flat[kept] / norms[kept, None]
    if labels is None:
        c = 0 if n_classes is None else int(n_classes)
        soft = np.zeros((kept.size, c + 1))
        soft[:, 0] = 1.0
    else:
        labels = np.asarray(labels, dtype=int).ravel()
        if len(labels) != len(flat):
            raise DimensionMismatch("one label per image is required")
        c = int(labels.max()) if n_classes is None else int(n_classes)
        if labels.min() < 1 or labels.max() > c:
            raise DomainError("labels must be real class indices 1..C")
        soft = np.zeros((kept.size, c + 1))
        soft[:, 1:] = label_smoothing / c
        soft[np.arange(kept.size), labels[kept]] += 1.0 - label_smoothing
    return LabeledDataset(inputs, soft, {"dropped": int(len(flat) - kept.size), "kept": kept})


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem} not found in {directory}")


def load_mnist(directory, split: str = "train", label_smoothing: float = 0.0) -> LabeledDataset:
    """Read the standard MNIST IDX files from a directory; digit d becomes class d + 1."""
    if split not in _MNIST_FILES:
        raise DomainError("split must be 'train' or 'test'")
    directory = Path(directory)
    images_name, labels_name = _MNIST_FILES[split]
    images = load_idx(_find(directory, images_name))
    labels = load_idx(_find(directory, labels_name))
    if len(images) != len(labels):
        raise DimensionMismatch("image and label counts differ")
    return normalize_dataset(images, labels.astype(int) + 1, label_smoothing, n_classes=10)


def load_digits_csv(path, label_smoothing: float = 0.0, n_classes: Optional[int] = None) -> LabeledDataset:
    """Read rows of pixel values followed by a 0-based digit label (gzip allowed)."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",")
    table = np.atleast_2d(table)
    return normalize_dataset(table[:, :-1], table[:, -1].astype(int) + 1, label_smoothing, n_classes)


def extract_patches(images: np.ndarray, size: int, stride: int) -> LabeledDataset:
    """All stride-aligned size x size windows of every image, as unit rows.

    Windows are ordered image by image, then row-major over window positions.
    Zero windows are dropped and counted in meta["dropped"].
    """
    images = np.asarray(images, dtype=float)
    if images.ndim == 2:
        images = images[None]
    _, height, width = images.shape
    if size < 1 or stride < 1 or size > min(height, width):
        raise DomainError("need 1 <= size <= image side and stride >= 1")
    windows = np.lib.stride_tricks.sliding_window_view(images, (size, size), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    return normalize_dataset(windows.reshape(-1, size * size))


@dataclass
class TeacherSpec:
    """A planted model: memories w*, class profiles g* (rows sum to one) and beta*."""

    memories: np.ndarray
    class_profiles: np.ndarray  # (P*, C + 1), column 0 is the null class
    beta_star: float
    class_marginal: np.ndarray  # (C + 1,)

    @property
    def n_dim(self) -> int:
        return self.memories.shape[1]

    @property
    def upsilon(self) -> float:
        """Teacher noise level beta* / N."""
        return self.beta_star / self.n_dim

    def to_model(self) -> DamModel:
        """The teacher as a DAM with p = g* / P* and an empty null slot."""
        p_star = len(self.memories)
        entries = np.vstack([np.zeros(self.class_profiles.shape[1]), self.class_profiles / p_star])
        h = np.concatenate([[0.0], np.full(p_star, 1.0 / p_star)])
        return DamModel(self.memories.copy(), TransportMatrix(entries, h, entries.sum(axis=0)), self.beta_star)


def generate_teacher_student(
    n_teacher: int,
    n_dim: int,
    n_classes: int,
    beta_star: float,
    n_examples: int,
    class_marginal: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    profile_smoothing: float = 0.0,
) -> tuple[TeacherSpec, LabeledDataset]:
    """Draw a random teacher and M labeled examples from it.

    Each teacher memory gets one class drawn from class_marginal (over the C
    real classes; uniform by default); profile_smoothing spreads that much
    mass uniformly over the real classes. Every example picks a teacher unit
    uniformly, draws x from the vMF around its memory with concentration
    beta*, and a class from the unit's profile. meta["teacher_unit"] records
    the generating unit.
    """
    if n_teacher < 1 or n_dim < 2 or n_classes < 1 or n_examples < 1:
        raise DomainError("sizes must be positive and n_dim >= 2")
    if not beta_star > 0:
        raise DomainError("beta_star must be positive")
    if not 0.0 <= profile_smoothing <= 1.0:
        raise DomainError("profile_smoothing must lie in [0, 1]")
    rng = np.random.default_rng() if rng is None else rng
    if class_marginal is None:
        marginal = np.full(n_classes, 1.0 / n_classes)
    else:
        marginal = np.asarray(class_marginal, dtype=float)
        if marginal.shape != (n_classes,) or np.any(marginal < 0) or marginal.sum() <= 0:
            raise DomainError("class_marginal must be a nonnegative vector over the C real classes")
        marginal = marginal / marginal.sum()
    memories = sample_uniform_sphere(n_dim, rng, size=n_teacher)
    teacher_class = 1 + rng.choice(n_classes, size=n_teacher, p=marginal)
    profiles = np.zeros((n_teacher, n_classes + 1))
    profiles[:, 1:] = profile_smoothing / n_classes
    profiles[np.arange(n_teacher), teacher_class] += 1.0 - profile_smoothing
    units = rng.integers(n_teacher, size=n_examples)
    inputs = np.empty((n_examples, n_dim))
    for mu in range(n_teacher):
        idx = np.nonzero(units == mu)[0]
        if idx.size:
            inputs[idx] = sample_vmf(memories[mu], beta_star, rng, size=idx.size)
    u = rng.random(n_examples)
    cumulative = np.cumsum(profiles[units], axis=1)
    classes = np.minimum((u[:, None] >= cumulative).sum(axis=1), n_classes)
    labels = np.zeros((n_examples, n_classes + 1))
    labels[np.arange(n_examples), classes] = 1.0
    spec = TeacherSpec(memories, profiles, float(beta_star), np.concatenate([[0.0], profiles[:, 1:].mean(axis=0)]))
    return spec, LabeledDataset(inputs, labels, {"teacher_unit": units})


def save_checkpoint(path, model: DamModel, opt: Optional[OptimizerState] = None, seed: Optional[int] = None) -> None:
    """Write a text header, a blank line, then the little-endian float64 payload.

    Payload order: memories, class weights (both row-major), hidden marginals,
    class marginals, beta, varsigma, then the optimizer buffers if present.
    """
    p, n = model.memories.shape
    c = model.n_classes
    lines = [
        CHECKPOINT_MAGIC,
        f"version {CHECKPOINT_VERSION}",
        f"n_hidden {p}",
        f"n_dim {n}",
        f"n_classes {c}",
        f"beta {model.beta!r}",
        f"varsigma {model.varsigma!r}",
        f"optimizer {int(opt is not None)}",
        f"seed {'none' if seed is None else int(seed)}",
    ]
    parts = [
        model.memories.ravel(),
        model.class_weights.entries.ravel(),
        model.class_weights.row_marginals,
        model.class_weights.col_marginals,
        np.array([model.beta, model.varsigma]),
    ]
    if opt is not None:
        opt.check(model)
        parts += [opt.memories.ravel(), opt.class_weights.ravel(), np.array([opt.beta])]
    payload = np.concatenate(parts).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("ascii"))
        fh.write(payload)


def load_checkpoint(path) -> tuple[DamModel, Optional[OptimizerState], dict]:
    """Read a checkpoint written by save_checkpoint.

    Returns:
        (model, optimizer state or None, header fields).

    Raises:
        VersionMismatch: the header version is not the current one.
        CorruptPayload: the header is malformed or the payload length is wrong.
    """
    raw = Path(path).read_bytes()
    end = raw.find(b"\n\n")
    if end < 0:
        raise CorruptPayload("no header terminator")
    try:
        lines = raw[:end].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise CorruptPayload("header is not ASCII") from exc
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise CorruptPayload("not a checkpoint file")
    header = {}
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        header[key] = value
    try:
        version = int(header["version"])
        p, n, c = (int(header[k]) for k in ("n_hidden", "n_dim", "n_classes"))
        has_opt = header.get("optimizer", "0") == "1"
    except (KeyError, ValueError) as exc:
        raise CorruptPayload(f"bad header: {exc}") from exc
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body = raw[end + 2 :]
    sizes = [p * n, (p + 1) * (c + 1), p + 1, c + 1, 2]
    if has_opt:
        sizes += [p * n, (p + 1) * (c + 1), 1]
    if len(body) != 8 * sum(sizes):
        raise CorruptPayload(f"payload has {len(body)} bytes, header implies {8 * sum(sizes)}")
    values = np.frombuffer(body, dtype="<f8").astype(float)
    chunks = np.split(values, np.cumsum(sizes)[:-1])
    try:
        weights = TransportMatrix(chunks[1].reshape(p + 1, c + 1), chunks[2].copy(), chunks[3].copy())
    except ValueError as exc:
        raise CorruptPayload(f"class weights invalid: {exc}") from exc
    model = DamModel(chunks[0].reshape(p, n), weights, float(chunks[4][0]), float(chunks[4][1]))
    opt = None
    if has_opt:
        opt = OptimizerState(chunks[5].reshape(p, n), chunks[6].reshape(p + 1, c + 1), float(chunks[7][0]))
    return model, opt, header


def memory_image(memory: np.ndarray, side: int) -> np.ndarray:
    """Min-max scale one memory to a side x side uint8 image; constant rows give 128."""
    memory = np.asarray(memory, dtype=float)
    if memory.size != side * side:
        raise ShapeMismatch(f"memory of length {memory.size} is not a {side}x{side} image")
    lo, hi = memory.min(), memory.max()
    if hi == lo:
        return np.full((side, side), 128, dtype=np.uint8)
    return np.rint(255.0 * (memory - lo) / (hi - lo)).astype(np.uint8).reshape(side, side)


def export_memories_pgm(model: DamModel, side: int, directory) -> list:
    """Write one binary PGM (P5, maxval 255) per memory; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = len(str(max(model.n_hidden - 1, 0)))
    paths = []
    for mu, memory in enumerate(model.memories):
        image = memory_image(memory, side)
        path = directory / f"memory_{mu:0{width}d}.pgm"
        with open(path, "wb") as fh:
            fh.write(f"P5\n{side} {side}\n255\n".encode("ascii"))
            fh.write(image.tobytes())
        paths.append(path)
    return paths


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM with maxval below 256."""
    raw = Path(path).read_bytes()
    fields = raw.split(maxsplit=4)
    if fields[0] != b"P5":
        raise BadMagic("not a binary PGM")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval > 255:
        raise DomainError("only 8-bit PGM is supported")
    data = fields[4] if len(fields) > 4 else b""
    if len(data) < width * height:
        raise TruncatedFile("PGM pixel data is short")
    return np.frombuffer(data[: width * height], dtype=np.uint8).reshape(height, width)


def export_overlaps_csv(patterns: np.ndarray, snapshots: Sequence, path, n_patterns: Optional[int] = None) -> int:
    """Write overlaps between memories and the first K patterns for each snapshot.

    Args:
        patterns: (M, N) unit rows.
        snapshots: (epoch, model or memory matrix) pairs.
        n_patterns: K; all patterns when omitted.

    Returns:
        The number of data rows written (snapshots x P).
    """
    patterns = np.asarray(patterns, dtype=float)
    k = len(patterns) if n_patterns is None else min(int(n_patterns), len(patterns))
    rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "unit"] + [f"pattern_{i}" for i in range(k)])
        for epoch, snap in snapshots:
            memories = snap.memories if isinstance(snap, DamModel) else np.asarray(snap, dtype=float)
            if memories.shape[1] != patterns.shape[1]:
                raise ShapeMismatch("memories and patterns differ in dimension")
            overlaps = memories @ patterns[:k].T
            for mu, row in enumerate(overlaps):
                writer.writerow([epoch, mu] + [repr(float(v)) for v in row])
                rows += 1
    return rows


def write_table_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Plain CSV with a header row; floats are written with repr for exact round-trip."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
