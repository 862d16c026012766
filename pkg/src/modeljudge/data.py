"""Desk-scale datasets: synthetic blob images, IDX (MNIST-format) files, stratified splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import jsonio
from .jsonio import FormatError


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, C, H, W), values in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str
    class_count: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError("input values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], name or self.name, self.class_count)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass(frozen=True)
class SplitPlan:
    victim_fraction: float = 0.5
    rng_seed: int = 0


def _templates(class_count: int, side: int, blobs: int, rng: np.random.Generator, cutoff: float,
               span: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    lo, hi = (side - 1) * (0.5 - span / 2), (side - 1) * (0.5 + span / 2)
    out = np.zeros((class_count, side, side))
    for c in range(class_count):
        t = np.zeros((side, side))
        for _ in range(blobs):
            cy, cx = rng.uniform(lo, hi, size=2)
            sigma = rng.uniform(0.7, 1.4)
            t += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        t /= t.max()
        t[t < cutoff] = 0.0
        out[c] = t
    return out


def synth_blobs(class_count: int = 10, per_class: int = 300, image_side: int = 20, rng_seed: int = 0, *,
                template_seed: int | None = None, blobs: int = 3, contrast: float = 0.6,
                noise: float = 0.3, cutoff: float = 0.05, span: float = 0.6, max_shift: int = 1,
                name: str | None = None) -> Dataset:
    """Gaussian-blob class templates with random intensity, shift and speckle.

    Each class owns a fixed template: ``blobs`` Gaussian bumps with centres in
    the middle ``span`` fraction of the image, normalised to peak 1, and
    values under ``cutoff`` set to 0.  A sample multiplies its shifted
    template pixelwise by ``contrast * u + noise * z`` (``u`` uniform in
    [0.75, 1.25] per sample, ``z`` standard normal per pixel) and clips to
    [0, 1].  The noise is multiplicative, so the background stays exactly 0,
    as in digit images.

    ``template_seed`` (default ``rng_seed``) fixes the task and ``rng_seed``
    fixes the draw, so disjoint draws of one task share ``template_seed``.
    """
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if image_side < 4:
        raise ValueError("image_side must be >= 4")
    tseed = rng_seed if template_seed is None else template_seed
    templates = _templates(class_count, image_side, blobs, np.random.default_rng([tseed, 0x7E3]), cutoff, span)
    rng = np.random.default_rng([rng_seed, 0x5A3])
    n = class_count * per_class
    labels = np.repeat(np.arange(class_count), per_class)
    labels = labels[rng.permutation(n)]
    scale = rng.uniform(0.75, 1.25, size=n)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2)) if max_shift else np.zeros((n, 2), int)
    noise_field = rng.normal(0.0, noise, size=(n, image_side, image_side))
    images = np.empty((n, 1, image_side, image_side))
    for i in range(n):
        t = np.roll(templates[labels[i]], tuple(shifts[i]), axis=(0, 1))
        images[i, 0] = np.clip(t * (contrast * scale[i] + noise_field[i]), 0.0, 1.0)
    return Dataset(images, labels, name or f"blobs-c{class_count}-s{image_side}-t{tseed}-r{rng_seed}", class_count)


def _read_header(buf: bytes, magic: int, ndims: int, path) -> tuple[int, ...]:
    need = 4 + 4 * ndims
    if len(buf) < need:
        raise FormatError(f"{path}: truncated header")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndims}I", buf[4:need])


def load_idx(images_path, labels_path, class_count: int = 10, name: str | None = None) -> Dataset:
    """Read an IDX image/label file pair (MNIST raw format); pixels scaled by 1/255."""
    ibuf = Path(images_path).read_bytes()
    lbuf = Path(labels_path).read_bytes()
    n_img, rows, cols = _read_header(ibuf, 0x00000803, 3, images_path)
    (n_lab,) = _read_header(lbuf, 0x00000801, 1, labels_path)
    if n_img != n_lab:
        raise FormatError(f"{images_path}: {n_img} images but {labels_path} has {n_lab} labels")
    body = ibuf[16:]
    if len(body) != n_img * rows * cols:
        raise FormatError(f"{images_path}: expected {n_img * rows * cols} pixel bytes, found {len(body)}")
    if len(lbuf) - 8 != n_lab:
        raise FormatError(f"{labels_path}: expected {n_lab} label bytes, found {len(lbuf) - 8}")
    pixels = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
    labels = np.frombuffer(lbuf[8:], dtype=np.uint8).astype(np.int64)
    if len(labels) and labels.max() >= class_count:
        raise FormatError(f"{labels_path}: label {labels.max()} >= class_count {class_count}")
    return Dataset(pixels.reshape(n_img, 1, rows, cols), labels, name or Path(images_path).stem, class_count)


def stratified_indices(labels: np.ndarray, class_count: int, fraction: float, rng_seed: int) -> np.ndarray:
    """Indices of a stratified random ``fraction`` of the samples, sorted ascending.

    The total taken is ``round(fraction * N)``; it is allotted per class by
    largest remainder (ties to the lower class), so every class receives
    ``floor`` or ``ceil`` of its exact share.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=class_count)
    exact = fraction * counts
    take = np.floor(exact).astype(np.int64)
    remaining = int(round(fraction * len(labels))) - int(take.sum())
    order = sorted(range(class_count), key=lambda c: (-(exact[c] - take[c]), c))
    for c in order[:max(remaining, 0)]:
        if take[c] < counts[c]:
            take[c] += 1
    rng = np.random.default_rng([rng_seed, 0x5B1])
    chosen = []
    for c in range(class_count):
        members = np.flatnonzero(labels == c)
        chosen.append(members[rng.permutation(len(members))[:take[c]]])
    return np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, np.int64)


def split(dataset: Dataset, plan: SplitPlan) -> tuple[Dataset, Dataset]:
    """Disjoint stratified (victim_half, negative_half) partition."""
    idx = stratified_indices(dataset.labels, dataset.class_count, plan.victim_fraction, plan.rng_seed)
    mask = np.zeros(len(dataset), bool)
    mask[idx] = True
    return (dataset.subset(np.flatnonzero(mask), dataset.name + "/victim"),
            dataset.subset(np.flatnonzero(~mask), dataset.name + "/negative"))


def dataset_to_dict(ds: Dataset) -> dict:
    return {
        "format_version": jsonio.FORMAT_VERSION,
        "name": ds.name,
        "class_count": ds.class_count,
        "input_shape": list(ds.input_shape),
        "labels": ds.labels,
        "inputs": ds.inputs.reshape(-1),
    }


def dataset_from_dict(d: dict) -> Dataset:
    try:
        shape = tuple(d["input_shape"])
        labels = np.asarray(d["labels"], dtype=np.int64)
        inputs = np.asarray(d["inputs"], dtype=np.float64)
        if inputs.size != len(labels) * int(np.prod(shape)):
            raise FormatError("dataset.inputs: length does not match labels x input_shape")
        return Dataset(inputs.reshape((len(labels),) + shape), labels, d["name"], d["class_count"])
    except KeyError as exc:
        raise FormatError(f"dataset: missing field {exc}") from None


def save_dataset(ds: Dataset, path) -> str:
    return jsonio.write(path, dataset_to_dict(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_dict(jsonio.read(path))
