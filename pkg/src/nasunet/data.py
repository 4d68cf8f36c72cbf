"""Synthetic layered images, preprocessing, crop/flip augmentation, splits and IO.

Each synthetic image is a stack of horizontal bands whose boundaries are
smooth sums of sinusoids; the label of a pixel is the index of its band, so
labels never decrease down a column.  Splits are made per source image, so
overlapping crops of one source never straddle train and test.
"""
import dataclasses
import os

import numpy as np
from scipy import ndimage

from . import rng as rngmod

SPLIT_NAMES = {2: ("train", "test"), 3: ("train", "val", "test")}
IMAGE_LEVELS = 65535


@dataclasses.dataclass
class ImageSample:
    image: np.ndarray
    label: np.ndarray
    id: str
    source: str = ""

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise ValueError(f"{self.id}: image {self.image.shape} and label {self.label.shape} differ")
        if not self.source:
            self.source = self.id


@dataclasses.dataclass
class SynthConfig:
    num_images: int = 200
    height: int = 64
    width: int = 64
    num_layers: int = 4
    thickness: tuple = ()  # fractions of the height per layer; equal if empty
    max_amplitude: float = 2.0  # pixels, per sinusoid component
    min_frequency: float = 0.5  # cycles across the width
    max_frequency: float = 2.0
    max_components: int = 3
    intensities: tuple = (0.1, 0.6, 0.3, 0.85)
    noise: float = 0.25  # std of the unit-mean multiplicative speckle
    seed: int = 0

    def __post_init__(self):
        self.thickness = tuple(float(t) for t in self.thickness) or (1.0 / self.num_layers,) * self.num_layers
        self.intensities = tuple(float(v) for v in self.intensities)
        self.validate()

    def validate(self):
        if self.num_layers < 1 or self.height < 1 or self.width < 1 or self.num_images < 0:
            raise ValueError("sizes and layer count must be positive")
        if len(self.thickness) != self.num_layers or abs(sum(self.thickness) - 1.0) > 1e-9:
            raise ValueError("thickness needs one positive fraction per layer, summing to 1")
        if len(self.intensities) != self.num_layers:
            raise ValueError(f"need {self.num_layers} layer intensities, got {len(self.intensities)}")
        if not 1 <= self.max_components or self.min_frequency > self.max_frequency or self.noise < 0:
            raise ValueError("invalid sinusoid or noise settings")
        # Each boundary moves at most max_components * max_amplitude from its
        # mean; two neighbours moving toward each other must not meet.
        swing = 2 * self.max_components * self.max_amplitude
        gaps = np.array(self.thickness[1:-1]) * self.height if self.num_layers > 2 else np.array([np.inf])
        if (gaps <= swing).any():
            raise ValueError(f"infeasible boundaries: layer gap {gaps.min():.2f}px <= max swing {swing:.2f}px")
        return self

    @property
    def num_classes(self):
        return self.num_layers


def _boundaries(config, rng):
    """(num_layers - 1, width) boundary rows, strictly increasing down the image."""
    h, w = config.height, config.width
    means = np.cumsum(config.thickness)[:-1] * h
    x = np.arange(w) + 0.5
    out = np.empty((len(means), w))
    for k, mu in enumerate(means):
        n = rng.integers(1, config.max_components + 1)
        amp = rng.uniform(0, config.max_amplitude, n)
        freq = rng.uniform(config.min_frequency, config.max_frequency, n)
        phase = rng.uniform(0, 2 * np.pi, n)
        out[k] = mu + (amp[:, None] * np.sin(2 * np.pi * freq[:, None] * x / w + phase[:, None])).sum(axis=0)
    return out


def _render(config, rng):
    bounds = _boundaries(config, rng)
    rows = np.arange(config.height)[:, None] + 0.5
    label = (rows[None] >= bounds[:, None, :]).sum(axis=0).astype(np.int64)
    image = np.asarray(config.intensities)[label]
    if config.noise > 0:
        shape = 1.0 / config.noise**2
        image = image * rng.gamma(shape, 1.0 / shape, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    # Quantize to the 16-bit grid the PGM files use, so in-memory and on-disk runs agree.
    return np.round(image * IMAGE_LEVELS) / IMAGE_LEVELS, label


def generate_synthetic(config):
    config.validate()
    samples = []
    for i in range(config.num_images):
        image, label = _render(config, rngmod.stream(config.seed, "synth", i))
        sid = f"img{i:05d}"
        samples.append(ImageSample(image, label, sid, sid))
    return samples


def morphology(image, op, kernel=3):
    """Grey-level erode (window min), dilate (window max) or close; borders replicate edges."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be an odd positive integer, got {kernel}")
    size = (kernel, kernel)
    if op == "erode":
        return ndimage.grey_erosion(image, size=size, mode="nearest")
    if op == "dilate":
        return ndimage.grey_dilation(image, size=size, mode="nearest")
    if op == "close":
        return ndimage.grey_erosion(ndimage.grey_dilation(image, size=size, mode="nearest"), size=size, mode="nearest")
    raise ValueError(f"unknown morphology op {op!r}")


def preprocess(samples, ops=(("erode", 3), ("close", 3))):
    out = []
    for s in samples:
        img = s.image
        for op, k in ops:
            img = morphology(img, op, k)
        out.append(dataclasses.replace(s, image=img))
    return out


def crop_windows(image_width, window=300, overlap=0.5):
    if window > image_width:
        raise ValueError(f"window {window} wider than image {image_width}")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    stride = max(1, int(round(window * (1 - overlap))))
    offsets = list(range(0, image_width - window + 1, stride))
    if offsets[-1] + window < image_width:
        offsets.append(image_width - window)
    return offsets


def augment(sample, window=300, trim_top=20, trim_bottom=20, overlap=0.5, flip=True):
    """Trim rows, slide square windows left to right, and optionally add mirrored copies."""
    rows = sample.image.shape[0]
    if rows - trim_top - trim_bottom != window:
        raise ValueError(f"{sample.id}: {rows} rows minus trims {trim_top}+{trim_bottom} != window {window}")
    img = sample.image[trim_top : rows - trim_bottom]
    lab = sample.label[trim_top : rows - trim_bottom]
    out = []
    for off in crop_windows(img.shape[1], window, overlap):
        ci, cl = img[:, off : off + window], lab[:, off : off + window]
        out.append(ImageSample(ci.copy(), cl.copy(), f"{sample.id}_c{off}", sample.source))
        if flip:
            out.append(ImageSample(ci[:, ::-1].copy(), cl[:, ::-1].copy(), f"{sample.id}_c{off}f", sample.source))
    return out


@dataclasses.dataclass
class ManifestEntry:
    id: str
    image_path: str
    label_path: str
    split: str


@dataclasses.dataclass
class DatasetManifest:
    entries: list
    seed: int = 0
    header: dict = dataclasses.field(default_factory=dict)

    def ids(self, split):
        return [e.id for e in self.entries if e.split == split]

    def counts(self):
        out = {}
        for e in self.entries:
            out[e.split] = out.get(e.split, 0) + 1
        return out

    def to_text(self):
        lines = [f"# seed={self.seed}"] + [f"# {k}={v}" for k, v in self.header.items()]
        lines += ["\t".join((e.id, e.image_path, e.label_path, e.split)) for e in self.entries]
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def read(cls, path):
        header, entries, seed = {}, [], 0
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, val = line[1:].strip().partition("=")
                    if key == "seed":
                        seed = int(val)
                    else:
                        header[key] = val
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
                entries.append(ManifestEntry(*parts))
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{path}: duplicate ids")
        return cls(entries, seed, header)


def _split_sizes(n, fractions):
    sizes = [int(round(f * n)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        raise ValueError(f"fractions {fractions} over-allocate {n} sources")
    return sizes


def split_dataset(samples, fractions=(0.8, 0.2), seed=0, header=None):
    """Assign every sample a split; all crops of one source share it."""
    if not samples:
        raise ValueError("cannot split an empty sample list")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) not in SPLIT_NAMES or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be 2 or 3 non-negative values summing to 1, got {fractions}")
    names = SPLIT_NAMES[len(fractions)]
    sources = sorted({s.source for s in samples})
    perm = rngmod.stream(seed, "split").permutation(len(sources))
    assignment = {}
    start = 0
    for name, size in zip(names, _split_sizes(len(sources), fractions)):
        for j in perm[start : start + size]:
            assignment[sources[j]] = name
        start += size
    entries = [
        ManifestEntry(s.id, f"images/{s.id}.pgm", f"labels/{s.id}.pgm", assignment[s.source]) for s in samples
    ]
    return DatasetManifest(entries, seed, dict(header or {}))


# PGM (binary P5) IO ---------------------------------------------------------

def write_pgm(path, array, maxval):
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError("PGM holds a single 2-D channel")
    if not 1 <= maxval <= 65535 or array.min() < 0 or array.max() > maxval:
        raise ValueError(f"values must lie in [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{array.shape[1]} {array.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(array.astype(dtype).tobytes())


def read_pgm(path):
    """Returns (integer array, maxval)."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    body = data[pos + 1 :]
    need = w * h * np.dtype(dtype).itemsize
    if len(body) < need:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body[:need], dtype=dtype).reshape(h, w).astype(np.int64), maxval


def save_samples(samples, manifest, root, num_classes):
    by_id = {e.id: e for e in manifest.entries}
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    for s in samples:
        e = by_id[s.id]
        write_pgm(os.path.join(root, e.image_path), np.round(s.image * IMAGE_LEVELS).astype(np.int64), IMAGE_LEVELS)
        write_pgm(os.path.join(root, e.label_path), s.label, max(1, num_classes - 1))
    manifest.write(os.path.join(root, "manifest.tsv"))


def load_samples(root, split=None):
    manifest = DatasetManifest.read(os.path.join(root, "manifest.tsv"))
    out = []
    for e in manifest.entries:
        if split is not None and e.split != split:
            continue
        img, maxval = read_pgm(os.path.join(root, e.image_path))
        lab, _ = read_pgm(os.path.join(root, e.label_path))
        out.append(ImageSample(img / maxval, lab, e.id, e.id.split("_c")[0]))
    return out, manifest


# In-memory batches ------------------------------------------------------------

class Dataset:
    """Stacked arrays: images (N, 1, H, W) float, labels (N, H, W) int."""

    def __init__(self, images, labels, ids=None, sources=None):
        self.images = np.asarray(images)
        self.labels = np.asarray(labels, dtype=np.int64)
        n = len(self.images)
        self.ids = list(ids) if ids is not None else [str(i) for i in range(n)]
        self.sources = list(sources) if sources is not None else list(self.ids)
        if self.images.ndim != 4 or self.labels.shape != (n, *self.images.shape[2:]):
            raise ValueError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")

    @classmethod
    def from_samples(cls, samples, dtype=np.float32):
        if not samples:
            return cls(np.zeros((0, 1, 1, 1), dtype=dtype), np.zeros((0, 1, 1), dtype=np.int64))
        return cls(
            np.stack([s.image for s in samples])[:, None].astype(dtype),
            np.stack([s.label for s in samples]),
            [s.id for s in samples],
            [s.source for s in samples],
        )

    def __len__(self):
        return len(self.images)

    def subset(self, indices):
        indices = list(indices)
        return Dataset(self.images[indices], self.labels[indices],
                       [self.ids[i] for i in indices], [self.sources[i] for i in indices])


def search_split(dataset, val_fraction=0.2, seed=0):
    """Carve a validation part off the training data, per source, deterministically."""
    sources = sorted(set(dataset.sources))
    if len(sources) < 2:
        raise ValueError("need at least two sources to carve a validation split")
    n_val = min(len(sources) - 1, max(1, int(round(val_fraction * len(sources)))))
    perm = rngmod.stream(seed, "search-split").permutation(len(sources))
    val_sources = {sources[j] for j in perm[:n_val]}
    train_idx = [i for i, s in enumerate(dataset.sources) if s not in val_sources]
    val_idx = [i for i, s in enumerate(dataset.sources) if s in val_sources]
    return dataset.subset(train_idx), dataset.subset(val_idx)
