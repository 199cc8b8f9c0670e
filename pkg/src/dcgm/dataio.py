"""Datasets, the procedural toy benchmark and the ``.dcgm`` file format.

``.dcgm`` layout (all little-endian)::

    offset  size        field
    0       4           magic b"DCGM"
    4       2           u16 format version (1)
    6       4 x 5       u32 classes, images per class, channels, height, width
    26      4 x c       f32 per-channel normalisation mean
    ..      4 x c       f32 per-channel normalisation std
    ..      4           u32 provenance length n
    ..      n           provenance, UTF-8
    ..      4 x N*c*H*W f32 pixels, N = classes * ipc, class-major
    ..      4 x N       u32 labels
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"DCGM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH5I")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


@dataclass
class Dataset:
    """Normalised images ``[N, c, H, W]`` with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str
    split: str
    mean: np.ndarray
    std: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def class_indices(self, c: int) -> np.ndarray:
        if not 0 <= c < self.num_classes:
            raise KeyError(f"unknown class {c}")
        return np.flatnonzero(self.labels == c)

    def subset(self, indices, name: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, images=self.images[indices], labels=self.labels[indices],
                       name=name or self.name)

    def denormalize(self, images: np.ndarray) -> np.ndarray:
        return images * self.std.reshape(1, -1, 1, 1) + self.mean.reshape(1, -1, 1, 1)


def normalize(raw: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((raw - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)).astype(np.float32)


def channel_stats(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = raw.astype(np.float64)
    return raw.mean(axis=(0, 2, 3)), raw.std(axis=(0, 2, 3))


@dataclass
class SyntheticSet:
    """Learnable condensed images with fixed, balanced, class-major labels."""

    images: np.ndarray
    labels: np.ndarray
    ipc: int
    num_classes: int
    mean: np.ndarray
    std: np.ndarray
    provenance: str = ""
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        expected = np.repeat(np.arange(self.num_classes), self.ipc)
        if self.labels.shape != expected.shape or np.any(self.labels != expected):
            raise ValueError("labels must be class-major with exactly ipc images per class")
        if len(self.images) != len(self.labels):
            raise ValueError("one image per label is required")

    def class_slice(self, c: int) -> slice:
        return slice(c * self.ipc, (c + 1) * self.ipc)

    def as_dataset(self, name: str = "synthetic") -> Dataset:
        return Dataset(self.images.astype(np.float32), self.labels.astype(np.int64), name, "train",
                       np.asarray(self.mean, dtype=np.float32), np.asarray(self.std, dtype=np.float32),
                       self.num_classes)

    def bitwise_equal(self, other: "SyntheticSet") -> bool:
        return (
            self.images.dtype == other.images.dtype
            and self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and np.array_equal(self.labels, other.labels)
            and self.ipc == other.ipc
            and self.num_classes == other.num_classes
            and np.asarray(self.mean, np.float32).tobytes() == np.asarray(other.mean, np.float32).tobytes()
            and np.asarray(self.std, np.float32).tobytes() == np.asarray(other.std, np.float32).tobytes()
            and self.provenance == other.provenance
        )


# -- pinned pseudo-random generator for the toy data ---------------------------

def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return state, z ^ (z >> 31)


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class ToyRNG:
    """Lane-parallel xoshiro256** seeded by SplitMix64.

    ``LANES`` independent xoshiro256** states advance in lock-step. Lane ``j``
    receives words ``4j .. 4j+3`` of the SplitMix64 sequence started at the
    integer seed. One step yields one 64-bit word per lane; streams are the
    concatenation of steps (lane 0 first). Uniform doubles are
    ``(word >> 11) * 2**-53``; normals use Box-Muller on consecutive uniform
    pairs ``(u1, u2)``: ``sqrt(-2 ln(1 - u1)) * (cos 2 pi u2, sin 2 pi u2)``.
    """

    LANES = 64

    def __init__(self, seed: int):
        sm = int(seed) & 0xFFFFFFFFFFFFFFFF
        words = []
        for _ in range(4 * self.LANES):
            sm, z = _splitmix64(sm)
            words.append(z)
        s = np.array(words, dtype=np.uint64).reshape(self.LANES, 4)
        self._s = [s[:, i].copy() for i in range(4)]

    def _step(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        with np.errstate(over="ignore"):
            result = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s = [s0, s1, s2, _rotl(s3, 45)]
        return result

    def words(self, n: int) -> np.ndarray:
        steps = -(-n // self.LANES)
        out = np.empty((steps, self.LANES), dtype=np.uint64)
        for i in range(steps):
            out[i] = self._step()
        return out.reshape(-1)[:n]

    def uniform(self, n: int) -> np.ndarray:
        return (self.words(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, n: int) -> np.ndarray:
        m = -(-n // 2)
        u = self.uniform(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """Uniform integers in ``[low, high]`` (inclusive)."""
        span = high - low + 1
        return low + np.floor(self.uniform(n) * span).astype(np.int64)


# -- toy benchmark ------------------------------------------------------------

def _shape_map(kind: int, yy: np.ndarray, xx: np.ndarray, cy: np.ndarray, cx: np.ndarray) -> np.ndarray:
    """Smooth class template, coordinates in [0, 1]; centres broadcast over samples."""
    w = 0.07

    def bar(d):
        return np.exp(-(d / w) ** 2)

    dy, dx = yy - cy, xx - cx
    if kind == 0:   # horizontal bar
        return bar(dy) * (np.abs(dx) < 0.35)
    if kind == 1:   # vertical bar
        return bar(dx) * (np.abs(dy) < 0.35)
    if kind == 2:   # plus sign
        return np.maximum(bar(dy) * (np.abs(dx) < 0.25), bar(dx) * (np.abs(dy) < 0.25))
    if kind == 3:   # ring
        return bar(np.sqrt(dy ** 2 + dx ** 2) - 0.22)
    if kind == 4:   # blob
        return np.exp(-(dy ** 2 + dx ** 2) / (2 * 0.1 ** 2))
    if kind == 5:   # diagonal stroke
        return bar((dy - dx) / np.sqrt(2)) * (np.abs(dy + dx) < 0.5)
    if kind == 6:   # anti-diagonal stroke
        return bar((dy + dx) / np.sqrt(2)) * (np.abs(dy - dx) < 0.5)
    if kind == 7:   # two blobs side by side
        g = lambda ox: np.exp(-(dy ** 2 + (dx - ox) ** 2) / (2 * 0.07 ** 2))  # noqa: E731
        return np.maximum(g(-0.2), g(0.2))
    if kind == 8:   # square outline
        m = np.maximum(np.abs(dy), np.abs(dx))
        return bar(m - 0.2)
    # corner (L shape)
    return np.maximum(bar(dy - 0.2) * ((dx > -0.25) & (dx < 0.2)), bar(dx + 0.2) * ((dy > -0.25) & (dy < 0.2)))


# class-specific template centres (y, x) in unit coordinates
_CENTRES = [(0.3, 0.5), (0.5, 0.3), (0.5, 0.5), (0.5, 0.5), (0.3, 0.3),
            (0.5, 0.5), (0.5, 0.5), (0.65, 0.5), (0.55, 0.55), (0.5, 0.5)]


def _render(rng: ToyRNG, labels: np.ndarray, size: int, C: int, noise: float, jitter: int) -> np.ndarray:
    n = len(labels)
    grid = (np.arange(size) + 0.5) / size
    yy, xx = grid[None, :, None], grid[None, None, :]
    shift = rng.integers(-jitter, jitter, 2 * n).reshape(n, 2) / size
    amp = 0.6 + 0.6 * rng.uniform(n)
    distract_cls = rng.integers(0, C - 1, n)
    distract_amp = 0.45 * rng.uniform(n)
    dshift = rng.integers(-2 * jitter, 2 * jitter, 2 * n).reshape(n, 2) / size
    noise_field = rng.normal(n * size * size).reshape(n, size, size)
    out = np.zeros((n, size, size))
    for k in range(C):
        sel = np.flatnonzero(labels == k)
        if sel.size:
            cy = _CENTRES[k][0] + shift[sel, 0][:, None, None]
            cx = _CENTRES[k][1] + shift[sel, 1][:, None, None]
            out[sel] += amp[sel, None, None] * _shape_map(k, yy, xx, cy, cx)
        # distractor: a faint template of a different class
        dsel = np.flatnonzero((distract_cls + (distract_cls >= labels)) % C == k)
        if dsel.size:
            cy = _CENTRES[k][0] + dshift[dsel, 0][:, None, None]
            cx = _CENTRES[k][1] + dshift[dsel, 1][:, None, None]
            out[dsel] += distract_amp[dsel, None, None] * _shape_map(k, yy, xx, cy, cx)
    out += noise * noise_field
    return np.clip(out, 0.0, 1.0)[:, None].astype(np.float32)


def toy_templates(C: int = 10, size: int = 16) -> np.ndarray:
    """Clean, centred class templates ``[C, size, size]``."""
    grid = (np.arange(size) + 0.5) / size
    yy, xx = grid[None, :, None], grid[None, None, :]
    out = []
    for k in range(C):
        cy = np.full((1, 1, 1), _CENTRES[k][0])
        cx = np.full((1, 1, 1), _CENTRES[k][1])
        out.append(_shape_map(k, yy, xx, cy, cx)[0])
    return np.stack(out)


def make_toy(
    classes: int = 10,
    per_class: int = 500,
    size: int = 16,
    seed: int = 0,
    test_per_class: int | None = None,
    noise: float = 0.3,
) -> tuple[Dataset, Dataset]:
    """Procedural grayscale benchmark: one template per class plus jitter,
    amplitude changes, a faint distractor template and pixel noise."""
    if not 2 <= classes <= 10:
        raise ValueError("toy data supports 2 to 10 classes")
    if size < 8:
        raise ValueError("toy images must be at least 8x8")
    test_per_class = max(per_class // 5, 20) if test_per_class is None else test_per_class
    rng = ToyRNG(seed)
    jitter = max(1, size // 8)
    ytr = np.repeat(np.arange(classes), per_class)
    yte = np.repeat(np.arange(classes), test_per_class)
    raw_tr = _render(rng, ytr, size, classes, noise, jitter)
    raw_te = _render(rng, yte, size, classes, noise, jitter)
    mean, std = channel_stats(raw_tr)
    name = f"toy{classes}x{per_class}@{size}s{seed}"
    train = Dataset(normalize(raw_tr, mean, std), ytr, name, "train",
                    mean.astype(np.float32), std.astype(np.float32), classes)
    test = Dataset(normalize(raw_te, mean, std), yte, name, "test",
                   mean.astype(np.float32), std.astype(np.float32), classes)
    return train, test


# -- IDX (MNIST family) ---------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return data


def parse_idx(buf: bytes, magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX payload with the given 32-bit magic."""
    if len(buf) < 4:
        raise FormatError(f"truncated IDX header at offset 0: {len(buf)} bytes")
    got = struct.unpack_from(">I", buf, 0)[0]
    if got != magic:
        raise FormatError(f"bad IDX magic 0x{got:08x} at offset 0 (expected 0x{magic:08x})")
    ndim = magic & 0xFF
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise FormatError(f"truncated IDX dimensions at offset {len(buf)} (need {need} bytes)")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    size = int(np.prod(dims, dtype=np.int64))
    if len(buf) != need + size:
        raise FormatError(
            f"IDX payload at offset {need} holds {len(buf) - need} bytes, dimensions {dims} need {size}"
        )
    return np.frombuffer(buf, dtype=np.uint8, offset=need).reshape(dims)


def load_idx(images_path, labels_path, *, mean=None, std=None, name: str = "idx",
             split: str = "train", num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair. Normalisation defaults to this split's own statistics."""
    imgs = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if len(imgs) != len(labels):
        raise FormatError(f"{len(imgs)} images but {len(labels)} labels")
    raw = imgs[:, None].astype(np.float32) / 255.0
    if mean is None or std is None:
        mean, std = channel_stats(raw)
    mean, std = np.asarray(mean, np.float32), np.asarray(std, np.float32)
    return Dataset(normalize(raw, mean, std), labels.astype(np.int64), name, split, mean, std, num_classes)


def _find(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / f"{stem}.gz", root / stem.replace("-idx", ".idx")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{stem}[.gz] not found under {root}")


def load_mnist(root, name: str = "mnist") -> tuple[Dataset, Dataset]:
    """MNIST or FashionMNIST from the four standard IDX files in ``root``."""
    root = Path(root)
    train = load_idx(_find(root, "train-images-idx3-ubyte"), _find(root, "train-labels-idx1-ubyte"),
                     name=name, split="train")
    test = load_idx(_find(root, "t10k-images-idx3-ubyte"), _find(root, "t10k-labels-idx1-ubyte"),
                    mean=train.mean, std=train.std, name=name, split="test")
    return train, test


def load_cifar10(root) -> tuple[Dataset, Dataset]:
    """CIFAR-10 binary batches (``data_batch_1..5.bin``, ``test_batch.bin``)."""
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"

    def read(files):
        recs = []
        for f in files:
            buf = _read_bytes(root / f)
            if len(buf) % 3073:
                raise FormatError(f"{f}: size {len(buf)} is not a multiple of 3073-byte records")
            recs.append(np.frombuffer(buf, dtype=np.uint8).reshape(-1, 3073))
        arr = np.concatenate(recs)
        return arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0, arr[:, 0].astype(np.int64)

    xtr, ytr = read([f"data_batch_{i}.bin" for i in range(1, 6)])
    xte, yte = read(["test_batch.bin"])
    mean, std = channel_stats(xtr)
    mean, std = mean.astype(np.float32), std.astype(np.float32)
    return (Dataset(normalize(xtr, mean, std), ytr, "cifar10", "train", mean, std, 10),
            Dataset(normalize(xte, mean, std), yte, "cifar10", "test", mean, std, 10))


# -- condensed-set files --------------------------------------------------------

def save_condensed(syn: SyntheticSet, path) -> Path:
    path = Path(path)
    images = np.ascontiguousarray(syn.images, dtype="<f4")
    n, c, h, w = images.shape
    prov = syn.provenance.encode("utf-8")
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, syn.num_classes, syn.ipc, c, h, w),
        np.asarray(syn.mean, dtype="<f4").reshape(c).tobytes(),
        np.asarray(syn.std, dtype="<f4").reshape(c).tobytes(),
        struct.pack("<I", len(prov)),
        prov,
        images.tobytes(),
        np.asarray(syn.labels, dtype="<u4").tobytes(),
    ]
    path.write_bytes(b"".join(parts))
    return path


def read_condensed_header(buf: bytes) -> dict:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes")
    magic, version, C, ipc, c, h, w = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    off = _HEADER.size
    if len(buf) < off + 8 * c + 4:
        raise FormatError("truncated normalisation block")
    mean = np.frombuffer(buf, dtype="<f4", count=c, offset=off)
    std = np.frombuffer(buf, dtype="<f4", count=c, offset=off + 4 * c)
    off += 8 * c
    (plen,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) < off + plen:
        raise FormatError("truncated provenance string")
    prov = buf[off:off + plen].decode("utf-8")
    off += plen
    return dict(version=version, classes=C, ipc=ipc, channels=c, height=h, width=w,
                mean=mean.copy(), std=std.copy(), provenance=prov, payload_offset=off)


def load_condensed(path) -> SyntheticSet:
    buf = Path(path).read_bytes()
    hdr = read_condensed_header(buf)
    n = hdr["classes"] * hdr["ipc"]
    npix = n * hdr["channels"] * hdr["height"] * hdr["width"]
    off = hdr["payload_offset"]
    expected = off + 4 * npix + 4 * n
    if len(buf) != expected:
        raise FormatError(f"payload length mismatch: file has {len(buf)} bytes, header implies {expected}")
    images = np.frombuffer(buf, dtype="<f4", count=npix, offset=off).astype(np.float32)
    images = images.reshape(n, hdr["channels"], hdr["height"], hdr["width"])
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off + 4 * npix).astype(np.int64)
    return SyntheticSet(images, labels, hdr["ipc"], hdr["classes"], hdr["mean"], hdr["std"],
                        hdr["provenance"])


def image_grid(syn: SyntheticSet) -> np.ndarray:
    """De-normalised ``[C*H, ipc*W, c]`` grid in [0, 1]; rows are classes."""
    n, c, h, w = syn.images.shape
    pix = syn.images * np.asarray(syn.std).reshape(1, c, 1, 1) + np.asarray(syn.mean).reshape(1, c, 1, 1)
    pix = np.clip(pix, 0.0, 1.0)
    grid = pix.reshape(syn.num_classes, syn.ipc, c, h, w).transpose(0, 3, 1, 4, 2)
    return grid.reshape(syn.num_classes * h, syn.ipc * w, c)


def export_image_grid(syn: SyntheticSet, path) -> Path:
    from PIL import Image

    grid = np.round(image_grid(syn) * 255.0).astype(np.uint8)
    img = Image.fromarray(grid[:, :, 0]) if grid.shape[2] == 1 else Image.fromarray(grid)
    path = Path(path)
    img.save(path, format="PNG")
    return path
