"""Image I/O, synthetic self-similar images, noise models and dataset folders.

Images are float arrays shaped (1, 3, h, w) with values in [0, 1].  Binary
PPM (P6, maxval 255) is the only on-disk format.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

PathLike = Union[str, Path]


class PPMError(ValueError):
    pass


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def _header(buf: bytes) -> tuple[int, int, int, int]:
    """Parse 'P6 w h maxval' and return (w, h, maxval, payload offset)."""
    if not buf.startswith(b"P6"):
        raise PPMError("not a binary PPM (missing P6 magic)")
    pos, values = 2, []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None or not m.group(1).isdigit():
            raise PPMError("malformed PPM header")
        values.append(int(m.group(1)))
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise PPMError("malformed PPM header: no whitespace before raster")
    w, h, maxval = values
    if w <= 0 or h <= 0:
        raise PPMError(f"invalid image size {w}x{h}")
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval} (only 8-bit 255 is accepted)")
    return w, h, maxval, pos + 1


def read_ppm(path: PathLike) -> np.ndarray:
    """Decode a P6 file into a (1, 3, h, w) float64 array scaled by 1/255."""
    buf = Path(path).read_bytes()
    w, h, _, offset = _header(buf)
    need = w * h * 3
    if len(buf) - offset < need:
        raise PPMError(f"truncated payload: expected {need} bytes, found {len(buf) - offset}")
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset)
    return (raw.reshape(h, w, 3).transpose(2, 0, 1)[None] / 255.0).astype(np.float64)


def quantize(image: np.ndarray) -> np.ndarray:
    """(1, 3, h, w) floats -> (h, w, 3) uint8 after clamping to [0, 1]."""
    image = np.asarray(image)
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise ValueError("save one image at a time")
        image = image[0]
    if image.shape[0] != 3:
        raise ValueError(f"expected 3 channels, got shape {image.shape}")
    return np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(image: np.ndarray, path: PathLike) -> None:
    pixels = quantize(image)
    h, w = pixels.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())


@dataclass
class ImageRecord:
    """A noisy image, plus its clean reference when the set is for evaluation."""

    id: str
    noisy: np.ndarray
    clean: Optional[np.ndarray] = None


def load_image(path: PathLike) -> ImageRecord:
    return ImageRecord(Path(path).stem, np.clip(read_ppm(path), 0.0, 1.0))


def save_image(image: np.ndarray, path: PathLike) -> None:
    write_ppm(image, path)


# ---------------------------------------------------------------------------
# synthetic images

PATTERNS = ("tiles", "smooth-tiles", "stripes", "texture-mosaic")


def _size(size) -> tuple[int, int]:
    return (size, size) if isinstance(size, int) else tuple(size)


def _smooth_motif(rng: np.random.Generator, period: int, blur: float) -> np.ndarray:
    field_ = rng.normal(size=(3, period, period))
    field_ = ndimage.gaussian_filter(field_, sigma=(0, blur, blur), mode="wrap")
    field_ -= field_.min(axis=(1, 2), keepdims=True)
    field_ /= np.maximum(field_.max(axis=(1, 2), keepdims=True), 1e-12)
    return field_


def _tile(motif: np.ndarray, h: int, w: int) -> np.ndarray:
    p = motif.shape[-1]
    reps = (1, -(-h // p), -(-w // p))
    return np.tile(motif, reps)[:, :h, :w]


def synth_clean(kind: str, size, seed: int, period: Optional[int] = None,
                blur: float = 1 / 8) -> np.ndarray:
    """Deterministic clean image with nonlocal repeats.

    ``tiles`` repeats one random ``period`` x ``period`` motif exactly;
    ``smooth-tiles`` does the same with one smooth motif;
    ``stripes`` is an oriented two-colour sinusoid; ``texture-mosaic`` splits
    the image into 2x2 regions, each tiling its own smooth motif with a shared
    period. ``blur`` is the motif smoothing width as a fraction of the period.
    """
    h, w = _size(size)
    rng = np.random.default_rng(seed)
    if kind == "tiles":
        p = period or 8
        motif = 0.1 + 0.8 * rng.uniform(size=(3, p, p))
        img = _tile(motif, h, w)
    elif kind == "smooth-tiles":
        p = period or 16
        lo = rng.uniform(0.05, 0.35, size=(3, 1, 1))
        hi = rng.uniform(0.65, 0.95, size=(3, 1, 1))
        img = _tile(lo + (hi - lo) * _smooth_motif(rng, p, p * blur), h, w)
    elif kind == "stripes":
        p = period or 10
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        a, b = rng.uniform(0.1, 0.9, size=(2, 3, 1, 1))
        yy, xx = np.mgrid[0:h, 0:w]
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / p + phase)
        img = a + (b - a) * wave[None]
    elif kind == "texture-mosaic":
        p = period or 16
        img = np.empty((3, h, w))
        rows, cols = np.array_split(np.arange(h), 2), np.array_split(np.arange(w), 2)
        for r in rows:
            for c in cols:
                motif = _smooth_motif(rng, p, p * blur)
                lo = rng.uniform(0.05, 0.35, size=(3, 1, 1))
                hi = rng.uniform(0.65, 0.95, size=(3, 1, 1))
                block = lo + (hi - lo) * motif
                # phase of every block is anchored to the image origin
                img[:, r[0]:r[-1] + 1, c[0]:c[-1] + 1] = \
                    _tile(block, h, w)[:, r[0]:r[-1] + 1, c[0]:c[-1] + 1]
    else:
        raise ValueError(f"unknown pattern {kind!r}; choose from {PATTERNS}")
    return img[None].astype(np.float64)


def autocorrelation(image: np.ndarray, lag: int, axis: int = -1) -> float:
    """Pearson correlation between an image and itself shifted by ``lag`` along ``axis``."""
    x = np.asarray(image, dtype=np.float64)
    n = x.shape[axis]
    a = np.take(x, np.arange(0, n - lag), axis=axis).ravel()
    b = np.take(x, np.arange(lag, n), axis=axis).ravel()
    a, b = a - a.mean(), b - b.mean()
    return float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))


# ---------------------------------------------------------------------------
# noise


@dataclass
class NoiseSpec:
    kind: str = "gaussian_iid"
    sigma: float = 25 / 255
    corr_kernel: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian_iid", "gaussian_correlated"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.kind == "gaussian_correlated":
            k = np.ones((3, 3)) if self.corr_kernel is None else np.asarray(self.corr_kernel, float)
            self.corr_kernel = k / k.sum()


def sample_noise(shape, spec: NoiseSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """The additive noise field for ``spec`` before any clamping."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    noise = rng.normal(0.0, spec.sigma, size=shape)
    if spec.kind == "gaussian_correlated":
        kernel = spec.corr_kernel.reshape((1,) * (len(shape) - 2) + spec.corr_kernel.shape)
        noise = ndimage.convolve(noise, kernel, mode="wrap")
    return noise


def add_noise(clean: np.ndarray, spec: NoiseSpec,
              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return np.clip(clean + sample_noise(clean.shape, spec, rng), 0.0, 1.0)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class NoisyImage:
    """Training view of a record: there is deliberately no clean field."""

    id: str
    noisy: np.ndarray


@dataclass
class NoisyDataset:
    """Noisy-only image collection consumed by training."""

    items: list[NoisyImage] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[ImageRecord]) -> "NoisyDataset":
        return cls([NoisyImage(r.id, r.noisy) for r in records])

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> NoisyImage:
        return self.items[i]

    def __iter__(self) -> Iterator[NoisyImage]:
        return iter(self.items)


def _manifest(root: Path) -> list[str]:
    manifest = root / "manifest.txt"
    if manifest.exists():
        return [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
    return sorted(p.stem for p in (root / "noisy").glob("*.ppm"))


def load_noisy_dataset(root: PathLike) -> NoisyDataset:
    """Read ``<root>/noisy/*.ppm``; the clean folder is never opened."""
    root = Path(root)
    if not (root / "noisy").is_dir():
        raise FileNotFoundError(f"dataset folder not found: {root / 'noisy'}")
    return NoisyDataset([NoisyImage(i, load_image(root / "noisy" / f"{i}.ppm").noisy)
                         for i in _manifest(root)])


def load_eval_records(root: PathLike) -> list[ImageRecord]:
    """Noisy images with their clean references (when ``<root>/clean`` has them)."""
    root = Path(root)
    records = []
    for i in _manifest(root):
        rec = load_image(root / "noisy" / f"{i}.ppm")
        clean = root / "clean" / f"{i}.ppm"
        if clean.exists():
            rec.clean = load_image(clean).noisy
        records.append(rec)
    return records


def write_dataset(root: PathLike, records: Sequence[ImageRecord]) -> None:
    root = Path(root)
    (root / "noisy").mkdir(parents=True, exist_ok=True)
    for r in records:
        write_ppm(r.noisy, root / "noisy" / f"{r.id}.ppm")
        if r.clean is not None:
            (root / "clean").mkdir(exist_ok=True)
            write_ppm(r.clean, root / "clean" / f"{r.id}.ppm")
    (root / "manifest.txt").write_text("".join(f"{r.id}\n" for r in records))


def make_synthetic_records(count: int, size, noise: NoiseSpec, kind: str = "texture-mosaic",
                           seed: int = 0, period: Optional[int] = None,
                           keep_clean: bool = True, blur: float = 1 / 8) -> list[ImageRecord]:
    """Clean/noisy pairs; record ``i`` draws from seed ``seed ^ i``."""
    records = []
    for i in range(count):
        s = seed ^ i
        clean = synth_clean(kind, size, s, period, blur)
        noisy = add_noise(clean, noise, np.random.default_rng([noise.seed, s]))
        records.append(ImageRecord(f"img{i:04d}", noisy, clean if keep_clean else None))
    return records
