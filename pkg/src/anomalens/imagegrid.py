"""Images as float grids, plus the resampling, blur and synthesis routines built on them.

Pixel values are float64 and nominally live in [-1, 1]; only finiteness is
enforced. All geometry is (height, width, channels), row-major. The two
resampling variants are implemented from first principles because *which*
resampler runs is exactly the thing the rest of the package studies:

* ``resize_nearest``: source-anchored floor indexing, no antialiasing.
  Output pixel (r, c) copies source pixel (min(floor(r*H/th), H-1),
  min(floor(c*W/tw), W-1)).
* ``resize_bilinear_aa``: separable triangle filter whose support is scaled
  by the downscale factor s = in_size/out_size (filter radius s), with
  per-output-pixel weight normalization. On upscale the support never drops
  below 1, which degrades gracefully to plain bilinear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage

NEAREST = "nearest"
BILINEAR_AA = "bilinear_aa"

_RESIZE_VARIANTS = (NEAREST, BILINEAR_AA)


@dataclass(frozen=True)
class ImageTensor:
    """A (height, width, channels) grid of finite float64 values.

    Channels is 1 (grayscale) or 3 (rgb). A 2-d array is promoted to a single
    channel. The nominal value range is [-1, 1]; it is not enforced because
    intermediate arithmetic (noise on top of texture, defect blobs) may
    legitimately leave it. File export clamps.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ValueError(f"expected (height, width, channels), got shape {np.shape(self.values)}")
        h, w, c = v.shape
        if h < 1 or w < 1:
            raise ValueError(f"image dimensions must be positive, got {h}x{w}")
        if c not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {c}")
        if not np.all(np.isfinite(v)):
            raise ValueError("image values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def flat(self) -> np.ndarray:
        """Row-major flattening, channels fastest."""
        return self.values.reshape(-1)


def resize_nearest(img: ImageTensor, target_height: int, target_width: int) -> ImageTensor:
    """Nearest-neighbor resize with source-anchored floor indexing.

    The convention is anchored at the source origin (not half-pixel centers):
    output (r, c) copies source (min(floor(r*H/th), H-1), min(floor(c*W/tw), W-1)).
    Sampled pixels round-trip exactly when dimensions divide evenly.
    """
    if target_height < 1 or target_width < 1:
        raise ValueError("target dimensions must be positive")
    h, w = img.height, img.width
    rows = np.minimum((np.arange(target_height) * h) // target_height, h - 1)
    cols = np.minimum((np.arange(target_width) * w) // target_width, w - 1)
    return ImageTensor(img.values[np.ix_(rows, cols)])


def _triangle_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row-stochastic (out_size, in_size) matrix of normalized triangle weights."""
    scale = in_size / out_size
    support = max(scale, 1.0)
    m = np.zeros((out_size, in_size))
    for i in range(out_size):
        center = (i + 0.5) * scale
        lo = max(int(np.floor(center - support)), 0)
        hi = min(int(np.ceil(center + support)), in_size)
        idx = np.arange(lo, hi)
        weights = 1.0 - np.abs((idx + 0.5 - center) / support)
        weights = np.clip(weights, 0.0, None)
        m[i, lo:hi] = weights / weights.sum()
    return m


def resize_bilinear_aa(img: ImageTensor, target_height: int, target_width: int) -> ImageTensor:
    """Antialiased bilinear resize: separable triangle filter, radius = downscale factor.

    Each output pixel is a normalized weighted average of the source pixels
    under a triangle filter of radius s = in_size/out_size per axis, so
    downscaling averages over roughly 2s source pixels and suppresses
    frequencies above the output Nyquist. Upscaling reduces to plain bilinear.
    Identity size is exact.
    """
    if target_height < 1 or target_width < 1:
        raise ValueError("target dimensions must be positive")
    wh = _triangle_matrix(img.height, target_height)
    ww = _triangle_matrix(img.width, target_width)
    out = np.einsum("ri,iwc->rwc", wh, img.values)
    out = np.einsum("wj,rjc->rwc", ww, out)
    return ImageTensor(out)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """1-d Gaussian kernel of odd length ``size``, normalized to sum 1."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    offsets = np.arange(size) - size // 2
    k = np.exp(-(offsets.astype(np.float64) ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _convolve_axis_reflect(values: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    pad = len(kernel) // 2
    pad_spec = [(0, 0)] * values.ndim
    pad_spec[axis] = (pad, pad)
    padded = np.pad(values, pad_spec, mode="reflect")
    out = np.zeros_like(values)
    n = values.shape[axis]
    for tap, weight in enumerate(kernel):
        sl = [slice(None)] * values.ndim
        sl[axis] = slice(tap, tap + n)
        out += weight * padded[tuple(sl)]
    return out


def gaussian_blur(img: ImageTensor, kernel: int = 11, sigma: float = 2.0) -> ImageTensor:
    """Separable Gaussian blur with reflect padding (edge sample not repeated).

    The kernel is normalized to sum 1, so constant images are fixed points.
    Raises if the kernel does not fit: kernel > 2 * min(height, width).
    """
    if kernel > 2 * min(img.height, img.width):
        raise ValueError(f"kernel exceeds image: kernel {kernel} on {img.height}x{img.width}")
    k = gaussian_kernel(kernel, sigma)
    out = _convolve_axis_reflect(img.values, k, axis=0)
    out = _convolve_axis_reflect(out, k, axis=1)
    return ImageTensor(out)


@dataclass(frozen=True)
class ResizePolicy:
    """A named resize: variant is "nearest" or "bilinear_aa" plus target dims."""

    variant: str
    target_height: int
    target_width: int

    def __post_init__(self):
        if self.variant not in _RESIZE_VARIANTS:
            raise ValueError(f"unknown resize variant {self.variant!r}")
        if self.target_height < 1 or self.target_width < 1:
            raise ValueError("target dimensions must be positive")

    def apply(self, img: ImageTensor) -> ImageTensor:
        if self.variant == NEAREST:
            return resize_nearest(img, self.target_height, self.target_width)
        return resize_bilinear_aa(img, self.target_height, self.target_width)

    def to_json(self) -> dict:
        return {
            "op": "resize",
            "variant": self.variant,
            "height": self.target_height,
            "width": self.target_width,
        }


@dataclass(frozen=True)
class BlurPolicy:
    """Gaussian blur step for preprocessing chains."""

    kernel: int = 11
    sigma: float = 2.0

    def apply(self, img: ImageTensor) -> ImageTensor:
        return gaussian_blur(img, self.kernel, self.sigma)

    def to_json(self) -> dict:
        return {"op": "blur", "kernel": self.kernel, "sigma": self.sigma}


def preprocess_step_from_json(obj: dict):
    op = obj.get("op")
    if op == "resize":
        return ResizePolicy(obj["variant"], obj["height"], obj["width"])
    if op == "blur":
        return BlurPolicy(obj["kernel"], obj["sigma"])
    raise ValueError(f"unknown preprocess op {op!r}")


def apply_preprocess(steps, img: ImageTensor) -> ImageTensor:
    for step in steps:
        img = step.apply(img)
    return img


# ---------------------------------------------------------------------------
# synthetic textured dataset


@dataclass(frozen=True)
class SynthConfig:
    """Configuration of the synthetic textured-surface generator.

    Instances are built at supersampled resolution (image_size *
    supersample_factor) as a smooth cosine texture shared by the category,
    with per-instance phase jitter, plus i.i.d. uniform white noise of the
    given amplitude sampled on the supersampled lattice. Defect instances
    additionally receive one localized Gaussian intensity blob. Train/test
    images are the nearest-resized versions; the high-resolution originals of
    the test set are returned as well so a caller can re-resize them with a
    different policy.
    """

    category_seed: int = 0
    image_size: int = 64
    supersample_factor: int = 4
    noise_amplitude: float = 0.25
    defect_amplitude: float = 0.8
    defect_radius: float = 6.0
    n_train_good: int = 50
    n_test_good: int = 20
    n_test_defect: int = 20

    def __post_init__(self):
        if self.image_size < 4:
            raise ValueError("image_size must be at least 4")
        if self.supersample_factor < 2:
            raise ValueError("supersample_factor must be at least 2")
        if not (0.0 <= self.noise_amplitude <= 1.0):
            raise ValueError("noise_amplitude must lie in [0, 1]")
        if self.defect_amplitude < 0.0:
            raise ValueError("defect_amplitude must be non-negative")
        if self.defect_radius <= 0.0:
            raise ValueError("defect_radius must be positive")
        if min(self.n_train_good, self.n_test_good, self.n_test_defect) < 1:
            raise ValueError("instance counts must be positive")


_N_WAVES = 6
_PHASE_JITTER = 0.1  # radians; keeps instance-to-instance texture variation well below noise


def _wave_field(xx, yy, freqs, angles, phases, amps):
    field = np.zeros_like(xx)
    for f, t, p, a in zip(freqs, angles, phases, amps):
        field += a * np.cos(2.0 * np.pi * f * (np.cos(t) * xx + np.sin(t) * yy) + p)
    return field


def synth_generate(cfg: SynthConfig):
    """Generate one synthetic category.

    Returns ``(train, test, hi_res_test)`` where train is a list of
    ImageTensor at image_size, test is a list of ``(ImageTensor, label)`` with
    label "good" or "defect", and hi_res_test carries the same instances (same
    order, same labels) at supersampled resolution. Deterministic per config.
    """
    rng = np.random.default_rng(cfg.category_seed)
    s = cfg.image_size * cfg.supersample_factor
    coords = np.arange(s) / s
    xx, yy = np.meshgrid(coords, coords, indexing="xy")

    freqs = rng.uniform(0.5, 1.5, _N_WAVES)
    angles = rng.uniform(0.0, np.pi, _N_WAVES)
    phases = rng.uniform(0.0, 2.0 * np.pi, _N_WAVES)
    amps = rng.uniform(0.5, 1.0, _N_WAVES)
    base = _wave_field(xx, yy, freqs, angles, phases, amps)
    # one shared scale so jittered instances keep a comparable amplitude
    texture_scale = 0.6 / np.max(np.abs(base))

    blob_sigma = cfg.defect_radius * cfg.supersample_factor

    def make_instance(defective: bool) -> ImageTensor:
        jitter = rng.uniform(-_PHASE_JITTER, _PHASE_JITTER, _N_WAVES)
        field = texture_scale * _wave_field(xx, yy, freqs, angles, phases + jitter, amps)
        if cfg.noise_amplitude > 0:
            field = field + rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude, (s, s))
        if defective:
            margin = min(2.0 * blob_sigma, s / 2.0 - 1.0)
            cy = rng.uniform(margin, s - margin)
            cx = rng.uniform(margin, s - margin)
            ridx = np.arange(s)
            d2 = (ridx[:, None] - cy) ** 2 + (ridx[None, :] - cx) ** 2
            field = field + cfg.defect_amplitude * np.exp(-d2 / (2.0 * blob_sigma**2))
        return ImageTensor(field[:, :, None])

    train = []
    for _ in range(cfg.n_train_good):
        hi = make_instance(False)
        train.append(resize_nearest(hi, cfg.image_size, cfg.image_size))

    test = []
    hi_res_test = []
    for defective in [False] * cfg.n_test_good + [True] * cfg.n_test_defect:
        hi = make_instance(defective)
        label = "defect" if defective else "good"
        test.append((resize_nearest(hi, cfg.image_size, cfg.image_size), label))
        hi_res_test.append((hi, label))
    return train, test, hi_res_test


# ---------------------------------------------------------------------------
# file I/O
#
# Byte mapping both ways: stored byte v corresponds to 2*(v/255) - 1, and a
# float x exports as round(255*(x+1)/2) clamped to [0, 255].


def _to_bytes(img: ImageTensor) -> np.ndarray:
    scaled = np.round(255.0 * (img.values + 1.0) / 2.0)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def _from_bytes(raw: np.ndarray) -> ImageTensor:
    return ImageTensor(2.0 * (raw.astype(np.float64) / 255.0) - 1.0)


def write_image(img: ImageTensor, path) -> None:
    """Write 8-bit PNG (via the Pillow codec) or binary PPM/PGM by extension."""
    path = Path(path)
    raw = _to_bytes(img)
    suffix = path.suffix.lower()
    if suffix == ".png":
        arr = raw[:, :, 0] if img.channels == 1 else raw
        _PILImage.fromarray(arr, mode="L" if img.channels == 1 else "RGB").save(path)
    elif suffix in (".ppm", ".pgm"):
        if suffix == ".pgm" and img.channels != 1:
            raise ValueError("pgm holds a single channel")
        if suffix == ".ppm" and img.channels != 3:
            raise ValueError("ppm holds three channels")
        magic = b"P5" if suffix == ".pgm" else b"P6"
        header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
        path.write_bytes(header + raw.tobytes())
    else:
        raise ValueError(f"unsupported image extension {suffix!r}")


def _read_pnm(data: bytes) -> np.ndarray:
    # binary P5/P6 with maxval 255; comments allowed in the header
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = int(tokens[0]), int(tokens[1]), int(tokens[2])
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    channels = 3 if data[:2] == b"P6" else 1
    body = np.frombuffer(data, dtype=np.uint8, count=height * width * channels, offset=pos)
    return body.reshape(height, width, channels)


def read_image(path) -> ImageTensor:
    """Read an 8-bit grayscale or rgb image (PNG, PPM or PGM)."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P6"):
        return _from_bytes(_read_pnm(data))
    with _PILImage.open(path) as pil:
        if pil.mode not in ("L", "RGB"):
            raise ValueError(f"unsupported image mode {pil.mode!r}; expected 8-bit grayscale or rgb")
        raw = np.asarray(pil, dtype=np.uint8)
    if raw.ndim == 2:
        raw = raw[:, :, None]
    return _from_bytes(raw)
