"""Patch-statistics anomaly detector: a memory bank of local texture descriptors.

Each patch location yields a hand-crafted descriptor per scale: per channel the
patch mean, the patch standard deviation (population), and the mean absolute
horizontal and vertical finite differences - 4 numbers per channel. Two scales
are concatenated: the patch itself and a window of twice the side length
centered on it (clipped at image borders), so the descriptor has 8*C entries.

The memory bank is the plain union of all training descriptors (no coreset).
The image score is the classic max-min rule

    score(x) = max_locations min_prototypes ||phi_loc(x) - u||_2   (unsquared)

together with the arg-max location, which points at the most anomalous patch.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagegrid import ImageTensor

_BANK_MAGIC = b"PCLB"


@dataclass(frozen=True)
class PatchFeatureSet:
    """Descriptors of one image: ``locations[i]`` is the (row, col) anchor of ``features[i]``."""

    locations: tuple
    features: np.ndarray


@dataclass(frozen=True)
class MemoryBank:
    """Location-independent union of training descriptors, one row each."""

    prototypes: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.prototypes, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError(f"prototypes must be a non-empty (count, dim) array, got {p.shape}")
        object.__setattr__(self, "prototypes", p)


def _window_stats(window: np.ndarray) -> list[float]:
    # window: (h, w, c); returns 4 stats per channel
    stats = []
    for ch in range(window.shape[2]):
        plane = window[:, :, ch]
        stats.append(float(plane.mean()))
        stats.append(float(plane.std()))
        hdiff = np.abs(np.diff(plane, axis=1))
        vdiff = np.abs(np.diff(plane, axis=0))
        stats.append(float(hdiff.mean()) if hdiff.size else 0.0)
        stats.append(float(vdiff.mean()) if vdiff.size else 0.0)
    return stats


def extract_patches(img: ImageTensor, patch: int, stride: int) -> PatchFeatureSet:
    """Tile the image and describe each tile at two scales.

    Anchors step by ``stride`` wherever a ``patch`` x ``patch`` tile fits. The
    second scale is a 2*patch window centered on the tile, clipped to the
    image, so border tiles use a slightly truncated context window.
    """
    if patch < 1 or stride < 1:
        raise ValueError("patch and stride must be positive")
    h, w = img.height, img.width
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} does not fit in {h}x{w}")
    locations = []
    rows = []
    half = patch // 2
    big = 2 * patch
    for r in range(0, h - patch + 1, stride):
        for c in range(0, w - patch + 1, stride):
            small = img.values[r : r + patch, c : c + patch]
            r2 = min(max(r - half, 0), max(h - big, 0))
            c2 = min(max(c - half, 0), max(w - big, 0))
            large = img.values[r2 : min(r2 + big, h), c2 : min(c2 + big, w)]
            rows.append(_window_stats(small) + _window_stats(large))
            locations.append((r, c))
    return PatchFeatureSet(tuple(locations), np.asarray(rows, dtype=np.float64))


def build_memory_bank(train_images, patch: int, stride: int) -> MemoryBank:
    """Union of all training patch descriptors."""
    feats = [extract_patches(im, patch, stride).features for im in train_images]
    if not feats:
        raise ValueError("no training images")
    return MemoryBank(np.concatenate(feats, axis=0))


def patchcore_score(bank: MemoryBank, img: ImageTensor, patch: int, stride: int):
    """Max over locations of the min euclidean distance to the bank.

    Returns ``(score, location)`` where location is the (row, col) anchor of
    the most anomalous patch.
    """
    fs = extract_patches(img, patch, stride)
    if fs.features.shape[1] != bank.prototypes.shape[1]:
        raise ValueError(
            f"descriptor dim {fs.features.shape[1]} does not match bank {bank.prototypes.shape[1]}"
        )
    # (L, J) distances via the expansion ||a-b||^2 = |a|^2 - 2ab + |b|^2
    a2 = np.square(fs.features).sum(axis=1)[:, None]
    b2 = np.square(bank.prototypes).sum(axis=1)[None, :]
    d2 = np.maximum(a2 - 2.0 * fs.features @ bank.prototypes.T + b2, 0.0)
    per_loc = np.sqrt(d2.min(axis=1))
    best = int(per_loc.argmax())
    return float(per_loc[best]), fs.locations[best]


def save_bank(bank: MemoryBank, out_dir, patch: int, stride: int, preprocess=()) -> None:
    """Manifest JSON plus one raw float64 prototype file (magic "PCLB")."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    count, dim = bank.prototypes.shape
    header = _BANK_MAGIC + struct.pack("<III", count, dim, 0)
    (out / "prototypes.pclb").write_bytes(header + bank.prototypes.astype("<f8").tobytes())
    manifest = {
        "format": "patchlite",
        "patch": patch,
        "stride": stride,
        "preprocess": [step.to_json() for step in preprocess],
        "prototypes": "prototypes.pclb",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_bank(bank_dir):
    """Returns ``(MemoryBank, patch, stride, preprocess)`` from a saved directory."""
    from .imagegrid import preprocess_step_from_json

    root = Path(bank_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != "patchlite":
        raise ValueError(f"not a patchlite manifest: {manifest.get('format')!r}")
    data = (root / manifest["prototypes"]).read_bytes()
    if data[:4] != _BANK_MAGIC:
        raise ValueError(f"bad magic: {data[:4]!r}")
    count, dim, _ = struct.unpack("<III", data[4:16])
    expected = 16 + count * dim * 8
    if len(data) != expected:
        raise ValueError(f"truncated prototype file: {len(data)} bytes, expected {expected}")
    protos = np.frombuffer(data, dtype="<f8", offset=16).reshape(count, dim).copy()
    preprocess = tuple(
        preprocess_step_from_json(s) for s in manifest.get("preprocess", [])
    )
    return MemoryBank(protos), manifest["patch"], manifest["stride"], preprocess
