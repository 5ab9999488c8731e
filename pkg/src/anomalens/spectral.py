"""Orthonormal 2-d cosine basis, forward/inverse transforms, and frequency binning.

The basis element for frequency pair (u, v) on an H x W grid is

    v_(u,v)(r, c) = alpha_H(u) * alpha_W(v)
                    * cos(pi*(2r+1)*u / (2H)) * cos(pi*(2c+1)*v / (2W))

with alpha_N(0) = sqrt(1/N) and alpha_N(k>0) = sqrt(2/N), which makes the
family orthonormal and complete: sum_k v_k v_k^T = I, and coefficient energy
equals pixel energy per channel. Elements are ordered by ascending u^2 + v^2
with ties broken by u then v, so the linear index walks outward radially in
frequency.

Transforms are evaluated separably (one cosine matrix per axis), O(N^2) per
axis; the full (n_freq, H*W) element matrix is materialized lazily for callers
that need per-element pixel values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagegrid import ImageTensor

# Preset upper bin edges for the 50176-frequency layout (224 x 224), 19 bins
# on a power scale.
_PRESET_EDGES_50176 = (
    2, 17, 69, 188, 409, 769, 1313, 2088, 3142, 4528, 6303, 8525, 11254,
    18491, 23132, 28548, 34811, 41995, 50175,
)


def _axis_matrix(n: int) -> np.ndarray:
    """(n, n) orthonormal cosine matrix: row u holds alpha(u)*cos(pi*(2r+1)*u/(2n))."""
    r = np.arange(n)
    u = np.arange(n)[:, None]
    m = np.cos(np.pi * (2 * r + 1) * u / (2 * n))
    alpha = np.full(n, np.sqrt(2.0 / n))
    alpha[0] = np.sqrt(1.0 / n)
    return alpha[:, None] * m


class DctBasis:
    """Ordered orthonormal basis over an H x W pixel grid.

    Attributes
    ----------
    height, width : grid dimensions
    n_freq : number of elements, H*W
    ordering : int array (n_freq,); ordering[k] is the row-major (u, v) linear
        index of the k-th element
    freq_pairs : int array (n_freq, 2) of (u, v) per ordered element
    """

    def __init__(self, height: int, width: int, *, _identity: bool = False):
        if height < 1 or width < 1:
            raise ValueError("basis dimensions must be positive")
        self.height = height
        self.width = width
        self.n_freq = height * width
        self._identity = _identity
        if _identity:
            self._au = np.eye(height)
            self._av = np.eye(width)
            self.ordering = np.arange(self.n_freq)
        else:
            self._au = _axis_matrix(height)
            self._av = _axis_matrix(width)
            uu, vv = np.divmod(np.arange(self.n_freq), width)
            order = np.lexsort((vv, uu, uu * uu + vv * vv))
            self.ordering = order
        self.freq_pairs = np.stack(np.divmod(self.ordering, width), axis=1)
        self._matrix = None

    @property
    def matrix(self) -> np.ndarray:
        """(n_freq, H*W) array; row k is element k flattened row-major."""
        if self._matrix is None:
            u = self.freq_pairs[:, 0]
            v = self.freq_pairs[:, 1]
            self._matrix = np.ascontiguousarray(
                (self._au[u][:, :, None] * self._av[v][:, None, :]).reshape(self.n_freq, -1)
            )
        return self._matrix

    def element(self, k: int) -> np.ndarray:
        """Element k as an (H, W) grid."""
        u, v = self.freq_pairs[k]
        return np.outer(self._au[u], self._av[v])


def dct_basis(height: int, width: int) -> DctBasis:
    """Radially ordered orthonormal cosine basis for an H x W grid."""
    return DctBasis(height, width)


def identity_basis(height: int, width: int) -> DctBasis:
    """Unit-vector basis (element k is the indicator of pixel k, row-major).

    Orthonormal and complete like the cosine basis; useful as the trivial
    virtual layer against which basis-dependent quantities are compared.
    """
    return DctBasis(height, width, _identity=True)


def dct_forward(img: ImageTensor, basis: DctBasis) -> np.ndarray:
    """Project an image onto the basis.

    Returns an (n_freq, channels) float array: column c holds the coefficients
    of channel c ordered by ``basis.ordering``.
    """
    if (img.height, img.width) != (basis.height, basis.width):
        raise ValueError(
            f"image {img.height}x{img.width} does not match basis {basis.height}x{basis.width}"
        )
    coeff2d = np.einsum("ur,rcq,vc->uvq", basis._au, img.values, basis._av)
    return coeff2d.reshape(basis.n_freq, img.channels)[basis.ordering]


def dct_inverse(coeffs: np.ndarray, basis: DctBasis) -> ImageTensor:
    """Reconstruct an image from ordered coefficients ((n_freq, channels))."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim == 1:
        coeffs = coeffs[:, None]
    if coeffs.shape[0] != basis.n_freq:
        raise ValueError(f"expected {basis.n_freq} coefficients, got {coeffs.shape[0]}")
    channels = coeffs.shape[1]
    linear = np.empty_like(coeffs)
    linear[basis.ordering] = coeffs
    coeff2d = linear.reshape(basis.height, basis.width, channels)
    values = np.einsum("ur,uvq,vc->rcq", basis._au, coeff2d, basis._av)
    return ImageTensor(values)


@dataclass(frozen=True)
class FrequencyBinning:
    """Partition of ordered frequency indices into contiguous bins.

    ``upper_edges`` are inclusive upper indices, strictly increasing, with the
    last equal to n_freq - 1. Bin b covers indices
    (upper_edges[b-1] + 1) .. upper_edges[b], the first bin starting at 0.
    """

    upper_edges: tuple

    def __post_init__(self):
        edges = tuple(int(e) for e in self.upper_edges)
        if not edges:
            raise ValueError("binning needs at least one edge")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("upper edges must be strictly increasing")
        if edges[0] < 0:
            raise ValueError("edges must be non-negative")
        object.__setattr__(self, "upper_edges", edges)

    @property
    def n_bins(self) -> int:
        return len(self.upper_edges)

    @property
    def n_freq(self) -> int:
        return self.upper_edges[-1] + 1

    def ranges(self) -> list[tuple[int, int]]:
        """Inclusive (low, high) index range per bin."""
        lows = [0] + [e + 1 for e in self.upper_edges[:-1]]
        return list(zip(lows, self.upper_edges))

    def bin_of(self, indices: np.ndarray) -> np.ndarray:
        """Bin number for each ordered frequency index."""
        indices = np.asarray(indices)
        if indices.size and (indices.min() < 0 or indices.max() > self.upper_edges[-1]):
            raise ValueError(f"frequency index outside [0, {self.upper_edges[-1]}]")
        return np.searchsorted(np.asarray(self.upper_edges), indices)

    def aggregate(self, per_freq: np.ndarray) -> np.ndarray:
        """Sum a per-frequency vector (or matrix rows) into bins."""
        per_freq = np.asarray(per_freq)
        if per_freq.shape[0] != self.n_freq:
            raise ValueError(f"expected {self.n_freq} rows, got {per_freq.shape[0]}")
        out = np.zeros((self.n_bins,) + per_freq.shape[1:])
        np.add.at(out, self.bin_of(np.arange(self.n_freq)), per_freq)
        return out


def default_binning(n_freq: int, n_bins: int = 19) -> FrequencyBinning:
    """Power-scale binning of n_freq ordered frequencies.

    For the 50176-frequency layout with 19 bins the preset upper edges are
    returned verbatim. Otherwise edges follow a geometric progression,
    e_i = round(n_freq**((i+1)/n_bins)) - 1, deduplicated (so fewer than
    n_bins bins may come back), with the last edge forced to n_freq - 1.
    """
    if n_freq < 1:
        raise ValueError("n_freq must be positive")
    if not (1 <= n_bins <= n_freq):
        raise ValueError(f"n_bins must lie in [1, {n_freq}], got {n_bins}")
    if n_freq == 50176 and n_bins == 19:
        return FrequencyBinning(_PRESET_EDGES_50176)
    raw = [int(round(n_freq ** ((i + 1) / n_bins))) - 1 for i in range(n_bins)]
    edges = sorted({min(max(e, 0), n_freq - 1) for e in raw})
    if edges[-1] != n_freq - 1:
        edges.append(n_freq - 1)
    return FrequencyBinning(tuple(edges))


def export_coefficients_csv(coeffs: np.ndarray, basis: DctBasis, path) -> None:
    """Write ordered coefficients as rows of index,u,v,value (channels summed)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim == 1:
        coeffs = coeffs[:, None]
    merged = coeffs.sum(axis=1)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "u", "v", "value"])
        for k in range(basis.n_freq):
            u, v = basis.freq_pairs[k]
            writer.writerow([k, int(u), int(v), repr(float(merged[k]))])
