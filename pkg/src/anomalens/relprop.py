"""Relevance decompositions of the distance-model score.

Two stages. First the score is split over bank neighbors by the soft-minimum's
own membership weights ("min-take-most"):

    R_j = [exp(-gamma*d_j) / sum_j' exp(-gamma*d_j')] * score(x)

which sums to the score exactly. Second, for squared-distance models (p = 2),
each R_j is split jointly over pixels i and basis frequencies k through the
identity d_j = sum_k <v_k, Delta_j>^2 of an orthonormal basis:

    r_ik = sum_j ([Delta_j]_i * [v_k]_i * <v_k, Delta_j>) / (eps + ||Delta_j||^2) * R_j

evaluated in collapsed form (never materializing the pixel x pixel x frequency
tensor). The stabilizer eps accounts for inputs that overlap bank points;
total relevance then lands in [score*(1 - maxleak), score] with
maxleak = max_j eps/(eps + d_j).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage

from . import d2neighbors as d2n
from .imagegrid import ImageTensor
from .spectral import DctBasis, FrequencyBinning


@dataclass(frozen=True)
class InstanceRelevance:
    """Per-neighbor share of the score; values sum to ``score``."""

    values: np.ndarray
    score: float


@dataclass(frozen=True)
class JointRelevanceMap:
    """Collapsed joint relevance r[i, k] over pixels i (channels folded) and frequencies k.

    ``freq_indices`` names the ordered basis index of each column (a subset
    when the evaluation was restricted to certain frequencies for speed).
    ``leak_bound`` is max_j eps/(eps + d_j); with the full frequency set the
    total sum(r) lies in [score*(1 - leak_bound), score].
    """

    r: np.ndarray
    epsilon: float
    score: float
    leak_bound: float
    height: int
    width: int
    freq_indices: np.ndarray


@dataclass(frozen=True)
class PixelRelevanceMap:
    values: np.ndarray  # (height, width)


@dataclass(frozen=True)
class FrequencyRelevanceProfile:
    """Relevance per frequency bin; aligned with ``binning.ranges()``."""

    values: np.ndarray
    binning: FrequencyBinning


def instance_relevance(model: d2n.D2NeighborsModel, x: ImageTensor) -> InstanceRelevance:
    """Split score(x) over bank neighbors by membership weight."""
    d = d2n.bank_distances(model, x)
    weights = d2n.membership_weights(d, model.gamma)
    o = d2n.softmin_mean(d, model.gamma)
    return InstanceRelevance(values=weights * o, score=o)


def joint_relevance(
    model: d2n.D2NeighborsModel,
    x: ImageTensor,
    basis: DctBasis,
    epsilon: float | None = None,
    frequencies=None,
) -> JointRelevanceMap:
    """Joint pixel-frequency relevance of score(x); squared distances only.

    Parameters
    ----------
    model : fitted model with p = 2
    basis : orthonormal basis matching the model's image grid
    epsilon : stabilizer; default 1e-6 * mean_j ||Delta_j||^2
    frequencies : optional iterable of ordered frequency indices to restrict
        the columns to (marginals over the restricted set only)
    """
    if model.p != 2:
        raise ValueError(f"joint relevance is defined for p = 2, got p = {model.p}")
    h, w, c = model.image_shape
    if (basis.height, basis.width) != (h, w):
        raise ValueError(f"basis {basis.height}x{basis.width} does not match model grid {h}x{w}")
    delta, d = d2n.bank_residuals(model, x)  # delta: (N, H*W*C)
    rel = instance_relevance(model, x)
    if epsilon is None:
        epsilon = 1e-6 * float(d.mean())
    denom = epsilon + d
    scale = np.where(denom > 0.0, rel.values / np.where(denom > 0.0, denom, 1.0), 0.0)

    if frequencies is None:
        freq_indices = np.arange(basis.n_freq)
        v = basis.matrix
    else:
        freq_indices = np.asarray(list(frequencies), dtype=np.int64)
        v = basis.matrix[freq_indices]

    n = delta.shape[0]
    hw = h * w
    r = np.zeros((hw, len(freq_indices)))
    per_channel = delta.reshape(n, h, w, c)
    for ch in range(c):
        dc = np.ascontiguousarray(per_channel[:, :, :, ch].reshape(n, hw))
        coeff = dc @ v.T                  # (N, K): <v_k, Delta_j^ch>
        weighted = scale[:, None] * dc    # (N, HW)
        r += (weighted.T @ coeff) * v.T
    leak = float(np.max(np.where(denom > 0.0, epsilon / np.where(denom > 0.0, denom, 1.0), 0.0)))
    return JointRelevanceMap(
        r=r, epsilon=float(epsilon), score=rel.score, leak_bound=leak,
        height=h, width=w, freq_indices=freq_indices,
    )


def pixel_map(jr: JointRelevanceMap) -> PixelRelevanceMap:
    """Marginal over frequencies: row sums of r, reshaped to the pixel grid."""
    return PixelRelevanceMap(jr.r.sum(axis=1).reshape(jr.height, jr.width))


def band_filtered_pixel_map(jr: JointRelevanceMap, low: int, high: int) -> PixelRelevanceMap:
    """Pixel map restricted to ordered frequency indices low..high inclusive."""
    if low > high:
        raise ValueError(f"empty band {low}:{high}")
    mask = (jr.freq_indices >= low) & (jr.freq_indices <= high)
    if not mask.any():
        raise ValueError(f"band {low}:{high} selects no computed frequencies")
    return PixelRelevanceMap(jr.r[:, mask].sum(axis=1).reshape(jr.height, jr.width))


def frequency_profile(jr: JointRelevanceMap, binning: FrequencyBinning) -> FrequencyRelevanceProfile:
    """Marginal over pixels, aggregated into frequency bins."""
    if binning.n_freq != jr.height * jr.width:
        raise ValueError(
            f"binning covers {binning.n_freq} frequencies, grid has {jr.height * jr.width}"
        )
    per_freq = np.zeros(binning.n_freq)
    per_freq[jr.freq_indices] = jr.r.sum(axis=0)
    return FrequencyRelevanceProfile(binning.aggregate(per_freq), binning)


def mean_frequency_profile(maps, binning: FrequencyBinning, normalize: bool = False) -> FrequencyRelevanceProfile:
    """Average the binned profiles of several instances.

    With ``normalize`` each instance's profile is divided by its own total
    relevance first, so instances with large scores do not dominate.
    """
    profiles = []
    for jr in maps:
        prof = frequency_profile(jr, binning).values
        if normalize:
            total = prof.sum()
            if total != 0.0:
                prof = prof / total
        profiles.append(prof)
    if not profiles:
        raise ValueError("no instances to average")
    return FrequencyRelevanceProfile(np.mean(profiles, axis=0), binning)


def render_heatmap(pmap: PixelRelevanceMap, path) -> None:
    """Write a diverging red/blue PNG: red positive, blue negative, white zero.

    Intensity is scaled by the 99th percentile of |values| so single outlier
    pixels do not wash out the map; a constant positive map renders uniform
    red at full intensity.
    """
    v = pmap.values
    scale = float(np.percentile(np.abs(v), 99))
    if scale == 0.0:
        t = np.zeros_like(v)
    else:
        t = np.clip(v / scale, -1.0, 1.0)
    pos = np.clip(t, 0.0, 1.0)
    neg = np.clip(-t, 0.0, 1.0)
    rgb = np.stack([1.0 - neg, 1.0 - pos - neg, 1.0 - pos], axis=2)
    raw = np.round(255.0 * np.clip(rgb, 0.0, 1.0)).astype(np.uint8)
    _PILImage.fromarray(raw, mode="RGB").save(Path(path))


def export_frequency_csv(profile: FrequencyRelevanceProfile, path) -> None:
    """Rows of bin_low, bin_high, relevance (inclusive ordered-index ranges)."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "relevance"])
        for (low, high), value in zip(profile.binning.ranges(), profile.values):
            writer.writerow([low, high, repr(float(value))])
