"""Distance-to-neighbors anomaly scoring with a soft minimum over a training bank.

The score of an image x against bank {u_j} is a generalized f-mean of the
p-th-power distances d_j = ||x - u_j||_p^p with f(t) = exp(-gamma*t):

    score(x) = -(1/gamma) * log( (1/N) * sum_j exp(-gamma * d_j) )

which interpolates between the plain mean of the d_j (gamma -> 0) and their
minimum (gamma -> infinity). All exponentials are evaluated after subtracting
min(d), so the score is finite for any gamma and any distance spread.

gamma is calibrated so that the average leave-one-out perplexity of the
membership weights w_j = softmax(-gamma*d)_j over the bank equals a target
fraction of the bank size. Perplexity is monotone non-increasing in gamma,
so a bisection on log(gamma) suffices; when the target is unreachable the
nearest boundary value is returned together with a saturation flag.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagegrid import ImageTensor, apply_preprocess, preprocess_step_from_json

SUPPORTED_P = (1, 2, 4)

_BANK_MAGIC = b"D2NB"


def _as_flat(x) -> np.ndarray:
    if isinstance(x, ImageTensor):
        return x.flat()
    return np.asarray(x, dtype=np.float64).reshape(-1)


def lp_distance(x, u, p: int) -> float:
    """Sum of |x - u|^p over all entries (the p-th power of the lp norm)."""
    if p not in SUPPORTED_P:
        raise ValueError(f"p must be one of {SUPPORTED_P}, got {p}")
    xf, uf = _as_flat(x), _as_flat(u)
    if xf.shape != uf.shape:
        raise ValueError(f"shape mismatch: {xf.shape} vs {uf.shape}")
    diff = np.abs(xf - uf)
    if p == 1:
        return float(diff.sum())
    if p == 2:
        return float(np.square(diff).sum())
    return float((diff**4).sum())


def softmin_mean(distances, gamma: float) -> float:
    """Soft minimum of a distance vector; exact in both temperature limits.

    Evaluated in the min-shifted form m - (1/gamma)*log(mean(exp(-gamma*(d-m))))
    so nothing overflows. Adding a constant to all distances adds exactly that
    constant; the value always lies in [min(d), mean(d)].
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("distance vector is empty")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    m = float(d.min())
    return m - float(np.log(np.mean(np.exp(-gamma * (d - m))))) / gamma


def membership_weights(distances, gamma: float) -> np.ndarray:
    """softmax(-gamma * d), min-shifted; non-negative, sums to 1."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("distance vector is empty")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    e = np.exp(-gamma * (d - d.min()))
    return e / e.sum()


def perplexity(weights) -> float:
    """exp(entropy) of a weight vector; 1 for a point mass, N for uniform."""
    w = np.asarray(weights, dtype=np.float64)
    nz = w[w > 0]
    return float(np.exp(-np.sum(nz * np.log(nz))))


@dataclass(frozen=True)
class GammaPolicy:
    """Calibration target: average leave-one-out perplexity as a bank fraction."""

    target_perplexity_fraction: float = 0.25
    tolerance: float = 0.005  # relative

    def __post_init__(self):
        if not 0.0 < self.target_perplexity_fraction <= 1.0:
            raise ValueError("target_perplexity_fraction must lie in (0, 1]")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class CalibrationResult:
    gamma: float
    achieved_perplexity: float
    saturated: bool


def _pairwise_distances(flat_bank: np.ndarray, p: int) -> np.ndarray:
    n = flat_bank.shape[0]
    d = np.zeros((n, n))
    for i in range(n):
        diff = np.abs(flat_bank - flat_bank[i])
        if p == 1:
            d[i] = diff.sum(axis=1)
        elif p == 2:
            d[i] = np.square(diff).sum(axis=1)
        else:
            d[i] = (diff**4).sum(axis=1)
    return d


def _loo_perplexity(pairwise: np.ndarray, gamma: float) -> float:
    n = pairwise.shape[0]
    total = 0.0
    mask = ~np.eye(n, dtype=bool)
    for i in range(n):
        total += perplexity(membership_weights(pairwise[i, mask[i]], gamma))
    return total / n


def calibrate_gamma(bank, p: int = 2, policy: GammaPolicy = GammaPolicy()) -> CalibrationResult:
    """Pick gamma so the average leave-one-out perplexity hits the policy target.

    ``bank`` is a sequence of at least 3 equally shaped images (or flat
    vectors). Bisection runs on log(gamma) over [1e-12, 1e12] scaled by the
    inverse mean pairwise distance. An unreachable target (for example, all
    bank points mutually equidistant pin the perplexity at N-1) returns the
    closest boundary gamma with ``saturated=True`` instead of raising.
    """
    if p not in SUPPORTED_P:
        raise ValueError(f"p must be one of {SUPPORTED_P}, got {p}")
    flat = np.stack([_as_flat(b) for b in bank])
    n = flat.shape[0]
    if n < 3:
        raise ValueError(f"calibration needs a bank of at least 3, got {n}")
    target = policy.target_perplexity_fraction * n
    pairwise = _pairwise_distances(flat, p)
    mean_dist = float(pairwise[~np.eye(n, dtype=bool)].mean())
    if mean_dist == 0.0:
        # degenerate bank of identical points: perplexity is n-1 at any gamma
        achieved = float(n - 1)
        ok = abs(achieved - target) <= policy.tolerance * target
        return CalibrationResult(1.0, achieved, saturated=not ok)

    lo, hi = 1e-12 / mean_dist, 1e12 / mean_dist
    perp_lo, perp_hi = _loo_perplexity(pairwise, lo), _loo_perplexity(pairwise, hi)

    def within(perp):
        return abs(perp - target) <= policy.tolerance * target

    if target >= perp_lo:
        return CalibrationResult(lo, perp_lo, saturated=not within(perp_lo))
    if target <= perp_hi:
        return CalibrationResult(hi, perp_hi, saturated=not within(perp_hi))

    best = (lo, perp_lo)
    for _ in range(200):
        mid = float(np.sqrt(lo * hi))
        perp_mid = _loo_perplexity(pairwise, mid)
        if abs(perp_mid - target) < abs(best[1] - target):
            best = (mid, perp_mid)
        if within(perp_mid):
            return CalibrationResult(mid, perp_mid, saturated=False)
        if perp_mid > target:
            lo = mid
        else:
            hi = mid
    return CalibrationResult(best[0], best[1], saturated=True)


class D2NeighborsModel:
    """Fitted bank, norm order, temperature and the recorded preprocessing chain."""

    def __init__(self, bank, p: int, gamma: float, preprocess=(), calibration=None):
        if p not in SUPPORTED_P:
            raise ValueError(f"p must be one of {SUPPORTED_P}, got {p}")
        if gamma <= 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        bank = list(bank)
        if not bank:
            raise ValueError("bank must not be empty")
        shape = bank[0].shape
        for im in bank:
            if im.shape != shape:
                raise ValueError(f"bank shapes differ: {im.shape} vs {shape}")
        self.bank = bank
        self.p = p
        self.gamma = float(gamma)
        self.preprocess = tuple(preprocess)
        self.calibration = calibration
        self._flat = np.stack([im.flat() for im in bank])

    @property
    def n(self) -> int:
        return len(self.bank)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.bank[0].shape


def fit(train_images, p: int = 2, preprocess=(), gamma: float | None = None,
        policy: GammaPolicy = GammaPolicy()) -> D2NeighborsModel:
    """Build a model: preprocess the bank, then calibrate gamma unless given."""
    bank = [apply_preprocess(preprocess, im) for im in train_images]
    calibration = None
    if gamma is None:
        calibration = calibrate_gamma(bank, p, policy)
        gamma = calibration.gamma
    return D2NeighborsModel(bank, p, gamma, preprocess, calibration)


def prepare(model: D2NeighborsModel, x: ImageTensor) -> ImageTensor:
    """Run the model's recorded preprocessing chain on one input."""
    out = apply_preprocess(model.preprocess, x)
    if out.shape != model.image_shape:
        raise ValueError(f"preprocessed input {out.shape} does not match bank {model.image_shape}")
    return out


def bank_residuals(model: D2NeighborsModel, x: ImageTensor):
    """(Delta, d): per-neighbor residual rows x - u_j (flat) and distances d_j."""
    xf = prepare(model, x).flat()
    delta = xf[None, :] - model._flat
    absd = np.abs(delta)
    if model.p == 1:
        d = absd.sum(axis=1)
    elif model.p == 2:
        d = np.square(absd).sum(axis=1)
    else:
        d = (absd**4).sum(axis=1)
    return delta, d


def bank_distances(model: D2NeighborsModel, x: ImageTensor) -> np.ndarray:
    return bank_residuals(model, x)[1]


def score(model: D2NeighborsModel, x: ImageTensor) -> float:
    """Soft minimum of the bank distances of the preprocessed input."""
    return softmin_mean(bank_distances(model, x), model.gamma)


def score_batch(model: D2NeighborsModel, images) -> np.ndarray:
    return np.array([score(model, im) for im in images])


# ---------------------------------------------------------------------------
# serialization: JSON manifest plus one raw float64 file per bank image.
# Bank file layout: 16-byte header (magic "D2NB", then u32 height, width,
# channels, little-endian), followed by row-major float64 little-endian values.


def _write_bank_image(img: ImageTensor, path: Path) -> None:
    header = _BANK_MAGIC + struct.pack("<III", img.height, img.width, img.channels)
    path.write_bytes(header + img.values.astype("<f8").tobytes())


def _read_bank_image(path: Path) -> ImageTensor:
    data = path.read_bytes()
    if data[:4] != _BANK_MAGIC:
        raise ValueError(f"bad magic in {path}: {data[:4]!r}")
    h, w, c = struct.unpack("<III", data[4:16])
    expected = 16 + h * w * c * 8
    if len(data) != expected:
        raise ValueError(f"truncated bank file {path}: {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f8", offset=16).reshape(h, w, c)
    return ImageTensor(values.copy())


def save_model(model: D2NeighborsModel, out_dir) -> None:
    out = Path(out_dir)
    (out / "bank").mkdir(parents=True, exist_ok=True)
    files = []
    for idx, img in enumerate(model.bank):
        rel = f"bank/{idx:04d}.d2nb"
        _write_bank_image(img, out / rel)
        files.append(rel)
    manifest = {
        "format": "d2neighbors",
        "p": model.p,
        "gamma": model.gamma,
        "preprocess": [step.to_json() for step in model.preprocess],
        "bank": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(model_dir) -> D2NeighborsModel:
    root = Path(model_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != "d2neighbors":
        raise ValueError(f"not a d2neighbors manifest: {manifest.get('format')!r}")
    preprocess = tuple(preprocess_step_from_json(s) for s in manifest["preprocess"])
    bank = [_read_bank_image(root / rel) for rel in manifest["bank"]]
    return D2NeighborsModel(bank, manifest["p"], manifest["gamma"], preprocess)
