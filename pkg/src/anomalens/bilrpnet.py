"""Small explicit networks with relevance propagation and second-order similarity explanations.

Networks are plain layer lists (dense, conv2d, relu, sum_pool, flatten) with
every dimension explicit, sized for verification rather than performance: the
direct second-order oracle materializes per-layer weight matrices, so total
hidden width is capped at 64 units.

First-order relevance uses the epsilon-stabilized proportional rule on every
weighted layer (epsilon 0 recovers the plain variant): with pre-activations
z_k = sum_j a_j w_jk + b_k,

    R_j = sum_k (a_j * w_jk) / (z_k + eps * sign(z_k)) * R_k

Bias relevance is absorbed, relu passes relevance through unchanged, sum
pooling redistributes proportionally to inputs. Dead outputs (z = 0 under the
plain rule) propagate zero relevance rather than NaN.

A similarity y = <phi(x), phi(x2)> decomposes over input pairs (j, j') either
by summing outer products of per-unit relevance maps,

    bilrp(x, x2) = sum_k lrp(phi_k(x)) (x) lrp(phi_k(x2)),

or by propagating the full K x K relevance matrix through both copies layer
by layer (``bilrp_direct``), with the same per-side stabilizer convention in
both denominators. The two agree to numerical precision; the direct form is
the oracle the factorized one is tested against.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_HIDDEN_WIDTH = 64


def _sign(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0.0, 1.0, -1.0)


class Dense:
    """y_k = sum_j a_j * weights[j, k] + bias[k]."""

    def __init__(self, weights, bias=None):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"dense weights must be 2-d, got shape {w.shape}")
        self.weights = w
        self.bias = np.zeros(w.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)
        if self.bias.shape != (w.shape[1],):
            raise ValueError(f"bias shape {self.bias.shape} does not match {w.shape[1]} outputs")

    @property
    def n_units(self) -> int:
        return self.weights.shape[1]

    def forward(self, a):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (self.weights.shape[0],):
            raise ValueError(f"dense expects shape ({self.weights.shape[0]},), got {a.shape}")
        return a @ self.weights + self.bias

    def linear(self, a):
        return np.asarray(a) @ self.weights

    def adjoint(self, s, in_shape):
        return self.weights @ np.asarray(s)

    def to_json(self):
        return {"type": "dense", "weights": self.weights.tolist(), "bias": self.bias.tolist()}


class Conv2d:
    """Valid-padding convolution; kernels (kh, kw, c_in, c_out), positive stride."""

    def __init__(self, kernels, bias=None, stride=1):
        k = np.asarray(kernels, dtype=np.float64)
        if k.ndim != 4:
            raise ValueError(f"kernels must be 4-d (kh, kw, c_in, c_out), got {k.shape}")
        if stride < 1:
            raise ValueError(f"stride must be positive, got {stride}")
        self.kernels = k
        self.stride = int(stride)
        c_out = k.shape[3]
        self.bias = np.zeros(c_out) if bias is None else np.asarray(bias, dtype=np.float64)
        if self.bias.shape != (c_out,):
            raise ValueError(f"bias shape {self.bias.shape} does not match {c_out} maps")

    @property
    def n_units(self) -> int:
        return self.kernels.shape[3]

    def _out_hw(self, a):
        kh, kw, cin, _ = self.kernels.shape
        h, w, c = a.shape
        if c != cin:
            raise ValueError(f"conv expects {cin} input channels, got {c}")
        if h < kh or w < kw:
            raise ValueError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
        return (h - kh) // self.stride + 1, (w - kw) // self.stride + 1

    def linear(self, a):
        a = np.asarray(a, dtype=np.float64)
        kh, kw, _, cout = self.kernels.shape
        ho, wo = self._out_hw(a)
        st = self.stride
        out = np.zeros((ho, wo, cout))
        for di in range(kh):
            for dj in range(kw):
                tile = a[di : di + (ho - 1) * st + 1 : st, dj : dj + (wo - 1) * st + 1 : st, :]
                out += np.einsum("hwc,co->hwo", tile, self.kernels[di, dj])
        return out

    def forward(self, a):
        return self.linear(a) + self.bias

    def adjoint(self, s, in_shape):
        s = np.asarray(s, dtype=np.float64)
        kh, kw, _, _ = self.kernels.shape
        ho, wo = s.shape[:2]
        st = self.stride
        grad = np.zeros(in_shape)
        for di in range(kh):
            for dj in range(kw):
                grad[di : di + (ho - 1) * st + 1 : st, dj : dj + (wo - 1) * st + 1 : st, :] += (
                    np.einsum("hwo,co->hwc", s, self.kernels[di, dj])
                )
        return grad

    def to_json(self):
        return {
            "type": "conv2d",
            "kernels": self.kernels.tolist(),
            "bias": self.bias.tolist(),
            "stride": self.stride,
        }


class Relu:
    def forward(self, a):
        return np.maximum(np.asarray(a, dtype=np.float64), 0.0)

    def to_json(self):
        return {"type": "relu"}


class SumPool:
    """Non-overlapping window sums over both spatial axes, channels kept."""

    def __init__(self, window):
        if window < 1:
            raise ValueError(f"window must be positive, got {window}")
        self.window = int(window)

    def forward(self, a):
        a = np.asarray(a, dtype=np.float64)
        h, w, c = a.shape
        win = self.window
        if h % win or w % win:
            raise ValueError(f"pool window {win} does not tile {h}x{w}")
        return a.reshape(h // win, win, w // win, win, c).sum(axis=(1, 3))

    def linear(self, a):
        return self.forward(a)

    def adjoint(self, s, in_shape):
        up = np.repeat(np.repeat(np.asarray(s), self.window, axis=0), self.window, axis=1)
        return up

    def to_json(self):
        return {"type": "sum_pool", "window": self.window}


class Flatten:
    def forward(self, a):
        return np.asarray(a, dtype=np.float64).reshape(-1)

    def to_json(self):
        return {"type": "flatten"}


_WEIGHTED = (Dense, Conv2d)


@dataclass
class ToyNetwork:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")

    def forward(self, x) -> np.ndarray:
        return self.forward_trace(x)[-1]

    def forward_trace(self, x) -> list:
        """Activations [input, after layer 0, ..., representation]."""
        acts = [np.asarray(x, dtype=np.float64)]
        for layer in self.layers:
            acts.append(layer.forward(acts[-1]))
        return acts

    def representation(self, x) -> np.ndarray:
        rep = self.forward(x)
        if rep.ndim != 1:
            raise ValueError("representation is not a vector; end the network with flatten or dense")
        return rep

    def to_json(self) -> dict:
        return {"layers": [layer.to_json() for layer in self.layers]}


def network_from_json(obj: dict) -> ToyNetwork:
    builders = {
        "dense": lambda o: Dense(o["weights"], o.get("bias")),
        "conv2d": lambda o: Conv2d(o["kernels"], o.get("bias"), o.get("stride", 1)),
        "relu": lambda o: Relu(),
        "sum_pool": lambda o: SumPool(o["window"]),
        "flatten": lambda o: Flatten(),
    }
    layers = []
    for entry in obj["layers"]:
        kind = entry.get("type")
        if kind not in builders:
            raise ValueError(f"unknown layer type {kind!r}")
        layers.append(builders[kind](entry))
    return ToyNetwork(layers)


def load_network(path) -> ToyNetwork:
    return network_from_json(json.loads(Path(path).read_text()))


def save_network(net: ToyNetwork, path) -> None:
    Path(path).write_text(json.dumps(net.to_json(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# relevance propagation


@dataclass(frozen=True)
class LrpRule:
    """epsilon = 0 is the plain rule; ``relative`` scales epsilon by mean |z|."""

    epsilon: float = 0.0
    relative: bool = True


LRP_ZERO = LrpRule(0.0, relative=False)
DEFAULT_EPSILON = LrpRule(1e-6, relative=True)


@dataclass(frozen=True)
class LrpRules:
    """Rule assignment: hidden weighted layers vs the final weighted layer."""

    hidden: LrpRule = DEFAULT_EPSILON
    readout: LrpRule = LRP_ZERO


LRP0_EVERYWHERE = LrpRules(LRP_ZERO, LRP_ZERO)
DEFAULT_RULES = LrpRules()


def _readout_index(net: ToyNetwork) -> int:
    for idx in range(len(net.layers) - 1, -1, -1):
        if isinstance(net.layers[idx], _WEIGHTED):
            return idx
    raise ValueError("network has no weighted layer")


def _rule_for(net: ToyNetwork, idx: int, rules: LrpRules) -> LrpRule:
    return rules.readout if idx == _readout_index(net) else rules.hidden


def _stabilized(z: np.ndarray, rule: LrpRule) -> np.ndarray:
    eps = rule.epsilon
    if rule.relative:
        eps = eps * float(np.mean(np.abs(z)))
    return z + eps * _sign(z)


def _propagate_layer(layer, a_in, z, r_out, rule):
    if isinstance(layer, Relu):
        return r_out
    if isinstance(layer, Flatten):
        return np.asarray(r_out).reshape(np.shape(a_in))
    denom = _stabilized(z, rule)
    s = np.where(denom != 0.0, r_out / np.where(denom != 0.0, denom, 1.0), 0.0)
    return a_in * layer.adjoint(s, np.shape(a_in))


def _backward(net: ToyNetwork, acts: list, r_top: np.ndarray, rules: LrpRules) -> list:
    """Relevance at every interface, index-aligned with ``acts``; [0] is the input map."""
    rel = [None] * len(acts)
    rel[-1] = np.asarray(r_top, dtype=np.float64)
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        rule = _rule_for(net, idx, rules) if isinstance(layer, (Dense, Conv2d, SumPool)) else None
        rel[idx] = _propagate_layer(layer, acts[idx], acts[idx + 1], rel[idx + 1], rule)
    return rel


def lrp(net: ToyNetwork, x, unit: int, rules: LrpRules = DEFAULT_RULES) -> np.ndarray:
    """Input relevance of representation unit ``unit``, initialized at its activation."""
    acts = net.forward_trace(x)
    rep = acts[-1]
    if rep.ndim != 1:
        raise ValueError("representation is not a vector; end the network with flatten or dense")
    if not (0 <= unit < rep.shape[0]):
        raise ValueError(f"unit {unit} out of range for representation of size {rep.shape[0]}")
    r_top = np.zeros_like(rep)
    r_top[unit] = rep[unit]
    return _backward(net, acts, r_top, rules)[0]


@dataclass(frozen=True)
class BiLRPExplanation:
    """Pairwise input relevance r[j, j'] for a similarity; sums to it under plain rules."""

    r: np.ndarray
    similarity: float
    shape1: tuple
    shape2: tuple


def _check_hidden_width(acts: list) -> None:
    hidden = acts[1:-1]
    total = sum(int(np.asarray(a).size) for a in hidden)
    if total > MAX_HIDDEN_WIDTH:
        raise ValueError(f"total hidden width {total} exceeds the supported {MAX_HIDDEN_WIDTH}")


def bilrp(net: ToyNetwork, x, x2, rules: LrpRules = DEFAULT_RULES) -> BiLRPExplanation:
    """Factorized second-order explanation: sum over units of outer products."""
    acts1, acts2 = net.forward_trace(x), net.forward_trace(x2)
    rep1, rep2 = acts1[-1], acts2[-1]
    if rep1.ndim != 1 or rep2.ndim != 1:
        raise ValueError("representation is not a vector; end the network with flatten or dense")
    k = rep1.shape[0]
    maps1 = np.zeros((k, acts1[0].size))
    maps2 = np.zeros((k, acts2[0].size))
    for unit in range(k):
        top1 = np.zeros_like(rep1)
        top1[unit] = rep1[unit]
        maps1[unit] = _backward(net, acts1, top1, rules)[0].reshape(-1)
        top2 = np.zeros_like(rep2)
        top2[unit] = rep2[unit]
        maps2[unit] = _backward(net, acts2, top2, rules)[0].reshape(-1)
    return BiLRPExplanation(
        r=maps1.T @ maps2,
        similarity=float(rep1 @ rep2),
        shape1=tuple(np.shape(x)),
        shape2=tuple(np.shape(x2)),
    )


def _layer_matrix(layer, in_shape) -> np.ndarray:
    """Dense matrix of the layer's linear part, flat-in x flat-out."""
    if isinstance(layer, Dense):
        return layer.weights
    n_in = int(np.prod(in_shape))
    basis = np.zeros(in_shape)
    cols = []
    flat = basis.reshape(-1)
    for i in range(n_in):
        flat[i] = 1.0
        cols.append(layer.linear(basis).reshape(-1))
        flat[i] = 0.0
    return np.stack(cols, axis=0)


def bilrp_direct(net: ToyNetwork, x, x2, rules: LrpRules = DEFAULT_RULES) -> BiLRPExplanation:
    """Oracle: propagate the K x K relevance matrix through both copies layer by layer.

    O(width^2) per layer; the per-layer stabilizer is applied per side in the
    two denominators, which keeps this exactly equal to the factorized form.
    """
    acts1, acts2 = net.forward_trace(x), net.forward_trace(x2)
    rep1, rep2 = acts1[-1], acts2[-1]
    if rep1.ndim != 1 or rep2.ndim != 1:
        raise ValueError("representation is not a vector; end the network with flatten or dense")
    _check_hidden_width(acts1)
    _check_hidden_width(acts2)
    r = np.diag(rep1 * rep2)
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        if isinstance(layer, (Relu, Flatten)):
            continue
        rule = _rule_for(net, idx, rules)
        w_full = _layer_matrix(layer, np.shape(acts1[idx]))

        def side_matrix(a_in, z):
            denom = _stabilized(np.asarray(z).reshape(-1), rule)
            inv = np.where(denom != 0.0, 1.0 / np.where(denom != 0.0, denom, 1.0), 0.0)
            return np.asarray(a_in).reshape(-1)[:, None] * w_full * inv[None, :]

        c1 = side_matrix(acts1[idx], acts1[idx + 1])
        c2 = side_matrix(acts2[idx], acts2[idx + 1])
        r = c1 @ r @ c2.T
    return BiLRPExplanation(
        r=r,
        similarity=float(rep1 @ rep2),
        shape1=tuple(np.shape(x)),
        shape2=tuple(np.shape(x2)),
    )


# ---------------------------------------------------------------------------
# patch aggregation and rendering


@dataclass(frozen=True)
class PatchMatrix:
    """Block sums of a pairwise input relevance matrix; grids in patch units."""

    values: np.ndarray
    patch: int
    grid1: tuple
    grid2: tuple


def _patch_assignment(shape, patch: int) -> tuple[np.ndarray, tuple]:
    if len(shape) == 1:
        raise ValueError("patch aggregation needs grid-shaped inputs")
    h, w = shape[0], shape[1]
    c = shape[2] if len(shape) > 2 else 1
    if h % patch or w % patch:
        raise ValueError(f"patch {patch} does not tile {h}x{w}")
    ph, pw = h // patch, w // patch
    rows = np.repeat(np.arange(h) // patch, w * c)
    cols = np.tile(np.repeat(np.arange(w) // patch, c), h)
    return rows * pw + cols, (ph, pw)


def aggregate_patches(expl: BiLRPExplanation, patch: int) -> PatchMatrix:
    """Sum r over patch x patch blocks of both input grids; totals are preserved."""
    if patch < 1:
        raise ValueError("patch must be positive")
    a1, grid1 = _patch_assignment(expl.shape1, patch)
    a2, grid2 = _patch_assignment(expl.shape2, patch)
    p1, p2 = grid1[0] * grid1[1], grid2[0] * grid2[1]
    m1 = np.zeros((p1, expl.r.shape[0]))
    m1[a1, np.arange(expl.r.shape[0])] = 1.0
    m2 = np.zeros((p2, expl.r.shape[1]))
    m2[a2, np.arange(expl.r.shape[1])] = 1.0
    return PatchMatrix(m1 @ expl.r @ m2.T, patch, grid1, grid2)


def export_bilrp_csv(pm: PatchMatrix, path) -> None:
    """Rows of patch_i, patch_j, value over all patch pairs."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_i", "patch_j", "value"])
        for i in range(pm.values.shape[0]):
            for j in range(pm.values.shape[1]):
                writer.writerow([i, j, repr(float(pm.values[i, j]))])


def render_bilrp(pm: PatchMatrix, img1, img2, path) -> None:
    """Bipartite connection graphic: the two images side by side, patch centers
    joined by lines with opacity scaled by |value|, red positive, blue negative.
    Connections below the 95th percentile of |value| are omitted."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    vals = pm.values
    cutoff = float(np.percentile(np.abs(vals), 95))
    vmax = float(np.abs(vals).max())
    arr1 = np.asarray(img1, dtype=np.float64)
    arr2 = np.asarray(img2, dtype=np.float64)
    if arr1.ndim == 3 and arr1.shape[2] == 1:
        arr1 = arr1[:, :, 0]
    if arr2.ndim == 3 and arr2.shape[2] == 1:
        arr2 = arr2[:, :, 0]
    h1, w1 = arr1.shape[:2]
    h2, w2 = arr2.shape[:2]
    gap = max(h1, h2) * 0.4

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(arr1, cmap="gray", vmin=-1, vmax=1, extent=(0, w1, h1, 0))
    ax.imshow(arr2, cmap="gray", vmin=-1, vmax=1, extent=(0, w2, h1 + gap + h2, h1 + gap))
    if vmax > 0.0:
        for i in range(vals.shape[0]):
            for j in range(vals.shape[1]):
                v = vals[i, j]
                if abs(v) < cutoff or v == 0.0:
                    continue
                r1, c1 = divmod(i, pm.grid1[1])
                r2, c2 = divmod(j, pm.grid2[1])
                x_a = (c1 + 0.5) * pm.patch
                y_a = (r1 + 0.5) * pm.patch
                x_b = (c2 + 0.5) * pm.patch
                y_b = h1 + gap + (r2 + 0.5) * pm.patch
                ax.plot(
                    [x_a, x_b], [y_a, y_b],
                    color="red" if v > 0 else "blue",
                    alpha=min(1.0, abs(v) / vmax),
                    linewidth=1.5,
                )
    ax.set_xlim(0, max(w1, w2))
    ax.set_ylim(h1 + gap + h2, 0)
    ax.axis("off")
    fig.savefig(Path(path), dpi=120, bbox_inches="tight")
    plt.close(fig)


# ---------------------------------------------------------------------------
# linear readout on frozen embeddings


@dataclass(frozen=True)
class LinearReadout:
    """Ridge-regularized logistic readout with a dual (representer) view.

    ``weights`` solve the primal problem by full-batch gradient descent;
    ``alpha`` projects them back onto the span of the training embeddings, so
    primal and kernel-form decision functions agree whenever the weights lie
    in that span (always true when descent starts at zero).
    """

    weights: np.ndarray
    theta: float
    alpha: np.ndarray
    train_embeddings: np.ndarray

    def decision(self, embeddings) -> np.ndarray:
        return np.asarray(embeddings, dtype=np.float64) @ self.weights + self.theta

    def decision_dual(self, embeddings) -> np.ndarray:
        gram = np.asarray(embeddings, dtype=np.float64) @ self.train_embeddings.T
        return gram @ self.alpha + self.theta

    def predict(self, embeddings) -> np.ndarray:
        return (self.decision(embeddings) > 0.0).astype(np.int64)


def fit_linear_readout(embeddings, labels, l2: float = 1e-3,
                       max_iter: int = 200000, tol: float = 1e-6) -> LinearReadout:
    """Full-batch gradient descent (Armijo backtracking for the step size only)
    on the l2-regularized logistic loss, run to gradient norm < ``tol``.

    Labels may be {0, 1} or {-1, +1}. Raises RuntimeError with the final
    gradient norm if the tolerance is not reached within ``max_iter`` steps.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 1:
        raise ValueError(f"embeddings must be (n, dim), got {e.shape}")
    y_raw = np.asarray(labels, dtype=np.float64)
    if y_raw.shape != (e.shape[0],):
        raise ValueError(f"labels shape {y_raw.shape} does not match {e.shape[0]} embeddings")
    if not set(np.unique(y_raw)).issubset({-1.0, 0.0, 1.0}):
        raise ValueError("labels must be binary ({0,1} or {-1,+1})")
    y = np.where(y_raw > 0.0, 1.0, -1.0)
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    n = e.shape[0]

    def loss(w, theta):
        f = e @ w + theta
        return float(np.mean(np.logaddexp(0.0, -y * f)) + 0.5 * l2 * (w @ w))

    w = np.zeros(e.shape[1])
    theta = 0.0
    step = 1.0
    current = loss(w, theta)
    gnorm = np.inf
    for _ in range(max_iter):
        f = e @ w + theta
        m = 1.0 / (1.0 + np.exp(y * f))  # sigmoid(-y*f)
        gw = -(e.T @ (y * m)) / n + l2 * w
        gt = -float(np.mean(y * m))
        gnorm = float(np.sqrt(gw @ gw + gt * gt))
        if gnorm < tol:
            break
        while True:
            w_new = w - step * gw
            t_new = theta - step * gt
            new = loss(w_new, t_new)
            if new <= current - 0.5 * step * gnorm * gnorm or step < 1e-12:
                break
            step *= 0.5
        w, theta, current = w_new, t_new, new
        step = min(step * 1.5, 1e6)
    else:
        raise RuntimeError(f"linear readout did not converge: gradient norm {gnorm:.3e}")

    alpha, *_ = np.linalg.lstsq(e.T, w, rcond=None)
    return LinearReadout(weights=w, theta=float(theta), alpha=alpha, train_embeddings=e)


# ---------------------------------------------------------------------------
# feature-map pruning


def unit_relevance_masses(net: ToyNetwork, probe_pairs, layer: int,
                          rules: LrpRules = DEFAULT_RULES) -> np.ndarray:
    """Per-unit second-order relevance mass at a weighted layer's output.

    For each probe pair the layer-level pairwise explanation is evaluated on
    its diagonal (per unit, spatially aggregated for conv maps) and the
    absolute masses are summed over pairs.
    """
    target = net.layers[layer]
    if not isinstance(target, _WEIGHTED):
        raise ValueError("designated layer must be dense or conv2d")
    masses = np.zeros(target.n_units)
    for x, x2 in probe_pairs:
        acts1, acts2 = net.forward_trace(x), net.forward_trace(x2)
        rep1, rep2 = acts1[-1], acts2[-1]
        if rep1.ndim != 1 or rep2.ndim != 1:
            raise ValueError("representation is not a vector; end the network with flatten or dense")
        per_unit = np.zeros(target.n_units)
        for k in range(rep1.shape[0]):
            top1 = np.zeros_like(rep1)
            top1[k] = rep1[k]
            top2 = np.zeros_like(rep2)
            top2[k] = rep2[k]
            r1 = _backward(net, acts1, top1, rules)[layer + 1]
            r2 = _backward(net, acts2, top2, rules)[layer + 1]
            if r1.ndim == 3:
                s1 = r1.sum(axis=(0, 1))
                s2 = r2.sum(axis=(0, 1))
            else:
                s1, s2 = r1, r2
            per_unit += s1 * s2
        masses += np.abs(per_unit)
    return masses


def prune_feature_maps(net: ToyNetwork, probe_pairs, n: int,
                       rules: LrpRules = DEFAULT_RULES, layer: int | None = None) -> ToyNetwork:
    """Silence the n units most responsive (by second-order relevance mass over
    the probe pairs) at the designated weighted layer; returns a modified copy.

    Silencing zeroes the unit's incoming weights and bias, which forces its
    activation to zero everywhere, exactly equivalent to severing all of its
    outgoing connections while keeping every shape stable. n = 0 returns an
    identical copy.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if layer is None:
        layer = next(i for i, l in enumerate(net.layers) if isinstance(l, _WEIGHTED))
    if not isinstance(net.layers[layer], _WEIGHTED):
        raise ValueError("designated layer must be dense or conv2d")
    pruned = ToyNetwork([copy.deepcopy(l) for l in net.layers])
    width = net.layers[layer].n_units
    if n > width:
        raise ValueError(f"cannot prune {n} of {width} units")
    if n == 0:
        return pruned
    masses = unit_relevance_masses(net, probe_pairs, layer, rules)
    order = np.argsort(-masses, kind="stable")
    target = pruned.layers[layer]
    for unit in order[:n]:
        if isinstance(target, Dense):
            target.weights[:, unit] = 0.0
        else:
            target.kernels[:, :, :, unit] = 0.0
        target.bias[unit] = 0.0
    return pruned
