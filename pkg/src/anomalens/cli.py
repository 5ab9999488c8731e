"""Command-line front end: synth, fit, score, explain, shift, bilrp, eval.

Runs are deterministic: a fixed seed and config produce byte-identical JSON
and CSV artifacts. Configs are validated against a closed schema before any
work happens (unknown keys are rejected). Failures print a single
machine-parsable line ``error <code>: detail`` on stderr; usage and config
errors exit 2, runtime failures exit 1, and 0 means every requested artifact
was written and the inline conservation checks passed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import bilrpnet, d2neighbors as d2n, harness, patchlite, relprop
from .imagegrid import (
    NEAREST,
    BlurPolicy,
    ImageTensor,
    ResizePolicy,
    SynthConfig,
    apply_preprocess,
    read_image,
    synth_generate,
    write_image,
)
from .spectral import dct_basis, dct_forward, dct_inverse, default_binning

_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "image_size": {"type": "integer", "minimum": 4},
                "supersample_factor": {"type": "integer", "minimum": 2},
                "noise_amplitude": {"type": "number", "minimum": 0, "maximum": 1},
                "defect_amplitude": {"type": "number", "minimum": 0},
                "defect_radius": {"type": "number", "exclusiveMinimum": 0},
                "n_train_good": {"type": "integer", "minimum": 1},
                "n_test_good": {"type": "integer", "minimum": 1},
                "n_test_defect": {"type": "integer", "minimum": 1},
            },
        },
        "detector": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "model": {"enum": ["d2neighbors", "patchlite"]},
                "p": {"enum": [1, 2, 4]},
                "target_perplexity_fraction": {"type": "number", "exclusiveMinimum": 0},
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
                "mitigation": {"enum": ["none", "blur"]},
                "patch": {"type": "integer", "minimum": 1},
                "stride": {"type": "integer", "minimum": 1},
                "blur_kernel": {"type": "integer", "minimum": 1},
                "blur_sigma": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "binning": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"n_bins": {"type": "integer", "minimum": 1}},
        },
    },
}


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    """Parse and schema-validate a run config; raises ConfigError."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    try:
        jsonschema.validate(raw, _CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        location = "/".join(str(part) for part in exc.absolute_path) or "<root>"
        raise ConfigError(f"config rejected at {location}: {exc.message}")
    return raw


def _config_from_args(args) -> dict:
    return load_config(args.config) if getattr(args, "config", None) else {}


def _synth_config(cfg: dict, seed: int) -> SynthConfig:
    return SynthConfig(category_seed=seed, **cfg.get("synth", {}))


def _detector_config(cfg: dict, args) -> tuple[harness.DetectorConfig, str]:
    det = dict(cfg.get("detector", {}))
    if getattr(args, "p", None) is not None:
        det["p"] = args.p
    if getattr(args, "mitigation", None) is not None:
        det["mitigation"] = args.mitigation
    mitigation = det.pop("mitigation", "none")
    policy_kwargs = {}
    if "target_perplexity_fraction" in det:
        policy_kwargs["target_perplexity_fraction"] = det.pop("target_perplexity_fraction")
    if "tolerance" in det:
        policy_kwargs["tolerance"] = det.pop("tolerance")
    config = harness.DetectorConfig(gamma_policy=d2n.GammaPolicy(**policy_kwargs), **det)
    return config, mitigation


def _preprocess_steps(size: int, mitigation: str, det: harness.DetectorConfig):
    steps = [ResizePolicy(NEAREST, size, size)]
    if mitigation == "blur":
        steps.append(BlurPolicy(det.blur_kernel, det.blur_sigma))
    return steps


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    scfg = _synth_config(cfg, seed)
    train, test, hi_res = synth_generate(scfg)
    out = Path(args.out)
    category = out / "synth"
    (category / "train" / "good").mkdir(parents=True, exist_ok=True)
    for idx, img in enumerate(train):
        write_image(img, category / "train" / "good" / f"{idx:03d}.png")
    for sub in ("good", "defect"):
        (category / "test" / sub).mkdir(parents=True, exist_ok=True)
        (out / "hires" / "test" / sub).mkdir(parents=True, exist_ok=True)
    counters = {"good": 0, "defect": 0}
    for (img, label), (hi, _) in zip(test, hi_res):
        name = f"{counters[label]:03d}.png"
        counters[label] += 1
        write_image(img, category / "test" / label / name)
        write_image(hi, out / "hires" / "test" / label / name)
    print(f"synth: wrote {len(train)} train and {len(test)} test instances under {out}")
    return 0


def cmd_fit(args) -> int:
    cfg = _config_from_args(args)
    det, mitigation = _detector_config(cfg, args)
    size = cfg.get("synth", {}).get("image_size", 64)
    data_dir = Path(args.data)
    train, _ = harness.load_dataset(data_dir.parent, data_dir.name)
    steps = _preprocess_steps(size, mitigation, det)
    out = Path(args.out)
    if det.model == "d2neighbors":
        model = d2n.fit(train, det.p, steps, policy=det.gamma_policy)
        d2n.save_model(model, out)
        saturated = model.calibration.saturated if model.calibration else False
        print(f"fit: d2neighbors p={det.p} gamma={model.gamma:.6g} "
              f"saturated={saturated} bank={model.n} -> {out}")
    else:
        prepped = [apply_preprocess(steps, img) for img in train]
        bank = patchlite.build_memory_bank(prepped, det.patch, det.stride)
        patchlite.save_bank(bank, out, det.patch, det.stride, steps)
        print(f"fit: patchlite prototypes={bank.prototypes.shape[0]} -> {out}")
    return 0


def _load_any_model(model_dir: Path):
    manifest = json.loads((model_dir / "manifest.json").read_text())
    kind = manifest.get("format")
    if kind == "d2neighbors":
        return "d2neighbors", d2n.load_model(model_dir)
    if kind == "patchlite":
        return "patchlite", patchlite.load_bank(model_dir)
    raise ValueError(f"unknown model format {kind!r}")


def _score_one(kind, loaded, img: ImageTensor) -> float:
    if kind == "d2neighbors":
        return d2n.score(loaded, img)
    bank, patch, stride, preprocess = loaded
    prepped = apply_preprocess(preprocess, img)
    return patchlite.patchcore_score(bank, prepped, patch, stride)[0]


def cmd_score(args) -> int:
    kind, loaded = _load_any_model(Path(args.model))
    data = Path(args.data)
    rows = []
    if (data / "test").is_dir():
        _, test = harness.load_dataset(data.parent, data.name)
        for img, label, instance_id in test:
            rows.append((instance_id, _score_one(kind, loaded, img), label))
    elif data.is_dir():
        for path in sorted(data.iterdir()):
            if path.suffix.lower() in (".png", ".ppm", ".pgm"):
                rows.append((path.name, _score_one(kind, loaded, read_image(path)), "unknown"))
        if not rows:
            raise ValueError(f"no images under {data}")
    else:
        rows.append((data.name, _score_one(kind, loaded, read_image(data)), "unknown"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "score", "label"])
        for instance_id, value, label in rows:
            writer.writerow([instance_id, repr(float(value)), label])
    print(f"score: wrote {len(rows)} rows -> {out}")
    return 0


def _parse_band(text: str) -> tuple[int, int]:
    try:
        lo, hi = text.split(":")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise ConfigError(f"band must be LO:HI integers, got {text!r}")
    if lo > hi or lo < 0:
        raise ConfigError(f"band must satisfy 0 <= LO <= HI, got {text!r}")
    return lo, hi


def cmd_explain(args) -> int:
    kind, model = _load_any_model(Path(args.model))
    if kind != "d2neighbors":
        raise ValueError("explain requires a d2neighbors model")
    if model.p != 2:
        raise ValueError(f"explain requires p = 2, the model has p = {model.p}")
    x = read_image(args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rel = relprop.instance_relevance(model, x)
    tol = 1e-9 * max(1.0, abs(rel.score))
    if abs(rel.values.sum() - rel.score) > tol:
        raise ValueError(
            f"conservation failed: instance relevance sums to {rel.values.sum()!r}, "
            f"score is {rel.score!r}"
        )

    h, w, _ = model.image_shape
    basis = dct_basis(h, w)
    prepped = d2n.prepare(model, x)
    round_trip = dct_inverse(dct_forward(prepped, basis), basis)
    if np.max(np.abs(round_trip.values - prepped.values)) > 1e-9:
        raise ValueError("basis round-trip check failed")

    jr = relprop.joint_relevance(model, x, basis)
    total = float(jr.r.sum())
    lower = rel.score * (1.0 - jr.leak_bound)
    if not (lower - tol <= total <= rel.score + tol):
        raise ValueError(
            f"conservation failed: joint relevance totals {total!r}, "
            f"expected within [{lower!r}, {rel.score!r}]"
        )

    relprop.render_heatmap(relprop.pixel_map(jr), out / "heatmap.png")
    binning = default_binning(basis.n_freq, args.bins)
    profile = relprop.frequency_profile(jr, binning)
    relprop.export_frequency_csv(profile, out / "frequency.csv")
    written = ["heatmap.png", "frequency.csv"]
    if args.band:
        lo, hi = _parse_band(args.band)
        if hi >= basis.n_freq:
            raise ValueError(f"band {lo}:{hi} exceeds {basis.n_freq} frequencies")
        band_map = relprop.band_filtered_pixel_map(jr, lo, hi)
        relprop.render_heatmap(band_map, out / f"band_{lo}_{hi}.png")
        written.append(f"band_{lo}_{hi}.png")
    print(f"explain: score={rel.score:.6g} leak<={jr.leak_bound:.3g} wrote {', '.join(written)} -> {out}")
    return 0


def cmd_shift(args) -> int:
    cfg = _config_from_args(args)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    det, mitigation = _detector_config(cfg, args)
    if args.data:
        size = cfg.get("synth", {}).get("image_size", 64)
        sources = [
            harness.ShiftSource.from_directory(Path(d).parent, Path(d).name, size)
            for d in args.data
        ]
    else:
        scfg = _synth_config(cfg, seed)
        sources = [harness.ShiftSource.from_synth(scfg)]
    report = harness.merge_reports(
        [harness.shift_experiment(src, det, mitigation) for src in sources]
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(report.to_json_dict(), out / "report.json")
    (out / "report.txt").write_text(report.table() + "\n")
    print(report.table())
    return 0


def cmd_bilrp(args) -> int:
    net = bilrpnet.load_network(args.network)
    img1 = read_image(args.image)
    img2 = read_image(args.image2)
    first = net.layers[0]
    if isinstance(first, bilrpnet.Dense):
        x1, x2 = img1.flat(), img2.flat()
    else:
        x1, x2 = img1.values, img2.values
    expl = bilrpnet.bilrp(net, x1, x2)
    total_hidden = sum(
        int(np.asarray(a).size) for a in net.forward_trace(x1)[1:-1]
    )
    if total_hidden <= bilrpnet.MAX_HIDDEN_WIDTH:
        oracle = bilrpnet.bilrp_direct(net, x1, x2)
        dev = float(np.max(np.abs(expl.r - oracle.r)))
        if dev > 1e-8:
            raise ValueError(f"factorized and direct propagation disagree by {dev!r}")
    shape1 = expl.shape1 if len(expl.shape1) > 1 else (img1.height, img1.width, img1.channels)
    shape2 = expl.shape2 if len(expl.shape2) > 1 else (img2.height, img2.width, img2.channels)
    grid_expl = bilrpnet.BiLRPExplanation(expl.r, expl.similarity, shape1, shape2)
    pm = bilrpnet.aggregate_patches(grid_expl, args.patch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bilrpnet.export_bilrp_csv(pm, out / "bilrp.csv")
    bilrpnet.render_bilrp(pm, img1.values, img2.values, out / "bilrp.png")
    print(f"bilrp: similarity={expl.similarity:.6g} wrote bilrp.csv, bilrp.png -> {out}")
    return 0


def cmd_eval(args) -> int:
    path = Path(args.scores)
    with path.open() as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"score", "label"} <= set(reader.fieldnames):
            raise ValueError(f"{path} must have instance_id,score,label columns")
        ids, values, labels = [], [], []
        for row in reader:
            ids.append(row.get("instance_id", str(len(ids))))
            values.append(float(row["score"]))
            labels.append(row["label"])
    scores = harness.LabeledScores(np.array(values), tuple(labels), tuple(ids))
    threshold = "optimize" if args.threshold is None else args.threshold
    report = harness.evaluate(scores, threshold)
    _write_json(report.to_json_dict(), Path(args.out))
    print(
        f"eval: threshold={report.threshold:.6g} f1={report.f1:.4f} "
        f"fpr={report.fpr:.4f} fnr={report.fnr:.4f} -> {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anomalens",
        description="Distance-based anomaly detection with pixel/frequency explanations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp, config=True, seed=True, out=True):
        if config:
            sp.add_argument("--config", help="run config JSON (schema-validated)")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        if out:
            sp.add_argument("--out", required=True, help="output directory or file")

    sp = sub.add_parser("synth", help="write a synthetic dataset (plus hi-res originals)")
    add_common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("fit", help="fit a detector on a category directory")
    sp.add_argument("data", help="category directory containing train/good")
    add_common(sp, seed=False)
    sp.add_argument("--p", type=int, choices=(1, 2, 4), default=None)
    sp.add_argument("--mitigation", choices=harness.MITIGATIONS, default=None)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("score", help="score images with a saved model")
    sp.add_argument("model", help="saved model directory")
    sp.add_argument("data", help="category directory, image directory, or single image")
    add_common(sp, config=False, seed=False)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("explain", help="pixel/frequency relevance for one image")
    sp.add_argument("model", help="saved d2neighbors model directory")
    sp.add_argument("image", help="image file")
    add_common(sp, config=False, seed=False)
    sp.add_argument("--band", default=None, help="LO:HI ordered frequency band for an extra map")
    sp.add_argument("--bins", type=int, default=19, help="frequency bins for the profile CSV")
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("shift", help="deployment-shift experiment (synthetic or directories)")
    sp.add_argument("data", nargs="*", help="category directories; omit to use synthetic data")
    add_common(sp)
    sp.add_argument("--p", type=int, choices=(1, 2, 4), default=None)
    sp.add_argument("--mitigation", choices=harness.MITIGATIONS, default=None)
    sp.set_defaults(func=cmd_shift)

    sp = sub.add_parser("bilrp", help="second-order similarity explanation for two images")
    sp.add_argument("network", help="network definition JSON")
    sp.add_argument("image", help="first image")
    sp.add_argument("image2", help="second image")
    add_common(sp, config=False, seed=False)
    sp.add_argument("--patch", type=int, default=4, help="patch side for aggregation")
    sp.set_defaults(func=cmd_bilrp)

    sp = sub.add_parser("eval", help="confusion metrics for a scores CSV")
    sp.add_argument("scores", help="CSV with instance_id,score,label")
    add_common(sp, config=False, seed=False)
    sp.add_argument("--threshold", type=float, default=None,
                    help="fixed threshold; omitted means optimize for F1")
    sp.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error config: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, RuntimeError, AssertionError) as exc:
        print(f"error runtime: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
