"""Command-line interface: batch orchestration of the annotation loop.

Verbs: cluster, frangi, train, segment, eval, phantom. The loop a cohort
goes through is: cluster the volumes, run `frangi` on a few of them for an
initial segmentation, refine the masks externally (any NIfTI-capable
editor), `train` on the refined pairs, `segment` the next batch, `eval`
against refined masks, and repeat train/segment/eval as the labeled set
grows.

Exit codes: 0 success, 2 user/input error, 3 data-format error, 4 numeric
failure. Errors print one machine-parsable line to stderr:
``vesselkit: error: <input|format|numeric>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import cluster as clustering
from . import metrics as metrics_mod
from .augment import AugmentParams
from .errors import (
    FileFormatError,
    NumericError,
    ParameterError,
    VesselkitError,
)
from .filters import FrangiParams, binarize, frangi_vesselness, otsu_threshold
from .model import (
    Checkpoint,
    HessNetConfig,
    forward,
    load_checkpoint,
    param_count,
    params_from_checkpoint,
    save_checkpoint,
)
from .nifti import read_mask, read_nifti, write_mask, write_nifti
from .phantom import PhantomSpec, make_phantom
from .train import LossParams, TrainConfig, TrainingDiverged, train
from .volume import apply_mask, z_normalize


@dataclass
class PipelineConfig:
    """All tunables in one JSON document; unknown keys are rejected."""

    model: HessNetConfig = field(default_factory=HessNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossParams = field(default_factory=LossParams)
    frangi: FrangiParams = field(default_factory=FrangiParams)
    augment: AugmentParams = field(default_factory=AugmentParams)
    cluster_bins: int = 256
    figures: bool = False


def _check_keys(doc: dict, allowed, context: str) -> None:
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ParameterError(f"unknown {context} keys: {sorted(unknown)}")


def load_pipeline_config(path) -> PipelineConfig:
    with open(path) as fh:
        doc = json.load(fh)
    _check_keys(doc, {"model", "train", "loss", "frangi", "augment", "cluster", "report"}, "config")
    cfg = PipelineConfig()
    if "model" in doc:
        cfg.model = HessNetConfig.from_dict(doc["model"])
    if "train" in doc:
        _check_keys(doc["train"], TrainConfig.__dataclass_fields__, "train config")
        cfg.train = TrainConfig(**doc["train"])
    if "loss" in doc:
        _check_keys(doc["loss"], LossParams.__dataclass_fields__, "loss config")
        cfg.loss = LossParams(**doc["loss"])
    if "frangi" in doc:
        _check_keys(doc["frangi"], {"alpha", "beta", "gamma", "scales"}, "frangi config")
        kwargs = dict(doc["frangi"])
        if "scales" in kwargs:
            kwargs["scales"] = tuple(kwargs["scales"])
        cfg.frangi = FrangiParams(**kwargs)
    if "augment" in doc:
        _check_keys(doc["augment"], {"log_gamma_range", "control_grid", "max_displacement"}, "augment config")
        kwargs = dict(doc["augment"])
        if "log_gamma_range" in kwargs:
            kwargs["log_gamma_range"] = tuple(kwargs["log_gamma_range"])
        if "control_grid" in kwargs:
            kwargs["control_grid"] = tuple(kwargs["control_grid"])
        cfg.augment = AugmentParams(**kwargs)
    if "cluster" in doc:
        _check_keys(doc["cluster"], {"bins"}, "cluster config")
        cfg.cluster_bins = int(doc["cluster"].get("bins", 256))
    if "report" in doc:
        _check_keys(doc["report"], {"figures"}, "report config")
        cfg.figures = bool(doc["report"].get("figures", False))
    return cfg


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


# ---------------------------------------------------------------------------
# Commands

def cmd_phantom(args) -> int:
    with open(args.spec) as fh:
        raw = fh.read()
    if "seed" not in json.loads(raw):
        # Fan the master --seed into the phantom stage when the spec omits one.
        doc = json.loads(raw)
        doc["seed"] = args.seed if args.seed is not None else 0
        raw = json.dumps(doc)
    spec = PhantomSpec.from_json(raw)
    vol, mask = make_phantom(spec)
    write_nifti(vol, args.out_volume)
    write_mask(mask, args.out_mask, spacing=spec.spacing)
    print(f"phantom: {spec.dims} volume with {len(spec.tubes)} tube(s), "
          f"{mask.count()} foreground voxels -> {args.out_volume}, {args.out_mask}")
    return 0


def cmd_frangi(args) -> int:
    cfg = load_pipeline_config(args.config) if args.config else PipelineConfig()
    params = cfg.frangi
    if args.alpha is not None or args.beta is not None or args.gamma is not None or args.scales:
        params = FrangiParams(
            alpha=args.alpha if args.alpha is not None else params.alpha,
            beta=args.beta if args.beta is not None else params.beta,
            gamma=args.gamma if args.gamma is not None else params.gamma,
            scales=tuple(float(s) for s in args.scales.split(",")) if args.scales else params.scales,
        )
    vol = read_nifti(args.input)
    vmap = frangi_vesselness(vol, params)
    if args.mask:
        vmap = apply_mask(vmap, read_mask(args.mask))

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = _stem(Path(args.input))
    vessel_path = out_dir / f"{stem}_vesselness.nii.gz"
    write_nifti(vmap, vessel_path)
    print(f"frangi: vesselness -> {vessel_path}")

    mask_out = None
    if args.threshold != "none":
        if args.threshold == "otsu":
            try:
                thr = otsu_threshold(vmap)
            except VesselkitError:
                thr = float(vmap.data.max())   # constant map: nothing above threshold
        else:
            thr = float(args.threshold)
        mask_out = binarize(vmap, thr)
        mask_path = out_dir / f"{stem}_mask.nii.gz"
        write_mask(mask_out, mask_path, spacing=vol.spacing)
        print(f"frangi: threshold {thr:.6g} -> {mask_path} ({mask_out.count()} voxels)")

    if args.figures:
        from . import report

        overlays = {"vesselness": vmap}
        if mask_out is not None:
            overlays["mask"] = mask_out
        report.save_slice_figure(vol, overlays, out_dir / f"{stem}_frangi.png")
    return 0


def _load_manifest(path):
    with open(path) as fh:
        doc = json.load(fh)
    _check_keys(doc, {"pairs", "validation"}, "manifest")
    pairs_doc = doc.get("pairs", [])
    if not pairs_doc:
        raise ParameterError(f"{path}: manifest lists no (volume, label) pairs")
    pairs = []
    for i, entry in enumerate(pairs_doc):
        _check_keys(entry, {"volume", "label"}, f"manifest pairs[{i}]")
        vol = read_nifti(entry["volume"])
        msk = read_mask(entry["label"])
        if vol.dims != msk.dims:
            raise ParameterError(
                f"manifest pair {i}: volume dims {vol.dims} != label dims {msk.dims} "
                f"({entry['volume']} / {entry['label']})"
            )
        pairs.append((vol, msk))
    val_pair = None
    if "validation" in doc:
        _check_keys(doc["validation"], {"volume", "label"}, "manifest validation")
        val_pair = (read_nifti(doc["validation"]["volume"]), read_mask(doc["validation"]["label"]))
    return pairs, val_pair


def cmd_train(args) -> int:
    cfg = load_pipeline_config(args.config) if args.config else PipelineConfig()
    tc = cfg.train
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        tc = TrainConfig(**{**tc.__dict__, **overrides})

    pairs, val_pair = _load_manifest(args.manifest)
    history_path = Path(args.history) if args.history else Path(args.checkpoint_out).with_suffix(".history.jsonl")
    try:
        params, history = train(pairs, cfg.model, tc, cfg.loss, val_pair=val_pair, augment=cfg.augment)
    except TrainingDiverged as exc:
        save_checkpoint(
            Checkpoint(config=cfg.model, values=exc.params.values, seed=tc.seed, epoch=len(exc.history)),
            args.checkpoint_out,
        )
        _write_history(exc.history, history_path)
        raise

    save_checkpoint(
        Checkpoint(config=cfg.model, values=params.values, seed=tc.seed, epoch=tc.epochs),
        args.checkpoint_out,
    )
    _write_history(history, history_path)
    print(f"train: {len(pairs)} pair(s), {tc.epochs} epochs, {param_count(cfg.model)} parameters "
          f"-> {args.checkpoint_out}")
    if history and history[-1].val_dsc is not None:
        print(f"train: final validation DSC = {history[-1].val_dsc:.4f}")
    if args.figures:
        from . import report

        report.save_history_figure(history, history_path.with_suffix(".png"))
    return 0


def _write_history(history, path: Path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def cmd_segment(args) -> int:
    cp = load_checkpoint(args.checkpoint)
    params = params_from_checkpoint(cp)
    vol = read_nifti(args.input)
    probs = forward(params, cp.config, z_normalize(vol))
    if args.mask:
        probs = apply_mask(probs, read_mask(args.mask))

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = _stem(Path(args.input))
    prob_path = out_dir / f"{stem}_prob.nii.gz"
    mask_path = out_dir / f"{stem}_mask.nii.gz"
    write_nifti(probs, prob_path)
    mask = binarize(probs, args.threshold)
    write_mask(mask, mask_path, spacing=vol.spacing)
    print(f"segment: -> {prob_path}, {mask_path} ({mask.count()} voxels at threshold {args.threshold})")

    if args.figures:
        from . import report

        report.save_slice_figure(vol, {"probability": probs, "mask": mask}, out_dir / f"{stem}_segment.png")
    return 0


def cmd_eval(args) -> int:
    pred = read_mask(args.pred)
    gt = read_mask(args.gt)
    if pred.dims != gt.dims:
        raise ParameterError(f"prediction dims {pred.dims} != ground-truth dims {gt.dims}")
    spacing = read_nifti(args.pred).spacing if args.mm else None
    rep = metrics_mod.evaluate_masks(pred, gt, spacing=spacing, n_params=args.params_count)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rep.to_json() + "\n")
    summary = ", ".join(
        f"{name}={getattr(rep, name):.4f}" if getattr(rep, name) is not None else f"{name}=undefined"
        for name in ("dsc", "sensitivity", "specificity", "accuracy", "precision", "ahd")
    )
    print(f"eval: {summary} -> {out}")
    if args.figures:
        from . import report

        report.save_metrics_figure(rep, out.with_suffix(".png"))
    return 0


def cmd_cluster(args) -> int:
    inputs = [Path(p) for p in args.inputs]
    if len(inputs) < 2:
        raise ParameterError("need at least 2 input volumes to cluster")
    if args.k > len(inputs):
        raise ParameterError(f"k={args.k} exceeds the number of inputs ({len(inputs)})")
    cfg = load_pipeline_config(args.config) if args.config else PipelineConfig()
    bins = args.bins if args.bins is not None else cfg.cluster_bins

    def load_one(path: Path):
        return clustering.intensity_histogram(read_nifti(path), bin_count=bins)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            histograms = list(pool.map(load_one, inputs))
    else:
        histograms = [load_one(p) for p in inputs]

    dm = clustering.distance_matrix(histograms)
    assignment = clustering.ward_cluster(dm, args.k)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    distances_path = out_dir / "distances.json"
    clusters_path = out_dir / "clusters.json"
    distances_path.write_text(
        json.dumps({"items": [str(p) for p in inputs], "matrix": dm.values.tolist()}, indent=2) + "\n"
    )
    clusters_path.write_text(
        json.dumps(
            {
                "k": assignment.k,
                "items": [str(p) for p in inputs],
                "labels": assignment.labels,
                "merges": [[l, r, h] for l, r, h in assignment.merges],
            },
            indent=2,
        )
        + "\n"
    )
    print(f"cluster: {len(inputs)} volumes into {args.k} cluster(s) -> {distances_path}, {clusters_path}")

    if args.figures:
        from . import report

        report.save_distance_matrix_figure(dm, assignment, out_dir / "distance_matrix.png")
        report.save_histograms_figure(histograms, [p.name for p in inputs], out_dir / "histograms.png")
    return 0


# ---------------------------------------------------------------------------
# Parser / dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vesselkit",
        description="Hessian-based 3D vessel segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master RNG seed (fanned out per stage)")
    common.add_argument("--jobs", type=int, default=1, help="parallel volume workers where supported")
    common.add_argument("--config", type=str, default=None, help="pipeline config JSON")
    common.add_argument("--figures", action="store_true", help="also render PNG figures")

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic tube phantom")
    p.add_argument("--spec", required=True, help="phantom spec JSON")
    p.add_argument("--out-volume", required=True)
    p.add_argument("--out-mask", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("frangi", parents=[common], help="multi-scale vesselness filter")
    p.add_argument("--input", required=True, help="input NIfTI volume")
    p.add_argument("--mask", default=None, help="brain mask applied before thresholding")
    p.add_argument("--threshold", default="otsu", help="'otsu', 'none', or a fixed float")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--scales", default=None, help="comma-separated smoothing scales in voxels")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_frangi)

    p = sub.add_parser("train", parents=[common], help="train the segmentation network")
    p.add_argument("--manifest", required=True, help="JSON manifest of volume/label pairs")
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--history", default=None, help="history JSONL path (default: next to checkpoint)")
    p.add_argument("--epochs", type=int, default=None, help="override configured epoch count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", parents=[common], help="apply a trained checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask", default=None, help="brain mask applied to the probability map")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", parents=[common], help="evaluate a predicted mask")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--params-count", type=int, default=None, help="model size for the DSCLog score")
    p.add_argument("--mm", action="store_true", help="report AHD in mm (uses voxel spacing)")
    p.add_argument("--out", required=True, help="metrics report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cluster", parents=[common], help="cluster volumes by intensity histogram")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("-k", type=int, required=True, help="target cluster count")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_cluster)

    return parser


def _error_exit(category: str, exc: BaseException) -> int:
    print(f"vesselkit: error: {category}: {exc}", file=sys.stderr)
    return {"input": 2, "format": 3, "numeric": 4}[category]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileFormatError as exc:
        return _error_exit("format", exc)
    except NumericError as exc:
        return _error_exit("numeric", exc)
    except VesselkitError as exc:
        return _error_exit("input", exc)
    except OSError as exc:
        return _error_exit("input", exc)


if __name__ == "__main__":
    sys.exit(main())
