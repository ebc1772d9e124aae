"""Command-line interface.

Exit codes: 0 on success, 2 on usage errors (argparse), 1 on runtime failure
with a one-line message on stderr. Every subcommand that involves randomness
takes --seed and reruns bit-exactly for the same inputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import SyntheticSceneSpec, generate_synthetic_scene
from .pipeline import (
    DEFAULT_EVAL_SAMPLES,
    QueryRequest,
    encode_png,
    evaluate,
    gradcheck_run,
    load_run,
    render_frame,
    run_query,
    segment_view,
    train_run,
)
from .losses import LossWeights
from .trainer import GRADCHECK_SELECTORS, TrainSchedule

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmfields",
        description="Voxel radiance + semantic feature fields: train, query, serve.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="raytrace a synthetic scene dataset")
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="JSON file describing the scene (default: built-in desk)")
    p.add_argument("--views", type=int, help="override number of views")
    p.add_argument("--image-size", type=int, help="override square image size")

    p = sub.add_parser("train", help="train a field on a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="JSON file: schedule/weights/field overrides")
    p.add_argument("--desk", action="store_true", help="use the short desk-size schedule")
    p.add_argument("--iters", type=int, nargs=3, metavar=("P1", "P2", "P3"))
    p.add_argument("--rays", type=int, help="rays per batch")
    p.add_argument("--patches", type=int, help="patches per contrastive batch")
    p.add_argument("--samples", type=int, help="samples per ray")
    p.add_argument("--resolution", type=int, nargs=3, metavar=("NX", "NY", "NZ"))
    p.add_argument("--lambda-mms", type=float, dest="lambda_mms")
    p.add_argument("--lambda-cl", type=float, dest="lambda_cl")
    p.add_argument("--start-phase", type=int, default=None)
    p.add_argument("--init-checkpoint", help="resume from this checkpoint")
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("render", help="render a view or pose from a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--view", type=int)
    p.add_argument("--pose", help="JSON list of 16 floats (row-major camera-to-world)")
    p.add_argument("--samples", type=int, default=DEFAULT_EVAL_SAMPLES)

    p = sub.add_parser("query", help="decompose: select a region and edit the field")
    p.add_argument("--run", required=True)
    p.add_argument("--label")
    p.add_argument("--rect", type=int, nargs=5, metavar=("VIEW", "X0", "Y0", "X1", "Y1"))
    p.add_argument("--embedding-json", help="JSON file holding the query vector")
    p.add_argument("--modality", choices=("visual", "language"), default="language")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--edit", choices=("extract", "delete", "recolor"), default="extract")
    p.add_argument("--color", type=float, nargs=3, metavar=("R", "G", "B"))
    p.add_argument("--view", type=int, help="view to render (default: first test view)")
    p.add_argument("--samples", type=int, default=DEFAULT_EVAL_SAMPLES)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("segment", help="k-means over rendered visual features")
    p.add_argument("--run", required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=DEFAULT_EVAL_SAMPLES)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("eval", help="PSNR/SSIM on held-out views")
    p.add_argument("--run", required=True)
    p.add_argument("--samples", type=int, default=DEFAULT_EVAL_SAMPLES)
    p.add_argument("--out", help="write the JSON report here (default: stdout)")

    p = sub.add_parser("gradcheck", help="finite-difference check of loss gradients")
    p.add_argument("--selector", action="append", choices=GRADCHECK_SELECTORS)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--probes", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("serve", help="serve a run over HTTP")
    p.add_argument("--run", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    return parser


def _cmd_generate(args) -> int:
    overrides = {}
    if args.views is not None:
        overrides["n_views"] = args.views
    if args.image_size is not None:
        overrides["width"] = args.image_size
        overrides["height"] = args.image_size
    if args.spec:
        spec_dict = json.loads(Path(args.spec).read_text())
        spec_dict.update(overrides)
        spec = SyntheticSceneSpec.from_dict(spec_dict)
    else:
        spec = SyntheticSceneSpec.desk(**overrides)
    ds = generate_synthetic_scene(spec, out_path=args.out, seed=args.seed)
    print(
        f"wrote scene to {args.out}: {ds.n_views} views "
        f"({len(ds.train_views)} train / {len(ds.test_views)} test), "
        f"{ds.image_size[0]}x{ds.image_size[1]}, embed dim {ds.label_table.dim}"
    )
    return 0


def _cmd_train(args) -> int:
    cfg = {
        "schedule": asdict(TrainSchedule.desk() if args.desk else TrainSchedule()),
        "weights": asdict(LossWeights()),
        "resolution": [64, 64, 64],
        "density_init": -4.0,
        "color_init": 0.0,
        "detach_feature_density": True,
        "seed": 0,
        "start_phase": 1,
    }
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())
        for key in ("schedule", "weights"):
            cfg[key].update(file_cfg.pop(key, {}))
        cfg.update(file_cfg)
    if args.iters is not None:
        for i, n in enumerate(args.iters, start=1):
            cfg["schedule"][f"phase{i}_iters"] = n
    if args.rays is not None:
        cfg["schedule"]["rays_per_batch"] = args.rays
    if args.patches is not None:
        cfg["schedule"]["patches_per_batch"] = args.patches
    if args.samples is not None:
        cfg["schedule"]["n_samples"] = args.samples
    if args.lambda_mms is not None:
        cfg["weights"]["lambda_mms"] = args.lambda_mms
    if args.lambda_cl is not None:
        cfg["weights"]["lambda_cl"] = args.lambda_cl
    if args.resolution is not None:
        cfg["resolution"] = args.resolution
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.start_phase is not None:
        cfg["start_phase"] = args.start_phase
    ctx, report = train_run(
        args.scene,
        args.out,
        resolution=tuple(cfg["resolution"]),
        density_init=cfg["density_init"],
        color_init=cfg["color_init"],
        schedule=TrainSchedule(**cfg["schedule"]),
        weights=LossWeights(**cfg["weights"]),
        seed=cfg["seed"],
        detach_feature_density=cfg["detach_feature_density"],
        start_phase=cfg["start_phase"],
        init_checkpoint=args.init_checkpoint,
        log_every=args.log_every,
    )
    last = report.total[-1] if report.total else float("nan")
    print(f"run saved to {ctx.root} (final loss {last:.6f}, {report.wall_seconds:.1f}s)")
    return 0


def _cmd_render(args) -> int:
    ctx = load_run(args.run)
    pose = None
    if args.pose is not None:
        pose = np.asarray(json.loads(args.pose), dtype=np.float64)
    frame = render_frame(ctx, view=args.view, pose=pose, n_samples=args.samples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(encode_png(frame.rgb))
    print(f"wrote {out}")
    return 0


def _cmd_query(args) -> int:
    ctx = load_run(args.run)
    embedding = None
    if args.embedding_json:
        embedding = np.asarray(json.loads(Path(args.embedding_json).read_text()))
    req = QueryRequest(
        label=args.label,
        rect=tuple(args.rect) if args.rect else None,
        embedding=embedding,
        modality=args.modality,
        threshold=args.threshold,
        edit=args.edit,
        color=tuple(args.color) if args.color else None,
        view=args.view,
        n_samples=args.samples,
    )
    result = run_query(ctx, req)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "render.png").write_bytes(encode_png(result.render))
    (out / "mask.png").write_bytes(encode_png(result.mask2d))
    with open(out / "stats.json", "w") as fh:
        json.dump(result.stats, fh, indent=2, sort_keys=True)
    print(f"query done: {json.dumps(result.stats, sort_keys=True)}")
    return 0


def _cmd_segment(args) -> int:
    ctx = load_run(args.run)
    result = segment_view(ctx, args.view, k=args.k, seed=args.seed, n_samples=args.samples)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "labels.npy", result.labels)
    shade = (result.labels.astype(np.float64) + 1.0) / args.k
    (out / "labels.png").write_bytes(encode_png(np.clip(shade, 0.0, 1.0)))
    counts = {str(c): int((result.labels == c).sum()) for c in range(-1, args.k)}
    with open(out / "segments.json", "w") as fh:
        json.dump({"k": args.k, "view": args.view, "counts": counts}, fh, indent=2, sort_keys=True)
    print(f"segmented view {args.view}: {counts}")
    return 0


def _cmd_eval(args) -> int:
    ctx = load_run(args.run)
    report = evaluate(ctx, n_samples=args.samples)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
        print(f"mean PSNR {report['mean_psnr']:.2f} dB, mean SSIM {report['mean_ssim']:.4f}")
    else:
        print(text)
    return 0


def _cmd_gradcheck(args) -> int:
    reports, elapsed = gradcheck_run(
        selectors=args.selector, tolerance=args.tolerance, n_probes=args.probes, seed=args.seed
    )
    ok = True
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.selector:12s} max rel err {r.max_rel_err:.3e}  {status}")
        ok &= r.passed
    print(f"checked {len(reports)} selectors in {elapsed:.1f}s")
    return 0 if ok else 1


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.run)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


_HANDLERS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "render": _cmd_render,
    "query": _cmd_query,
    "segment": _cmd_segment,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except Exception as e:  # noqa: BLE001 - single point turning failures into exit 1
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
