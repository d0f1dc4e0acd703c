"""Command-line front end.

Subcommands cover the whole workflow: synthetic fixture generation,
schedule training (with ablations and the sequential baseline),
checkpoint packing, evaluation, rate-distortion sweeps, bit-allocation
analysis, entropy reports, and SVG regeneration from CSV logs.

Every command accepts --config (a JSON file) and --seed; explicit flags
override config fields.  All outputs are deterministic for a fixed seed.
Failures exit with status 1 and a single "error: ..." line on stderr.

G3D_THREADS caps the numeric backend's thread pool; it is applied before
the numeric modules load, and results never depend on it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_thread_cap():
    raw = os.environ.get("G3D_THREADS")
    if raw is None:
        return
    try:
        n = max(1, int(raw))
    except ValueError:
        raise SystemExit(f"error: G3D_THREADS must be an integer, got {raw!r}")
    for var in _THREAD_VARS:
        os.environ.setdefault(var, str(n))


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}")
    if not isinstance(data, dict):
        raise CliError("config JSON must be an object")
    return data


class CliError(ValueError):
    """User-facing failure; printed as a single line, exit code 1."""


# ---------------------------------------------------------------------------
# Shared flag plumbing


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with defaults for this command")
    p.add_argument("--seed", type=int, help="deterministic RNG seed")


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--preset", choices=("compressive", "competitive"))
    p.add_argument(
        "--budget-mb", type=float, help="nominal size budget in MB (10^6 bytes)"
    )
    p.add_argument("--k-target", type=int, help="final Gaussian count")
    p.add_argument("--tau-db", type=float, help="absolute PSNR floor in dB")
    p.add_argument(
        "--ablation",
        choices=(
            "none",
            "taylor-saliency",
            "shared-bits",
            "no-cooldown",
            "no-projection",
            "uniform6",
        ),
    )
    p.add_argument("--baseline", choices=("sequential",))


def _run_config_from(args, extra_overrides: dict | None = None):
    """RunConfig from --config JSON plus explicit flag overrides."""
    from . import schedule

    data = _load_config(args.config)
    overrides = {
        "seed": args.seed,
        "preset": getattr(args, "preset", None),
        "k_target": getattr(args, "k_target", None),
        "tau_db": getattr(args, "tau_db", None),
    }
    budget_mb = getattr(args, "budget_mb", None)
    if budget_mb is not None:
        overrides["budget_bytes"] = budget_mb * 1_000_000.0
    ablation = getattr(args, "ablation", None)
    if ablation is not None:
        overrides["ablation"] = None if ablation == "none" else ablation
    for key, val in overrides.items():
        if val is not None:
            data[key] = val
    for key, val in (extra_overrides or {}).items():
        data[key] = val
    try:
        return schedule.RunConfig.from_dict(data)
    except (TypeError, schedule.ScheduleError) as exc:
        raise CliError(str(exc))


def _load_fixture(fixture_dir):
    from . import render, scene as scenemod

    root = Path(fixture_dir)
    scene = scenemod.load_scene(root / "scene.g3d")
    cameras = scenemod.load_cameras(root / "cameras.json")
    targets = [
        render.load_img(root / "targets" / f"view_{i:03d}.img")
        for i in range(len(cameras))
    ]
    return scene, cameras, targets


# ---------------------------------------------------------------------------
# Commands


def cmd_init_synthetic(args) -> int:
    from . import render, scene as scenemod, synth, util

    if args.out is None:
        raise CliError("init-synthetic requires --out")
    cfg = _load_config(args.config)
    params = {
        "layout": cfg.get("layout", "random-blob"),
        "n_gaussians": int(cfg.get("n_gaussians", 64)),
        "n_cameras": int(cfg.get("n_cameras", 8)),
        "resolution": int(cfg.get("resolution", 64)),
        "sh_degree": int(cfg.get("sh_degree", 3)),
    }
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    try:
        scene, cameras, targets = synth.synthesize_scene(
            seed,
            params["n_gaussians"],
            params["layout"],
            n_cameras=params["n_cameras"],
            resolution=params["resolution"],
            sh_degree=params["sh_degree"],
        )
    except ValueError as exc:
        raise CliError(str(exc))
    out = Path(args.out)
    (out / "targets").mkdir(parents=True, exist_ok=True)
    scenemod.save_scene(out / "scene.g3d", scene)
    scenemod.save_cameras(out / "cameras.json", cameras)
    for i, target in enumerate(targets):
        render.save_img(out / "targets" / f"view_{i:03d}.img", target)
    render.save_ppm(out / "preview.ppm", targets[0])
    manifest = {"seed": seed, **params}
    manifest["config_hash"] = util.config_hash(manifest)
    util.write_json(out / "fixture.json", manifest)
    print(json.dumps({"out": str(out), "n_gaussians": scene.n_total,
                      "views": len(cameras)}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from . import schedule, scene as scenemod, util

    if args.out is None:
        raise CliError("train requires --out")
    config = _run_config_from(args)
    fixture = None
    if args.fixture is not None:
        fixture = _load_fixture(args.fixture)
    try:
        if args.baseline == "sequential":
            if fixture is None:
                from . import synth

                fixture = synth.synthesize_scene(
                    config.seed,
                    config.n_gaussians,
                    config.layout,
                    n_cameras=config.n_cameras,
                    resolution=config.resolution,
                    sh_degree=config.sh_degree,
                )
            scene, cameras, targets = fixture
            pruned, bank, report = schedule.sequential_baseline(
                config, scene, cameras, targets
            )
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            scenemod.save_scene(out / "scene_final.g3d", pruned)
            from .scene import ATTRIBUTE_ORDER

            summary = {
                "config": config.as_dict(),
                "config_hash": config.config_hash(),
                "baseline": "sequential",
                "final_psnr": report["psnr"],
                "alive_count": report["alive_count"],
                "pruned_away": report["pruned_away"],
                "final_bits": report["storage"]["bits"],
                "final_ranges": {
                    cls.value: bank[cls].r for cls in ATTRIBUTE_ORDER
                },
                "storage": report["storage"],
            }
            util.write_json(out / "summary.json", summary)
            print(json.dumps({"psnr": report["psnr"],
                              "alive": report["alive_count"]}, sort_keys=True))
            return 0
        if fixture is None:
            scene, bank, state, _ = schedule.run(config, out_dir=args.out)
        else:
            scene, bank, state, _ = schedule.run(
                config, fixture[0], fixture[1], fixture[2], out_dir=args.out
            )
    except schedule.ScheduleError as exc:
        raise CliError(str(exc))
    print(json.dumps({"psnr": state.final_psnr, "alive": scene.n_total,
                      "bits": state.final_bits,
                      "aborted": state.pruning_aborted}, sort_keys=True))
    return 0


def _bank_from_summary(summary: dict):
    from . import quant
    from .scene import ATTRIBUTE_ORDER

    try:
        bits = {cls: int(summary["final_bits"][cls.value]) for cls in ATTRIBUTE_ORDER}
        ranges = {
            cls: float(summary["final_ranges"][cls.value]) for cls in ATTRIBUTE_ORDER
        }
    except KeyError as exc:
        raise CliError(f"summary.json missing quantizer field: {exc}")
    return quant.pinned_bank(bits, ranges)


def cmd_compress(args) -> int:
    from . import codec, scene as scenemod

    if args.run is None:
        raise CliError("compress requires --run (a train output directory)")
    run_dir = Path(args.run)
    try:
        summary = json.loads((run_dir / "summary.json").read_text())
        scene = scenemod.load_scene(run_dir / "scene_final.g3d")
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read run directory: {exc}")
    bank = _bank_from_summary(summary)
    out = Path(args.out) if args.out is not None else run_dir / "model.g3dq"
    try:
        total = codec.encode(scene, bank, out)
    except codec.CodecError as exc:
        raise CliError(str(exc))
    ratio = codec.vanilla_bytes(scene.n_total, scene.sh_degree) / total
    print(json.dumps({
        "out": str(out),
        "bytes": total,
        "bytes_per_gaussian": total / scene.n_total if scene.n_total else 0.0,
        "compression_ratio": ratio,
    }, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from . import codec, render, util
    from .scene import ATTRIBUTE_ORDER

    if args.checkpoint is None or args.fixture is None:
        raise CliError("eval requires --checkpoint and --fixture")
    try:
        scene, meta = codec.decode(args.checkpoint)
    except codec.CodecError as exc:
        raise CliError(str(exc))
    _, cameras, targets = _load_fixture(args.fixture)
    images = [render.render(scene, cam).image for cam in cameras]
    psnr = render.mean_psnr(scene, cameras, targets)
    ssim_vals = [render.ssim(img, tgt) for img, tgt in zip(images, targets)]
    total = codec.storage_bytes(
        scene.n_total,
        scene.sh_degree,
        {cls: meta["bits"][cls.value] for cls in ATTRIBUTE_ORDER},
    )
    report = {
        "checkpoint": str(args.checkpoint),
        "psnr": psnr,
        "ssim": float(sum(ssim_vals) / len(ssim_vals)),
        "k": scene.n_total,
        "bits": dict(meta["bits"]),
        "bytes": total,
        "bytes_per_gaussian": total / scene.n_total if scene.n_total else 0.0,
        "compression_ratio": codec.vanilla_bytes(scene.n_total, scene.sh_degree)
        / total,
    }
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        util.write_json(out / "eval.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def _sweep_point(payload):
    """One sweep point in an isolated process; returns its result row."""
    import json as _json
    from pathlib import Path as _Path

    from . import codec, schedule, scene as scenemod

    config_data, point_dir, label = payload
    config = schedule.RunConfig.from_dict(config_data)
    scene, bank, state, _ = schedule.run(config, out_dir=point_dir)
    summary = _json.loads((_Path(point_dir) / "summary.json").read_text())
    bank2 = _bank_from_summary(summary)
    scene2 = scenemod.load_scene(_Path(point_dir) / "scene_final.g3d")
    total = codec.encode(scene2, bank2, _Path(point_dir) / "model.g3dq")
    return [label, scene.n_total, total, state.final_psnr]


def cmd_sweep(args) -> int:
    from . import svgplot, util

    if args.out is None:
        raise CliError("sweep requires --out")
    if args.points is None and args.budgets_mb is None:
        raise CliError("sweep requires --points or --budgets-mb")
    jobs = []
    out = Path(args.out)
    if args.points is not None:
        try:
            values = [int(v) for v in args.points.split(",") if v.strip()]
        except ValueError:
            raise CliError(f"bad --points list {args.points!r}")
        field, labels = "k_target", values
    else:
        try:
            values = [float(v) for v in args.budgets_mb.split(",") if v.strip()]
        except ValueError:
            raise CliError(f"bad --budgets-mb list {args.budgets_mb!r}")
        field, labels = "budget_bytes", [v * 1_000_000.0 for v in values]
    if not values:
        raise CliError("sweep needs at least one point")
    for i, value in enumerate(labels):
        config = _run_config_from(args, {field: value})
        point_dir = out / f"point_{i:02d}"
        jobs.append((config.as_dict(), str(point_dir), values[i]))
    if args.parallel > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(job) for job in jobs]
    seed = jobs[0][0]["seed"]
    comments = (util.provenance_comment(util.config_hash(jobs[0][0]), seed),)
    fields = ("point", "k", "bytes", "psnr")
    util.write_csv(out / "rd.csv", fields, rows, comments)
    chart = svgplot.svg_chart(
        [svgplot.Series("pipeline", [r[2] for r in rows], [r[3] for r in rows],
                        kind="both")],
        title="Rate-distortion sweep",
        xlabel="checkpoint bytes (log)",
        ylabel="PSNR (dB)",
        log_x=True,
    )
    svgplot.write_svg(out / "rd.svg", chart)
    print(json.dumps({"points": len(rows), "out": str(out)}, sort_keys=True))
    return 0


def cmd_bitalloc(args) -> int:
    from . import bitalloc, svgplot, util

    if args.stats is None or args.budget is None:
        raise CliError("bitalloc requires --stats and --budget")
    try:
        stats_data = json.loads(Path(args.stats).read_text())
        stats = bitalloc.AttributeStats.from_dict(stats_data)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CliError(f"bad stats file: {exc}")
    try:
        closed = bitalloc.closed_form_allocation(stats, args.budget)
        oracle = bitalloc.oracle_allocation(stats, args.budget, args.grid_step)
        gap = bitalloc.uniform_gap(stats, args.budget)
    except bitalloc.AllocationError as exc:
        raise CliError(str(exc))
    report = {
        "budget": args.budget,
        "closed_form": closed.as_dict(),
        "oracle": oracle.as_dict(),
        "uniform_gap_db": gap,
    }
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        util.write_json(out / "allocation.json", report)
        idx = list(range(len(stats.classes)))
        chart = svgplot.svg_chart(
            [
                svgplot.Series("closed form", idx, list(closed.bits), kind="both"),
                svgplot.Series("grid oracle", idx, list(oracle.bits), kind="both"),
            ],
            title="Bit allocation",
            xlabel="attribute class index",
            ylabel="bits per scalar",
        )
        svgplot.write_svg(out / "allocation.svg", chart)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_entropy(args) -> int:
    from . import codec, util
    from .scene import ATTRIBUTE_ORDER

    if args.checkpoint is None:
        raise CliError("entropy requires --checkpoint")
    try:
        ckpt = codec.read_checkpoint(args.checkpoint)
        ent = codec.shannon_entropy(ckpt)
        head = codec.lossless_headroom(ckpt)
    except codec.CodecError as exc:
        raise CliError(str(exc))
    report = {
        "checkpoint": str(args.checkpoint),
        "b_bar": ckpt.b_bar,
        "entropy_per_attr": {c.value: ent.per_attr[c] for c in ATTRIBUTE_ORDER},
        "entropy_weighted": ent.weighted,
        "shannon_headroom_pct": ent.headroom_pct,
        "payload_bytes": head.payload_bytes,
        "compressed_bytes": head.compressed_bytes,
        "lossless_reduction_pct": head.reduction_pct,
        "roundtrip_verified": head.verified,
    }
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        util.write_json(out / "entropy.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_plot(args) -> int:
    from . import svgplot, util

    if args.csv is None or args.out is None:
        raise CliError("plot requires --csv and --out")
    try:
        fields, rows, _ = util.read_csv(args.csv)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read CSV: {exc}")
    if not rows:
        raise CliError("CSV has no data rows")
    cols = {name: i for i, name in enumerate(fields)}
    if "bytes" in cols and "psnr" in cols:
        xs = [float(r[cols["bytes"]]) for r in rows]
        ys = [float(r[cols["psnr"]]) for r in rows]
        chart = svgplot.svg_chart(
            [svgplot.Series("pipeline", xs, ys, kind="both")],
            title="Rate-distortion sweep",
            xlabel="checkpoint bytes (log)",
            ylabel="PSNR (dB)",
            log_x=True,
        )
    elif "iter" in cols and "psnr_train" in cols:
        xs = [float(r[cols["iter"]]) for r in rows]
        ys = [float(r[cols["psnr_train"]]) for r in rows]
        chart = svgplot.svg_chart(
            [svgplot.Series("psnr_train", xs, ys, kind="line")],
            title="Training PSNR",
            xlabel="iteration",
            ylabel="PSNR (dB)",
        )
    else:
        raise CliError(
            "unrecognized CSV schema: expected bytes/psnr or iter/psnr_train"
        )
    svgplot.write_svg(args.out, chart)
    print(json.dumps({"out": str(args.out)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    """Argument errors follow the one-line, exit-code-1 contract."""

    def error(self, message):
        self.exit(1, f"error: {' '.join(message.split())}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="g3dpack", description="Gaussian-splat compression toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-synthetic", help="generate a synthetic fixture")
    _add_common(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_init_synthetic)

    p = sub.add_parser("train", help="run the four-stage schedule")
    _add_common(p)
    _add_run_flags(p)
    p.add_argument("--fixture", help="fixture directory from init-synthetic")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="pack a trained run into .g3dq")
    _add_common(p)
    p.add_argument("--run", help="train output directory")
    p.add_argument("--out", help="checkpoint path (default: RUN/model.g3dq)")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("eval", help="PSNR/SSIM/storage of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help=".g3dq file")
    p.add_argument("--fixture", help="fixture directory with target views")
    p.add_argument("--out", help="directory for eval.json (optional)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="rate-distortion sweep")
    _add_common(p)
    _add_run_flags(p)
    p.add_argument("--points", help="comma-separated K targets")
    p.add_argument("--budgets-mb", help="comma-separated budgets in MB")
    p.add_argument("--parallel", type=int, default=1,
                   help="independent points run in N processes")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bitalloc", help="closed-form vs oracle bit allocation")
    _add_common(p)
    p.add_argument("--stats", help="JSON {attribute: {d, sigma, lambda}}")
    p.add_argument("--budget", type=float,
                   help="total weighted bits per Gaussian")
    p.add_argument("--grid-step", type=float, default=0.25)
    p.add_argument("--out", help="directory for allocation.json and .svg")
    p.set_defaults(func=cmd_bitalloc)

    p = sub.add_parser("entropy", help="entropy and lossless headroom report")
    _add_common(p)
    p.add_argument("--checkpoint", help=".g3dq file")
    p.add_argument("--out", help="directory for entropy.json (optional)")
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("plot", help="regenerate an SVG from a CSV log")
    _add_common(p)
    p.add_argument("--csv", help="metrics.csv or rd.csv")
    p.add_argument("--out", help="SVG path")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - single-line contract
        print(
            f"error: {type(exc).__name__}: {' '.join(str(exc).split())}",
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
