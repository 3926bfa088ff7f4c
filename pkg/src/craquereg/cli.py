"""Command-line interface: register, refine, warp, eval, synth, detect."""

from __future__ import annotations

import os
import sys

import click
import numpy as np

from . import detect as det
from . import metrics, synth
from .config import PRESETS, RunConfig, load_config
from .imgcore import Image, load_image, rescale, save_image
from .matching import read_matches_text
from .pipeline import (
    RegistrationError,
    RegistrationResult,
    load_result,
    register_one_stage,
    save_result,
)
from .refine import register_coarse_to_fine
from .warp import fit_backward_transform, identity_backward, warp_image_chunked

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILED = 2


def _default_threads() -> int:
    env = os.environ.get("CRAQUEREG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _fail_usage(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_USAGE)


def _load_input(path: str, normalize: str) -> Image:
    if not os.path.exists(path):
        _fail_usage(f"input file not found: {path}")
    return load_image(path, normalize=normalize)


@click.group()
def main():
    """Crack-structure registration for large multi-modal image pairs."""


config_options = [
    click.option("--config", "config_path", type=click.Path(), default=None,
                 help="YAML config file layered over defaults."),
    click.option("--preset", type=click.Choice(PRESETS), default=None,
                 help="Named parameter preset."),
    click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                 help="Individual config overrides (repeatable)."),
    click.option("--seed", type=int, default=None, help="Master RNG seed."),
    click.option("--threads", type=int, default=None,
                 help="Worker threads (default: CRAQUEREG_THREADS or cores)."),
]


def _with_config_options(fn):
    for opt in reversed(config_options):
        fn = opt(fn)
    return fn


def _parse_overrides(pairs) -> dict:
    import yaml

    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            _fail_usage(f"override {pair!r} is not KEY=VALUE")
        out[key.strip()] = yaml.safe_load(value)
    return out


def _build_config(config_path, preset, overrides, seed, threads) -> RunConfig:
    ov = _parse_overrides(overrides)
    if seed is not None:
        ov["seed"] = seed
    ov["threads"] = threads if threads is not None else _default_threads()
    try:
        return load_config(config_path, preset, ov)
    except (ValueError, OSError) as exc:
        _fail_usage(str(exc))


def _write_outputs(outdir: str, result: RegistrationResult, image_a: Image,
                   image_b: Image, cfg: RunConfig, cps_path: str | None,
                   coarse_a: Image | None = None) -> None:
    os.makedirs(outdir, exist_ok=True)
    save_result(os.path.join(outdir, "result.crqr"), result)
    import json

    with open(os.path.join(outdir, "stats.json"), "w") as f:
        json.dump(result.stats, f, sort_keys=True, indent=2)
    cfg.dump(os.path.join(outdir, "config.yaml"))

    backward = fit_backward_transform(result.correspondences, lam=cfg.tps_lambda)
    out_size = (image_b.width, image_b.height)
    source = coarse_a if coarse_a is not None else image_a
    warped = warp_image_chunked(source, backward, out_size,
                                chunk_budget_px=cfg.chunk_budget_px,
                                method=cfg.warp_method)
    save_image(warped, os.path.join(outdir, "warped.png"))

    from .pipeline import displacement_vectors

    vectors = [(a, d, True) for a, d in
               displacement_vectors(result.global_h, result.correspondences)]
    vectors += [(a, d, False) for a, d in
                displacement_vectors(result.global_h, result.rejected)]
    overlay = metrics.render_overlay(warped, image_b, vectors=vectors)
    save_image(overlay, os.path.join(outdir, "overlay.png"))

    if cps_path:
        cps = metrics.read_control_points(cps_path)
        report = metrics.evaluate(result.transform, cps)
        with open(os.path.join(outdir, "report.txt"), "w") as f:
            f.write(report.as_text())
        click.echo(report.as_text().rstrip())


@main.command()
@click.argument("image_a", type=click.Path())
@click.argument("image_b", type=click.Path())
@click.option("-o", "--outdir", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["one-stage", "coarse-to-fine"]),
              default="one-stage")
@click.option("--normalize", type=click.Choice(["minmax", "none"]),
              default="minmax")
@click.option("--cps", "cps_path", type=click.Path(), default=None,
              help="Control-point file for an evaluation report.")
@click.option("--matches", "matches_path", type=click.Path(), default=None,
              help="External match file (text) replacing detection+matching.")
@click.option("--detections-a", type=click.Path(), default=None,
              help="External detections for image A (exchange format).")
@click.option("--detections-b", type=click.Path(), default=None)
@_with_config_options
def register(image_a, image_b, outdir, mode, normalize, cps_path,
             matches_path, detections_a, detections_b, config_path, preset,
             overrides, seed, threads):
    """Register IMAGE_A (source) onto IMAGE_B (target)."""
    cfg = _build_config(config_path, preset, overrides, seed, threads)
    img_a = _load_input(image_a, normalize)
    img_b = _load_input(image_b, normalize)
    ext_a = det.read_detections(detections_a) if detections_a else None
    ext_b = det.read_detections(detections_b) if detections_b else None
    ext_m = read_matches_text(matches_path) if matches_path else None
    try:
        if mode == "one-stage":
            result = register_one_stage(img_a, img_b, cfg.one_stage(),
                                        seed=cfg.seed, external_a=ext_a,
                                        external_b=ext_b, external_matches=ext_m)
            coarse_a = img_a
        else:
            result = register_coarse_to_fine(img_a, img_b, cfg.coarse_to_fine(),
                                             seed=cfg.seed)
            coarse_a = img_a
            img_b_out = img_b
            ratio = max(img_a.width, img_a.height) / max(img_b.width, img_b.height)
            if ratio > 1.0 + 1e-9:
                # finest frame is A's native scale; bring B there for overlays
                img_b_out = rescale(img_b, ratio, "bicubic")
            img_b = img_b_out
    except RegistrationError as exc:
        click.echo(f"registration failed: {exc}", err=True)
        click.echo(f"stage counts: {exc.stats}", err=True)
        sys.exit(EXIT_FAILED)
    except ValueError as exc:
        _fail_usage(str(exc))
    _write_outputs(outdir, result, img_a, img_b, cfg, cps_path,
                   coarse_a=coarse_a)
    click.echo(f"registered with {len(result.correspondences)} correspondences")
    sys.exit(EXIT_OK)


@main.command()
@click.argument("archive", type=click.Path())
@click.argument("image_a", type=click.Path())
@click.argument("image_b", type=click.Path())
@click.option("-o", "--outdir", required=True, type=click.Path())
@click.option("--normalize", type=click.Choice(["minmax", "none"]),
              default="minmax")
@_with_config_options
def refine(archive, image_a, image_b, outdir, normalize, config_path, preset,
           overrides, seed, threads):
    """Resume coarse-to-fine refinement from a coarse result ARCHIVE."""
    from .refine import register_coarse_to_fine_from_result

    cfg = _build_config(config_path, preset, overrides, seed, threads)
    if not os.path.exists(archive):
        _fail_usage(f"archive not found: {archive}")
    coarse = load_result(archive)
    img_a = _load_input(image_a, normalize)
    img_b = _load_input(image_b, normalize)
    try:
        result = register_coarse_to_fine_from_result(
            img_a, img_b, coarse, cfg.coarse_to_fine(), seed=cfg.seed)
    except RegistrationError as exc:
        click.echo(f"refinement failed: {exc}", err=True)
        sys.exit(EXIT_FAILED)
    ratio = max(img_a.width, img_a.height) / max(img_b.width, img_b.height)
    img_b_out = rescale(img_b, ratio, "bicubic") if ratio > 1.0 + 1e-9 else img_b
    _write_outputs(outdir, result, img_a, img_b_out, cfg, None, coarse_a=img_a)
    click.echo(f"refined to {len(result.correspondences)} correspondences")
    sys.exit(EXIT_OK)


@main.command()
@click.argument("source", type=click.Path())
@click.option("--archive", type=click.Path(), default=None,
              help="Result archive providing the transform (default identity).")
@click.option("-o", "--output", required=True, type=click.Path())
@click.option("--out-width", type=int, default=None)
@click.option("--out-height", type=int, default=None)
@click.option("--chunk-budget", type=int, default=None, metavar="PIXELS")
@click.option("--method", type=click.Choice(["bilinear", "bicubic"]),
              default="bicubic")
@click.option("--normalize", type=click.Choice(["minmax", "none"]),
              default="none")
def warp(source, archive, output, out_width, out_height, chunk_budget,
         method, normalize):
    """Warp SOURCE through a registration result (chunked, memory-bounded)."""
    img = _load_input(source, normalize)
    if archive:
        if not os.path.exists(archive):
            _fail_usage(f"archive not found: {archive}")
        result = load_result(archive)
        backward = fit_backward_transform(result.correspondences,
                                          lam=result.tps.regularization)
    else:
        backward = identity_backward()
    out_size = (out_width or img.width, out_height or img.height)
    budget = chunk_budget if chunk_budget else 64_000_000
    out = warp_image_chunked(img, backward, out_size, chunk_budget_px=budget,
                             method=method)
    save_image(out, output)
    click.echo(f"wrote {output}")
    sys.exit(EXIT_OK)


@main.command(name="eval")
@click.option("--cps", "cps_path", required=True, type=click.Path())
@click.option("--archive", type=click.Path(), default=None,
              help="Result archive (default: identity transform).")
@click.option("--thresholds", default="1,2,3,5", show_default=True)
def eval_cmd(cps_path, archive, thresholds):
    """Evaluate ME/MAE/SR of a transform on a control-point file."""
    if not os.path.exists(cps_path):
        _fail_usage(f"control-point file not found: {cps_path}")
    cps = metrics.read_control_points(cps_path)
    if archive:
        if not os.path.exists(archive):
            _fail_usage(f"archive not found: {archive}")
        transform = load_result(archive).transform
    else:
        transform = lambda pts: np.asarray(pts, dtype=np.float64)
    try:
        eps = tuple(float(t) for t in thresholds.split(","))
    except ValueError:
        _fail_usage(f"bad thresholds {thresholds!r}")
    report = metrics.evaluate(transform, cps, eps)
    click.echo(report.as_text().rstrip())
    sys.exit(EXIT_OK)


@main.command(name="synth")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--width", type=int, default=1024, show_default=True)
@click.option("--height", type=int, default=1024, show_default=True)
@click.option("--density", type=float, default=0.85, show_default=True)
@click.option("--cells", type=int, default=None,
              help="Crack-network cell count (default scales with size).")
@click.option("--magnitude", type=float, default=8.0, show_default=True,
              help="GT TPS displacement magnitude in pixels (0 = none).")
@click.option("-o", "--outdir", required=True, type=click.Path())
def synth_cmd(seed, width, height, density, cells, magnitude, outdir):
    """Generate a synthetic multi-modal pair with ground truth."""
    os.makedirs(outdir, exist_ok=True)
    net, mask = synth.generate_craquelure(seed, width, height, density,
                                          cells=cells)
    gt = synth.generate_gt_warp(seed + 1, width, height, magnitude=magnitude)
    warped_net = synth.warp_network(net, gt)
    mask_b = synth.render_network_mask(warped_net, seed=seed)
    pa = synth.ModalityParams(texture_seed=seed * 2 + 1)
    pb = synth.ModalityParams(texture_seed=seed * 2 + 2, blur_sigma=0.5)
    img_a = synth.render_modality(mask, pa)
    img_b = synth.render_modality(mask_b, pb)
    save_image(img_a, os.path.join(outdir, "a.png"))
    save_image(img_b, os.path.join(outdir, "b.png"))
    from .geometry import eval_tps

    src = net.junctions
    if len(src):
        dst = eval_tps(gt, src)
        cps = metrics.ControlPointSet(src=src, dst=dst)
        metrics.write_control_points(os.path.join(outdir, "cps.txt"), cps)
    click.echo(f"wrote synthetic pair to {outdir} "
               f"({len(net.junctions)} GT junctions)")
    sys.exit(EXIT_OK)


@main.command(name="detect")
@click.argument("image", type=click.Path())
@click.option("-o", "--output", required=True, type=click.Path())
@click.option("--invert", is_flag=True, help="Cracks are bright, not dark.")
@click.option("--threshold", type=float, default=0.2, show_default=True)
@click.option("--nms-radius", type=float, default=4.0, show_default=True)
@click.option("--max-count", type=int, default=None)
@click.option("--normalize", type=click.Choice(["minmax", "none"]),
              default="minmax")
def detect_cmd(image, output, invert, threshold, nms_radius, max_count,
               normalize):
    """Detect crack keypoints and dump the detection exchange format."""
    img = _load_input(image, normalize)
    score = det.crack_score_map(img, invert=invert)
    kps = det.detect_keypoints(score, nms_radius=nms_radius,
                               threshold=threshold, max_count=max_count)
    gray = (1.0 - img.gray()) if invert else img.gray()
    desc_src = det.black_hat_response(gray)
    top = desc_src.max()
    if top > 1e-12:
        desc_src = desc_src / top
    descs = det.compute_descriptors(desc_src, kps)
    det.write_detections(output, det.DetectionSet(keypoints=kps,
                                                  descriptors=descs, tiles=[]))
    click.echo(f"wrote {len(kps)} keypoints to {output}")
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
