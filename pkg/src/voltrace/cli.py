"""Command-line front end: dataset generation, field training, rendering,
and image comparison as seed-reproducible runs.

Exit codes: 0 success, 1 usage error, 2 missing or malformed data,
3 numerical failure during training. Progress goes to standard error,
results to files.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .geom import Rng, key_uniforms, mix_key, normalize, sphere_dirs_from_keys
from .neural import (
    Adam,
    Mlp,
    MlpConfig,
    fit,
    load_checkpoint,
    load_optimizer,
    prepare_training_rays,
)
from .render import (
    Camera,
    EnvironmentMap,
    OracleSettings,
    PointLight,
    RenderMode,
    RenderSettings,
    Scene,
    rays_from_camera_matrix,
    render_image,
    render_reference,
)
from .scene_io import (
    DatasetManifest,
    ImageBuffer,
    SceneFormatError,
    load_dataset,
    load_scene,
    psnr,
    read_pfm,
    ssim,
)

__all__ = ["main"]

# dataset generation draws every camera pose and light position from its
# own substream, so frame i is reproducible without rendering frames < i
_TAG_VIEW = 31
_TAG_LIGHT = 32
_TAG_FRAME = 33
_TAG_NET = 34


class CliError(Exception):
    """Failure that maps to a chosen process exit code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _say(message: str) -> None:
    print(message, file=sys.stderr)


def _require(args, *names: str) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise CliError(1, f"--{name.replace('_', '-')} is required")


def _build(settings_cls, **kwargs):
    """Constructor-validation errors on flag values are usage errors."""
    try:
        return settings_cls(**kwargs)
    except ValueError as e:
        raise CliError(1, str(e)) from None


def _parse_resolution(text: str):
    parts = text.lower().split("x")
    try:
        width, height = (int(p) for p in parts)
    except ValueError:
        raise CliError(1, f"--resolution wants WxH, got '{text}'") from None
    if width < 1 or height < 1:
        raise CliError(1, "--resolution dimensions must be positive")
    return width, height


# ---------------------------------------------------------------------------
# make-dataset
# ---------------------------------------------------------------------------


def _jitter_factor(key, amount: float) -> float:
    u = float(key_uniforms(key, 1)[0])
    return 1.0 + amount * (2.0 * u - 1.0)


def _frame_up(base_up, view_dir) -> np.ndarray:
    # near the poles of the view sphere the scene's up would make the
    # camera basis degenerate; fall back to the least-aligned axis
    up = normalize(np.asarray(base_up, dtype=np.float64))
    if abs(float(up @ view_dir)) > 0.999:
        up = np.eye(3)[int(np.argmin(np.abs(view_dir)))]
    return up


def cmd_make_dataset(args) -> int:
    _require(args, "scene", "out")
    if args.frames < 1:
        raise CliError(1, "--frames must be at least 1")
    for name in ("pose_jitter", "light_jitter"):
        if not 0.0 <= getattr(args, name) < 1.0:
            raise CliError(1, f"--{name.replace('_', '-')} must be in [0, 1)")

    bundle = load_scene(args.scene)
    scene = bundle.scene
    if len(scene.objects) != 1:
        raise CliError(
            2,
            f"{args.scene}: dataset scenes describe exactly one object, found "
            f"{len(scene.objects)}; fields are trained per object in its own frame",
        )
    if len(scene.lights) != 1 or scene.environment is not None:
        raise CliError(
            2, f"{args.scene}: dataset scenes use exactly one point light and no environment"
        )

    with open(args.scene) as fh:
        object_spec = json.load(fh)["objects"][0]
    if object_spec.get("type") == "checkpoint" and not os.path.isabs(object_spec["path"]):
        # the manifest lives elsewhere, so relative checkpoint paths break
        base = os.path.dirname(os.path.abspath(args.scene))
        object_spec = dict(object_spec, path=os.path.join(base, object_spec["path"]))

    if args.resolution:
        width, height = _parse_resolution(args.resolution)
    else:
        width, height = bundle.camera.width, bundle.camera.height

    light = scene.lights[0]
    center = bundle.camera.look_at
    cam_dist = float(np.linalg.norm(bundle.camera.position - center))
    light_dist = float(np.linalg.norm(light.position - center))
    if light_dist <= 0.0:
        raise CliError(2, f"{args.scene}: the light must sit away from the camera's look_at point")

    # self-shadowing lives in the object's scatter values, so for a single
    # object this equals direct_only; shadows stay on for checkpoint objects
    # rendered together with analytic occluders in future scene versions
    mode = RenderMode.DIRECT_SHADOWS
    if args.oracle:
        settings = OracleSettings(mode=mode, background=bundle.background)
    else:
        settings = _build(
            RenderSettings,
            samples_per_object=args.samples,
            mode=mode,
            background=bundle.background,
        )

    os.makedirs(args.out, exist_ok=True)
    manifest = DatasetManifest(
        root=args.out,
        width=width,
        height=height,
        vertical_fov_deg=bundle.camera.vertical_fov_deg,
        background=bundle.background,
        object_spec=object_spec,
    )
    root = Rng(args.seed)
    for i in range(args.frames):
        vkey = mix_key(root.key, _TAG_VIEW, i)
        view_dir = sphere_dirs_from_keys(mix_key(vkey, 0), 1)[0]
        camera = Camera(
            position=center + cam_dist * _jitter_factor(mix_key(vkey, 1), args.pose_jitter) * view_dir,
            look_at=center,
            up=_frame_up(bundle.camera.up, view_dir),
            vertical_fov_deg=bundle.camera.vertical_fov_deg,
            width=width,
            height=height,
        )
        lkey = mix_key(root.key, _TAG_LIGHT, i)
        light_pos = center + (
            light_dist
            * _jitter_factor(mix_key(lkey, 1), args.light_jitter)
            * sphere_dirs_from_keys(mix_key(lkey, 0), 1)[0]
        )
        frame_scene = Scene(
            scene.objects, (PointLight(light_pos, light.radiance, light.inverse_square),)
        )
        if args.oracle:
            image = render_reference(frame_scene, camera, settings)
        else:
            image, _ = render_image(
                frame_scene,
                camera,
                settings,
                seed=int(mix_key(root.key, _TAG_FRAME, i)),
                threads=args.threads,
            )
        manifest.add_frame(image, camera.camera_to_world(), light_pos, light.radiance)
        if args.verbose:
            _say(f"frame {i + 1}/{args.frames}")
    manifest.save()
    _say(f"wrote {args.frames} frames to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _dataset_rays(ds: DatasetManifest, n_frames: int, bounds):
    origins, dirs, targets, lights = [], [], [], []
    for i in range(n_frames):
        frame = ds.frames[i]
        o, d = rays_from_camera_matrix(
            frame.camera_to_world, ds.vertical_fov_deg, ds.width, ds.height
        )
        image = ds.frame_image(i)
        if image.shape[:2] != (ds.height, ds.width):
            raise CliError(
                2,
                f"{frame.file}: frame is {image.shape[1]}x{image.shape[0]}, "
                f"manifest says {ds.width}x{ds.height}",
            )
        origins.append(o)
        dirs.append(d)
        targets.append(image.reshape(-1, 3).astype(np.float64))
        lights.append(np.broadcast_to(frame.light_position, d.shape))
    return prepare_training_rays(
        np.concatenate(origins),
        np.concatenate(dirs),
        np.concatenate(targets),
        np.concatenate(lights),
        bounds,
    )


def cmd_train(args) -> int:
    _require(args, "dataset", "out_checkpoint", "iters")
    if args.iters < 0:
        raise CliError(1, "--iters must be nonnegative")
    if args.holdout < 0:
        raise CliError(1, "--holdout must be nonnegative")
    for name in ("batch", "n_coarse", "n_fine", "checkpoint_every", "log_every"):
        if getattr(args, name) < 1:
            raise CliError(1, f"--{name.replace('_', '-')} must be at least 1")
    if args.lr <= 0.0:
        raise CliError(1, "--lr must be positive")

    ds = load_dataset(args.dataset)
    n_train = len(ds.frames) - args.holdout
    if n_train < 1:
        raise CliError(
            2,
            f"{args.dataset}: {len(ds.frames)} frames leave nothing to train on "
            f"after holding out {args.holdout}",
        )
    bounds = ds.build_object().bounds_world()
    rays = _dataset_rays(ds, n_train, bounds)
    if len(rays["origins"]) == 0:
        raise CliError(2, "no training rays intersect the object bounds")

    opt_coarse = opt_fine = None
    start_iteration = 0
    if args.resume:
        try:
            coarse, fine, bounds, start_iteration = load_checkpoint(args.out_checkpoint)
        except FileNotFoundError:
            raise CliError(2, f"{args.out_checkpoint}: cannot resume, no such checkpoint") from None
        sidecar = args.out_checkpoint + ".optim.npz"
        if not os.path.exists(sidecar):
            raise CliError(2, f"{sidecar}: optimizer state missing, cannot resume")
        opt_coarse = Adam(coarse.parameters(), lr=args.lr)
        opt_fine = Adam(fine.parameters(), lr=args.lr)
        load_optimizer(sidecar, opt_coarse, opt_fine)
        if start_iteration >= args.iters:
            _say(f"checkpoint already trained to iteration {start_iteration}, nothing to do")
            return 0
    else:
        config = _build(
            MlpConfig,
            pos_freqs=args.pos_freqs,
            dir_freqs=args.dir_freqs,
            trunk_depth=args.trunk_depth,
            trunk_width=args.trunk_width,
            scatter_depth=args.scatter_depth,
            scatter_width=args.scatter_width,
            skip_layer=max(1, args.trunk_depth // 2),
            zero_light_dir=args.ablate_light_dir,
        )
        root = Rng(args.seed)
        coarse = Mlp(config, seed=int(mix_key(root.key, _TAG_NET, 0)))
        fine = Mlp(config, seed=int(mix_key(root.key, _TAG_NET, 1)))

    csv_path = args.csv or args.out_checkpoint + ".loss.csv"
    stride = args.log_every if args.verbose else max(args.log_every, 1000)

    def progress(done, loss_c, loss_f):
        if done % stride == 0:
            _say(f"iter {done}/{args.iters}  coarse {loss_c:.6f}  fine {loss_f:.6f}")

    result = fit(
        coarse,
        fine,
        rays,
        iterations=args.iters,
        batch_size=args.batch,
        seed=args.seed,
        n_coarse=args.n_coarse,
        n_fine=args.n_fine,
        lr=args.lr,
        background=ds.background,
        bounds=bounds,
        checkpoint_path=args.out_checkpoint,
        csv_path=csv_path,
        checkpoint_every=args.checkpoint_every,
        log_every=args.log_every,
        start_iteration=start_iteration,
        opt_coarse=opt_coarse,
        opt_fine=opt_fine,
        progress=progress,
    )
    if result["status"] != "ok":
        _say(
            f"training diverged at iteration {result['iteration']} "
            f"(loss became non-finite); the checkpoint on disk was not updated"
        )
        return 3
    _say(
        f"trained to iteration {result['iteration']} "
        f"(coarse {result['coarse_loss']:.6f}, fine {result['fine_loss']:.6f}); "
        f"wrote {args.out_checkpoint}"
    )
    return 0


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------


def cmd_render(args) -> int:
    _require(args, "scene", "out")
    if args.env_scale < 0.0:
        raise CliError(1, "--env-scale must be nonnegative")
    bundle = load_scene(args.scene)
    scene = bundle.scene
    if args.env_map is not None:
        try:
            environment = EnvironmentMap(read_pfm(args.env_map), scale=args.env_scale)
        except ValueError as e:
            raise CliError(2, str(e)) from None
        scene = Scene(scene.objects, scene.lights, environment)

    traced = None
    if args.reference:
        settings = _build(
            OracleSettings,
            samples_per_object=4096 if args.samples is None else args.samples,
            indirect_dirs=512 if args.indirect_k is None else args.indirect_k,
            max_bounces=args.bounces,
            mode=args.mode,
            background=bundle.background,
        )
        image = render_reference(scene, bundle.camera, settings)
    else:
        settings = _build(
            RenderSettings,
            samples_per_object=192 if args.samples is None else args.samples,
            shadow_samples=args.shadow_samples,
            indirect_dirs=20 if args.indirect_k is None else args.indirect_k,
            max_bounces=args.bounces,
            mode=args.mode,
            background=bundle.background,
            pixel_samples=args.pixel_samples,
        )
        image, stats = render_image(
            scene, bundle.camera, settings, seed=args.seed, threads=args.threads
        )
        traced = int(stats.sum())

    stem = args.out
    if stem.lower().endswith((".pfm", ".png")):
        stem = stem[:-4]
    buffer = ImageBuffer(image)
    buffer.save(stem + ".pfm")
    buffer.save(stem + ".png")
    if args.verbose and traced is not None:
        _say(f"traced {traced} rays")
    _say(f"wrote {stem}.pfm and {stem}.png")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    _require(args, "render", "reference", "metrics")
    try:
        image = read_pfm(args.render)
        reference = read_pfm(args.reference)
    except ValueError as e:
        raise CliError(2, str(e)) from None
    if image.shape != reference.shape:
        raise CliError(
            2,
            f"resolution mismatch: {args.render} is {image.shape[1]}x{image.shape[0]}, "
            f"{args.reference} is {reference.shape[1]}x{reference.shape[0]}",
        )
    p = psnr(image, reference)
    s = ssim(image, reference)
    doc = {"psnr": "inf" if math.isinf(p) else p, "ssim": s}
    with open(args.metrics, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    _say(f"psnr {doc['psnr']}  ssim {s:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed for every random stream")
    common.add_argument(
        "--threads", type=int, default=1, help="render worker threads (never changes pixels)"
    )
    common.add_argument("--verbose", action="store_true", help="progress lines on standard error")
    common.add_argument(
        "--config", default=None, help="JSON file of flag defaults (keys mirror flag names)"
    )

    parser = _Parser(prog="voltrace", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    commands = {}

    p = sub.add_parser(
        "make-dataset",
        parents=[common],
        help="render a multi-view, multi-light dataset of a single object",
    )
    p.add_argument("--scene", help="scene JSON with exactly one object and one point light")
    p.add_argument("--out", help="dataset directory to create")
    p.add_argument("--frames", type=int, default=100, help="number of frames")
    p.add_argument("--resolution", default=None, help="frame size WxH (default: the scene camera's)")
    p.add_argument(
        "--pose-jitter", type=float, default=0.0, help="fractional camera-distance jitter in [0, 1)"
    )
    p.add_argument(
        "--light-jitter", type=float, default=0.0, help="fractional light-distance jitter in [0, 1)"
    )
    p.add_argument(
        "--oracle",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="render noise-free targets with the deterministic reference path",
    )
    p.add_argument("--samples", type=int, default=192, help="per-object samples under --no-oracle")
    p.set_defaults(run=cmd_make_dataset)
    commands["make-dataset"] = p

    p = sub.add_parser("train", parents=[common], help="fit a coarse/fine field pair to a dataset")
    p.add_argument("--dataset", help="dataset directory written by make-dataset")
    p.add_argument("--out-checkpoint", help="checkpoint file to write")
    p.add_argument("--iters", type=int, default=None, help="total optimization iterations")
    p.add_argument("--batch", type=int, default=256, help="rays per iteration")
    p.add_argument("--n-coarse", type=int, default=32, help="stratified samples per ray")
    p.add_argument("--n-fine", type=int, default=48, help="importance resamples per ray")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument(
        "--holdout", type=int, default=0, help="trailing frames excluded from training"
    )
    p.add_argument("--pos-freqs", type=int, default=10, help="position encoding frequencies")
    p.add_argument("--dir-freqs", type=int, default=4, help="direction encoding frequencies")
    p.add_argument("--trunk-depth", type=int, default=8)
    p.add_argument("--trunk-width", type=int, default=256)
    p.add_argument("--scatter-depth", type=int, default=4)
    p.add_argument("--scatter-width", type=int, default=128)
    p.add_argument(
        "--ablate-light-dir",
        action="store_true",
        help="zero the light-direction input (lighting-blind control model)",
    )
    p.add_argument(
        "--resume",
        action="store_true",
        help="continue from --out-checkpoint (architecture flags are ignored)",
    )
    p.add_argument("--csv", default=None, help="loss log path (default: <checkpoint>.loss.csv)")
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(run=cmd_train)
    commands["train"] = p

    p = sub.add_parser("render", parents=[common], help="render a scene to PFM and PNG")
    p.add_argument("--scene", help="scene JSON")
    p.add_argument("--out", help="output path; .pfm and .png are written with this stem")
    p.add_argument("--mode", default="full", choices=[m.value for m in RenderMode])
    p.add_argument(
        "--samples", type=int, default=None, help="per-object samples (default 192, reference 4096)"
    )
    p.add_argument("--shadow-samples", type=int, default=None)
    p.add_argument(
        "--indirect-k", type=int, default=None, help="indirect directions (default 20, reference 512)"
    )
    p.add_argument("--bounces", type=int, default=2)
    p.add_argument("--pixel-samples", type=int, default=1)
    p.add_argument("--env-map", default=None, help="equirectangular PFM replacing the scene environment")
    p.add_argument("--env-scale", type=float, default=1.0)
    p.add_argument(
        "--reference", action="store_true", help="use the deterministic reference path (ignores --seed)"
    )
    p.set_defaults(run=cmd_render)
    commands["render"] = p

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM between two PFM images")
    p.add_argument("--render", help="image under test (PFM)")
    p.add_argument("--reference", help="ground-truth image (PFM)")
    p.add_argument("--metrics", help="output JSON path")
    p.set_defaults(run=cmd_eval)
    commands["eval"] = p

    return parser, commands


def _find_config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(argv, commands) -> None:
    """Install config-file values as subcommand defaults; explicit flags win."""
    path = _find_config_path(argv)
    if path is None:
        return
    command = next((tok for tok in argv if not tok.startswith("-")), None)
    sub = commands.get(command)
    if sub is None:
        return  # the normal parse reports the usage problem
    try:
        with open(path) as fh:
            values = json.load(fh)
    except OSError as e:
        raise CliError(2, f"{path}: {e.strerror or e}") from None
    except json.JSONDecodeError as e:
        raise CliError(2, f"{path}: invalid JSON at line {e.lineno}, column {e.colno}") from None
    if not isinstance(values, dict):
        raise CliError(2, f"{path}: expected a JSON object of flag defaults")
    valid = {a.dest for a in sub._actions} - {"help", "config"}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in valid:
            raise CliError(1, f"{path}: unknown option '{key}' for command '{command}'")
        defaults[dest] = value
    sub.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, commands = _build_parser()
    try:
        _apply_config(argv, commands)
        args = parser.parse_args(argv)
        return args.run(args)
    except SystemExit as e:  # argparse --help and usage errors
        return e.code if isinstance(e.code, int) else 1
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except SceneFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
