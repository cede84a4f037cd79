"""Serialization and metrics: strict scene JSON, PFM/PNG images, dataset
manifests for training, and the PSNR/SSIM pair used for evaluation.

Scene files are validated strictly: unknown or missing keys fail with the
JSON path of the offending entry rather than a silent default, since a typo
in a material parameter would otherwise just render a subtly wrong image.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .fields import (
    HomogeneousBoxField,
    HomogeneousSphereField,
    LambertianShellField,
    ObjectInstance,
)
from .geom import Aabb, RigidTransform, rotation_from_rotvec_deg
from .render import Camera, EnvironmentMap, PointLight, Scene

__all__ = [
    "DatasetManifest",
    "FrameRecord",
    "ImageBuffer",
    "SceneBundle",
    "SceneFormatError",
    "load_dataset",
    "load_scene",
    "luminance",
    "object_from_spec",
    "psnr",
    "read_pfm",
    "ssim",
    "tone_map",
    "write_pfm",
    "write_png",
]

SCENE_VERSION = 1
DATASET_VERSION = 1

GAMMA = 2.2


class SceneFormatError(ValueError):
    """Raised for malformed scene or dataset files; the message carries the
    JSON path of the offending entry."""


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------


def _check_keys(d, path: str, required: Tuple[str, ...], optional: Tuple[str, ...] = ()) -> None:
    if not isinstance(d, dict):
        raise SceneFormatError(f"{path}: expected an object")
    for k in required:
        if k not in d:
            raise SceneFormatError(f"{path}: missing required key '{k}'")
    for k in d:
        if k not in required and k not in optional:
            raise SceneFormatError(f"{path}.{k}: unknown key")


def _as_number(v, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SceneFormatError(f"{path}: expected a number")
    return float(v)


def _as_int(v, path: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise SceneFormatError(f"{path}: expected an integer")
    return v


def _as_bool(v, path: str) -> bool:
    if not isinstance(v, bool):
        raise SceneFormatError(f"{path}: expected true or false")
    return v


def _as_str(v, path: str) -> str:
    if not isinstance(v, str):
        raise SceneFormatError(f"{path}: expected a string")
    return v


def _as_vec3(v, path: str) -> np.ndarray:
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise SceneFormatError(f"{path}: expected a list of 3 numbers")
    return np.array([_as_number(x, f"{path}[{i}]") for i, x in enumerate(v)])


def _as_matrix4(v, path: str) -> np.ndarray:
    if not isinstance(v, list) or len(v) != 4:
        raise SceneFormatError(f"{path}: expected 4 rows")
    rows = []
    for i, row in enumerate(v):
        if not isinstance(row, list) or len(row) != 4:
            raise SceneFormatError(f"{path}[{i}]: expected 4 numbers")
        rows.append([_as_number(x, f"{path}[{i}][{j}]") for j, x in enumerate(row)])
    return np.array(rows)


# ---------------------------------------------------------------------------
# scene files
# ---------------------------------------------------------------------------

_FIELD_KEYS: Dict[str, Tuple[str, ...]] = {
    "homogeneous_sphere": ("radius", "density", "albedo"),
    "lambertian_shell": ("radius", "thickness", "density", "albedo"),
    "homogeneous_box": ("half_extents", "density", "albedo"),
    "checkpoint": ("path",),
}
_PLACEMENT_KEYS = ("position", "rotation_deg", "scale", "bounds")


def _bounds_from_spec(spec, path: str) -> Aabb:
    _check_keys(spec, path, ("min", "max"))
    return Aabb(_as_vec3(spec["min"], f"{path}.min"), _as_vec3(spec["max"], f"{path}.max"))


def object_from_spec(spec: dict, path: str = "object", base_dir: str = ".") -> ObjectInstance:
    """Build a placed object from its JSON description."""
    if not isinstance(spec, dict) or "type" not in spec:
        raise SceneFormatError(f"{path}: expected an object with a 'type' key")
    kind = _as_str(spec["type"], f"{path}.type")
    if kind not in _FIELD_KEYS:
        known = ", ".join(sorted(_FIELD_KEYS))
        raise SceneFormatError(f"{path}.type: unknown type '{kind}' (known: {known})")
    _check_keys(spec, path, ("type",) + _FIELD_KEYS[kind], _PLACEMENT_KEYS)

    bounds = None
    if "bounds" in spec:
        bounds = _bounds_from_spec(spec["bounds"], f"{path}.bounds")

    if kind == "homogeneous_sphere":
        fld = HomogeneousSphereField(
            _as_number(spec["radius"], f"{path}.radius"),
            _as_number(spec["density"], f"{path}.density"),
            _as_vec3(spec["albedo"], f"{path}.albedo"),
        )
    elif kind == "lambertian_shell":
        fld = LambertianShellField(
            _as_number(spec["radius"], f"{path}.radius"),
            _as_number(spec["thickness"], f"{path}.thickness"),
            _as_number(spec["density"], f"{path}.density"),
            _as_vec3(spec["albedo"], f"{path}.albedo"),
        )
    elif kind == "homogeneous_box":
        fld = HomogeneousBoxField(
            _as_vec3(spec["half_extents"], f"{path}.half_extents"),
            _as_number(spec["density"], f"{path}.density"),
            _as_vec3(spec["albedo"], f"{path}.albedo"),
        )
    else:  # checkpoint
        from .neural import MlpField, load_checkpoint

        ckpt = os.path.join(base_dir, _as_str(spec["path"], f"{path}.path"))
        if not os.path.exists(ckpt):
            raise SceneFormatError(f"{path}.path: no such file: {ckpt}")
        _, fine, ckpt_bounds, _ = load_checkpoint(ckpt)
        fld = MlpField(fine, bounds if bounds is not None else ckpt_bounds)
        bounds = None  # already folded into the field

    rotation = np.eye(3)
    if "rotation_deg" in spec:
        rotation = rotation_from_rotvec_deg(_as_vec3(spec["rotation_deg"], f"{path}.rotation_deg"))
    translation = np.zeros(3)
    if "position" in spec:
        translation = _as_vec3(spec["position"], f"{path}.position")
    scale = _as_number(spec.get("scale", 1.0), f"{path}.scale")
    return ObjectInstance(fld, RigidTransform(rotation, translation, scale), bounds=bounds)


def _light_from_spec(spec, path: str) -> PointLight:
    _check_keys(spec, path, ("position", "radiance"), ("inverse_square",))
    return PointLight(
        _as_vec3(spec["position"], f"{path}.position"),
        _as_vec3(spec["radiance"], f"{path}.radiance"),
        inverse_square=_as_bool(spec.get("inverse_square", False), f"{path}.inverse_square"),
    )


def _camera_from_spec(spec, path: str) -> Camera:
    _check_keys(
        spec, path, ("position", "look_at", "up", "vertical_fov_deg", "width", "height")
    )
    return Camera(
        position=_as_vec3(spec["position"], f"{path}.position"),
        look_at=_as_vec3(spec["look_at"], f"{path}.look_at"),
        up=_as_vec3(spec["up"], f"{path}.up"),
        vertical_fov_deg=_as_number(spec["vertical_fov_deg"], f"{path}.vertical_fov_deg"),
        width=_as_int(spec["width"], f"{path}.width"),
        height=_as_int(spec["height"], f"{path}.height"),
    )


def _environment_from_spec(spec, path: str, base_dir: str) -> EnvironmentMap:
    _check_keys(spec, path, (), ("pfm", "constant", "scale"))
    scale = _as_number(spec.get("scale", 1.0), f"{path}.scale")
    if ("pfm" in spec) == ("constant" in spec):
        raise SceneFormatError(f"{path}: give exactly one of 'pfm' or 'constant'")
    if "pfm" in spec:
        grid = read_pfm(os.path.join(base_dir, _as_str(spec["pfm"], f"{path}.pfm")))
    else:
        grid = np.tile(_as_vec3(spec["constant"], f"{path}.constant"), (1, 1, 1))
    return EnvironmentMap(grid, scale=scale)


@dataclass(frozen=True)
class SceneBundle:
    scene: Scene
    camera: Camera
    background: Tuple[float, float, float]


def load_scene(path: str) -> SceneBundle:
    """Parse and validate a scene file; see docs/ for examples."""
    try:
        with open(path, "r") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}") from e
    base_dir = os.path.dirname(os.path.abspath(path))

    _check_keys(raw, "scene", ("version", "objects", "camera"),
                ("lights", "environment", "background"))
    version = _as_int(raw["version"], "scene.version")
    if version != SCENE_VERSION:
        raise SceneFormatError(f"scene.version: unsupported version {version}")

    if not isinstance(raw["objects"], list):
        raise SceneFormatError("scene.objects: expected a list")
    objects = [
        object_from_spec(spec, f"objects[{i}]", base_dir) for i, spec in enumerate(raw["objects"])
    ]

    lights = []
    if "lights" in raw:
        if not isinstance(raw["lights"], list):
            raise SceneFormatError("scene.lights: expected a list")
        lights = [_light_from_spec(s, f"lights[{i}]") for i, s in enumerate(raw["lights"])]

    environment = None
    if "environment" in raw:
        environment = _environment_from_spec(raw["environment"], "environment", base_dir)

    background = (0.0, 0.0, 0.0)
    if "background" in raw:
        background = tuple(_as_vec3(raw["background"], "scene.background"))

    camera = _camera_from_spec(raw["camera"], "camera")
    return SceneBundle(Scene(objects, lights, environment), camera, background)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def write_pfm(path: str, img: np.ndarray) -> None:
    """Color PFM, little-endian, rows stored bottom-up."""
    arr = np.asarray(img, dtype="<f4")
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(arr).tobytes())


def read_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a PFM file")
    kind, w, h = m.group(1), int(m.group(2)), int(m.group(3))
    if kind != b"PF":
        raise ValueError(f"{path}: only color PFM is supported")
    scale = float(m.group(4))
    endian = "<f4" if scale < 0 else ">f4"
    if len(data) - m.end() < w * h * 3 * 4:
        raise ValueError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(data, dtype=endian, count=w * h * 3, offset=m.end())
    return np.flipud(pixels.reshape(h, w, 3)).astype(np.float32)


def tone_map(img: np.ndarray) -> np.ndarray:
    """Linear radiance to display bytes: clamp, gamma 1/2.2, round to uint8."""
    clamped = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.round(255.0 * clamped ** (1.0 / GAMMA)).astype(np.uint8)


def write_png(path: str, img: np.ndarray) -> None:
    Image.fromarray(tone_map(img), mode="RGB").save(path, format="PNG")


@dataclass
class ImageBuffer:
    """A rendered image plus the disk formats it travels in: PFM for the
    exact float data, PNG for viewing."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError("image must be (H, W, 3)")
        self.data = arr

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def load(cls, path: str) -> "ImageBuffer":
        return cls(read_pfm(path))

    def save(self, path: str) -> None:
        """Format picked by extension: .pfm stays linear, .png is tone mapped."""
        ext = os.path.splitext(path)[1].lower()
        if ext == ".pfm":
            write_pfm(path, self.data)
        elif ext == ".png":
            write_png(path, self.data)
        else:
            raise ValueError(f"unsupported image extension '{ext}' (use .pfm or .png)")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise in dB over linear values clamped to [0, 1];
    identical images give inf."""
    x = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    y = np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)
    if x.shape != y.shape:
        raise ValueError("image shapes differ")
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def luminance(img: np.ndarray) -> np.ndarray:
    """Rec. 709 luma of a linear RGB image."""
    arr = np.asarray(img, dtype=np.float64)
    return arr[..., 0] * 0.2126 + arr[..., 1] * 0.7152 + arr[..., 2] * 0.0722


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale structural similarity on the luma channel.

    11x11 Gaussian (sigma 1.5) windows over valid positions only, with the
    conventional stabilizers for unit dynamic range.
    """
    x = luminance(np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0))
    y = luminance(np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0))
    if x.shape != y.shape:
        raise ValueError("image shapes differ")
    if min(x.shape) < 11:
        raise ValueError("images must be at least 11x11 for SSIM")
    kern = _gaussian_kernel()
    win = np.lib.stride_tricks.sliding_window_view

    def filt(img):
        return (win(img, (11, 11)) * kern).sum(axis=(-1, -2))

    c1, c2 = 0.01**2, 0.03**2
    mx, my = filt(x), filt(y)
    mxx, myy, mxy = filt(x * x), filt(y * y), filt(x * y)
    vx = mxx - mx * mx
    vy = myy - my * my
    cov = mxy - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class FrameRecord:
    file: str
    camera_to_world: np.ndarray
    light_position: np.ndarray
    light_radiance: np.ndarray


@dataclass
class DatasetManifest:
    """A rendered multi-view dataset of a single object: global rendering
    parameters plus one record per frame. Images live in PFM files next to
    manifest.json under the dataset root."""

    root: str
    width: int
    height: int
    vertical_fov_deg: float
    background: Tuple[float, float, float]
    object_spec: dict
    frames: List[FrameRecord] = field(default_factory=list)

    def add_frame(self, image: np.ndarray, camera_to_world, light_position, light_radiance) -> str:
        name = os.path.join("frames", f"{len(self.frames):04d}.pfm")
        full = os.path.join(self.root, name)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        write_pfm(full, image)
        self.frames.append(
            FrameRecord(
                name,
                np.asarray(camera_to_world, dtype=np.float64),
                np.asarray(light_position, dtype=np.float64),
                np.asarray(light_radiance, dtype=np.float64),
            )
        )
        return full

    def frame_image(self, index: int) -> np.ndarray:
        return read_pfm(os.path.join(self.root, self.frames[index].file))

    def build_object(self) -> ObjectInstance:
        return object_from_spec(self.object_spec, "object", self.root)

    def save(self) -> None:
        doc = {
            "version": DATASET_VERSION,
            "width": self.width,
            "height": self.height,
            "vertical_fov_deg": self.vertical_fov_deg,
            "background": list(self.background),
            "object": self.object_spec,
            "frames": [
                {
                    "file": f.file,
                    "camera_to_world": f.camera_to_world.tolist(),
                    "light": {
                        "position": f.light_position.tolist(),
                        "radiance": f.light_radiance.tolist(),
                    },
                }
                for f in self.frames
            ],
        }
        with open(os.path.join(self.root, "manifest.json"), "w") as fh:
            json.dump(doc, fh, indent=1)


def load_dataset(root: str) -> DatasetManifest:
    path = os.path.join(root, "manifest.json")
    try:
        with open(path, "r") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}") from e

    _check_keys(
        raw, "manifest",
        ("version", "width", "height", "vertical_fov_deg", "background", "object", "frames"),
    )
    if _as_int(raw["version"], "manifest.version") != DATASET_VERSION:
        raise SceneFormatError(f"manifest.version: unsupported version {raw['version']}")
    if not isinstance(raw["frames"], list):
        raise SceneFormatError("manifest.frames: expected a list")

    frames = []
    for i, f in enumerate(raw["frames"]):
        p = f"frames[{i}]"
        _check_keys(f, p, ("file", "camera_to_world", "light"))
        _check_keys(f["light"], f"{p}.light", ("position", "radiance"))
        frames.append(
            FrameRecord(
                _as_str(f["file"], f"{p}.file"),
                _as_matrix4(f["camera_to_world"], f"{p}.camera_to_world"),
                _as_vec3(f["light"]["position"], f"{p}.light.position"),
                _as_vec3(f["light"]["radiance"], f"{p}.light.radiance"),
            )
        )

    return DatasetManifest(
        root=root,
        width=_as_int(raw["width"], "manifest.width"),
        height=_as_int(raw["height"], "manifest.height"),
        vertical_fov_deg=_as_number(raw["vertical_fov_deg"], "manifest.vertical_fov_deg"),
        background=tuple(_as_vec3(raw["background"], "manifest.background")),
        object_spec=raw["object"],
        frames=frames,
    )
