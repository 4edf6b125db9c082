"""Seeded geometric/photometric transforms producing CQG training pairs.

``make_cqg_pair`` returns ``x1 = geometric(image)``, ``x2 = photometric(x1)``
and the geometrically transformed mask ``y`` shared by both views.

Every random choice is drawn from a numpy generator seeded by the caller, and
the sampled parameters are plain dataclasses that can be recorded (``to_dict``)
and re-applied later to reproduce the exact same output.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, UsageError

DEFAULT_CONFIG: dict[str, dict] = {
    "hflip": {"p": 0.5},
    "shift": {"p": 0.5, "range": [-0.1, 0.1]},
    "scale": {"p": 0.5, "range": [0.9, 1.1]},
    "rotate": {"p": 0.5, "range": [-15.0, 15.0]},
    "shear": {"p": 0.5, "range": [-10.0, 10.0]},
    "elastic": {"p": 0.5, "alpha": [20.0, 40.0], "sigma": [4.0, 6.0]},
    "blur": {"p": 0.5, "radius": [1, 3]},
    "sharpen": {"p": 0.5, "range": [0.0, 1.0]},
    "gaussian_noise": {"p": 0.5, "range": [0.0, 25.0]},
    "brightness_contrast": {"p": 0.5, "brightness": [-0.2, 0.2], "contrast": [0.8, 1.2]},
    "rgb_shift": {"p": 0.5, "range": [-20.0, 20.0]},
}

GEOMETRIC_KEYS = ("hflip", "shift", "scale", "rotate", "shear", "elastic")
PHOTOMETRIC_KEYS = ("blur", "sharpen", "gaussian_noise", "brightness_contrast", "rgb_shift")


class AugmentConfig:
    """Enable probabilities and parameter ranges for every sub-transform.

    Built from ``DEFAULT_CONFIG`` with optional partial overrides, e.g.
    ``AugmentConfig({"rotate": {"p": 1.0, "range": [-5, 5]}})``.
    """

    def __init__(self, overrides: dict | None = None):
        self.settings = copy.deepcopy(DEFAULT_CONFIG)
        for key, values in (overrides or {}).items():
            if key not in self.settings:
                raise ConfigurationError(f"unknown augmentation transform {key!r}")
            if not isinstance(values, dict):
                raise ConfigurationError(f"{key}: settings must be an object")
            for name, value in values.items():
                if name not in self.settings[key]:
                    raise ConfigurationError(f"{key}: unknown setting {name!r}")
                self.settings[key][name] = value
        self._validate()

    @classmethod
    def disabled(cls) -> AugmentConfig:
        return cls({key: {"p": 0.0} for key in DEFAULT_CONFIG})

    @classmethod
    def from_file(cls, path: str | Path) -> AugmentConfig:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        return cls(doc)

    def _validate(self) -> None:
        for key, values in self.settings.items():
            p = values["p"]
            if not isinstance(p, (int, float)) or not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{key}.p must be in [0, 1], got {p!r}")
            for name, rng in values.items():
                if name == "p":
                    continue
                if (
                    not isinstance(rng, (list, tuple))
                    or len(rng) != 2
                    or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in rng)
                    or rng[0] > rng[1]
                ):
                    raise ConfigurationError(f"{key}.{name} must be [low, high] with low <= high")
        if self.settings["blur"]["radius"][0] < 0:
            raise ConfigurationError("blur.radius must be non-negative")
        if self.settings["elastic"]["sigma"][0] <= 0 and self.settings["elastic"]["p"] > 0:
            raise ConfigurationError("elastic.sigma must be positive")

    def __getitem__(self, key: str) -> dict:
        return self.settings[key]


@dataclass(frozen=True)
class ElasticParams:
    alpha: float
    sigma: float
    seed: int


@dataclass(frozen=True)
class GeometricParams:
    hflip: bool = False
    shift: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    rotate: float = 0.0
    shear: float = 0.0
    elastic: ElasticParams | None = None

    def is_identity(self) -> bool:
        return (
            not self.hflip
            and self.shift == (0.0, 0.0)
            and self.scale == 1.0
            and self.rotate == 0.0
            and self.shear == 0.0
            and self.elastic is None
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> GeometricParams:
        el = d.get("elastic")
        return cls(
            hflip=bool(d.get("hflip", False)),
            shift=tuple(float(v) for v in d.get("shift", (0.0, 0.0))),
            scale=float(d.get("scale", 1.0)),
            rotate=float(d.get("rotate", 0.0)),
            shear=float(d.get("shear", 0.0)),
            elastic=None if el is None else ElasticParams(float(el["alpha"]), float(el["sigma"]), int(el["seed"])),
        )


@dataclass(frozen=True)
class PhotometricParams:
    blur: int | None = None
    sharpen: float | None = None
    gaussian_noise: float | None = None
    noise_seed: int = 0
    brightness: float | None = None
    contrast: float | None = None
    rgb_shift: tuple[float, float, float] | None = None

    def is_identity(self) -> bool:
        return all(
            v is None
            for v in (self.blur, self.sharpen, self.gaussian_noise, self.brightness, self.rgb_shift)
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PhotometricParams:
        def opt(name, conv):
            v = d.get(name)
            return None if v is None else conv(v)

        return cls(
            blur=opt("blur", int),
            sharpen=opt("sharpen", float),
            gaussian_noise=opt("gaussian_noise", float),
            noise_seed=int(d.get("noise_seed", 0)),
            brightness=opt("brightness", float),
            contrast=opt("contrast", float),
            rgb_shift=opt("rgb_shift", lambda v: tuple(float(x) for x in v)),
        )


@dataclass(frozen=True)
class CqgPair:
    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray
    geometric: GeometricParams
    photometric: PhotometricParams


# Independent streams for the two parameter families of one seed.
_GEOMETRIC_STREAM = 0
_PHOTOMETRIC_STREAM = 1


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def _uniform(rng: np.random.Generator, bounds) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def sample_geometric_params(seed: int, config: AugmentConfig | None = None) -> GeometricParams:
    """Each sub-transform is enabled with its own probability, then drawn uniformly."""
    cfg = config or AugmentConfig()
    rng = _rng(seed, _GEOMETRIC_STREAM)
    # every draw happens unconditionally so enabling one transform never
    # reshuffles the values of the others
    on = {k: rng.random() < cfg[k]["p"] for k in GEOMETRIC_KEYS}
    shift = (_uniform(rng, cfg["shift"]["range"]), _uniform(rng, cfg["shift"]["range"]))
    scale = _uniform(rng, cfg["scale"]["range"])
    rotate = _uniform(rng, cfg["rotate"]["range"])
    shear = _uniform(rng, cfg["shear"]["range"])
    elastic = ElasticParams(
        _uniform(rng, cfg["elastic"]["alpha"]),
        _uniform(rng, cfg["elastic"]["sigma"]),
        int(rng.integers(0, 2**31 - 1)),
    )
    return GeometricParams(
        hflip=bool(on["hflip"]),
        shift=shift if on["shift"] else (0.0, 0.0),
        scale=scale if on["scale"] else 1.0,
        rotate=rotate if on["rotate"] else 0.0,
        shear=shear if on["shear"] else 0.0,
        elastic=elastic if on["elastic"] else None,
    )


def sample_photometric_params(seed: int, config: AugmentConfig | None = None) -> PhotometricParams:
    cfg = config or AugmentConfig()
    rng = _rng(seed, _PHOTOMETRIC_STREAM)
    on = {k: rng.random() < cfg[k]["p"] for k in PHOTOMETRIC_KEYS}
    lo, hi = cfg["blur"]["radius"]
    blur = int(rng.integers(int(lo), int(hi) + 1))
    sharpen = _uniform(rng, cfg["sharpen"]["range"])
    noise = _uniform(rng, cfg["gaussian_noise"]["range"])
    noise_seed = int(rng.integers(0, 2**31 - 1))
    brightness = _uniform(rng, cfg["brightness_contrast"]["brightness"])
    contrast = _uniform(rng, cfg["brightness_contrast"]["contrast"])
    shift = tuple(_uniform(rng, cfg["rgb_shift"]["range"]) for _ in range(3))
    return PhotometricParams(
        blur=blur if on["blur"] else None,
        sharpen=sharpen if on["sharpen"] else None,
        gaussian_noise=noise if on["gaussian_noise"] else None,
        noise_seed=noise_seed,
        brightness=brightness if on["brightness_contrast"] else None,
        contrast=contrast if on["brightness_contrast"] else None,
        rgb_shift=shift if on["rgb_shift"] else None,
    )


# -- geometric ----------------------------------------------------------------


def affine_matrix(params: GeometricParams, width: int, height: int) -> np.ndarray:
    """Forward 3x3 map in pixel (x, y) coordinates.

    Composition about the image center: flip, shift, scale, rotate, shear.
    """
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    to_center = np.array([[1.0, 0, -cx], [0, 1.0, -cy], [0, 0, 1.0]])
    from_center = np.array([[1.0, 0, cx], [0, 1.0, cy], [0, 0, 1.0]])
    flip = np.diag([-1.0 if params.hflip else 1.0, 1.0, 1.0])
    shift = np.array([[1.0, 0, params.shift[0] * width], [0, 1.0, params.shift[1] * height], [0, 0, 1.0]])
    scale = np.diag([params.scale, params.scale, 1.0])
    t = math.radians(params.rotate)
    rotate = np.array([[math.cos(t), -math.sin(t), 0], [math.sin(t), math.cos(t), 0], [0, 0, 1.0]])
    shear = np.array([[1.0, math.tan(math.radians(params.shear)), 0], [0, 1.0, 0], [0, 0, 1.0]])
    return from_center @ shear @ rotate @ scale @ shift @ flip @ to_center


def _source_coords(params: GeometricParams, height: int, width: int) -> np.ndarray:
    """Source (row, col) sampled by every output pixel, shape (2, H, W)."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    if params.elastic is not None:
        el = params.elastic
        rng = np.random.default_rng(el.seed)
        dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (height, width)), el.sigma, mode="constant") * el.alpha
        dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (height, width)), el.sigma, mode="constant") * el.alpha
        xs, ys = xs + dx, ys + dy
    inv = np.linalg.inv(affine_matrix(params, width, height))
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    return np.stack([src_y, src_x])


def apply_geometric(
    image: np.ndarray, mask: np.ndarray, params: GeometricParams
) -> tuple[np.ndarray, np.ndarray]:
    """Warp image (bilinear, fill 0) and mask (nearest, fill class 0) together."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.ndim != 3 or mask.shape != image.shape[:2]:
        raise UsageError(f"image {image.shape} and mask {mask.shape} dimensions differ")
    if params.is_identity():
        return image.copy(), mask.copy()
    h, w = mask.shape
    coords = _source_coords(params, h, w)
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        warped = ndimage.map_coordinates(
            image[..., c].astype(np.float64), coords, order=1, mode="constant", cval=0.0
        )
        out[..., c] = np.floor(np.clip(warped, 0, 255) + 0.5)
    new_mask = ndimage.map_coordinates(mask, coords, order=0, mode="constant", cval=0)
    return out, new_mask.astype(mask.dtype)


# -- photometric --------------------------------------------------------------


def apply_photometric(image: np.ndarray, params: PhotometricParams) -> np.ndarray:
    """Blur, sharpen, noise, brightness/contrast, RGB shift; clipped after each step."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise UsageError(f"expected an (H, W, C) image, got {image.shape}")
    if params.is_identity():
        return image.copy()
    x = image.astype(np.float64)
    if params.blur is not None and params.blur > 0:
        size = 2 * params.blur + 1
        x = ndimage.uniform_filter(x, size=(size, size, 1), mode="nearest")
    if params.sharpen is not None:
        smooth = ndimage.uniform_filter(x, size=(3, 3, 1), mode="nearest")
        x = np.clip(x + params.sharpen * (x - smooth), 0, 255)
    if params.gaussian_noise is not None:
        noise = np.random.default_rng(params.noise_seed).normal(0.0, params.gaussian_noise, x.shape)
        x = np.clip(x + noise, 0, 255)
    if params.brightness is not None or params.contrast is not None:
        contrast = 1.0 if params.contrast is None else params.contrast
        brightness = 0.0 if params.brightness is None else params.brightness
        x = np.clip(x * contrast + brightness * 255.0, 0, 255)
    if params.rgb_shift is not None:
        x = np.clip(x + np.asarray(params.rgb_shift), 0, 255)
    return np.floor(x + 0.5).astype(image.dtype)


def make_cqg_pair(
    image: np.ndarray, mask: np.ndarray, seed: int, config: AugmentConfig | None = None
) -> CqgPair:
    geometric = sample_geometric_params(seed, config)
    photometric = sample_photometric_params(seed, config)
    x1, y = apply_geometric(image, mask, geometric)
    x2 = apply_photometric(x1, photometric)
    return CqgPair(x1, x2, y, geometric, photometric)
