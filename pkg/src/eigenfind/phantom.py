"""Procedural chest-like phantom images with exactly known features.

Each image is a 64x64 float32 raster in [0,1] built from a fixed scene
grammar: a thorax outline, a darker lung field, a bright elliptical heart
of configurable width, a horizontal fluid band rising from the bottom of
the lung, and an optional pacemaker motif (disk plus wire). Ground-truth
labels are deterministic functions of the parameters, and
`measure_features` reads the same quantities back from pixels, which is
what lets counterfactuals be scored automatically.

Scene constants are chosen so the measured bands never interfere:
the fluid band lives in rows [12, 40), the heart is centered on row 46.5
(measurement band rows 44..48), and the pacemaker occupies rows <= 31.
Tone ranges are disjoint even under +-0.05 noise: lung <= 0.45,
fluid in [0.50, 0.60], heart >= 0.75, pacemaker >= 0.85.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .pgm import read_pgm, write_pgm
from .rng import Rng

IMAGE_SIZE = 64
PIXELS = IMAGE_SIZE * IMAGE_SIZE

HEALTHY = 0
POSITIVE = 1

CARDIO = "cardio"
EFFUSION = "effusion"
PATHOLOGIES = (CARDIO, EFFUSION)

CARDIO_RATIO_THRESHOLD = 0.5
EFFUSION_LEVEL_THRESHOLD = 0.15

# scene tones
_BG = 0.05
_RIM = 0.30
_LUNG_BASE = 0.10
_FLUID = 0.55
_HEART = 0.80
_PACE_DISK = 0.95
_PACE_WIRE = 0.90

# scene geometry
_CX = 32.0
_THORAX_CY = 33.0
_THORAX_SEMI_Y = 27.0
_RIM_THICKNESS = 2.0
_FLUID_TOP = 12
_FLUID_BOT = 40
_FLUID_SPAN = _FLUID_BOT - _FLUID_TOP
_HEART_CY = 46.5
_HEART_BAND = (44, 49)  # rows 44..48, center row 46 sits on the heart equator
_PACE_CENTER = (20.0, 18.0)
_PACE_RADIUS = 3.0
_PACE_WIRE_END = (28.0, 30.0)
_PACE_PATCH = (slice(13, 33), slice(14, 32))

# measurement thresholds
_HEART_MIN = 0.70
_FLUID_LO = 0.48
_FLUID_HI = 0.65
_FLUID_MIN_PIXELS = 3
_PACE_CORR_MIN = 0.60

NOISE_AMPLITUDE = 0.05

_YY, _XX = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
_PX = _XX + 0.5  # pixel centers
_PY = _YY + 0.5


class InvalidParameterError(ValueError):
    """A phantom parameter is outside its allowed range."""


class GenerationError(RuntimeError):
    """Dataset generation could not satisfy the requested constraints."""


@dataclass(frozen=True)
class PhantomParams:
    """Scene parameters; ranges are enforced by `validate`."""

    thorax_width: int  # [40, 60]
    heart_width: int  # [12, 40], strictly less than thorax_width
    heart_height: int  # [10, 16]
    fluid_level: float  # [0, 1] fraction of the lung band height
    lung_opacity: float  # [0, 0.3] brightness offset of the lung field
    pacemaker: bool
    noise_seed: int

    def validate(self) -> None:
        checks = [
            (40 <= self.thorax_width <= 60, "thorax_width", "[40, 60]"),
            (12 <= self.heart_width <= 40, "heart_width", "[12, 40]"),
            (10 <= self.heart_height <= 16, "heart_height", "[10, 16]"),
            (0.0 <= self.fluid_level <= 1.0, "fluid_level", "[0, 1]"),
            (0.0 <= self.lung_opacity <= 0.3, "lung_opacity", "[0, 0.3]"),
            (0 <= self.noise_seed < 2**64, "noise_seed", "[0, 2^64)"),
        ]
        for ok, name, rng_txt in checks:
            if not ok:
                raise InvalidParameterError(
                    f"{name}={getattr(self, name)} outside {rng_txt}"
                )
        if self.heart_width >= self.thorax_width:
            raise InvalidParameterError(
                f"heart_width={self.heart_width} must be < thorax_width={self.thorax_width}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pacemaker"] = bool(self.pacemaker)
        return d

    @staticmethod
    def from_dict(d: dict) -> "PhantomParams":
        return PhantomParams(
            thorax_width=int(d["thorax_width"]),
            heart_width=int(d["heart_width"]),
            heart_height=int(d["heart_height"]),
            fluid_level=float(d["fluid_level"]),
            lung_opacity=float(d["lung_opacity"]),
            pacemaker=bool(d["pacemaker"]),
            noise_seed=int(d["noise_seed"]),
        )


@dataclass(frozen=True)
class FeatureProbe:
    measured_heart_width: float
    measured_fluid_level: float
    pacemaker_detected: bool


def _ellipse_mask(cx: float, cy: float, semi_x: float, semi_y: float) -> np.ndarray:
    return ((_PX - cx) / semi_x) ** 2 + ((_PY - cy) / semi_y) ** 2 <= 1.0


def _pacemaker_mask() -> np.ndarray:
    disk = (_PX - _PACE_CENTER[0]) ** 2 + (_PY - _PACE_CENTER[1]) ** 2 <= _PACE_RADIUS**2
    # wire: pixels within 0.7px of the segment disk-center -> wire-end
    ax, ay = _PACE_CENTER
    bx, by = _PACE_WIRE_END
    dx, dy = bx - ax, by - ay
    t = np.clip(((_PX - ax) * dx + (_PY - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    dist2 = (_PX - (ax + t * dx)) ** 2 + (_PY - (ay + t * dy)) ** 2
    wire = dist2 <= 0.7**2
    return disk, wire


_PACE_DISK_MASK, _PACE_WIRE_MASK = _pacemaker_mask()
PACEMAKER_REGION = _PACE_DISK_MASK | _PACE_WIRE_MASK


def _pacemaker_template() -> np.ndarray:
    canvas = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
    canvas[_PACE_WIRE_MASK] = _PACE_WIRE
    canvas[_PACE_DISK_MASK] = _PACE_DISK
    patch = canvas[_PACE_PATCH]
    patch = patch - patch.mean()
    return patch / np.linalg.norm(patch)


_PACE_TEMPLATE = _pacemaker_template()


def render(params: PhantomParams, noise: bool = True) -> np.ndarray:
    """Render the scene; deterministic for equal params.

    Noise is additive uniform in [-0.05, 0.05] from `params.noise_seed`,
    clamped to [0,1]. `noise=False` gives the exact geometric tones used
    by the measurement oracles.
    """
    params.validate()
    img = np.full((IMAGE_SIZE, IMAGE_SIZE), _BG, dtype=np.float64)

    semi_x = params.thorax_width / 2.0
    thorax = _ellipse_mask(_CX, _THORAX_CY, semi_x, _THORAX_SEMI_Y)
    lung = _ellipse_mask(
        _CX, _THORAX_CY, semi_x - _RIM_THICKNESS, _THORAX_SEMI_Y - _RIM_THICKNESS
    )
    img[thorax] = _RIM
    img[lung] = _LUNG_BASE + params.lung_opacity

    if params.fluid_level > 0.0:
        top = _FLUID_BOT - params.fluid_level * _FLUID_SPAN
        band = (_YY >= top) & (_YY < _FLUID_BOT)
        img[band & lung] = _FLUID

    heart = _ellipse_mask(_CX, _HEART_CY, params.heart_width / 2.0, params.heart_height / 2.0)
    img[heart] = _HEART

    if params.pacemaker:
        img[_PACE_WIRE_MASK] = _PACE_WIRE
        img[_PACE_DISK_MASK] = _PACE_DISK

    if noise:
        rng = Rng(params.noise_seed)
        jitter = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=PIXELS)
        img += jitter.reshape(IMAGE_SIZE, IMAGE_SIZE)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def label(params: PhantomParams, pathology: str) -> int:
    """Deterministic ground-truth label for one pathology analog."""
    params.validate()
    if pathology == CARDIO:
        return POSITIVE if params.heart_width / params.thorax_width > CARDIO_RATIO_THRESHOLD else HEALTHY
    if pathology == EFFUSION:
        return POSITIVE if params.fluid_level > EFFUSION_LEVEL_THRESHOLD else HEALTHY
    raise InvalidParameterError(f"unknown pathology {pathology!r}")


def _sample_params(rng: Rng) -> PhantomParams:
    return PhantomParams(
        thorax_width=rng.integer(40, 61),
        heart_width=rng.integer(12, 41),
        heart_height=rng.integer(10, 17),
        fluid_level=rng.uniform(0.0, 1.0),
        lung_opacity=rng.uniform(0.0, 0.3),
        pacemaker=bool(rng.next_u64() & 1),
        noise_seed=0,
    )


@dataclass(frozen=True)
class DatasetItem:
    image: np.ndarray  # flat (PIXELS,) float32 in [0,1]
    label: int
    params: PhantomParams


def generate_dataset(
    n: int,
    pathology: str,
    seed: int,
    class_balance: float = 0.5,
    noise: bool = True,
    max_attempts: int = 10000,
) -> list[DatasetItem]:
    """Sample `n` labeled phantoms, exactly round(n*balance) of them Positive.

    Parameters are drawn uniformly over the valid region by rejection,
    conditioned on the target label; the whole dataset is a pure function
    of (n, pathology, seed, class_balance, noise).
    """
    if n < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n}")
    if not (0.0 < class_balance < 1.0):
        raise InvalidParameterError(f"class_balance must be in (0,1), got {class_balance}")
    if pathology not in PATHOLOGIES:
        raise InvalidParameterError(f"unknown pathology {pathology!r}")

    n_pos = int(np.floor(n * class_balance + 0.5))
    targets = np.array([POSITIVE] * n_pos + [HEALTHY] * (n - n_pos))
    rng = Rng(seed)
    rng.shuffle(targets)

    items = []
    for target in targets:
        for _ in range(max_attempts):
            p = _sample_params(rng)
            if p.heart_width >= p.thorax_width:
                continue
            if label(p, pathology) == target:
                break
        else:
            raise GenerationError(
                f"could not sample a {pathology} item with label {target} "
                f"in {max_attempts} attempts"
            )
        p = PhantomParams(**{**p.to_dict(), "noise_seed": rng.next_u64()})
        img = render(p, noise=noise)
        items.append(DatasetItem(image=img.reshape(-1), label=int(target), params=p))
    return items


def measure_features(image: np.ndarray) -> FeatureProbe:
    """Best-effort feature estimates from pixels alone.

    Heart width is the longest run of heart-bright pixels across the
    measurement band; fluid level is read from the topmost detected fluid
    row; the pacemaker is a normalized template correlation at its fixed
    location. Applies to rendered and generated images alike.
    """
    img = np.asarray(image, dtype=np.float64).reshape(IMAGE_SIZE, IMAGE_SIZE)

    # a 3-wide horizontal median despeckles generated imagery and leaves
    # clean renders untouched (the run stays the exact ellipse chord)
    band = img[_HEART_BAND[0] : _HEART_BAND[1]]
    med = np.median(
        np.stack([np.roll(band, 1, axis=1), band, np.roll(band, -1, axis=1)]), axis=0
    )
    med[:, 0] = band[:, 0]
    med[:, -1] = band[:, -1]
    mask = med >= _HEART_MIN
    best_run = 0
    for row in mask:
        run = longest = 0
        for v in row:
            run = run + 1 if v else 0
            longest = max(longest, run)
        best_run = max(best_run, longest)

    fluid_rows = img[_FLUID_TOP:_FLUID_BOT]
    in_range = (fluid_rows >= _FLUID_LO) & (fluid_rows <= _FLUID_HI)
    detected = in_range.sum(axis=1) >= _FLUID_MIN_PIXELS
    level = 0.0
    if detected.any():
        topmost = _FLUID_TOP + int(np.argmax(detected))
        level = (_FLUID_BOT - topmost) / _FLUID_SPAN

    patch = img[_PACE_PATCH]
    centered = patch - patch.mean()
    norm = np.linalg.norm(centered)
    corr = 0.0 if norm == 0.0 else float((centered * _PACE_TEMPLATE).sum() / norm)

    return FeatureProbe(
        measured_heart_width=float(best_run),
        measured_fluid_level=float(level),
        pacemaker_detected=bool(corr >= _PACE_CORR_MIN),
    )


# --- dataset persistence: PGM files plus a JSONL manifest ---


def save_dataset(items: list[DatasetItem], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for i, item in enumerate(items):
            name = f"img_{i:05d}.pgm"
            write_pgm(out / name, item.image.reshape(IMAGE_SIZE, IMAGE_SIZE))
            rec = {"file": name, "label": item.label, "params": item.params.to_dict()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(in_dir: str | Path) -> list[DatasetItem]:
    src = Path(in_dir)
    manifest = src / "manifest.jsonl"
    if not manifest.exists():
        raise GenerationError(f"no manifest.jsonl in {src}")
    items = []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            img = read_pgm(src / rec["file"])
            items.append(
                DatasetItem(
                    image=img.reshape(-1),
                    label=int(rec["label"]),
                    params=PhantomParams.from_dict(rec["params"]),
                )
            )
    return items
