"""Synthetic two-domain ultrasound phantom.

Each video shows a bright curvilinear band (a bone-surface stand-in) with an
acoustic shadow underneath, a thin unlabelled skin line near the top, and
smooth tissue texture, all under multiplicative speckle. The band drifts
vertically by ``drift_rate`` pixels per frame. The target profile adds blur,
stronger speckle, a dimmer band and a slow gain drift, which is the domain
shift the rest of the toolkit has to cope with.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from xdssl.data.audit import write_png
from xdssl.data.records import FrameRecord, Manifest
from xdssl.errors import ConfigError, DataError

PROFILES = ("A_source", "B_target")

_PROFILE_DEFAULTS = {
    "A_source": dict(
        band_intensity=0.9,
        tissue_intensity=0.35,
        speckle_variance=0.04,
        blur_sigma=0.0,
        gain_drift=0.0,
    ),
    # the target probe differs mainly in texture: heavier speckle, blur and gain
    # drift, with a slightly dimmer band
    "B_target": dict(
        band_intensity=0.8,
        tissue_intensity=0.4,
        speckle_variance=0.3,
        blur_sigma=1.2,
        gain_drift=0.3,
    ),
}


@dataclass(frozen=True)
class PhantomConfig:
    domain_profile: str = "A_source"
    n_patients: int = 16
    videos_per_patient: int = 1
    frames_per_video: int = 16
    image_size: int = 64
    band_intensity: float = 0.9
    tissue_intensity: float = 0.35
    speckle_variance: float = 0.04
    blur_sigma: float = 0.0
    gain_drift: float = 0.0
    drift_rate: float = 0.5
    shadow_factor: float = 0.3
    skin_line: bool = True
    label_every: int = 1
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.domain_profile not in PROFILES:
            raise ConfigError(f"domain_profile must be one of {PROFILES}")
        if self.frames_per_video < 1 or self.n_patients < 1 or self.videos_per_patient < 1:
            raise ConfigError("patient, video and frame counts must be >= 1")
        if self.speckle_variance < 0 or self.blur_sigma < 0:
            raise ConfigError("speckle_variance and blur_sigma must be >= 0")
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16 pixels")
        if self.label_every < 1:
            raise ConfigError("label_every must be >= 1")
        if not 0 <= self.gain_drift < 1:
            raise ConfigError("gain_drift must lie in [0, 1)")

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> PhantomConfig:
        if profile not in PROFILES:
            raise ConfigError(f"domain_profile must be one of {PROFILES}")
        return cls(domain_profile=profile, **{**_PROFILE_DEFAULTS[profile], **overrides})

    @property
    def domain(self) -> str:
        return "source" if self.domain_profile == "A_source" else "target"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class VideoGeometry:
    amplitude: float
    period: float
    phase: float
    tilt: float
    thickness: float
    x_start: int
    x_stop: int
    center0: float
    direction: float
    gain_phase: float
    skin_row: float


def sample_geometry(size: int, rng: np.random.Generator) -> VideoGeometry:
    return VideoGeometry(
        amplitude=rng.uniform(0.03, 0.12) * size,
        period=rng.uniform(0.6, 1.6) * size,
        phase=rng.uniform(0, 2 * math.pi),
        tilt=rng.uniform(-0.25, 0.25),
        thickness=rng.uniform(0.05, 0.09) * size,
        x_start=int(rng.uniform(0.0, 0.25) * size),
        x_stop=int(rng.uniform(0.75, 1.0) * size),
        center0=rng.uniform(0.4, 0.65) * size,
        direction=float(rng.choice([-1.0, 1.0])),
        gain_phase=rng.uniform(0, 2 * math.pi),
        skin_row=rng.uniform(0.06, 0.14) * size,
    )


def _reflect(value: float, lo: float, hi: float) -> float:
    span = hi - lo
    t = (value - lo) % (2 * span)
    return lo + (t if t <= span else 2 * span - t)


def band_template(
    geom: VideoGeometry, frame: int, config: PhantomConfig, tissue: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free frame and its band mask."""
    size = config.image_size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    center = _reflect(
        geom.center0 + geom.direction * config.drift_rate * frame, 0.3 * size, 0.75 * size
    )
    curve = (
        center
        + geom.amplitude * np.sin(2 * math.pi * xs / geom.period + geom.phase)
        + geom.tilt * (xs - size / 2)
    )
    in_span = (xs >= geom.x_start) & (xs < geom.x_stop)
    band = in_span & (np.abs(ys - curve) <= geom.thickness / 2)
    shadow = in_span & (ys > curve + geom.thickness / 2)

    image = tissue.copy()
    image[shadow] *= config.shadow_factor
    if config.skin_line:
        skin = np.abs(ys - geom.skin_row) <= 0.6
        image[skin] = 0.5 * (config.band_intensity + config.tissue_intensity)
    image[band] = config.band_intensity
    return image, band


def tissue_texture(config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    size = config.image_size
    field = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 10, mode="wrap")
    field /= field.std() + 1e-12
    # depth attenuation: brighter near the probe
    depth = np.linspace(1.1, 0.8, size)[:, None]
    tex = config.tissue_intensity * depth * (1 + 0.15 * field)
    return np.clip(tex, 0.02, 0.98 * config.band_intensity)


def render_frame(
    template: np.ndarray, frame: int, geom: VideoGeometry, config: PhantomConfig, rng: np.random.Generator
) -> np.ndarray:
    image = template
    if config.gain_drift > 0:
        cycle = 0.5 + 0.5 * math.sin(2 * math.pi * frame / max(config.frames_per_video, 2) + geom.gain_phase)
        image = image * (1.0 - config.gain_drift * cycle)
    if config.speckle_variance > 0:
        # unit-mean gamma speckle with the requested variance
        shape = 1.0 / config.speckle_variance
        image = image * rng.gamma(shape, 1.0 / shape, size=image.shape)
    if config.blur_sigma > 0:
        image = gaussian_filter(image, sigma=config.blur_sigma, mode="nearest")
    return np.clip(image, 0.0, 1.0)


def generate_phantom(config: PhantomConfig, out_dir: str | Path) -> Manifest:
    """Write PNG frames and masks under ``out_dir`` and return their manifest.

    Deterministic in ``config.rng_seed``. Frames whose index is not a multiple
    of ``label_every`` get no mask file, mimicking sparse annotation.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create phantom output directory {out_dir}: {exc}") from exc

    tag = "A" if config.domain_profile == "A_source" else "B"
    records: list[FrameRecord] = []
    for p in range(config.n_patients):
        patient_id = f"{tag}-p{p:03d}"
        patient_seq = np.random.SeedSequence([config.rng_seed, p])
        for v, video_seq in enumerate(patient_seq.spawn(config.videos_per_patient)):
            video_id = f"{patient_id}-v{v:02d}"
            rng = np.random.default_rng(video_seq)
            geom = sample_geometry(config.image_size, rng)
            tissue = tissue_texture(config, rng)
            for t in range(config.frames_per_video):
                template, band = band_template(geom, t, config, tissue)
                image = render_frame(template, t, geom, config, rng)
                img_path = out_dir / "images" / video_id / f"{t:05d}.png"
                try:
                    write_png(img_path, image)
                    mask_path = None
                    if t % config.label_every == 0:
                        mask_path = out_dir / "masks" / video_id / f"{t:05d}.png"
                        write_png(mask_path, band.astype(np.uint8) * 255)
                except OSError as exc:
                    raise DataError(f"cannot write phantom frame {img_path}: {exc}") from exc
                records.append(
                    FrameRecord(
                        patient_id=patient_id,
                        video_id=video_id,
                        frame_index=t,
                        domain=config.domain,
                        image_path=str(img_path),
                        mask_path=None if mask_path is None else str(mask_path),
                    )
                )
    return Manifest(records)


def high_frequency_energy(image: np.ndarray, cutoff: float = 0.25) -> float:
    """Fraction of spectral energy above ``cutoff`` cycles/pixel (mean removed)."""
    img = np.asarray(image, dtype=np.float64)
    spec = np.abs(np.fft.fft2(img - img.mean())) ** 2
    fy = np.fft.fftfreq(img.shape[0])[:, None]
    fx = np.fft.fftfreq(img.shape[1])[None, :]
    radius = np.sqrt(fx**2 + fy**2)
    total = spec.sum()
    return float(spec[radius > cutoff].sum() / total) if total > 0 else 0.0


def profile_pair(seed: int, **overrides) -> tuple[PhantomConfig, PhantomConfig]:
    a = PhantomConfig.for_profile("A_source", rng_seed=seed, **overrides)
    b = PhantomConfig.for_profile("B_target", rng_seed=seed, **overrides)
    return a, b


__all__ = [
    "PROFILES",
    "PhantomConfig",
    "generate_phantom",
    "high_frequency_energy",
    "profile_pair",
]
