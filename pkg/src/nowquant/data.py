"""Synthetic radar data: generation, storage, and the dataset pipeline.

The generator synthesises advecting rain fields good enough to exercise a
nowcasting model: anisotropic Gaussian cells ride a shared, smoothly varying
advection velocity, grow and decay multiplicatively, are born and die at
random, and draw their peak intensity from a log-normal so high-intensity
events stay rare. Whole dry spells separate the storm episodes. Frames hold
accumulated depth in mm per time step; multiply by ``steps_per_hour`` for a
rain rate.

The pipeline (window -> wet filter -> chronological split -> normalisation)
is a pure function of the manifest, so a manifest plus a seed reproduces a
dataset bit for bit.

Archives live in a small binary format:

    offset 0   4 bytes  magic ``NWQ1``
    offset 4   u32 LE   n_frames
    offset 8   u32 LE   height
    offset 12  u32 LE   width
    offset 16  u32 LE   steps_per_hour
    offset 20  4 bytes  reserved, zero
    offset 24  ...      n_frames*height*width float32 LE, frame-major,
                        each frame row-major
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError

_MAGIC = b"NWQ1"
_HEADER = struct.Struct("<4sIIII4s")


# ---------------------------------------------------------------------------
# archive container and binary format
# ---------------------------------------------------------------------------


@dataclass
class Archive:
    """A stack of radar frames in mm per step, plus the rate conversion."""

    frames: np.ndarray  # (n, H, W) float32, mm per step
    steps_per_hour: int = 12

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise DataError(f"archive frames must be (n, H, W), got shape {self.frames.shape}")
        if self.steps_per_hour < 1:
            raise DataError("steps_per_hour must be >= 1")

    @property
    def shape(self) -> tuple:
        return self.frames.shape


def write_archive(archive: Archive, path) -> None:
    n, h, w = archive.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, n, h, w, archive.steps_per_hour, b"\0\0\0\0"))
        fh.write(np.ascontiguousarray(archive.frames, dtype="<f4").tobytes())


def read_archive(path) -> Archive:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(
            f"{path}: truncated header at offset 0: need {_HEADER.size} bytes, have {len(raw)}")
    magic, n, h, w, steps, reserved = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {_MAGIC!r}")
    if reserved != b"\0\0\0\0":
        raise FormatError(f"{path}: reserved bytes at offset 20 are not zero")
    if n < 1 or h < 1 or w < 1 or steps < 1:
        raise FormatError(f"{path}: non-positive dimension in header at offset 4")
    expected = _HEADER.size + n * h * w * 4
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload mismatch at offset {_HEADER.size}: "
            f"expected {expected} bytes total, have {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", count=n * h * w, offset=_HEADER.size)
    finite = np.isfinite(frames)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise FormatError(
            f"{path}: non-finite value at offset {_HEADER.size + bad * 4}")
    return Archive(frames.reshape(n, h, w).copy(), steps_per_hour=steps)


# ---------------------------------------------------------------------------
# storm generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StormParams:
    """Knobs for the synthetic storm generator. Defaults target a 32x32 grid."""

    wet_episode_mean: float = 70.0     # frames per storm episode, geometric
    dry_fraction: float = 0.30         # long-run fraction of fully dry frames
    cell_birth_rate: float = 0.45      # expected new cells per wet frame
    cell_lifetime_mean: float = 90.0   # frames, exponential
    sigma_major_range: tuple[float, float] = (6.0, 14.0)
    anisotropy_range: tuple[float, float] = (0.4, 0.9)
    peak_log_mean: float = -1.4        # ln of mm-per-step peak intensity
    peak_log_sigma: float = 1.0
    growth_noise: float = 0.12         # per-frame lognormal sigma on amplitude
    advection_speed_range: tuple[float, float] = (0.8, 1.6)  # px per frame
    advection_direction: float | None = None  # radians; None draws one per archive
    advection_variability: float = 0.2  # relative smooth modulation of speed/direction
    advection_period: float = 240.0    # frames per modulation cycle
    cell_velocity_jitter: float = 0.1  # per-cell fraction of the shared speed
    zero_cutoff: float = 0.01          # mm per step below which a pixel is dry

    def __post_init__(self):
        if not 0.0 <= self.dry_fraction < 1.0:
            raise ConfigError("dry_fraction must lie in [0, 1)")
        if self.wet_episode_mean < 1.0 or self.cell_lifetime_mean < 1.0:
            raise ConfigError("episode and lifetime means must be >= 1 frame")
        if self.cell_birth_rate <= 0.0:
            raise ConfigError("cell_birth_rate must be positive")
        if self.zero_cutoff < 0.0:
            raise ConfigError("zero_cutoff must be non-negative")


class _Cell:
    __slots__ = ("pos", "vel_offset", "sig_major", "sig_minor", "angle",
                 "peak", "lifetime", "age", "log_walk")

    def __init__(self, pos, vel_offset, sig_major, sig_minor, angle, peak, lifetime):
        self.pos = pos
        self.vel_offset = vel_offset
        self.sig_major = sig_major
        self.sig_minor = sig_minor
        self.angle = angle
        self.peak = peak
        self.lifetime = lifetime
        self.age = 0.0
        self.log_walk = 0.0


def _spawn_cell(rng, params: StormParams, h: int, w: int, speed: float) -> _Cell:
    margin = 2.5 * params.sigma_major_range[1]
    pos = np.array([
        rng.uniform(-margin, h - 1 + margin),
        rng.uniform(-margin, w - 1 + margin),
    ])
    jitter = params.cell_velocity_jitter * speed
    vel_offset = rng.normal(0.0, jitter, size=2) if jitter > 0 else np.zeros(2)
    sig_major = rng.uniform(*params.sigma_major_range)
    sig_minor = sig_major * rng.uniform(*params.anisotropy_range)
    angle = rng.uniform(0.0, math.pi)
    peak = float(rng.lognormal(params.peak_log_mean, params.peak_log_sigma))
    lifetime = max(4.0, rng.exponential(params.cell_lifetime_mean))
    return _Cell(pos, vel_offset, sig_major, sig_minor, angle, peak, lifetime)


def _render_cell(frame: np.ndarray, cell: _Cell, amp: float) -> None:
    h, w = frame.shape
    reach = 3.2 * cell.sig_major
    r0 = max(0, int(math.floor(cell.pos[0] - reach)))
    r1 = min(h, int(math.ceil(cell.pos[0] + reach)) + 1)
    c0 = max(0, int(math.floor(cell.pos[1] - reach)))
    c1 = min(w, int(math.ceil(cell.pos[1] + reach)) + 1)
    if r0 >= r1 or c0 >= c1:
        return
    rows = np.arange(r0, r1, dtype=np.float64)[:, None] - cell.pos[0]
    cols = np.arange(c0, c1, dtype=np.float64)[None, :] - cell.pos[1]
    ca, sa = math.cos(cell.angle), math.sin(cell.angle)
    u = rows * ca + cols * sa
    v = -rows * sa + cols * ca
    quad = (u / cell.sig_major) ** 2 + (v / cell.sig_minor) ** 2
    frame[r0:r1, c0:c1] += (amp * np.exp(-0.5 * quad)).astype(np.float32)


def generate_archive(params: StormParams, n_frames: int, grid_h: int, grid_w: int,
                     seed: int, steps_per_hour: int = 12) -> Archive:
    """Simulate ``n_frames`` of synthetic radar, deterministically from the seed."""
    if n_frames < 1 or grid_h < 1 or grid_w < 1:
        raise ConfigError("n_frames, grid_h and grid_w must be >= 1")
    rng = np.random.default_rng(seed)

    # Shared advection: a base velocity plus a slow sinusoidal wobble in both
    # speed and direction. variability 0 freezes it, which the
    # cross-correlation oracle relies on.
    speed = rng.uniform(*params.advection_speed_range)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    if params.advection_direction is not None:
        theta = float(params.advection_direction)
    phase_s, phase_d = rng.uniform(0.0, 2.0 * math.pi, size=2)
    t = np.arange(n_frames)
    omega = 2.0 * math.pi / params.advection_period
    speeds = speed * (1.0 + params.advection_variability * np.sin(omega * t + phase_s))
    angles = theta + params.advection_variability * np.sin(omega * t + phase_d)
    velocity = np.stack([speeds * np.sin(angles), speeds * np.cos(angles)], axis=1)

    # Alternate wet/dry episodes; geometric lengths keep the long-run dry
    # share near dry_fraction. dry_fraction 0 means one unbroken storm.
    wet = np.zeros(n_frames, dtype=bool)
    if params.dry_fraction == 0.0:
        wet[:] = True
    else:
        p_wet = 1.0 / params.wet_episode_mean
        dry_mean = params.wet_episode_mean * params.dry_fraction / (1.0 - params.dry_fraction)
        pos = 0
        is_wet = rng.random() >= params.dry_fraction
        while pos < n_frames:
            if is_wet:
                span = int(rng.geometric(p_wet))
                wet[pos:pos + span] = True
            else:
                span = int(rng.geometric(1.0 / max(dry_mean, 1.0)))
            pos += span
            is_wet = not is_wet

    frames = np.zeros((n_frames, grid_h, grid_w), dtype=np.float32)
    cells: list[_Cell] = []
    steady = params.cell_birth_rate * params.cell_lifetime_mean
    prev_wet = False
    for ti in range(n_frames):
        if not wet[ti]:
            cells.clear()
            prev_wet = False
            continue
        if not prev_wet:
            # A fresh episode starts with a mature population: random ages
            # keep brightness and the birth/death balance stationary from the
            # first frame.
            for _ in range(rng.poisson(steady)):
                cell = _spawn_cell(rng, params, grid_h, grid_w, speed)
                cell.age = rng.uniform(0.0, cell.lifetime)
                cells.append(cell)
        for _ in range(rng.poisson(params.cell_birth_rate)):
            cells.append(_spawn_cell(rng, params, grid_h, grid_w, speed))
        survivors = []
        frame = frames[ti]
        for cell in cells:
            if cell.age > cell.lifetime:
                continue
            envelope = math.sin(math.pi * min(cell.age / cell.lifetime, 1.0))
            if params.growth_noise > 0:
                cell.log_walk += rng.normal(-0.5 * params.growth_noise ** 2,
                                            params.growth_noise)
            amp = cell.peak * envelope * math.exp(cell.log_walk)
            if amp > params.zero_cutoff * 0.05:
                _render_cell(frame, cell, amp)
            cell.pos = cell.pos + velocity[ti] + cell.vel_offset
            cell.age += 1.0
            survivors.append(cell)
        cells = survivors
        prev_wet = True

    frames[frames < params.zero_cutoff] = 0.0
    return Archive(frames, steps_per_hour=steps_per_hour)


# ---------------------------------------------------------------------------
# windows, filtering, splitting, normalisation
# ---------------------------------------------------------------------------


@dataclass
class Window:
    """One training sample: ``input_frames`` past frames and ``lead_times`` future ones."""

    start: int
    inputs: np.ndarray   # (m, H, W) mm per step
    targets: np.ndarray  # (L, H, W) mm per step

    def frame_range(self) -> range:
        return range(self.start, self.start + self.inputs.shape[0] + self.targets.shape[0])


def make_windows(archive: Archive, input_frames: int, lead_times: int,
                 stride: int = 1) -> list[Window]:
    """Slice the archive into overlapping windows of m inputs + L targets.

    Yields ``floor((n - m - L) / stride) + 1`` windows when the archive is
    long enough, otherwise an empty list.
    """
    if input_frames < 1 or lead_times < 1 or stride < 1:
        raise ConfigError("input_frames, lead_times and stride must be >= 1")
    n = archive.frames.shape[0]
    span = input_frames + lead_times
    if n < span:
        return []
    windows = []
    for start in range(0, n - span + 1, stride):
        windows.append(Window(
            start,
            archive.frames[start:start + input_frames],
            archive.frames[start + input_frames:start + span],
        ))
    return windows


def filter_wet(windows: list[Window], wet_fraction: float = 0.5) -> list[Window]:
    """Keep windows whose final target frame is at least ``wet_fraction`` wet.

    A pixel counts as wet when its value is strictly positive. The filter
    applies identically to every split, mirroring how sparse radar datasets
    are pruned before training.
    """
    if not 0.0 <= wet_fraction <= 1.0:
        raise ConfigError("wet_fraction must lie in [0, 1]")
    kept = []
    for w in windows:
        last = w.targets[-1]
        if np.count_nonzero(last) / last.size >= wet_fraction:
            kept.append(w)
    return kept


def split_chronological(windows: list[Window], train_fraction: float = 0.75,
                        val_fraction: float = 0.10):
    """Chronological split with validation carved from the train block's tail.

    ``train_fraction`` of the windows (earliest) form the train block; the
    final ``val_fraction`` of that block becomes validation; the remainder
    (latest) is test. Any window whose frame range reaches into the next
    block's frames is dropped, so no frame leaks across a boundary.
    """
    if not 0.0 < train_fraction < 1.0 or not 0.0 < val_fraction < 1.0:
        raise ConfigError("train_fraction and val_fraction must lie in (0, 1)")
    n = len(windows)
    n_train_block = int(math.floor(train_fraction * n))
    n_val = int(math.floor(val_fraction * n_train_block))
    n_train = n_train_block - n_val
    train = windows[:n_train]
    val = windows[n_train:n_train_block]
    test = windows[n_train_block:]
    if not train or not val or not test:
        raise DataError(
            f"empty split: {len(train)}/{len(val)}/{len(test)} of {n} windows")

    val_first = val[0].start
    test_first = test[0].start
    train = [w for w in train if w.frame_range().stop <= val_first]
    val = [w for w in val if w.frame_range().stop <= test_first]
    if not train or not val or not test:
        raise DataError("a split became empty after dropping boundary-straddling windows")
    return train, val, test


@dataclass(frozen=True)
class NormalizationStats:
    """Scale learned from the train split and applied everywhere."""

    train_max: float

    def __post_init__(self):
        if not math.isfinite(self.train_max) or self.train_max <= 0.0:
            raise DataError(f"train_max must be finite and positive, got {self.train_max}")


def fit_normalization(train_windows: list[Window]) -> NormalizationStats:
    """Maximum over all train inputs and targets; errors on an all-zero split."""
    if not train_windows:
        raise DataError("cannot fit normalisation on an empty train split")
    peak = 0.0
    for w in train_windows:
        peak = max(peak, float(w.inputs.max()), float(w.targets.max()))
    if peak <= 0.0:
        raise DataError("train split is entirely zero; normalisation undefined")
    return NormalizationStats(train_max=peak)


def normalize(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return values / np.float32(stats.train_max)


def denormalize(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return values * np.float32(stats.train_max)


def to_rate(depth_mm: np.ndarray, steps_per_hour: int) -> np.ndarray:
    """Convert mm-per-step depth to mm/h rate."""
    if steps_per_hour < 1:
        raise ConfigError("steps_per_hour must be >= 1")
    return depth_mm * np.float32(steps_per_hour)


# ---------------------------------------------------------------------------
# manifest and end-to-end pipeline
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    """Everything needed to rebuild a dataset bit for bit."""

    n_frames: int = 5000
    grid_h: int = 32
    grid_w: int = 32
    steps_per_hour: int = 12
    seed: int = 0
    storm: StormParams = field(default_factory=StormParams)
    input_frames: int = 4
    lead_times: int = 3
    stride: int = 1
    wet_fraction: float = 0.5
    train_fraction: float = 0.75
    val_fraction: float = 0.10


@dataclass
class DataSplits:
    """Filtered, split windows plus the normalisation fitted on train."""

    train: list[Window]
    val: list[Window]
    test: list[Window]
    stats: NormalizationStats

    def counts(self) -> dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


def generate_from_manifest(manifest: DatasetManifest) -> Archive:
    return generate_archive(manifest.storm, manifest.n_frames, manifest.grid_h,
                            manifest.grid_w, manifest.seed, manifest.steps_per_hour)


def prepare_dataset(archive: Archive, manifest: DatasetManifest) -> DataSplits:
    """window -> wet filter -> chronological split -> fit normalisation."""
    windows = make_windows(archive, manifest.input_frames, manifest.lead_times,
                           manifest.stride)
    windows = filter_wet(windows, manifest.wet_fraction)
    if not windows:
        raise DataError("no windows survive the wet filter")
    train, val, test = split_chronological(windows, manifest.train_fraction,
                                           manifest.val_fraction)
    stats = fit_normalization(train)
    return DataSplits(train, val, test, stats)


def stack_windows(windows: list[Window], stats: NormalizationStats):
    """Materialise a split as normalised float32 batches (X, Y)."""
    if not windows:
        raise DataError("cannot stack an empty window list")
    x = np.stack([w.inputs for w in windows]).astype(np.float32)
    y = np.stack([w.targets for w in windows]).astype(np.float32)
    return normalize(x, stats), normalize(y, stats)


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    d = dataclasses.asdict(manifest)
    d["storm"]["sigma_major_range"] = list(d["storm"]["sigma_major_range"])
    d["storm"]["anisotropy_range"] = list(d["storm"]["anisotropy_range"])
    d["storm"]["advection_speed_range"] = list(d["storm"]["advection_speed_range"])
    return d


def manifest_from_dict(d: dict) -> DatasetManifest:
    d = dict(d)
    storm = d.pop("storm", {})
    known_storm = {f.name for f in dataclasses.fields(StormParams)}
    unknown = set(storm) - known_storm
    if unknown:
        raise ConfigError(f"unknown storm parameter(s): {sorted(unknown)}")
    for key in ("sigma_major_range", "anisotropy_range", "advection_speed_range"):
        if key in storm:
            storm[key] = tuple(storm[key])
    known = {f.name for f in dataclasses.fields(DatasetManifest)} - {"storm"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown data key(s): {sorted(unknown)}")
    return DatasetManifest(storm=StormParams(**storm), **d)
