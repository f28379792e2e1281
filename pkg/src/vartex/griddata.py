"""Gridded meteorological samples: registry, standardization, crops, files.

Arrays are [T, V, H, W] float32 on disk and in memory; statistics are fit in
float64. The on-disk container (magic ``VTXG``) is a version byte, a
length-prefixed JSON header, then the payload as little-endian float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadMagic,
    ConstantChannel,
    EmptySeries,
    HeaderCorrupt,
    IndivisibleGrid,
    NonFiniteInput,
    PayloadTruncated,
    ShapeMismatch,
    VariableCountMismatch,
    VersionMismatch,
)

MAGIC = b"VTXG"
FORMAT_VERSION = 1

# WeatherBench-style channel set: static + surface fields, then six
# atmospheric variables on seven pressure levels (47 channels total).
SURFACE_VARIABLES = (
    "land_sea_mask",
    "orography",
    "temperature_2m",
    "u_wind_10m",
    "v_wind_10m",
)
ATMOSPHERIC_VARIABLES = (
    "geopotential",
    "u_wind",
    "v_wind",
    "temperature",
    "specific_humidity",
    "relative_humidity",
)
PRESSURE_LEVELS = (50, 250, 500, 600, 700, 850, 925)

# Forecast targets in report order, with physical units after destandardization.
TARGET_LABELS = ("u_wind_10m", "temperature_2m", "geopotential_500", "temperature_850")
UNITS = {
    "u_wind_10m": "m/s",
    "temperature_2m": "K",
    "geopotential_500": "m^2/s^2",
    "temperature_850": "K",
}


def _label(name: str, level: Optional[int]) -> str:
    return name if level is None else f"{name}_{level}"


@dataclass(frozen=True)
class VariableRegistry:
    """Ordered (name, pressure level) channel list; order defines channel index."""

    entries: tuple

    def __post_init__(self):
        seen = set()
        for name, level in self.entries:
            key = (name, level)
            if key in seen:
                raise ValueError(f"duplicate registry entry {_label(name, level)!r}")
            seen.add(key)

    def __len__(self):
        return len(self.entries)

    def names(self) -> list:
        return [_label(name, level) for name, level in self.entries]

    def index(self, name: str, level: Optional[int] = None) -> int:
        for i, (n, l) in enumerate(self.entries):
            if n == name and l == level:
                return i
        raise KeyError(f"variable {_label(name, level)!r} not in registry")

    def index_of_label(self, label: str) -> int:
        try:
            return self.names().index(label)
        except ValueError:
            raise KeyError(f"variable {label!r} not in registry") from None

    @classmethod
    def default(cls) -> "VariableRegistry":
        entries = [(name, None) for name in SURFACE_VARIABLES]
        for name in ATMOSPHERIC_VARIABLES:
            for level in PRESSURE_LEVELS:
                entries.append((name, level))
        return cls(tuple(entries))

    @classmethod
    def synthetic(cls, count: int) -> "VariableRegistry":
        return cls(tuple((f"channel_{i:02d}", None) for i in range(count)))

    def to_json(self):
        return [[name, level] for name, level in self.entries]

    @classmethod
    def from_json(cls, obj) -> "VariableRegistry":
        return cls(tuple((name, level) for name, level in obj))


@dataclass(frozen=True)
class NormStats:
    """Per-variable mean/std in source physical units."""

    mean: np.ndarray   # [V] float64
    std: np.ndarray    # [V] float64

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ShapeMismatch(
                f"stats must be 1-D and congruent, got {self.mean.shape} / {self.std.shape}")
        if not (self.std > 0).all():
            bad = int(np.argmin(self.std))
            raise ConstantChannel(f"std must be positive, channel {bad} has {self.std[bad]}")

    def standardize(self, data: np.ndarray) -> np.ndarray:
        m = self.mean.reshape(-1, 1, 1)
        s = self.std.reshape(-1, 1, 1)
        return ((data - m) / s).astype(data.dtype)

    def destandardize(self, data: np.ndarray) -> np.ndarray:
        m = self.mean.reshape(-1, 1, 1)
        s = self.std.reshape(-1, 1, 1)
        return (data * s + m).astype(data.dtype)

    def to_json(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj) -> "NormStats":
        return cls(np.asarray(obj["mean"]), np.asarray(obj["std"]))


@dataclass(frozen=True)
class GridSample:
    data: np.ndarray      # [V, H, W], standardized
    timestamp: int        # hours since epoch


@dataclass(frozen=True)
class Region:
    """A rectangle of grid cells: offsets plus extent."""

    row_off: int
    col_off: int
    height: int
    width: int

    def validate(self, H: int, W: int):
        if not (0 <= self.row_off and self.row_off + self.height <= H):
            raise ShapeMismatch(f"region rows [{self.row_off}, +{self.height}) exceed H={H}")
        if not (0 <= self.col_off and self.col_off + self.width <= W):
            raise ShapeMismatch(f"region cols [{self.col_off}, +{self.width}) exceed W={W}")

    @property
    def rows(self) -> slice:
        return slice(self.row_off, self.row_off + self.height)

    @property
    def cols(self) -> slice:
        return slice(self.col_off, self.col_off + self.width)

    def extract(self, data: np.ndarray) -> np.ndarray:
        """Crop the trailing two (H, W) axes."""
        return data[..., self.rows, self.cols]

    @classmethod
    def full(cls, H: int, W: int) -> "Region":
        return cls(0, 0, H, W)


class GridSeries:
    """A time-ordered stack of grid samples plus everything needed to read it."""

    def __init__(self, data: np.ndarray, timestamps: Sequence[int],
                 latitudes: np.ndarray, registry: VariableRegistry,
                 stats: Optional[NormStats] = None):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 4:
            raise ShapeMismatch(f"series data must be [T, V, H, W], got {data.shape}")
        if not np.isfinite(data).all():
            raise NonFiniteInput("series data contains NaN/Inf")
        T, V, H, W = data.shape
        if V != len(registry):
            raise VariableCountMismatch(
                f"data has {V} channels but registry lists {len(registry)}")
        ts = np.asarray(timestamps, dtype=np.int64)
        if ts.shape != (T,):
            raise ShapeMismatch(f"need {T} timestamps, got shape {ts.shape}")
        if T >= 2:
            steps = np.diff(ts)
            if not (steps > 0).all():
                raise ValueError("timestamps must be strictly increasing")
            if not (steps == steps[0]).all():
                raise ValueError("timestamps must have a constant step")
        lats = np.asarray(latitudes, dtype=np.float64)
        if lats.shape != (H,):
            raise ShapeMismatch(f"need {H} latitudes, got shape {lats.shape}")
        if np.abs(lats).max() > 90.0:
            raise ValueError("latitudes must lie within [-90, 90]")
        d = np.diff(lats)
        if len(lats) >= 2 and not ((d > 0).all() or (d < 0).all()):
            raise ValueError("latitudes must be strictly monotone")
        self.data = data
        self.timestamps = ts
        self.latitudes = lats
        self.registry = registry
        self.stats = stats

    def __len__(self):
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape

    @property
    def step_hours(self) -> int:
        if len(self) < 2:
            raise EmptySeries("step size undefined for a series with < 2 samples")
        return int(self.timestamps[1] - self.timestamps[0])

    def sample(self, i: int) -> GridSample:
        return GridSample(self.data[i], int(self.timestamps[i]))

    def lead_steps(self, lead_hours: int) -> int:
        step = self.step_hours
        if lead_hours % step:
            raise ValueError(f"lead time {lead_hours}h not a multiple of the {step}h step")
        n = lead_hours // step
        if n < 1 or n >= len(self):
            raise ValueError(f"lead of {n} steps does not fit a series of length {len(self)}")
        return n

    def subseries(self, start: int, stop: int) -> "GridSeries":
        return GridSeries(self.data[start:stop], self.timestamps[start:stop],
                          self.latitudes, self.registry, self.stats)


def default_latitudes(H: int) -> np.ndarray:
    """Cell-centered latitudes; H=32 gives the 5.625-degree grid."""
    step = 180.0 / H
    return -90.0 + (np.arange(H, dtype=np.float64) + 0.5) * step


# -- standardization -------------------------------------------------------------


def fit_standardizer(series) -> NormStats:
    """Per-variable mean/std over all samples and cells, float64 two-pass."""
    data = series.data if isinstance(series, GridSeries) else np.asarray(series)
    if data.ndim != 4:
        raise ShapeMismatch(f"expected [T, V, H, W], got {data.shape}")
    if data.shape[0] < 2:
        raise EmptySeries("standardization needs at least 2 time steps")
    x = data.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = np.sqrt(((x - mean.reshape(1, -1, 1, 1)) ** 2).mean(axis=(0, 2, 3)))
    if (std < 1e-12).any():
        v = int(np.argmax(std < 1e-12))
        name = series.registry.names()[v] if isinstance(series, GridSeries) else str(v)
        raise ConstantChannel(f"channel {name} is constant (std={std[v]:.3e})")
    return NormStats(mean, std)


# -- crop geometry ---------------------------------------------------------------


def canonical_crops(H: int, W: int, S: int, patch_size: int = 1) -> list:
    """The S*S non-overlapping (H/S)x(W/S) regions, row-major."""
    if S < 1:
        raise IndivisibleGrid(f"split factor must be >= 1, got {S}")
    if H % S or W % S:
        raise IndivisibleGrid(f"S={S} does not divide grid {H}x{W}")
    ch, cw = H // S, W // S
    if ch % patch_size or cw % patch_size:
        raise IndivisibleGrid(
            f"crop {ch}x{cw} is not a multiple of patch size {patch_size}")
    return [Region(r * ch, c * cw, ch, cw) for r in range(S) for c in range(S)]


def random_crop(H: int, W: int, S: int, rng, patch_size: int = 1) -> Region:
    """One of the canonical tile positions, chosen uniformly."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.Generator(np.random.PCG64(rng))
    crops = canonical_crops(H, W, S, patch_size)
    return crops[int(rng.integers(len(crops)))]


# -- synthetic data --------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Traveling-sinusoid fields with cross-variable phase coupling.

    Temporal frequencies are drawn so a 6-step-ahead field is far from the
    current one (persistence is a weak baseline) while remaining an exact
    linear function of it (the mapping is learnable).
    """

    num_variables: int = 8
    height: int = 32
    width: int = 64
    steps: int = 512
    seed: int = 0
    modes: int = 6
    advection_speed: float = 1.0     # scales all temporal frequencies
    freq_lo: float = 0.35            # rad/step at advection_speed=1
    freq_hi: float = 0.70
    amplitude_decay: float = 0.8
    stats_fraction: float = 0.75     # leading fraction used to fit NormStats
    registry: Optional[VariableRegistry] = None

    def __post_init__(self):
        if self.num_variables < 1:
            raise ValueError("num_variables must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.modes < 1:
            raise ValueError("modes must be >= 1")
        if not (0.0 < self.stats_fraction <= 1.0):
            raise ValueError("stats_fraction must be in (0, 1]")


def generate_synthetic(config: SynthConfig) -> GridSeries:
    """Deterministic series; computed in float64, stored standardized float32."""
    V, H, W, T = config.num_variables, config.height, config.width, config.steps
    rng = np.random.Generator(np.random.PCG64(config.seed))

    hh = 2.0 * np.pi * np.arange(H, dtype=np.float64) / H
    ww = 2.0 * np.pi * np.arange(W, dtype=np.float64) / W
    vv = np.arange(V, dtype=np.float64)

    raw = np.zeros((T, V, H, W), dtype=np.float64)
    t_axis = np.arange(T, dtype=np.float64)
    for m in range(config.modes):
        # integer wavenumbers keep each mode zero-mean over the full grid
        k_h = int(rng.integers(1, 4))
        k_w = int(rng.integers(1, 5))
        omega = config.advection_speed * rng.uniform(config.freq_lo, config.freq_hi)
        psi = rng.uniform(0.0, 2.0 * np.pi)
        coupling = int(rng.integers(1, 4))
        amp = config.amplitude_decay ** m
        spatial = k_h * hh[:, None] + k_w * ww[None, :]            # [H, W]
        var_phase = 2.0 * np.pi * coupling * vv / V                # [V]
        phase0 = spatial[None, :, :] + var_phase[:, None, None] + psi   # [V, H, W]
        for t in range(T):
            raw[t] += amp * np.sin(phase0 + omega * t_axis[t])

    raw32 = raw.astype(np.float32)
    registry = config.registry or VariableRegistry.synthetic(V)
    lats = default_latitudes(H)
    timestamps = np.arange(T, dtype=np.int64)

    if T < 2:
        return GridSeries(raw32, timestamps, lats, registry, stats=None)
    n_fit = max(2, int(round(T * config.stats_fraction)))
    stats = fit_standardizer(raw32[:n_fit])
    standardized = ((raw32.astype(np.float64) - stats.mean.reshape(1, -1, 1, 1))
                    / stats.std.reshape(1, -1, 1, 1)).astype(np.float32)
    return GridSeries(standardized, timestamps, lats, registry, stats=stats)


# -- on-disk format --------------------------------------------------------------


def _series_header(series: GridSeries) -> dict:
    T, V, H, W = series.data.shape
    return {
        "dims": {"T": T, "V": V, "H": H, "W": W},
        "registry": series.registry.to_json(),
        "stats": series.stats.to_json() if series.stats is not None else None,
        "latitudes": series.latitudes.tolist(),
        "timestamps": series.timestamps.tolist(),
    }


def write_grid(path, series: GridSeries):
    header = json.dumps(_series_header(series), separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(series.data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes([FORMAT_VERSION]))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(payload)


def read_grid(path) -> GridSeries:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 9:
        raise HeaderCorrupt(f"{path}: file ends inside the fixed header")
    version = blob[4]
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (header_len,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + header_len:
        raise HeaderCorrupt(f"{path}: declared header length {header_len} overruns the file")
    try:
        header = json.loads(blob[9:9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderCorrupt(f"{path}: header is not valid JSON ({e})") from None
    try:
        dims = header["dims"]
        T, V, H, W = dims["T"], dims["V"], dims["H"], dims["W"]
        registry = VariableRegistry.from_json(header["registry"])
        stats = NormStats.from_json(header["stats"]) if header["stats"] is not None else None
        latitudes = np.asarray(header["latitudes"], dtype=np.float64)
        timestamps = np.asarray(header["timestamps"], dtype=np.int64)
    except (KeyError, TypeError) as e:
        raise HeaderCorrupt(f"{path}: header missing/invalid field ({e})") from None
    if len(registry) != V:
        raise HeaderCorrupt(
            f"{path}: dims declare V={V} but registry lists {len(registry)} variables")
    expected = T * V * H * W * 4
    actual = len(blob) - 9 - header_len
    if actual != expected:
        raise PayloadTruncated(expected, actual, detail=str(path))
    data = np.frombuffer(blob, dtype="<f4", count=T * V * H * W,
                         offset=9 + header_len).reshape(T, V, H, W).copy()
    return GridSeries(data, timestamps, latitudes, registry, stats)


def series_manifest(series: GridSeries) -> dict:
    """JSON-ready sidecar: registry and stats for other tooling."""
    T, V, H, W = series.data.shape
    return {
        "dims": {"T": T, "V": V, "H": H, "W": W},
        "variables": series.registry.names(),
        "stats": series.stats.to_json() if series.stats is not None else None,
        "latitude_range": [float(series.latitudes.min()), float(series.latitudes.max())],
    }
