"""Synthetic correlated uplink/downlink CSI generation and preprocessing.

A geometric multipath generator stands in for a full channel-model
toolchain: paths share delays, angles, and gain magnitudes across the two
link directions while phases decorrelate, which preserves the two
properties the feedback codec exploits (delay-domain sparsity and strong
bidirectional magnitude correlation with weak phase correlation).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DATASET_MAGIC = b"CSIQDS1\0"
_HEADER = struct.Struct("<5I")  # Nb, Nf, Qf, sample count, flags

FREQUENCY = "frequency"
DELAY = "delay"
DOWNLINK = "downlink"
UPLINK = "uplink"


@dataclass
class ChannelConfig:
    """Generator knobs; defaults follow the 32-antenna / 1024-subcarrier setup.

    ``angle_sector_deg`` bounds the departure angles to a sector around
    broadside, mimicking the clustered scattering that makes real CSI
    compressible; paths occupy distinct delay slots so tap collisions stay
    rare and the uplink/downlink magnitude correlation stays high.
    """

    nb: int = 32
    nf: int = 1024
    qf: int = 32
    path_count_range: tuple[int, int] = (4, 8)
    delay_spread: float = 0.5  # fraction of qf taps covered by path delays
    uplink_downlink_phase_corr: float = 0.0
    angle_sector_deg: float = 40.0
    angle_grid: int = 16  # departure directions per sector; 0 = continuous
    link_gain_jitter: float = 0.15  # per-path uplink gain spread (0 = shared exactly)
    rng_seed: int = 0

    def __post_init__(self):
        if self.nb < 1:
            raise ValueError(f"nb must be >= 1, got {self.nb}")
        if self.qf > self.nf:
            raise ValueError(f"qf ({self.qf}) cannot exceed nf ({self.nf})")
        lo, hi = self.path_count_range
        if not 1 <= lo <= hi:
            raise ValueError(f"empty path count range {self.path_count_range}")
        if not 0.0 < self.delay_spread <= 1.0:
            raise ValueError(f"delay_spread must be in (0, 1], got {self.delay_spread}")
        if not 0.0 <= self.uplink_downlink_phase_corr <= 1.0:
            raise ValueError("uplink_downlink_phase_corr must be in [0, 1]")
        if not 0.0 < self.angle_sector_deg <= 90.0:
            raise ValueError("angle_sector_deg must be in (0, 90]")
        if self.angle_grid < 0:
            raise ValueError("angle_grid must be >= 0 (0 = continuous)")
        if self.link_gain_jitter < 0:
            raise ValueError("link_gain_jitter must be >= 0")


@dataclass
class CsiMatrix:
    """Complex CSI matrix tagged with its transform domain and link direction."""

    entries: np.ndarray
    domain: str = FREQUENCY
    link: str = DOWNLINK

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.complex128)
        if self.entries.ndim != 2:
            raise ValueError(f"CSI matrix must be 2-d, got shape {self.entries.shape}")
        if self.domain not in (FREQUENCY, DELAY):
            raise ValueError(f"unknown domain tag {self.domain!r}")
        if self.link not in (DOWNLINK, UPLINK):
            raise ValueError(f"unknown link tag {self.link!r}")

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]


@dataclass
class MagPhasePair:
    magnitude: np.ndarray
    phase: np.ndarray


def _draw_paths(cfg: ChannelConfig, rng: np.random.Generator):
    window = cfg.delay_spread * cfg.qf
    slots = max(int(np.floor(window)), 1)
    lo, hi = cfg.path_count_range
    count = int(rng.integers(lo, min(hi, slots) + 1)) if lo <= slots else slots
    # Distinct unit-width delay slots keep taps collision-free; slot choice
    # follows an exponential power-delay profile over the window.
    weights = np.exp(-3.0 * np.arange(slots) / slots)
    delays = rng.choice(slots, size=count, replace=False, p=weights / weights.sum()).astype(np.float64)
    sector = np.deg2rad(cfg.angle_sector_deg)
    if cfg.angle_grid:
        grid = np.linspace(-sector, sector, cfg.angle_grid)
        angles = grid[rng.integers(0, cfg.angle_grid, size=count)]
    else:
        angles = rng.uniform(-sector, sector, size=count)
    magnitudes = rng.rayleigh(scale=1.0, size=count) * np.exp(-delays / window)
    magnitudes /= np.sqrt(count)
    return delays, angles, magnitudes


def sample_channel_pair(cfg: ChannelConfig, rng: np.random.Generator) -> tuple[CsiMatrix, CsiMatrix]:
    """One correlated (downlink, uplink) pair of frequency-domain CSI matrices.

    Path delays and steering angles are shared between the links; per-path
    phases are kept with probability ``uplink_downlink_phase_corr`` and
    redrawn otherwise; uplink gain magnitudes track the downlink ones up to
    the configured band-to-band jitter.
    """
    delays, angles, magnitudes = _draw_paths(cfg, rng)
    count = delays.shape[0]
    phases_dl = rng.uniform(0.0, 2 * np.pi, size=count)
    redraw = rng.uniform(size=count) >= cfg.uplink_downlink_phase_corr
    phases_ul = np.where(redraw, rng.uniform(0.0, 2 * np.pi, size=count), phases_dl)
    mags_ul = magnitudes * np.exp(cfg.link_gain_jitter * rng.standard_normal(count))

    subcarriers = np.arange(cfg.nf)[:, None]
    ramp = np.exp(-2j * np.pi * subcarriers * delays[None, :] / cfg.nf)  # (nf, P)
    steering = np.exp(-1j * np.pi * np.arange(cfg.nb)[None, :] * np.sin(angles)[:, None])  # (P, nb)

    h_dl = (ramp * (magnitudes * np.exp(1j * phases_dl))[None, :]) @ steering
    h_ul = (ramp * (mags_ul * np.exp(1j * phases_ul))[None, :]) @ steering
    return (CsiMatrix(h_dl, FREQUENCY, DOWNLINK), CsiMatrix(h_ul, FREQUENCY, UPLINK))


def to_delay_domain(h: CsiMatrix) -> CsiMatrix:
    """Unitary inverse DFT along the subcarrier axis; Frobenius norm preserved."""
    if h.domain != FREQUENCY:
        raise ValueError(f"expected a frequency-domain matrix, got {h.domain!r}")
    nf = h.rows
    taps = np.fft.ifft(h.entries, axis=0) * np.sqrt(nf)
    return CsiMatrix(taps, DELAY, h.link)


def truncate(h: CsiMatrix, qf: int) -> CsiMatrix:
    """Keep the first ``qf`` delay rows (where multipath energy concentrates)."""
    if h.domain != DELAY:
        raise ValueError(f"expected a delay-domain matrix, got {h.domain!r}")
    if qf > h.rows:
        raise ValueError(f"qf ({qf}) exceeds row count ({h.rows})")
    return CsiMatrix(h.entries[:qf].copy(), DELAY, h.link)


def split_mag_phase(h: CsiMatrix) -> MagPhasePair:
    """Entry-wise modulus and argument; the argument of 0 is 0 by convention."""
    magnitude = np.abs(h.entries)
    phase = np.angle(h.entries)
    # np.angle maps the branch cut to +pi for some inputs; fold into [-pi, pi).
    phase = np.where(phase >= np.pi, -np.pi, phase)
    return MagPhasePair(magnitude, phase)


def combine_mag_phase(pair: MagPhasePair) -> np.ndarray:
    return pair.magnitude * np.exp(1j * pair.phase)


@dataclass
class NormStats:
    """Global affine map onto [0, 1], stored for exact inversion."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"degenerate normalization range [{self.lo}, {self.hi}]")


def normalize_dataset(values: np.ndarray) -> tuple[np.ndarray, NormStats]:
    """Affine map of a real-valued array into [0, 1] by its global min/max."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot normalize an empty sample set")
    stats = NormStats(float(values.min()), float(values.max()))
    return normalize(values, stats), stats


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - stats.lo) / (stats.hi - stats.lo)


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * (stats.hi - stats.lo) + stats.lo


@dataclass
class CsiDataset:
    """Truncated delay-domain CSI samples: (n, qf, nb) complex planes."""

    downlink: np.ndarray
    uplink: np.ndarray | None
    nb: int
    nf: int
    qf: int
    config: ChannelConfig | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.downlink.shape[0]


def generate_sample(cfg: ChannelConfig, rng: np.random.Generator, include_uplink: bool = True):
    """One delay-domain, truncated (downlink, uplink-or-None) sample pair."""
    h_dl, h_ul = sample_channel_pair(cfg, rng)
    dl = truncate(to_delay_domain(h_dl), cfg.qf).entries
    ul = truncate(to_delay_domain(h_ul), cfg.qf).entries if include_uplink else None
    return dl, ul


def generate_dataset(cfg: ChannelConfig, num_samples: int, include_uplink: bool = True) -> CsiDataset:
    """Deterministic dataset: sample i always uses the i-th spawned RNG stream.

    Per-sample seed streams make parallel and serial generation agree
    bit-exactly; this implementation generates serially.
    """
    if num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    streams = np.random.SeedSequence(cfg.rng_seed).spawn(num_samples)
    downlink = np.empty((num_samples, cfg.qf, cfg.nb), dtype=np.complex128)
    uplink = np.empty((num_samples, cfg.qf, cfg.nb), dtype=np.complex128) if include_uplink else None
    for i, stream in enumerate(streams):
        rng = np.random.Generator(np.random.PCG64(stream))
        dl, ul = generate_sample(cfg, rng, include_uplink)
        downlink[i] = dl
        if include_uplink:
            uplink[i] = ul
    return CsiDataset(downlink, uplink, cfg.nb, cfg.nf, cfg.qf, cfg)


def save_dataset(dataset: CsiDataset, path) -> None:
    """Binary sample file: magic, (Nb, Nf, Qf, count, flags) header, float32 planes."""
    flags = 1 if dataset.uplink is not None else 0
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(_HEADER.pack(dataset.nb, dataset.nf, dataset.qf, len(dataset), flags))
        for i in range(len(dataset)):
            fh.write(dataset.downlink[i].real.astype("<f4").tobytes())
            fh.write(dataset.downlink[i].imag.astype("<f4").tobytes())
            if dataset.uplink is not None:
                fh.write(dataset.uplink[i].real.astype("<f4").tobytes())
                fh.write(dataset.uplink[i].imag.astype("<f4").tobytes())


def load_dataset(path) -> CsiDataset:
    with open(path, "rb") as fh:
        magic = fh.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise ValueError(f"not a CSI dataset file (magic {magic!r})")
        nb, nf, qf, count, flags = _HEADER.unpack(fh.read(_HEADER.size))
        has_uplink = bool(flags & 1)
        plane = qf * nb
        planes_per_sample = 4 if has_uplink else 2
        raw = np.frombuffer(fh.read(), dtype="<f4")
    expected = count * planes_per_sample * plane
    if raw.size != expected:
        raise ValueError(f"dataset payload truncated: {raw.size} values, expected {expected}")
    raw = raw.astype(np.float64).reshape(count, planes_per_sample, qf, nb)
    downlink = raw[:, 0] + 1j * raw[:, 1]
    uplink = raw[:, 2] + 1j * raw[:, 3] if has_uplink else None
    return CsiDataset(downlink, uplink, nb, nf, qf, None)


def delay_energy_fraction(h_delay: np.ndarray, qf: int) -> float:
    """Energy in the first qf delay rows over total energy (generator contract)."""
    total = float(np.sum(np.abs(h_delay) ** 2))
    if total == 0.0:
        return 0.0
    return float(np.sum(np.abs(h_delay[:qf]) ** 2)) / total
