"""Synthetic L-PBF layers: serpentine scan paths, PWM laser power,
melt-pool channels driven by the laser inputs, and injected defects.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError

FEATURES = ("power", "scan_direction", "node_number", "track_number")
CHANNELS = ("size", "shape", "intensity", "spatter")
SIZE, SHAPE, INTENSITY, SPATTER = range(4)

# melt-pool signature with the laser off
BASELINE = np.array([0.2, 0.5, 0.1, 0.5])
# size/intensity loadings of the exchange mode, proportional to their power response
EXCHANGE_WEIGHTS = (0.8, 1.0)

CSV_HEADER = ("node_id", "track_id", "x_mm", "y_mm", "power", "scan_direction",
              "node_number", "track_number", "size", "shape", "intensity", "spatter",
              "anomaly")


def _count(length, pitch):
    # tolerate representation error such as 4.6 / 0.1 = 45.99999999999999
    return int(math.floor(length / pitch + 1e-9))


@dataclass(frozen=True)
class LayerSpec:
    width_mm: float = 5.0
    height_mm: float = 4.5
    hatch_spacing_mm: float = 0.09
    node_spacing_mm: float = 0.05
    pwm_period_nodes: int = 16
    pwm_duty: float = 0.75
    pwm_phase: int = 0
    noise_sigma: float = 0.1
    # slow size<->intensity exchange while the laser is on, std = exchange_ratio * noise_sigma
    exchange_ratio: float = 1.0
    exchange_length_nodes: float = 25.0
    integer_spatter: bool = False
    seed: int = 0

    def validate(self):
        for name in ("width_mm", "height_mm", "hatch_spacing_mm", "node_spacing_mm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.node_spacing_mm > self.hatch_spacing_mm:
            raise ConfigError("node_spacing_mm must not exceed hatch_spacing_mm")
        if int(self.pwm_period_nodes) < 1:
            raise ConfigError("pwm_period_nodes must be a positive integer")
        if not 0 < self.pwm_duty <= 1:
            raise ConfigError(f"pwm_duty must lie in (0, 1], got {self.pwm_duty}")
        if self.noise_sigma < 0 or self.exchange_ratio < 0:
            raise ConfigError("noise_sigma and exchange_ratio must be non-negative")
        if self.exchange_length_nodes <= 0:
            raise ConfigError("exchange_length_nodes must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.n_nodes == 0:
            raise ConfigError(
                f"layer {self.width_mm}x{self.height_mm} mm holds no nodes at hatch "
                f"{self.hatch_spacing_mm} / node spacing {self.node_spacing_mm}")

    @property
    def n_tracks(self):
        return _count(self.height_mm, self.hatch_spacing_mm)

    @property
    def nodes_per_track(self):
        return _count(self.width_mm, self.node_spacing_mm)

    @property
    def n_nodes(self):
        return self.n_tracks * self.nodes_per_track


@dataclass(frozen=True)
class AnomalySpec:
    n_events: int | None = None  # None: choose to hit target_imbalance
    run_length_nodes: tuple[int, int] = (8, 24)
    track_span: tuple[int, int] = (1, 3)
    intensity_scale: float = 0.6
    spatter_boost: float = 0.0
    target_imbalance: float = 40.6

    def validate(self):
        lo, hi = self.run_length_nodes
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid run_length_nodes {self.run_length_nodes}")
        lo, hi = self.track_span
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid track_span {self.track_span}")
        if self.n_events is not None and self.n_events < 0:
            raise ConfigError("n_events must be non-negative")
        if not 0 < self.intensity_scale <= 1:
            raise ConfigError("intensity_scale must lie in (0, 1]")
        if self.spatter_boost < 0:
            raise ConfigError("spatter_boost must be non-negative")
        if not self.target_imbalance > 0:
            raise ConfigError("target_imbalance must be positive")


@dataclass
class LayerScan:
    positions: np.ndarray     # (N, 2) mm
    track_id: np.ndarray      # (N,) int
    node_id: np.ndarray       # (N,) int, scan order
    X: np.ndarray             # (N, 4) FEATURES
    Y: np.ndarray             # (N, 4) CHANNELS
    anomaly_mask: np.ndarray  # (N,) bool

    @property
    def n_nodes(self):
        return self.X.shape[0]

    def copy(self):
        return LayerScan(*(np.array(a, copy=True) for a in (
            self.positions, self.track_id, self.node_id, self.X, self.Y, self.anomaly_mask)))

    def grid(self):
        """Return (track, column) indices of each node; column counts along +x."""
        _, column = np.unique(self.positions[:, 0], return_inverse=True)
        return self.track_id, column.reshape(-1)


def _unit(values, count):
    return values / (count - 1) if count > 1 else np.zeros(len(values))


def generate_scan_path(spec: LayerSpec) -> LayerScan:
    """Serpentine raster over the layer with labels left at zero."""
    spec.validate()
    n_tracks, per_track = spec.n_tracks, spec.nodes_per_track
    n = n_tracks * per_track
    node_id = np.arange(n)
    track_id = node_id // per_track
    step = node_id % per_track
    forward = track_id % 2 == 0
    column = np.where(forward, step, per_track - 1 - step)
    positions = np.column_stack([
        (column + 0.5) * spec.node_spacing_mm,
        (track_id + 0.5) * spec.hatch_spacing_mm,
    ])
    period = int(spec.pwm_period_nodes)
    on_nodes = max(1, int(round(spec.pwm_duty * period)))
    power = (((node_id + int(spec.pwm_phase)) % period) < on_nodes).astype(float)
    direction = np.where(forward, 1.0, -1.0)
    X = np.column_stack([power, direction, _unit(node_id, n), _unit(track_id, n_tracks)])
    return LayerScan(positions, track_id, node_id, X, np.zeros((n, len(CHANNELS))),
                     np.zeros(n, dtype=bool))


def melt_pool_response(X):
    """Noise-free melt-pool channels for laser inputs ``X`` (N x 4)."""
    p, direction, node_number, track_number = X.T
    Y = np.tile(BASELINE, (X.shape[0], 1))
    Y[:, SIZE] += p * (0.8 + 0.1 * node_number)
    Y[:, SHAPE] += p * (0.2 + 0.01 * direction)
    Y[:, INTENSITY] += p * (1.0 + 0.1 * np.sin(2 * np.pi * track_number))
    Y[:, SPATTER] += p
    return Y


def _ar1(rng, n, sigma, length):
    # stationary AR(1) along scan order
    phi = math.exp(-1.0 / length)
    shocks = rng.standard_normal(n) * sigma * math.sqrt(1.0 - phi * phi)
    out = np.empty(n)
    prev = rng.standard_normal() * sigma
    for i in range(n):
        prev = phi * prev + shocks[i]
        out[i] = prev
    return out


def generate_melt_signal(scan: LayerScan, spec: LayerSpec) -> LayerScan:
    """Fill the melt-pool labels from the laser inputs plus seeded noise."""
    out = scan.copy()
    n = scan.n_nodes
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 1]))
    Y = melt_pool_response(scan.X)
    if spec.integer_spatter:
        Y[:, SPATTER] = rng.poisson(Y[:, SPATTER])
    if spec.noise_sigma > 0:
        noise = rng.standard_normal((n, len(CHANNELS))) * spec.noise_sigma
        if spec.integer_spatter:
            noise[:, SPATTER] = 0.0
        Y += noise
        if spec.exchange_ratio > 0:
            # a larger melt pool is a dimmer one: the two shifts cancel in
            # standardised units, so only per-channel magnitudes see it
            order = np.argsort(scan.node_id, kind="stable")
            u = np.empty(n)
            u[order] = _ar1(rng, n, spec.exchange_ratio * spec.noise_sigma,
                            spec.exchange_length_nodes)
            u *= scan.X[:, 0]
            Y[:, SIZE] += EXCHANGE_WEIGHTS[0] * u
            Y[:, INTENSITY] -= EXCHANGE_WEIGHTS[1] * u
    out.Y = Y
    return out


class AnomalyCapacityError(ConfigError):
    def __init__(self, requested, achievable):
        super().__init__(f"requested {requested} anomaly events but the layer fits "
                         f"at most {achievable}")
        self.requested = requested
        self.achievable = achievable


def inject_anomalies(scan: LayerScan, a: AnomalySpec, seed: int) -> LayerScan:
    """Reduce intensity and size (and add spatter) on defect patches.

    Each event is a run of nodes along one track, mirrored onto up to
    ``track_span`` adjacent tracks over the same x-range. Events do not
    overlap. Only the labels change; the laser inputs stay as they were.
    """
    a.validate()
    out = scan.copy()
    track, column = scan.grid()
    n_tracks, n_cols = int(track.max()) + 1, int(column.max()) + 1
    lookup = np.full((n_tracks, n_cols), -1, dtype=np.int64)
    lookup[track, column] = np.arange(scan.n_nodes)
    run_lo, run_hi = a.run_length_nodes
    span_lo, span_hi = a.track_span
    span_hi = min(span_hi, n_tracks)
    run_hi = min(run_hi, n_cols)
    capacity = (n_tracks // span_lo) * (n_cols // run_lo)
    if run_lo > n_cols or span_lo > n_tracks:
        capacity = 0

    auto = a.n_events is None
    if auto:
        target = int(round(scan.n_nodes / (1.0 + a.target_imbalance)))
        wanted = None
    else:
        target = None
        wanted = a.n_events
        if wanted > capacity:
            raise AnomalyCapacityError(wanted, capacity)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    taken = np.zeros((n_tracks, n_cols), dtype=bool)
    placed = count = failures = 0
    while capacity > 0:
        if auto and count >= target:
            break
        if not auto and placed >= wanted:
            break
        span = int(rng.integers(span_lo, span_hi + 1))
        run = int(rng.integers(run_lo, run_hi + 1))
        if auto and count + span * run > target:
            # trim the final event so the anomalous fraction lands on target
            run = max(1, min(run, math.ceil((target - count) / span)))
        t0 = int(rng.integers(0, n_tracks - span + 1))
        c0 = int(rng.integers(0, n_cols - run + 1))
        patch = taken[t0:t0 + span, c0:c0 + run]
        if patch.any() or (lookup[t0:t0 + span, c0:c0 + run] < 0).any():
            failures += 1
            if failures > 2_000:
                if auto:
                    break
                raise AnomalyCapacityError(wanted, placed)
            continue
        patch[:] = True
        placed += 1
        count += span * run
        failures = 0

    mask = np.zeros(scan.n_nodes, dtype=bool)
    mask[lookup[taken]] = True
    out.anomaly_mask = mask | scan.anomaly_mask
    out.Y[mask, INTENSITY] *= a.intensity_scale
    out.Y[mask, SIZE] *= a.intensity_scale
    out.Y[mask, SPATTER] += a.spatter_boost
    return out


@dataclass(frozen=True)
class DatasetConfig:
    layer: LayerSpec = field(default_factory=LayerSpec)
    anomaly: AnomalySpec = field(default_factory=AnomalySpec)
    n_train: int = 8
    n_eval: int = 4
    seed: int = 0
    randomize_pwm_phase: bool = True


def layer_seed(seed, index):
    """Derived 64-bit seed for layer ``index`` of a dataset."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


def make_layer(config: DatasetConfig, index: int, anomalous: bool) -> LayerScan:
    s = layer_seed(config.seed, index)
    spec = replace(config.layer, seed=s)
    if config.randomize_pwm_phase:
        spec = replace(spec, pwm_phase=s % int(spec.pwm_period_nodes))
    scan = generate_melt_signal(generate_scan_path(spec), spec)
    if anomalous:
        scan = inject_anomalies(scan, config.anomaly, s)
    return scan


def build_dataset(config: DatasetConfig | None = None) -> dict[str, list[LayerScan]]:
    """Nominal training layers and defect-bearing evaluation layers."""
    config = config or DatasetConfig()
    if config.n_train < 0 or config.n_eval < 0:
        raise ConfigError("layer counts must be non-negative")
    config.layer.validate()
    config.anomaly.validate()
    train = [make_layer(config, i, False) for i in range(config.n_train)]
    evals = [make_layer(config, config.n_train + i, True) for i in range(config.n_eval)]
    return {"train": train, "eval": evals}


def _fmt(value):
    return repr(float(value))


def layer_to_csv(scan: LayerScan) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for i in range(scan.n_nodes):
        w.writerow([int(scan.node_id[i]), int(scan.track_id[i]),
                    _fmt(scan.positions[i, 0]), _fmt(scan.positions[i, 1]),
                    *map(_fmt, scan.X[i]), *map(_fmt, scan.Y[i]),
                    int(scan.anomaly_mask[i])])
    return buf.getvalue()


def layer_from_csv(text: str) -> LayerScan:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ConfigError(f"layer CSV header must be {','.join(CSV_HEADER)}")
    body = np.array(rows[1:], dtype=object).reshape(-1, len(CSV_HEADER))
    num = body[:, 2:12].astype(np.float64)
    return LayerScan(
        positions=num[:, 0:2].copy(),
        track_id=body[:, 1].astype(np.int64),
        node_id=body[:, 0].astype(np.int64),
        X=num[:, 2:6].copy(),
        Y=num[:, 6:10].copy(),
        anomaly_mask=body[:, 12].astype(np.int64).astype(bool),
    )
