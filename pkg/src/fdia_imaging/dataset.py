"""Load profiles, labeled normal/attacked sample generation, splitting and storage.

Every timestep draws its measurement noise from its own generator seeded by
``(seed, timestep)``, so samples do not depend on evaluation order.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attack_engine import AttackError, AttackSpec, apply_attack, craft_fdia
from .grid_case import GridCase, build_dc_model
from .state_estimation import WlsEstimator, bdd_residual, bdd_threshold, dc_power_flow

__all__ = [
    "LoadProfiles",
    "Sample",
    "Dataset",
    "DatasetError",
    "import_profiles",
    "synth_profiles",
    "generate_dataset",
    "split_dataset",
    "save_dataset",
    "load_dataset",
]

MAGIC = b"FDIA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIHQ")


class DatasetError(ValueError):
    pass


@dataclass
class LoadProfiles:
    """Per-bus load time series in MW; buses not listed keep their nominal load."""

    series: dict[int, np.ndarray]
    step_minutes: int = 5

    def __post_init__(self):
        if self.step_minutes < 1:
            raise DatasetError("step_minutes must be a positive integer")
        lengths = {len(v) for v in self.series.values()}
        if len(lengths) > 1:
            raise DatasetError(f"profiles have unequal lengths {sorted(lengths)}")
        if lengths and lengths.pop() < 1:
            raise DatasetError("profiles are empty")
        for bus, v in self.series.items():
            if np.any(np.asarray(v) < 0):
                raise DatasetError(f"negative load in profile for bus {bus}")

    @property
    def n_steps(self) -> int:
        return len(next(iter(self.series.values()))) if self.series else 1

    def loads_pu(self, case: GridCase) -> np.ndarray:
        """(T, n) per-unit load matrix in the case's bus order."""
        out = np.tile(case.nominal_loads_pu(), (self.n_steps, 1))
        pos = case.bus_position()
        for bus, v in self.series.items():
            out[:, pos[bus]] = np.asarray(v, dtype=float) / case.base_mva
        return out


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int
    timestep: int


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    timesteps: np.ndarray
    class_names: list[str]
    feature_names: list[str]
    seed: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(len(self.labels), -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("label outside the class list")
        if self.features.shape[1] != len(self.feature_names) and len(self.labels):
            raise DatasetError("feature names do not match feature width")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.labels[i]), int(self.timesteps[i]))

    @property
    def samples(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=self.n_classes)
        return {name: int(c) for name, c in zip(self.class_names, counts)}

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.timesteps[idx],
                       list(self.class_names), list(self.feature_names), self.seed, dict(self.config))


# --- profiles ----------------------------------------------------------------

def _load_buses(case: GridCase) -> list[int]:
    return [b.id for b in case.buses if b.load_mw > 0]


def import_profiles(csv_text: str, case: GridCase, step_minutes: int = 5) -> LoadProfiles:
    """Spread CSV load shapes over the case's load buses, round-robin.

    Each bus receives a copy of profile ``i % n_profiles`` rescaled so its
    time average equals the bus's nominal load.
    """
    rows = [r for r in csv.reader(io.StringIO(csv_text)) if any(cell.strip() for cell in r)]
    if not rows:
        raise DatasetError("empty profile file")
    header, body = rows[0], rows[1:]
    if not header or not body:
        raise DatasetError("profile file needs a header and at least one data row")
    data = np.empty((len(body), len(header)))
    for k, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DatasetError(f"ragged row at line {k}: {len(row)} fields, header has {len(header)}")
        try:
            data[k - 2] = [float(cell) for cell in row]
        except ValueError as exc:
            raise DatasetError(f"non-numeric value at line {k}: {exc}") from None
    if np.any(data < 0):
        raise DatasetError("negative load in profile file")
    means = data.mean(axis=0)
    if np.any(means <= 0):
        raise DatasetError("profile with zero mean cannot be rescaled")
    series = {}
    nominal = {b.id: b.load_mw for b in case.buses}
    for i, bus in enumerate(_load_buses(case)):
        j = i % data.shape[1]
        series[bus] = data[:, j] * (nominal[bus] / means[j])
    return LoadProfiles(series, step_minutes)


def _ar1(innov: np.ndarray, phi: float) -> np.ndarray:
    out = np.empty_like(innov)
    acc = 0.0
    for t, e in enumerate(innov):
        acc = phi * acc + e
        out[t] = acc
    return out


def synth_profiles(case: GridCase, days: int, step_minutes: int = 5, seed: int = 0,
                   n_steps: int | None = None, regions: int | None = 11,
                   bus_noise: float = 0.002) -> LoadProfiles:
    """Deterministic synthetic daily load curves for every load bus.

    ``regions`` source curves (a morning/evening double peak with its own
    phase and amplitude, a day-level drift and AR(1) noise) are spread over
    the load buses round-robin, the way a handful of measured zonal profiles
    is duplicated across a test system.  Each bus adds its own small AR(1)
    term (innovation std ``bus_noise``).  ``regions=None`` gives every bus an
    independent curve.  Multipliers are clipped to [0.3, 1.7] of nominal.
    ``n_steps`` extends or cuts the series; extra points continue the same
    generator past ``days``.
    """
    if days < 1:
        raise DatasetError("days must be >= 1")
    if step_minutes < 1 or 1440 % step_minutes:
        raise DatasetError("step_minutes must divide a day")
    if regions is not None and regions < 1:
        raise DatasetError("regions must be >= 1")
    per_day = 1440 // step_minutes
    total = days * per_day if n_steps is None else int(n_steps)
    if total < 1:
        raise DatasetError("profile length must be >= 1")
    hours = np.arange(total) * step_minutes / 60.0
    day = (np.arange(total) * step_minutes) // 1440
    n_days = int(day[-1]) + 1

    # every random stream is keyed by (seed, source, day) so a longer series extends a shorter one
    def curve(key):
        rng = np.random.default_rng([seed, key])
        shift = rng.uniform(-0.75, 0.75)
        amp = rng.uniform(0.8, 1.2)
        level = np.empty(n_days)
        innov = np.empty(n_days * per_day)
        for d in range(n_days):
            day_rng = np.random.default_rng([seed, key, d])
            level[d] = 1.0 + day_rng.normal(0.0, 0.03)
            innov[d * per_day:(d + 1) * per_day] = day_rng.normal(0.0, 0.008, size=per_day)
        h = hours + shift
        shape = (0.10 * np.cos(2 * np.pi * (h - 15.0) / 24.0)
                 + 0.12 * np.cos(4 * np.pi * (h - 9.5) / 24.0))
        return level[day] * (1.0 + amp * shape) + _ar1(innov[:total], 0.97)

    def bus_term(bus):
        innov = np.concatenate([np.random.default_rng([seed, 100_000 + bus, d]).normal(0.0, bus_noise, per_day)
                                for d in range(n_days)])
        return _ar1(innov[:total], 0.97)

    series = {}
    nominal = {b.id: b.load_mw for b in case.buses}
    sources = {}
    for i, bus in enumerate(_load_buses(case)):
        if regions is None:
            mult = curve(bus)
        else:
            r = i % regions
            if r not in sources:
                sources[r] = curve(200_000 + r)
            mult = sources[r] + (bus_term(bus) if bus_noise > 0 else 0.0)
        series[bus] = nominal[bus] * np.clip(mult, 0.3, 1.7)
    return LoadProfiles(series, step_minutes)


# --- generation --------------------------------------------------------------

def feature_names_for(model) -> list[str]:
    flows = [f"P_{br.from_bus}_{br.to_bus}" for br in model.meter_index]
    return flows + [f"theta_{b}" for b in model.state_index]


def generate_dataset(case: GridCase, profiles: LoadProfiles, targets: Sequence[int],
                     scales: Sequence[float], noise_sigma: float, attack_window: Iterable[int],
                     seed: int, alpha: float = 0.01, reject_flagged: bool = True,
                     max_redraws: int = 1000) -> Dataset:
    """Build the labeled table: one normal sample per timestep plus attacked twins.

    Normal features are ``z ++ wls(z)``.  Inside ``attack_window`` each target
    and scale adds ``z_a ++ wls(z_a)`` where ``z_a = z + H c`` biases the
    target's estimated angle to ``scale`` times its estimate; label ``k`` is
    the k-th target (0 is normal).  With ``reject_flagged`` the noise at a
    timestep is redrawn until the normal measurement passes bad-data
    detection, so no sample represents data an operator would already discard.
    """
    targets = [int(t) for t in targets]
    if not targets:
        raise DatasetError("no attack targets")
    if len(set(targets)) != len(targets):
        raise DatasetError("duplicate attack targets")
    if case.slack_bus in targets:
        raise DatasetError(f"slack bus {case.slack_bus} cannot be attacked")
    window = sorted(set(int(t) for t in attack_window))
    t_total = profiles.n_steps
    if window and (window[0] < 0 or window[-1] >= t_total):
        raise DatasetError(f"attack window must lie in [0, {t_total})")
    in_window = set(window)

    model = build_dc_model(case, noise_sigma)
    est = WlsEstimator(model)
    tau = bdd_threshold(model, alpha)
    _, flows = dc_power_flow(case, profiles.loads_pu(case))

    feats, labels, steps = [], [], []
    for t in range(t_total):
        rng = np.random.default_rng([seed, t])
        for _ in range(max_redraws):
            z = flows[t] + rng.normal(0.0, noise_sigma, size=model.m)
            x_hat = est.estimate(z)
            if not reject_flagged or bdd_residual(model, z, x_hat) <= tau:
                break
        else:
            raise DatasetError(f"timestep {t}: no noise draw passed bad-data detection")
        feats.append(np.concatenate([z, x_hat]))
        labels.append(0)
        steps.append(t)
        if t not in in_window:
            continue
        for k, bus in enumerate(targets, start=1):
            for s in scales:
                try:
                    atk = craft_fdia(model, x_hat, AttackSpec(frozenset([bus]), s), label=k)
                except AttackError as exc:
                    raise DatasetError(f"timestep {t}, target bus {bus}: {exc}") from exc
                z_a = apply_attack(z, atk)
                feats.append(np.concatenate([z_a, est.estimate(z_a)]))
                labels.append(k)
                steps.append(t)

    config = {
        "targets": targets,
        "scales": [float(s) for s in scales],
        "noise_sigma": float(noise_sigma),
        "attack_window": [window[0], window[-1] + 1] if window else [],
        "alpha": float(alpha),
        "reject_flagged": bool(reject_flagged),
        "n_steps": t_total,
        "seed": int(seed),
    }
    return Dataset(np.array(feats), np.array(labels), np.array(steps),
                   ["normal"] + [f"bus_{b}" for b in targets], feature_names_for(model),
                   int(seed), config)


def split_dataset(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified random split; each side keeps the original sample order."""
    if not 0 < train_fraction < 1:
        raise DatasetError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for k in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == k)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise DatasetError(f"class {ds.class_names[k]!r} has fewer than 2 samples")
        idx = rng.permutation(idx)
        n_train = min(max(int(round(train_fraction * idx.size)), 1), idx.size - 1)
        train_idx.append(idx[:n_train])
        test_idx.append(idx[n_train:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return ds.subset(train), ds.subset(test)


# --- storage -----------------------------------------------------------------

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_dataset(ds: Dataset, path) -> Path:
    """Write the binary container and a ``.json`` manifest beside it."""
    path = Path(path)
    n, width = ds.features.shape if len(ds) else (0, ds.n_features)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, width, ds.n_classes, ds.seed))
        fh.write(ds.features.astype("<f8").tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())
        fh.write(ds.timesteps.astype("<i4").tobytes())
    manifest = {
        "format": "FDIA",
        "version": FORMAT_VERSION,
        "n_samples": int(n),
        "n_features": int(width),
        "class_names": ds.class_names,
        "class_counts": ds.class_counts(),
        "feature_names": ds.feature_names,
        "seed": ds.seed,
        "config": ds.config,
        "config_hash": config_hash(ds.config),
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetError("truncated dataset file")
    magic, version, n, width, k, seed = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    expected = _HEADER.size + n * width * 8 + n * 2 + n * 4
    if len(blob) != expected:
        raise DatasetError(f"dataset file is {len(blob)} bytes, expected {expected}")
    off = _HEADER.size
    feats = np.frombuffer(blob, "<f8", n * width, off).reshape(n, width)
    off += n * width * 8
    labels = np.frombuffer(blob, "<u2", n, off)
    off += n * 2
    steps = np.frombuffer(blob, "<i4", n, off)
    manifest_path = path.with_suffix(".json")
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        class_names = manifest["class_names"]
        feature_names = manifest["feature_names"]
        config = manifest.get("config", {})
    else:
        class_names = [f"class_{i}" for i in range(k)]
        feature_names = [f"f{i}" for i in range(width)]
        config = {}
    if len(class_names) != k:
        raise DatasetError("manifest class list does not match the container")
    return Dataset(feats.astype(np.float64), labels.astype(np.int64), steps.astype(np.int64),
                   class_names, feature_names, int(seed), config)
