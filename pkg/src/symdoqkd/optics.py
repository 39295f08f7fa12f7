"""Everything between the source and the timestamps.

A pair's two photons are routed independently by the 1xN splitter, each user
splits its light 50/50 between a normal-dispersion (ND) and an
anomalous-dispersion (AD) arm, and every arm ends on its own detector.

Dispersion is modelled kinematically: a photon detuned by ``dnu`` GHz from
its channel center is delayed by ``+D*dnu`` in the ND arm and ``-D*dnu`` in
the AD arm.  Since signal and idler carry opposite detunings, a signal in ND
and an idler in AD pick up the same shift and their relative delay is
untouched.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from symdoqkd.source import EmissionBatch, PairEmission

SIGNAL, IDLER = 0, 1
ROLE_NAMES = {SIGNAL: "signal", IDLER: "idler"}


class ArmKind(enum.IntEnum):
    ND = 0
    AD = 1

    @property
    def other(self) -> "ArmKind":
        return ArmKind(1 - self)


@dataclass(frozen=True)
class PathParams:
    n_users: int = 8
    dispersion_ps_per_ghz: float = 40.0
    # Insertion loss only; the 1/N splitting is handled by routing.
    transmittance: float = 0.085
    # user -> constant delay (ps) of that user's access fiber
    user_delay_ps: dict = field(default_factory=dict)
    # user -> std (ps) of extra Gaussian delay noise, e.g. an intercepting party
    extra_noise_ps: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.n_users) != self.n_users or self.n_users < 1:
            raise ValueError(f"n_users must be an integer >= 1, got {self.n_users}")
        if not (math.isfinite(self.dispersion_ps_per_ghz) and self.dispersion_ps_per_ghz >= 0):
            raise ValueError("dispersion_ps_per_ghz must be >= 0")
        if not 0.0 <= self.transmittance <= 1.0:
            raise ValueError(f"transmittance must lie in [0, 1], got {self.transmittance}")
        for user, value in list(self.user_delay_ps.items()) + list(self.extra_noise_ps.items()):
            if not 0 <= int(user) < self.n_users:
                raise ValueError(f"per-user setting for unknown user {user}")
        if any(v < 0 for v in self.extra_noise_ps.values()):
            raise ValueError("extra_noise_ps values must be >= 0")


@dataclass(frozen=True)
class DetectorParams:
    efficiency: float = 0.6
    jitter_sigma_ps: float = 40.0
    dark_rate_hz: float = 100.0
    dead_time_ps: float = 50_000.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must lie in [0, 1], got {self.efficiency}")
        for name in ("jitter_sigma_ps", "dark_rate_hz", "dead_time_ps"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be >= 0, got {value}")


def route_to_user(n_users: int, rng: np.random.Generator, size=None):
    """Splitter output for one photon (or ``size`` photons), uniform over users."""
    if n_users < 1:
        raise ValueError("n_users must be >= 1")
    return rng.integers(0, n_users, size=size)


def apply_dispersion(t_ps, detuning_ghz, arm, dispersion_ps_per_ghz):
    """Shift arrival time by the arm's group delay.  Works on scalars or arrays."""
    sign = np.where(np.asarray(arm) == ArmKind.ND, 1.0, -1.0)
    shifted = t_ps + sign * dispersion_ps_per_ghz * detuning_ghz
    return float(shifted) if np.ndim(shifted) == 0 else shifted


@dataclass
class RoutedPhotons:
    """Photons that made it to a detector input, struct-of-arrays."""

    t_ps: np.ndarray
    user: np.ndarray
    arm: np.ndarray
    detuning_ghz: np.ndarray
    role: np.ndarray
    combo_id: np.ndarray
    emission_id: np.ndarray

    def __len__(self):
        return len(self.t_ps)

    @classmethod
    def empty(cls) -> "RoutedPhotons":
        f = np.empty(0)
        i = np.empty(0, dtype=np.int64)
        return cls(f, i, i.copy(), f.copy(), i.copy(), i.copy(), i.copy())

    @classmethod
    def concatenate(cls, parts: list["RoutedPhotons"]) -> "RoutedPhotons":
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls._fields()))

    @staticmethod
    def _fields():
        return ("t_ps", "user", "arm", "detuning_ghz", "role", "combo_id", "emission_id")


def transport_batch(batch: EmissionBatch, path: PathParams, rng: np.random.Generator) -> RoutedPhotons:
    """Vectorized :func:`transport_pair` over a whole emission batch."""
    n = len(batch)
    parts = []
    ids = batch.emission_id
    for role in (SIGNAL, IDLER):
        alive = np.flatnonzero(rng.random(n) < path.transmittance)
        m = len(alive)
        user = route_to_user(path.n_users, rng, size=m)
        arm = rng.integers(0, 2, size=m)
        t = batch.t_ps[alive]
        if role == SIGNAL:
            t = t + batch.skew_ps[alive]
            detuning = batch.detuning_ghz[alive]
        else:
            detuning = -batch.detuning_ghz[alive]
        t = apply_dispersion(t, detuning, arm, path.dispersion_ps_per_ghz)
        parts.append(RoutedPhotons(
            t_ps=np.atleast_1d(t),
            user=user.astype(np.int64),
            arm=arm.astype(np.int64),
            detuning_ghz=detuning,
            role=np.full(m, role, dtype=np.int64),
            combo_id=np.full(m, batch.combo_id, dtype=np.int64),
            emission_id=ids[alive],
        ))
    routed = RoutedPhotons.concatenate(parts)
    _apply_user_offsets(routed, path, rng)
    return routed


def _apply_user_offsets(routed: RoutedPhotons, path: PathParams, rng: np.random.Generator) -> None:
    for user, delay in sorted(path.user_delay_ps.items()):
        routed.t_ps[routed.user == int(user)] += delay
    for user, sigma in sorted(path.extra_noise_ps.items()):
        mask = routed.user == int(user)
        routed.t_ps[mask] += rng.normal(0.0, sigma, int(mask.sum()))


def transport_pair(emission: PairEmission, path: PathParams, rng: np.random.Generator, emission_id: int = 0):
    """Route both photons of one emission.

    Returns a list of ``(user, arm, t_ps, detuning_ghz, role)`` for the photons
    that survive the insertion loss (zero, one or two entries).
    """
    batch = EmissionBatch(
        emission.combo_id,
        np.array([emission.t_ps]),
        np.array([emission.detuning_ghz]),
        np.array([emission.skew_ps]),
        first_id=emission_id,
    )
    routed = transport_batch(batch, path, rng)
    return [
        (int(u), ArmKind(int(a)), float(t), float(d), ROLE_NAMES[int(r)])
        for u, a, t, d, r in zip(routed.user, routed.arm, routed.t_ps, routed.detuning_ghz, routed.role)
    ]


DARK = -1


@dataclass
class DetectionStream:
    """Detector clicks of one subnet, sorted by time.

    ``role``, ``combo_id`` and ``emission_id`` are simulation ground truth
    (``role == DARK`` for dark counts); protocol code only reads ``t_ps``,
    ``user`` and ``arm``.
    """

    t_ps: np.ndarray
    user: np.ndarray
    arm: np.ndarray
    role: np.ndarray
    combo_id: np.ndarray
    emission_id: np.ndarray
    n_users: int
    duration_s: float

    def __len__(self):
        return len(self.t_ps)

    def for_user(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        """Merged (time, arm) stream of both of a user's detectors."""
        mask = self.user == user
        return self.t_ps[mask], self.arm[mask]

    def for_detector(self, user: int, arm: ArmKind) -> np.ndarray:
        return self.t_ps[(self.user == user) & (self.arm == arm)]

    def to_csv(self, path, blind: bool = False) -> None:
        header = ["t_ps", "user", "arm"]
        if not blind:
            header += ["origin_class", "combo_id", "emission_id"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            cols = [self.t_ps.tolist(), self.user.tolist(), self.arm.tolist(),
                    self.role.tolist(), self.combo_id.tolist(), self.emission_id.tolist()]
            for t, u, a, r, c, e in zip(*cols):
                row = [repr(t), u, ArmKind(a).name]
                if not blind:
                    row += ["dark" if r == DARK else ROLE_NAMES[r], c, e]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path, n_users: int, duration_s: float) -> "DetectionStream":
        """Load an exported stream; blind exports get unknown (-1) ground truth."""
        t, user, arm, role, combo, eid = [], [], [], [], [], []
        names = {v: k for k, v in ROLE_NAMES.items()}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                t.append(float(row["t_ps"]))
                user.append(int(row["user"]))
                arm.append(int(ArmKind[row["arm"]]))
                origin = row.get("origin_class")
                role.append(DARK if origin in (None, "dark") else names[origin])
                combo.append(int(row.get("combo_id") or -1))
                eid.append(int(row.get("emission_id") or -1))
        as_int = lambda xs: np.asarray(xs, dtype=np.int64)  # noqa: E731
        return cls(np.asarray(t, dtype=float), as_int(user), as_int(arm), as_int(role),
                   as_int(combo), as_int(eid), n_users, duration_s)


def _dead_time_keep(t: np.ndarray, dead_time_ps: float) -> np.ndarray:
    """Boolean keep-mask for one detector's time-sorted clicks."""
    keep = np.ones(len(t), dtype=bool)
    if dead_time_ps <= 0 or len(t) < 2:
        return keep
    close = np.flatnonzero(np.diff(t) < dead_time_ps) + 1
    if len(close) == 0:
        return keep
    # Only runs of closely spaced clicks need the sequential rule; the first
    # click of each run is always accepted.
    run_members = set(close.tolist())
    last = -np.inf
    for k in close:
        if k - 1 not in run_members:
            last = t[k - 1]
        if t[k] - last < dead_time_ps:
            keep[k] = False
        else:
            last = t[k]
    return keep


def detect(
    photons: RoutedPhotons,
    det: DetectorParams,
    duration_s: float,
    rng: np.random.Generator,
    n_users: int,
) -> DetectionStream:
    """Turn detector-input photons into a sorted click stream for ``n_users`` users."""
    if not duration_s > 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    n = len(photons)
    clicked = np.flatnonzero(rng.random(n) < det.efficiency)
    t = photons.t_ps[clicked] + rng.normal(0.0, det.jitter_sigma_ps, len(clicked))
    cols = {
        "t_ps": [t],
        "user": [photons.user[clicked]],
        "arm": [photons.arm[clicked]],
        "role": [photons.role[clicked]],
        "combo_id": [photons.combo_id[clicked]],
        "emission_id": [photons.emission_id[clicked]],
    }
    duration_ps = duration_s * 1e12
    for user in range(n_users):
        for arm in ArmKind:
            k = rng.poisson(det.dark_rate_hz * duration_s)
            cols["t_ps"].append(rng.uniform(0.0, duration_ps, k))
            cols["user"].append(np.full(k, user, dtype=np.int64))
            cols["arm"].append(np.full(k, int(arm), dtype=np.int64))
            for name in ("role", "combo_id", "emission_id"):
                cols[name].append(np.full(k, DARK, dtype=np.int64))
    merged = {name: np.concatenate(parts) for name, parts in cols.items()}
    for name in ("user", "arm", "role", "combo_id", "emission_id"):
        merged[name] = merged[name].astype(np.int64)

    detector = merged["user"] * 2 + merged["arm"]
    order = np.lexsort((merged["t_ps"], detector))
    keep = np.zeros(len(order), dtype=bool)
    sorted_det = detector[order]
    bounds = np.flatnonzero(np.diff(sorted_det)) + 1
    for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, len(order)]):
        idx = order[lo:hi]
        keep[idx] = _dead_time_keep(merged["t_ps"][idx], det.dead_time_ps)

    kept = np.flatnonzero(keep)
    final = kept[np.argsort(merged["t_ps"][kept], kind="stable")]
    return DetectionStream(
        n_users=n_users,
        duration_s=duration_s,
        **{name: arr[final] for name, arr in merged.items()},
    )
