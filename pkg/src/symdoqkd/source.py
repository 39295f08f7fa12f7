"""Broadband pair source and WDM channel plan.

Channels are ITU C-band indices on a 100 GHz grid (channel ``n`` sits at
``anchor + spacing * n`` THz).  A pair source pumped at channel ``p`` emits
signal/idler photons into frequency-conjugate channels ``s`` and ``2p - s``.

Emission streams are held as struct-of-arrays (:class:`EmissionBatch`);
:class:`PairEmission` is the per-event view.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

import numpy as np

SPEED_OF_LIGHT_NM_THZ = 299792.458  # c expressed in nm * THz

DEFAULT_MIN_CHANNEL = 21
DEFAULT_MAX_CHANNEL = 60


@dataclass(frozen=True, order=True)
class ItuChannel:
    index: int
    min_index: int = field(default=DEFAULT_MIN_CHANNEL, compare=False, repr=False)
    max_index: int = field(default=DEFAULT_MAX_CHANNEL, compare=False, repr=False)

    def __post_init__(self):
        if not isinstance(self.index, (int, np.integer)):
            raise TypeError(f"channel index must be an integer, got {self.index!r}")
        if not self.min_index <= self.index <= self.max_index:
            raise ValueError(
                f"channel C{self.index} outside grid C{self.min_index}..C{self.max_index}"
            )

    def __str__(self):
        return f"C{self.index}"


@dataclass(frozen=True)
class ChannelPlan:
    pump: ItuChannel
    combos: tuple[tuple[ItuChannel, ItuChannel], ...]
    grid_anchor_thz: float = 190.0
    grid_spacing_thz: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "combos", tuple(tuple(c) for c in self.combos))
        seen = set()
        for signal, idler in self.combos:
            if signal.index + idler.index != 2 * self.pump.index:
                raise ValueError(
                    f"combo ({signal}, {idler}) is not conjugate about pump {self.pump}"
                )
            for ch in (signal, idler):
                if ch.index == self.pump.index:
                    raise ValueError(f"pump channel {ch} used in a combo")
                if ch.index in seen:
                    raise ValueError(f"channel {ch} appears in more than one combo")
                seen.add(ch.index)
        if self.grid_spacing_thz <= 0:
            raise ValueError("grid spacing must be positive")

    def __len__(self):
        return len(self.combos)

    def channel(self, index: int) -> ItuChannel:
        return ItuChannel(index, self.pump.min_index, self.pump.max_index)

    def combo_index(self, signal: int, idler: int) -> int:
        for k, (s, i) in enumerate(self.combos):
            if s.index == signal and i.index == idler:
                return k
        raise KeyError(f"no combo (C{signal}, C{idler}) in plan")

    def to_section(self) -> dict[str, str]:
        """Flat string mapping suitable for a ``[plan]`` config section."""
        return {
            "pump": str(self.pump.index),
            "combos": ", ".join(f"{s.index}:{i.index}" for s, i in self.combos),
            "grid_anchor_thz": repr(float(self.grid_anchor_thz)),
            "grid_spacing_thz": repr(float(self.grid_spacing_thz)),
            "min_channel": str(self.pump.min_index),
            "max_channel": str(self.pump.max_index),
        }

    @classmethod
    def from_section(cls, section: dict[str, str]) -> "ChannelPlan":
        lo = int(section.get("min_channel", DEFAULT_MIN_CHANNEL))
        hi = int(section.get("max_channel", DEFAULT_MAX_CHANNEL))
        pump = ItuChannel(int(section["pump"]), lo, hi)
        combos = []
        for item in section["combos"].split(","):
            item = item.strip()
            if not item:
                continue
            s, i = item.split(":")
            combos.append((ItuChannel(int(s), lo, hi), ItuChannel(int(i), lo, hi)))
        return cls(
            pump=pump,
            combos=tuple(combos),
            grid_anchor_thz=float(section.get("grid_anchor_thz", 190.0)),
            grid_spacing_thz=float(section.get("grid_spacing_thz", 0.1)),
        )


def conjugate_channel(ch: ItuChannel, pump: ItuChannel) -> ItuChannel:
    """Channel placed symmetrically to ``ch`` about the pump.

    Raises ValueError if the mirror image falls off the grid.
    """
    return ItuChannel(2 * pump.index - ch.index, ch.min_index, ch.max_index)


def channel_frequency_exact(ch: ItuChannel, plan: ChannelPlan) -> Fraction:
    anchor = Fraction(repr(float(plan.grid_anchor_thz)))
    spacing = Fraction(repr(float(plan.grid_spacing_thz)))
    return anchor + spacing * ch.index


def channel_frequency_thz(ch: ItuChannel, plan: ChannelPlan) -> float:
    return float(channel_frequency_exact(ch, plan))


def channel_wavelength_nm(ch: ItuChannel, plan: ChannelPlan) -> float:
    """Vacuum wavelength of the channel center."""
    return SPEED_OF_LIGHT_NM_THZ / channel_frequency_thz(ch, plan)


def build_default_plan() -> ChannelPlan:
    """Pump at C40, signals C44..C59 paired with idlers C36..C21."""
    pump = ItuChannel(40)
    combos = tuple(
        (ItuChannel(s), conjugate_channel(ItuChannel(s), pump)) for s in range(44, 60)
    )
    return ChannelPlan(pump=pump, combos=combos)


@dataclass(frozen=True)
class SourceParams:
    # Fitted so that the calibration scenario lands on the published key rates.
    pair_rate_hz: float = 1.0e6
    detuning_sigma_ghz: float = 15.0
    correlation_sigma_ps: float = 2.0

    def validate(self, grid_spacing_thz: float = 0.1) -> None:
        for name in ("pair_rate_hz", "detuning_sigma_ghz", "correlation_sigma_ps"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite value >= 0, got {value}")
        half_spacing_ghz = 0.5 * grid_spacing_thz * 1000.0
        if self.detuning_sigma_ghz >= half_spacing_ghz:
            raise ValueError(
                f"detuning_sigma_ghz={self.detuning_sigma_ghz} must stay below half "
                f"the channel spacing ({half_spacing_ghz} GHz)"
            )

    def __post_init__(self):
        self.validate()


@dataclass(frozen=True)
class PairEmission:
    t_ps: float
    combo_id: int
    detuning_ghz: float
    skew_ps: float


@dataclass
class EmissionBatch:
    """Time-ordered pair emissions of a single channel combo."""

    combo_id: int
    t_ps: np.ndarray
    detuning_ghz: np.ndarray
    skew_ps: np.ndarray
    first_id: int = 0

    def __len__(self):
        return len(self.t_ps)

    def __getitem__(self, k: int) -> PairEmission:
        return PairEmission(
            float(self.t_ps[k]), self.combo_id, float(self.detuning_ghz[k]), float(self.skew_ps[k])
        )

    def __iter__(self) -> Iterator[PairEmission]:
        for k in range(len(self)):
            yield self[k]

    @property
    def emission_id(self) -> np.ndarray:
        return np.arange(self.first_id, self.first_id + len(self), dtype=np.int64)

    @classmethod
    def concatenate(cls, combo_id: int, batches: list["EmissionBatch"]) -> "EmissionBatch":
        if not batches:
            empty = np.empty(0)
            return cls(combo_id, empty, empty.copy(), empty.copy())
        return cls(
            combo_id,
            np.concatenate([b.t_ps for b in batches]),
            np.concatenate([b.detuning_ghz for b in batches]),
            np.concatenate([b.skew_ps for b in batches]),
            first_id=batches[0].first_id,
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t_ps", "combo_id", "detuning_ghz", "skew_ps"])
            for t, d, s in zip(self.t_ps.tolist(), self.detuning_ghz.tolist(), self.skew_ps.tolist()):
                writer.writerow([repr(t), self.combo_id, repr(d), repr(s)])


def iter_pair_emissions(
    params: SourceParams,
    combo_id: int,
    duration_s: float,
    rng: np.random.Generator,
    chunk_s: float = 1.0,
) -> Iterator[EmissionBatch]:
    """Yield the emission stream in consecutive time chunks.

    Arrival times come from cumulated exponential gaps, so the chunked stream
    is one homogeneous Poisson process over ``[0, duration_s)``.
    """
    if not duration_s > 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    rate_per_ps = params.pair_rate_hz * 1e-12
    end_ps = duration_s * 1e12
    if rate_per_ps == 0:
        return
    mean_gap = 1.0 / rate_per_ps
    t_last = 0.0
    next_id = 0
    chunk_ps = chunk_s * 1e12
    chunk_end = min(chunk_ps, end_ps)
    pending = np.empty(0)
    while True:
        # Draw gaps until the chunk boundary is crossed.
        parts = [pending]
        reach = pending[-1] if len(pending) else t_last
        while reach < chunk_end:
            expected = (chunk_end - reach) * rate_per_ps
            n = int(expected + 6.0 * math.sqrt(expected) + 16)
            times = reach + np.cumsum(rng.exponential(mean_gap, n))
            parts.append(times)
            reach = times[-1]
        times = np.concatenate(parts)
        cut = int(np.searchsorted(times, chunk_end, side="left"))
        inside, pending = times[:cut], times[cut:]
        n = len(inside)
        batch = EmissionBatch(
            combo_id=combo_id,
            t_ps=inside,
            detuning_ghz=rng.normal(0.0, params.detuning_sigma_ghz, n),
            skew_ps=rng.normal(0.0, params.correlation_sigma_ps, n),
            first_id=next_id,
        )
        next_id += n
        if n:
            t_last = inside[-1]
        yield batch
        if chunk_end >= end_ps:
            return
        chunk_end = min(chunk_end + chunk_ps, end_ps)


def generate_pair_emissions(
    params: SourceParams,
    combo_id: int,
    duration_s: float,
    seed,
) -> EmissionBatch:
    """Poisson stream of pair emissions for one combo, sorted by time.

    ``seed`` may be an int or an existing ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return EmissionBatch.concatenate(
        combo_id, list(iter_pair_emissions(params, combo_id, duration_s, rng))
    )
