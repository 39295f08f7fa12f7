"""Scenario runners that write CSV/JSON report bundles.

All randomness is drawn from substreams keyed by the master seed and the
channel combo, so a bundle depends only on (config, seed) and not on the
worker count or the order in which subnets are processed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from symdoqkd.coincidence import InsufficientDataError, car, find_coincidences, histogram_delays
from symdoqkd.config import ScenarioConfig
from symdoqkd.network import KeyStore, build_topology, establish_end_to_end
from symdoqkd.optics import (
    DetectionStream,
    IDLER,
    SIGNAL,
    ArmKind,
    RoutedPhotons,
    detect,
    transport_batch,
)
from symdoqkd.protocol import assign_bases, bits_to_hex, run_pair_session, symbols_to_bits
from symdoqkd.rng import substream
from symdoqkd.source import channel_frequency_thz, iter_pair_emissions

log = logging.getLogger(__name__)


# -- simulation -------------------------------------------------------------

def simulate_subnet(cfg: ScenarioConfig, combo_id: int, duration_s: float | None = None) -> DetectionStream:
    """Source -> splitter -> arms -> detectors for the subnet fed by ``combo_id``."""
    duration_s = cfg.run.duration_s if duration_s is None else duration_s
    seed = cfg.run.seed
    emit_rng = substream(seed, "emission", combo_id)
    path_rng = substream(seed, "transport", combo_id)
    routed = [
        transport_batch(batch, cfg.path, path_rng)
        for batch in iter_pair_emissions(cfg.source, combo_id, duration_s, emit_rng)
    ]
    return detect(RoutedPhotons.concatenate(routed), cfg.detector, duration_s,
                  substream(seed, "detection", combo_id), cfg.path.n_users)


def _direct_channel_photons(batch, transmittance: float, rng) -> RoutedPhotons:
    """Signal to detector (0, ND), idler to (1, ND); no splitter, no dispersion."""
    parts = []
    for role in (SIGNAL, IDLER):
        alive = np.flatnonzero(rng.random(len(batch)) < transmittance)
        t = batch.t_ps[alive] + (batch.skew_ps[alive] if role == SIGNAL else 0.0)
        m = len(alive)
        parts.append(RoutedPhotons(
            t_ps=t,
            user=np.full(m, role, dtype=np.int64),
            arm=np.full(m, int(ArmKind.ND), dtype=np.int64),
            detuning_ghz=batch.detuning_ghz[alive] * (1 if role == SIGNAL else -1),
            role=np.full(m, role, dtype=np.int64),
            combo_id=np.full(m, batch.combo_id, dtype=np.int64),
            emission_id=batch.emission_id[alive],
        ))
    return RoutedPhotons.concatenate(parts)


def measure_channel(cfg: ScenarioConfig, combo_id: int) -> dict:
    duration_s = cfg.run.duration_s
    seed = cfg.run.seed
    emit_rng = substream(seed, "channel-emission", combo_id)
    path_rng = substream(seed, "channel-transport", combo_id)
    routed = [
        _direct_channel_photons(batch, cfg.path.transmittance, path_rng)
        for batch in iter_pair_emissions(cfg.source, combo_id, duration_s, emit_rng)
    ]
    # Two detectors only: dark counts are generated for "users" 0 and 1, ND arm
    # and AD arm; the AD detectors are simply never read.
    stream = detect(RoutedPhotons.concatenate(routed), cfg.detector, duration_s,
                    substream(seed, "channel-detection", combo_id), 2)
    ts = stream.for_detector(0, ArmKind.ND)
    ti = stream.for_detector(1, ArmKind.ND)
    coinc, hist = find_coincidences(ts, ti, cfg.coincidence)
    return {
        "combo_id": combo_id,
        "singles_signal_cps": len(ts) / duration_s,
        "singles_idler_cps": len(ti) / duration_s,
        "coincidences": len(coinc),
        "car": _car_or_none(hist, cfg.coincidence),
        "histogram": hist,
    }


def _car_or_none(hist, ccfg):
    try:
        return car(hist, ccfg)
    except InsufficientDataError:
        return None


def _map(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- output helpers ---------------------------------------------------------

def _num(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return x


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_num(v) for v in row])


def _write_json(path: Path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _json_float(x):
    if x is None:
        return None
    if np.isinf(x):
        return "inf"
    return float(x)


# -- scenarios --------------------------------------------------------------

def _channels(cfg: ScenarioConfig, out: Path, workers: int, blind: bool) -> None:
    results = _map(_channel_job(cfg), range(len(cfg.plan)), workers)
    rows, hist_rows = [], []
    for res in results:
        s, i = cfg.plan.combos[res["combo_id"]]
        rows.append([res["combo_id"], f"C{s.index}", f"C{i.index}",
                     channel_frequency_thz(s, cfg.plan), channel_frequency_thz(i, cfg.plan),
                     res["singles_signal_cps"], res["singles_idler_cps"], res["coincidences"],
                     _json_float(res["car"])])
        h = res["histogram"]
        for k, c, n in zip(h.bin_index.tolist(), h.delay_ps_center.tolist(), h.counts.tolist()):
            hist_rows.append([res["combo_id"], k, c, n])
    _write_csv(out / "channels.csv",
               ["combo_id", "signal_channel", "idler_channel", "signal_thz", "idler_thz",
                "singles_signal_cps", "singles_idler_cps", "coincidences", "car"], rows)
    _write_csv(out / "channel_histograms.csv",
               ["combo_id", "bin_index", "delay_ps_center", "counts"], hist_rows)


class _channel_job:
    """Picklable per-combo job for the worker pool."""

    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, combo_id):
        return measure_channel(self.cfg, combo_id)


def subnet_coincidences(cfg: ScenarioConfig, stream: DetectionStream):
    ccfg = cfg.coincidence
    h = ccfg.peak_halfwidth_bins
    for a, b in itertools.combinations(range(cfg.path.n_users), 2):
        ta, _ = stream.for_user(a)
        tb, _ = stream.for_user(b)
        coinc, hist = find_coincidences(ta, tb, ccfg)
        yield a, b, coinc, hist, hist.window_sum(-h, h)


def _subnet_coincidence(cfg: ScenarioConfig, out: Path, workers: int, blind: bool) -> None:
    stream = simulate_subnet(cfg, cfg.run.combo_id)
    rows, hist_rows = [], []
    for a, b, coinc, hist, peak in subnet_coincidences(cfg, stream):
        rows.append([a, b, len(coinc), peak, peak / cfg.run.duration_s, _json_float(_car_or_none(hist, cfg.coincidence))])
        for k, c, n in zip(hist.bin_index.tolist(), hist.delay_ps_center.tolist(), hist.counts.tolist()):
            hist_rows.append([a, b, k, c, n])
    _write_csv(out / "subnet_coincidence.csv",
               ["user_a", "user_b", "window_coincidences", "peak_coincidences", "peak_rate_cps", "car"], rows)
    _write_csv(out / "pair_histograms.csv",
               ["user_a", "user_b", "bin_index", "delay_ps_center", "counts"], hist_rows)


BASIS_LABELS = ("K1K2", "K1S2", "S1K2", "S1S2")


def core_std(delays: np.ndarray, n_sigma: float = 5.0) -> float:
    """Std of delays within ``n_sigma`` MAD-sigmas of the median.

    Keeps the flat accidental background from dominating narrow peaks.
    """
    if len(delays) < 2:
        return float("nan")
    med = np.median(delays)
    sigma = 1.4826 * np.median(np.abs(delays - med))
    core = delays[np.abs(delays - med) <= n_sigma * sigma] if sigma > 0 else delays
    return float(np.std(core, ddof=1)) if len(core) > 1 else float("nan")


def basis_delays(cfg: ScenarioConfig, stream: DetectionStream, a: int, b: int) -> dict:
    """Coincidence delays of one pair split by the four K/S combinations."""
    a, b = sorted((a, b))
    assignment = assign_bases((a, b), cfg.session.convention)
    ta, arms_a = stream.for_user(a)
    tb, arms_b = stream.for_user(b)
    coinc, _ = find_coincidences(ta, tb, cfg.coincidence)
    ka = arms_a[coinc.idx_a] == assignment.k_arm(a)
    kb = arms_b[coinc.idx_b] == assignment.k_arm(b)
    masks = {"K1K2": ka & kb, "K1S2": ka & ~kb, "S1K2": ~ka & kb, "S1S2": ~ka & ~kb}
    return {label: coinc.delay_ps[masks[label]] for label in BASIS_LABELS}


def _bases(cfg: ScenarioConfig, out: Path, workers: int, blind: bool) -> None:
    stream = simulate_subnet(cfg, cfg.run.combo_id)
    a, b = cfg.run.pair
    delays = basis_delays(cfg, stream, a, b)
    rows, hist_rows = [], []
    for label in BASIS_LABELS:
        d = delays[label]
        hist = histogram_delays(d, cfg.coincidence)
        rows.append([label, len(d), core_std(d)])
        for k, c, n in zip(hist.bin_index.tolist(), hist.delay_ps_center.tolist(), hist.counts.tolist()):
            hist_rows.append([label, k, c, n])
    _write_csv(out / "bases_summary.csv", ["basis", "coincidences", "core_std_ps"], rows)
    _write_csv(out / "bases_histograms.csv", ["basis", "bin_index", "delay_ps_center", "counts"], hist_rows)


def subnet_sessions(cfg: ScenarioConfig, stream: DetectionStream):
    scfg = cfg.session_config
    for a, b in itertools.combinations(range(cfg.path.n_users), 2):
        report, keys = run_pair_session(a, b, stream, scfg)
        yield report, keys


def _write_keys(out: Path, prefix: str, report, keys, d: int) -> None:
    keydir = out / "keys"
    keydir.mkdir(exist_ok=True)
    stem = f"{prefix}pair_{report.user_a}_{report.user_b}"
    (keydir / f"{stem}.raw_a.hex").write_text(bits_to_hex(symbols_to_bits(keys.raw_symbols_a, d)) + "\n")
    (keydir / f"{stem}.raw_b.hex").write_text(bits_to_hex(symbols_to_bits(keys.raw_symbols_b, d)) + "\n")
    (keydir / f"{stem}.secure.hex").write_text(bits_to_hex(keys.secure_key_a) + "\n")


REPORT_COLUMNS = ["user_a", "user_b", "total_coincidences", "kk_count", "ss_count", "discarded_count",
                  "kept_symbols", "qber", "ss_variance_ps2", "security_pass", "raw_bits", "secure_bits",
                  "raw_rate_bps", "secure_rate_bps"]


def _keyrates(cfg: ScenarioConfig, out: Path, workers: int, blind: bool) -> None:
    stream = simulate_subnet(cfg, cfg.run.combo_id)
    reports = []
    for report, keys in subnet_sessions(cfg, stream):
        reports.append(report)
        _write_keys(out, "", report, keys, cfg.frames.bits_per_symbol)
    _write_csv(out / "keyrates.csv", REPORT_COLUMNS,
               [[getattr(r, c) for c in REPORT_COLUMNS] for r in reports])
    _write_json(out / "sessions.json", [r.to_dict() for r in reports])


class _subnet_job:
    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, subnet: int):
        stream = simulate_subnet(self.cfg, subnet)
        return [(r, k.secure_key_a, k.secure_key_b) for r, k in subnet_sessions(self.cfg, stream)]


def build_network(cfg: ScenarioConfig, workers: int = 1):
    """Simulate every subnet and load its session keys into a KeyStore.

    Subnet ``m`` is fed by channel combo ``m``.  Returns
    ``(topology, store, reports)`` with ``reports[m]`` the subnet's sessions.
    """
    topo = build_topology(cfg.topology.m_subnets, cfg.path.n_users)
    if topo.m_subnets > len(cfg.plan):
        raise ValueError(f"{topo.m_subnets} subnets need as many channel combos; plan has {len(cfg.plan)}")
    store = KeyStore()
    reports = []
    for subnet, results in enumerate(_map(_subnet_job(cfg), range(topo.m_subnets), workers)):
        reports.append([r for r, _, _ in results])
        for report, key_a, key_b in results:
            store.add_session((subnet, report.user_a), (subnet, report.user_b), key_a, key_b)
    return topo, store, reports


def _network(cfg: ScenarioConfig, out: Path, workers: int, blind: bool) -> None:
    topo, store, reports = build_network(cfg, workers)
    session_rows = [
        [subnet] + [getattr(r, c) for c in REPORT_COLUMNS]
        for subnet, subnet_reports in enumerate(reports)
        for r in subnet_reports
    ]

    rows, routes = [], []
    for u, v in itertools.combinations(topo.all_users, 2):
        key_u, key_v, record = establish_end_to_end(u, v, topo, store)
        rows.append([f"{u[0]}.{u[1]}", f"{v[0]}.{v[1]}", record.provenance, record.key_bits,
                     bool(np.array_equal(key_u, key_v))])
        routes.append(record.to_dict())
    _write_csv(out / "network_sessions.csv", ["subnet"] + REPORT_COLUMNS, session_rows)
    _write_csv(out / "network-report.csv", ["u", "v", "provenance", "key_bits", "keys_agree"], rows)
    _write_json(out / "topology.json", json.loads(topo.to_json()))
    _write_json(out / "routes.json", routes)


def _custom(cfg: ScenarioConfig, out: Path, workers: int, blind: bool) -> None:
    stream = simulate_subnet(cfg, cfg.run.combo_id)
    stream.to_csv(out / "events.csv", blind=blind)
    reports = [r for r, _ in subnet_sessions(cfg, stream)]
    _write_csv(out / "keyrates.csv", REPORT_COLUMNS,
               [[getattr(r, c) for c in REPORT_COLUMNS] for r in reports])
    _write_json(out / "sessions.json", [r.to_dict() for r in reports])


RUNNERS = {
    "channels": _channels,
    "subnet-coincidence": _subnet_coincidence,
    "bases": _bases,
    "keyrates": _keyrates,
    "network": _network,
    "custom": _custom,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_scenario(cfg: ScenarioConfig, out_dir, workers: int = 1, blind: bool = False) -> Path:
    """Run ``cfg.run.scenario`` and write its bundle plus ``manifest.json`` to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    log.info("running scenario %s (seed %d)", cfg.run.scenario, cfg.run.seed)
    RUNNERS[cfg.run.scenario](cfg, out, workers, blind)
    (out / "config.ini").write_text(cfg.to_text())
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "scenario": cfg.run.scenario,
        "seed": cfg.run.seed,
        "duration_s": cfg.run.duration_s,
        "blind": blind,
        "parameters": cfg.to_dict(),
        "config_text": cfg.to_text(),
        "analysis": {
            "coincidence": dataclasses.asdict(cfg.coincidence),
            "qber_granularity": "symbol",
            "bases_std_method": "sample std within 5 MAD-sigmas of the median",
        },
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    _write_json(out / "manifest.json", manifest)
    return out
