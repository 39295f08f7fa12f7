"""Small lossless two-user simulations shared by several test modules."""

import numpy as np

from symdoqkd.coincidence import find_coincidences
from symdoqkd.optics import DetectorParams, PathParams, detect, transport_batch
from symdoqkd.source import SourceParams, generate_pair_emissions


def two_user_stream(duration_s, pair_rate_hz, seed, *, jitter_ps=40.0, corr_ps=2.0,
                    dispersion=40.0, detuning_ghz=15.0, dark_hz=0.0, extra_noise=None):
    rng = np.random.default_rng(seed)
    source = SourceParams(pair_rate_hz=pair_rate_hz, detuning_sigma_ghz=detuning_ghz,
                          correlation_sigma_ps=corr_ps)
    path = PathParams(n_users=2, dispersion_ps_per_ghz=dispersion, transmittance=1.0,
                      extra_noise_ps=extra_noise or {})
    det = DetectorParams(efficiency=1.0, jitter_sigma_ps=jitter_ps, dark_rate_hz=dark_hz)
    batch = generate_pair_emissions(source, 0, duration_s, rng)
    return detect(transport_batch(batch, path, rng), det, duration_s, rng, 2)


def pair_coincidences(stream, cfg):
    ta, arms_a = stream.for_user(0)
    tb, arms_b = stream.for_user(1)
    coinc, hist = find_coincidences(ta, tb, cfg)
    return coinc, arms_a[coinc.idx_a], arms_b[coinc.idx_b], ta, tb
