import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chanmoe.channel_sim import (SPEED_OF_LIGHT, CsiTensor, PathSet, ScenarioConfig, add_awgn,
                                 derive_labels, make_dual_band, sample_paths, steering_vector,
                                 synthesize_csi)
from chanmoe.exceptions import ConfigurationError, DomainError, ShapeError
from chanmoe.signal_ops import best_beam, dft_codebook


def small_cfg(**kw):
    base = dict(sub6_antennas=2, subcarriers=4, timestamps_total=3, clusters=2, paths_per_cluster=3)
    base.update(kw)
    return ScenarioConfig(**base)


def single_path(beta=1.0, nu=0.0, tau=0.0, phi=0.0, theta=0.0):
    return PathSet(beta=np.array([beta], dtype=complex), doppler_hz=np.array([nu]),
                   delay_s=np.array([tau]), phase_rad=np.array([phi]), aod_rad=np.array([theta]),
                   ue_distance_m=100.0)


def random_paths(rng, n):
    return PathSet(beta=rng.normal(size=n) + 1j * rng.normal(size=n),
                   doppler_hz=rng.uniform(-200, 200, n), delay_s=rng.uniform(0, 1e-6, n),
                   phase_rad=rng.uniform(0, 2 * np.pi, n), aod_rad=rng.uniform(-1.4, 1.4, n),
                   ue_distance_m=50.0)


def brute_force_csi(paths, cfg, band="sub6"):
    # Direct element-by-element evaluation of the multipath sum.
    carrier = cfg.carrier(band)
    n_ant = cfg.antennas(band)
    df = cfg.bandwidth(band) / cfg.subcarriers
    f1 = carrier - cfg.bandwidth(band) / 2
    spacing = cfg.antenna_spacing * SPEED_OF_LIGHT / carrier
    H = np.zeros((cfg.timestamps_total, cfg.subcarriers, n_ant), dtype=complex)
    for i in range(cfg.timestamps_total):
        t = i * cfg.time_step_s
        for j in range(cfg.subcarriers):
            f = f1 + j * df
            for m in range(n_ant):
                acc = 0j
                for p in range(paths.n_paths):
                    phase = 2 * np.pi * (paths.doppler_hz[p] * t - f * paths.delay_s[p]) + paths.phase_rad[p]
                    steer = np.exp(1j * 2 * np.pi * m * f * spacing * np.sin(paths.aod_rad[p]) / SPEED_OF_LIGHT)
                    acc += paths.beta[p] * np.exp(1j * phase) * steer
                H[i, j, m] = acc
    return H


class TestScenarioConfig:
    def test_defaults(self):
        cfg = ScenarioConfig()
        assert (cfg.sub6_antennas, cfg.mm_antennas, cfg.subcarriers) == (8, 64, 64)
        assert cfg.clusters * cfg.paths_per_cluster == 420
        assert cfg.subcarrier_spacing("sub6") == pytest.approx(60e6 / 64)
        assert cfg.lowest_frequency("mm") == pytest.approx(28e9 - 0.25e9)

    @pytest.mark.parametrize("field,value", [("clusters", 0), ("subcarriers", -1), ("sub6_carrier_hz", 0.0),
                                             ("mm_bandwidth_hz", -1.0), ("paths_per_cluster", 2.5)])
    def test_invalid(self, field, value):
        with pytest.raises(ConfigurationError):
            ScenarioConfig(**{field: value})

    def test_unknown_band(self):
        with pytest.raises(ShapeError):
            ScenarioConfig().carrier("thz")


class TestSamplePaths:
    def test_path_count(self):
        paths = sample_paths(ScenarioConfig(), 0)
        assert paths.n_paths == 420

    def test_zero_speed_has_no_doppler(self):
        paths = sample_paths(ScenarioConfig(ue_speed_kmh=0.0), 1)
        assert np.all(paths.doppler_hz == 0)

    def test_determinism(self):
        a = sample_paths(ScenarioConfig(), np.random.default_rng(7))
        b = sample_paths(ScenarioConfig(), np.random.default_rng(7))
        assert a.equals(b)

    def test_invariants(self):
        for seed in range(20):
            p = sample_paths(ScenarioConfig(), seed)
            assert np.all(p.delay_s >= 0)
            assert np.all(np.abs(p.aod_rad) < np.pi / 2)
            assert np.all(np.abs(p.beta) > 0)
            assert np.argmin(p.delay_s) == 0  # LoS path first and earliest
            assert p.main_index == 0
            assert 30.0 <= p.ue_distance_m <= 500.0

    def test_doppler_bounded_by_max_shift(self):
        cfg = ScenarioConfig()
        p = sample_paths(cfg, 3)
        nu_max = cfg.ue_speed_ms * cfg.sub6_carrier_hz / SPEED_OF_LIGHT
        assert np.all(np.abs(p.doppler_hz) <= nu_max + 1e-9)

    def test_pathset_validation(self):
        with pytest.raises(DomainError):
            single_path(tau=-1e-9)
        with pytest.raises(DomainError):
            single_path(theta=np.pi / 2)


class TestSteeringVector:
    def test_broadside_all_ones(self):
        np.testing.assert_array_equal(steering_vector(0.0, 2e9, 4), np.ones(4))

    def test_endfire_alternates(self):
        np.testing.assert_allclose(steering_vector(np.pi / 2, 2e9, 4), [1, -1, 1, -1], atol=1e-12)

    def test_matches_elementwise_loop(self):
        f, theta = 1.9e9, np.pi / 6
        spacing = 0.5 * SPEED_OF_LIGHT / f
        expected = [np.exp(1j * 2 * np.pi * m * f * spacing * np.sin(theta) / SPEED_OF_LIGHT) for m in range(8)]
        np.testing.assert_allclose(steering_vector(theta, f, 8), expected, rtol=0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(theta=st.floats(-1.5, 1.5), f=st.floats(1e8, 1e11), n=st.integers(1, 64))
    def test_unit_modulus(self, theta, f, n):
        a = steering_vector(theta, f, n)
        assert a[0] == 1
        np.testing.assert_allclose(np.abs(a), 1.0, atol=1e-12)

    def test_beam_squint(self):
        # Spacing fixed at the carrier: an off-carrier frequency scales the phase step.
        a = steering_vector(np.pi / 2, 2.2e9, 2, carrier_hz=2e9)
        assert np.angle(a[1]) == pytest.approx(np.pi * 1.1 - 2 * np.pi, abs=1e-12)

    def test_rejects_empty_array(self):
        with pytest.raises(ConfigurationError):
            steering_vector(0.0, 1e9, 0)


class TestSynthesizeCsi:
    def test_single_trivial_path_all_ones(self):
        cfg = small_cfg()
        H = synthesize_csi(single_path(), cfg).data
        np.testing.assert_allclose(H, 1.0, atol=1e-12)

    def test_single_path_constant_modulus(self):
        cfg = small_cfg(sub6_antennas=1)
        H = synthesize_csi(single_path(beta=0.3 - 0.4j, tau=3e-7, phi=1.0), cfg).data
        np.testing.assert_allclose(np.abs(H), 0.5, rtol=1e-12)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        cfg = small_cfg(sub6_antennas=2, subcarriers=4, timestamps_total=3)
        paths = random_paths(rng, 5)
        H = synthesize_csi(paths, cfg).data
        ref = brute_force_csi(paths, cfg)
        assert np.linalg.norm(H - ref) / np.linalg.norm(ref) < 1e-10

    def test_time_shift_covariance(self):
        cfg = small_cfg(timestamps_total=4)
        nu = 123.0
        H = synthesize_csi(single_path(beta=0.7, nu=nu, tau=2e-7, theta=0.3), cfg).data
        np.testing.assert_allclose(H[1:] / H[:-1], np.exp(1j * 2 * np.pi * nu * cfg.time_step_s), atol=1e-9)

    def test_frequency_shift_covariance(self):
        cfg = small_cfg(sub6_antennas=1, subcarriers=8)
        tau = 4.1e-7
        H = synthesize_csi(single_path(tau=tau, nu=50.0), cfg).data
        df = cfg.subcarrier_spacing("sub6")
        np.testing.assert_allclose(H[:, 1:] / H[:, :-1], np.exp(-1j * 2 * np.pi * df * tau), atol=1e-9)

    def test_index_subsets(self):
        cfg = small_cfg()
        paths = random_paths(np.random.default_rng(2), 4)
        full = synthesize_csi(paths, cfg).data
        part = synthesize_csi(paths, cfg, t_indices=[2], k_indices=[1, 3]).data
        np.testing.assert_allclose(part, full[[2]][:, [1, 3]], rtol=1e-12, atol=1e-14)

    def test_band_mismatch(self):
        with pytest.raises(ShapeError):
            synthesize_csi(single_path(), small_cfg(), band="mm")

    def test_csi_tensor_validation(self):
        with pytest.raises(ShapeError):
            CsiTensor(np.zeros((2, 2)), "sub6", 1.0, 1.0, 1.0)
        with pytest.raises(DomainError):
            CsiTensor(np.full((1, 1, 1), np.nan + 0j), "sub6", 1.0, 1.0, 1.0)

    def test_determinism(self):
        cfg = ScenarioConfig()
        a = make_dual_band(sample_paths(cfg, 11), cfg)[0].data
        b = make_dual_band(sample_paths(cfg, 11), cfg)[0].data
        assert np.array_equal(a, b)


class TestDualBand:
    def test_shapes(self):
        cfg = ScenarioConfig()
        sub6, mm = make_dual_band(sample_paths(cfg, 0), cfg)
        assert sub6.shape == (20, 64, 8)
        assert mm.shape == (1, 64, 64)
        assert mm.df_hz == pytest.approx(0.5e9 / 64)

    def test_shared_angle(self):
        # Single LoS path: the angle-domain peaks of both bands sit at the same sin(theta).
        cfg = ScenarioConfig(clusters=1, paths_per_cluster=1)
        paths = sample_paths(cfg, 5)
        sub6, mm = make_dual_band(paths, cfg)
        s = np.sin(paths.aod_rad[0])
        for H, n in ((sub6.data[0], 8), (mm.data[0], 64)):
            cb = dft_codebook(n, 256)
            gains = np.abs(H.conj() @ cb.matrix).sum(axis=0)
            assert abs(cb.grid[np.argmax(gains)] - s) < 2.0 / n

    def test_los_only_best_beam_is_nearest_grid_point(self):
        cfg = ScenarioConfig(clusters=1, paths_per_cluster=1, mm_bandwidth_hz=1e6)
        for seed in range(5):
            paths = sample_paths(cfg, seed)
            _, mm = make_dual_band(paths, cfg)
            cb = dft_codebook(64, 256)
            index, _ = best_beam(mm.data[0], cb)
            expected = np.argmin(np.abs(cb.grid - np.sin(paths.aod_rad[0])))
            assert index == expected

    def test_mm_doppler_scaled_by_carrier(self):
        cfg = ScenarioConfig()
        p = sample_paths(cfg, 0)
        mm = p.for_band("mm", cfg)
        np.testing.assert_allclose(mm.doppler_hz, p.doppler_hz * 28e9 / 1.9e9)
        np.testing.assert_array_equal(mm.aod_rad, p.aod_rad)
        np.testing.assert_array_equal(mm.delay_s, p.delay_s)


class TestLabels:
    def test_distance_from_delay(self):
        p = dataclasses.replace(single_path(tau=1e-6))
        x_d, _ = derive_labels(p)
        assert x_d == pytest.approx(299.792458)

    @pytest.mark.parametrize("beta,pl", [(1.0, 0.0), (0.1, 20.0), (0.01j, 40.0)])
    def test_path_loss(self, beta, pl):
        assert derive_labels(single_path(beta=beta))[1] == pytest.approx(pl, abs=1e-12)

    def test_sampled_labels_match_geometry(self):
        cfg = ScenarioConfig()
        p = sample_paths(cfg, 4)
        x_d, x_pl = derive_labels(p)
        assert x_d == pytest.approx(p.ue_distance_m, rel=1e-12)
        assert 60 < x_pl < 130

    def test_empty(self):
        empty = PathSet(np.zeros(0, complex), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), 1.0)
        with pytest.raises(DomainError):
            derive_labels(empty)


class TestAwgn:
    def test_no_noise_sentinel(self):
        x = np.arange(4) + 1j
        np.testing.assert_array_equal(add_awgn(x, None), x)
        np.testing.assert_array_equal(add_awgn(x, np.inf), x)

    def test_noise_power(self):
        x = np.ones(100_000, dtype=complex)
        n = add_awgn(x, 0.0, 0) - x
        assert np.mean(np.abs(n) ** 2) == pytest.approx(1.0, rel=0.05)

    def test_determinism(self):
        x = np.ones(10, dtype=complex)
        np.testing.assert_array_equal(add_awgn(x, 5.0, 3), add_awgn(x, 5.0, 3))

    def test_empty(self):
        with pytest.raises(ShapeError):
            add_awgn(np.zeros(0, complex), 10.0)
