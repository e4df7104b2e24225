import math

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from models.ber import (
    LinkScenario,
    MimoConfig,
    ReceiverModel,
    RelayChain,
    average_ber_relay,
    average_ber_relay_selection,
    average_from_chip_power,
    cer_first_hop_uplink,
    cer_mai_free,
    chip_power_from_average,
    conditional_ber,
    dbm_to_watts,
    e2e_cer,
    gauss_hermite_lognormal_expectation,
    interference_patterns,
    mimo_average_ber,
    mimo_ber_isi_free,
    mimo_conditional_ber,
    mimo_monte_carlo_ber,
    monte_carlo_ber,
    qfunc,
)
from models.channel import (
    LinkGeometry,
    RectangularPulse,
    WaterType,
    channel_memory,
    isi_integrals,
    responsivity,
    simulate_impulse_response,
)
from models.errors import ParameterError

SWEEP_DBM = np.arange(-10.0, 50.01, 2.5)


def relay_link(n_relays, avg_dbm, n_users=5, sigma_x_sq=0.17):
    water = WaterType.preset("clear-ocean")
    geom = LinkGeometry(90.0, aperture_diameter=0.2)
    chip_power = chip_power_from_average(float(dbm_to_watts(avg_dbm)), 50, 3)
    rx = ReceiverModel(responsivity(0.8, 450.0), 1e-16, chip_power, 1e-8)
    chain = RelayChain.equidistant(water, geom, n_relays, sigma_x_sq)
    return LinkScenario(rx, 50, 3, n_users, chain)


def unit_receiver(chip_power=1.0, sigma=1.0):
    return ReceiverModel(responsivity=1.0, sigma_chip=sigma, chip_power=chip_power, chip_time=1.0)


def test_qfunc():
    assert qfunc(0.0) == pytest.approx(0.5)
    assert qfunc(1.0) == pytest.approx(stats.norm.sf(1.0), rel=1e-12)
    assert qfunc(np.inf) == 0.0


def test_power_conventions():
    assert chip_power_from_average(1.0, 50, 3) == pytest.approx(100.0 / 3)
    assert average_from_chip_power(chip_power_from_average(0.2, 50, 3), 50, 3) == pytest.approx(0.2)
    assert float(dbm_to_watts(30.0)) == pytest.approx(1.0)


def test_receiver_rejects_nonpositive_noise():
    with pytest.raises(ParameterError):
        ReceiverModel(1.0, 0.0, 1.0, 1.0)


def test_first_hop_cer_examples():
    rx = unit_receiver(chip_power=4.0)
    assert cer_first_hop_uplink(0, 1.0, 0.0, rx, 1.0) == pytest.approx(cer_first_hop_uplink(1, 1.0, 0.0, rx, 1.0))
    assert cer_first_hop_uplink(0, 1.0, 0.5, rx, 1.0) == pytest.approx(0.5)
    strong = rx.with_chip_power(1e9)
    assert cer_first_hop_uplink(0, 1.0, 0.3, strong, 1.0) == pytest.approx(0.0, abs=1e-300)


def test_mai_free_cer():
    rx = unit_receiver(chip_power=2.0)
    assert cer_mai_free(0.0, rx, 1.0) == pytest.approx(0.5)
    assert cer_mai_free(1.0, rx.with_chip_power(4.0), 0.5) < cer_mai_free(1.0, rx, 0.5)


def test_e2e_cer():
    assert e2e_cer([0.1]) == pytest.approx(0.1)
    assert e2e_cer([0.5, 0.0, 0.0]) == pytest.approx(0.5)
    assert e2e_cer([0.2, 0.2]) == pytest.approx(2 * 0.2 - 0.2 ** 2)


def test_conditional_ber():
    assert conditional_ber([0, 0, 0], [0, 0, 0]) == (0.0, 0.0)
    p10, p01 = conditional_ber([0.3], [0.2])
    assert (p10, p01) == (pytest.approx(0.3), pytest.approx(0.2))
    p10, p01 = conditional_ber([0.1] * 3, [0.1] * 3)
    assert p10 == pytest.approx(0.1 ** 3)
    assert p01 == pytest.approx(1 - 0.9 ** 3)


def test_gauss_hermite_trivial_functions():
    assert gauss_hermite_lognormal_expectation(lambda h: h, 0.17, 30) == pytest.approx(1.0, rel=1e-12)
    assert gauss_hermite_lognormal_expectation(lambda h: 2.5, 0.17, 30) == pytest.approx(2.5)


@pytest.mark.parametrize("sigma_x_sq", [0.01, 0.17, 0.25])
def test_gauss_hermite_matches_adaptive_quadrature(sigma_x_sq):
    s = math.sqrt(sigma_x_sq)

    def integrand(x):
        return float(qfunc(math.exp(2 * x))) * stats.norm.pdf(x, -sigma_x_sq, s)

    reference, _ = integrate.quad(integrand, -sigma_x_sq - 12 * s, -sigma_x_sq + 12 * s,
                                  epsabs=1e-14, epsrel=1e-12, limit=200)
    value = gauss_hermite_lognormal_expectation(lambda h: qfunc(h), sigma_x_sq, 30)
    assert value == pytest.approx(reference, rel=1e-6)
    assert abs(gauss_hermite_lognormal_expectation(lambda h: qfunc(h), sigma_x_sq, 60) - value) < 1e-8


def test_interference_patterns_cover_all_mass():
    patterns, uncovered = interference_patterns(5, 3, 50)
    assert sum(prob for _, prob in patterns) == pytest.approx(1.0, abs=1e-12)
    assert uncovered < 1e-12
    assert len(patterns) == 35
    assert all(p.l <= 4 for p, _ in patterns)
    single, _ = interference_patterns(1, 3, 50)
    assert [p.alpha for p, _ in single] == [(0, 0, 0)]


def test_single_user_closed_form():
    chain = RelayChain((1e-3,), (0.0,))
    rx = unit_receiver(chip_power=2000.0)
    scenario = LinkScenario(rx, 50, 3, 1, chain)
    q = float(qfunc(rx.amplitude * 1e-3 / 2))
    expected = 0.5 * (q ** 3 + 1 - (1 - q) ** 3)
    assert average_ber_relay(scenario, "downlink").ber == pytest.approx(expected, rel=1e-12)
    assert average_ber_relay(scenario, "uplink").ber == pytest.approx(expected, rel=1e-12)


def test_downlink_rejects_too_many_synchronous_users():
    with pytest.raises(ParameterError):
        average_ber_relay(relay_link(0, 20.0, n_users=7), "downlink")


def test_downlink_decreases_with_power():
    for n in (0, 1, 2):
        ber = np.array([average_ber_relay(relay_link(n, p), "downlink").ber for p in SWEEP_DBM])
        assert np.all((ber >= 0) & (ber <= 1))
        assert np.all(np.diff(ber) <= 0)
        live = ber > 1e-12
        assert np.all(np.diff(ber[live]) < 0)


def test_uplink_mai_floor():
    top = average_ber_relay(relay_link(0, 50.0), "uplink").ber
    below = average_ber_relay(relay_link(0, 40.0), "uplink").ber
    assert top > 1e-6
    assert abs(top - below) / below < 0.1
    single_user = average_ber_relay(relay_link(0, 50.0, n_users=1), "uplink").ber
    assert single_user < top


@pytest.mark.parametrize("direction", ["downlink", "uplink"])
def test_relays_order_end_to_end_ber(direction):
    checked = 0
    for p in SWEEP_DBM:
        ber = [average_ber_relay(relay_link(n, p), direction).ber for n in (0, 1, 2)]
        for near, far in ((1, 0), (2, 1)):
            if ber[far] > 1e-9:
                assert ber[near] < ber[far], (p, ber)
                checked += 1
        if min(ber) > 1e-9:
            assert ber[2] < ber[1] < ber[0]
    assert checked > 1


def test_interferers_keep_the_full_range_link():
    water = WaterType.preset("clear-ocean")
    geom = LinkGeometry(90.0, aperture_diameter=0.2)
    direct = RelayChain.equidistant(water, geom, 0, 0.17)
    relayed = RelayChain.equidistant(water, geom, 2, 0.17)
    assert direct.interferer_link == pytest.approx((direct.hop_losses[0], 0.17))
    assert relayed.interferer_link == pytest.approx(direct.interferer_link)
    assert relayed.hop_losses[0] > direct.hop_losses[0]
    colocated = RelayChain.equidistant(water, geom, 2, 0.17, colocated_interferers=True)
    assert colocated.interferer_link == (relayed.hop_losses[0], relayed.hop_sigma_x_sq[0])
    with pytest.raises(ParameterError):
        RelayChain((1e-3,), (0.1,), interferer_loss=0.0)


def test_colocated_interferers_keep_the_uplink_floor():
    rx = relay_link(1, 50.0).receiver
    water = WaterType.preset("clear-ocean")
    geom = LinkGeometry(90.0, aperture_diameter=0.2)
    colocated = LinkScenario(rx, 50, 3, 5, RelayChain.equidistant(water, geom, 1, 0.17, colocated_interferers=True))
    separated = average_ber_relay(relay_link(1, 50.0), "uplink").ber
    assert separated < 1e-9
    assert average_ber_relay(colocated, "uplink").ber > separated


def test_quadrature_converges():
    scenario = relay_link(1, -10.0, sigma_x_sq=0.2)
    coarse = average_ber_relay(scenario, "downlink", n_nodes=30).ber
    fine = average_ber_relay(scenario, "downlink", n_nodes=60).ber
    assert abs(coarse - fine) < 1e-8 + 1e-6 * fine


@pytest.mark.parametrize("dbm", SWEEP_DBM)
def test_monte_carlo_agrees_with_analysis(dbm):
    for direction in ("downlink", "uplink"):
        for n_relays in (0, 1, 2):
            scenario = relay_link(n_relays, dbm)
            analytic = average_ber_relay(scenario, direction).ber
            if analytic < 1e-4:
                continue
            mc = monte_carlo_ber(scenario, direction, 1_000_000, seed=5)
            assert abs(mc.estimate - analytic) <= 3 * mc.std_error, (direction, n_relays, analytic, mc)


def test_monte_carlo_is_deterministic_and_worker_independent():
    scenario = relay_link(0, 25.0)
    a = monte_carlo_ber(scenario, "uplink", 30_000, seed=2, block_size=10_000)
    b = monte_carlo_ber(scenario, "uplink", 30_000, seed=2, block_size=10_000, workers=2)
    assert a.n_errors == b.n_errors


def test_monte_carlo_noiseless_link_has_no_errors():
    rx = ReceiverModel(1.0, 1e-30, 1.0, 1.0)
    scenario = LinkScenario(rx, 50, 3, 1, RelayChain((1.0, 1.0), (0.0, 0.0)))
    for direction in ("uplink", "downlink"):
        result = monte_carlo_ber(scenario, direction, 5_000, seed=0)
        assert result.n_errors == 0


def test_selection_relaying_beats_single_path():
    rx = unit_receiver(chip_power=3000.0)
    branch = RelayChain((1e-3, 1e-3), (0.1, 0.1))
    single = average_ber_relay(LinkScenario(rx, 50, 3, 1, branch), "downlink", n_nodes=20).ber
    assert average_ber_relay_selection(rx, 3, [branch], n_nodes=20) == pytest.approx(single, rel=1e-9)
    pair = average_ber_relay_selection(rx, 3, [branch, branch], n_nodes=20)
    assert pair < single
    assert pair >= 0


def test_mimo_conditional_examples():
    cfg = MimoConfig(gamma_s=[[4.0]], gamma_k=[[[0.0]]], sigma_x_sq=0.0, sigma_bit=1.0)
    assert mimo_conditional_ber(cfg, 0, [[1.0]], [1]) == pytest.approx(float(qfunc(2.0)))
    isi = MimoConfig(gamma_s=[[4.0]], gamma_k=[[[0.5, 0.2]]], sigma_x_sq=0.0, sigma_bit=1.0)
    assert mimo_conditional_ber(isi, 0, [[1.0]], [0, 0]) == pytest.approx(float(qfunc(2.0)))
    assert mimo_conditional_ber(isi, 0, [[1.0]], [1, 0]) == pytest.approx(float(qfunc((4.0 - 1.0) / 2.0)))
    assert mimo_conditional_ber(isi, 1, [[1.0]], [1, 0]) == pytest.approx(float(qfunc((4.0 + 1.0) / 2.0)))
    double = MimoConfig(gamma_s=[[4.0], [4.0]], gamma_k=np.zeros((2, 1, 1)), sigma_x_sq=0.0, sigma_bit=1.0)
    assert mimo_conditional_ber(double, 0, [[1.0], [1.0]], [0]) < mimo_conditional_ber(cfg, 0, [[1.0]], [0])


def test_mimo_average_without_fading_is_direct_evaluation():
    cfg = MimoConfig(gamma_s=[[3.0, 2.0]], gamma_k=[[[0.4], [0.1]]], sigma_x_sq=0.0, sigma_bit=1.0)
    direct = np.mean([0.5 * (mimo_conditional_ber(cfg, 0, np.ones((1, 2)), [b])
                             + mimo_conditional_ber(cfg, 1, np.ones((1, 2)), [b])) for b in (0, 1)])
    assert mimo_average_ber(cfg).ber == pytest.approx(direct, rel=1e-12)


def test_siso_isi_free_matches_adaptive_integration():
    sigma_x_sq = 0.16
    s = math.sqrt(sigma_x_sq)
    cfg = MimoConfig(gamma_s=[[6.0]], gamma_k=[], sigma_x_sq=sigma_x_sq, sigma_bit=1.0)

    def integrand(x):
        return float(qfunc(math.exp(2 * x) * 6.0 / 2.0)) * stats.norm.pdf(x, -sigma_x_sq, s)

    reference, _ = integrate.quad(integrand, -sigma_x_sq - 12 * s, -sigma_x_sq + 12 * s,
                                  epsabs=1e-15, epsrel=1e-12, limit=200)
    assert mimo_average_ber(cfg, n_nodes=30).ber == pytest.approx(reference, rel=1e-6)


def test_isi_free_fast_path_matches_general_average():
    cfg = MimoConfig(gamma_s=[[5.0], [4.0]], gamma_k=np.zeros((2, 1, 2)), sigma_x_sq=[[0.1], [0.05]],
                     sigma_bit=1.0)
    fast = mimo_average_ber(cfg, fast_path=True).ber
    general = mimo_average_ber(cfg, fast_path=False).ber
    assert fast == pytest.approx(mimo_ber_isi_free(cfg))
    assert abs(fast - general) <= 1e-12


def _miso_power_for(n_tx, sigma_x_sq, target=1e-4):
    def gap(log_p):
        p = math.exp(log_p)
        cfg = MimoConfig(gamma_s=np.full((n_tx, 1), p / n_tx), gamma_k=[], sigma_x_sq=sigma_x_sq, sigma_bit=1.0)
        return math.log(max(mimo_average_ber(cfg, n_nodes=20).ber, 1e-300)) - math.log(target)
    return math.exp(optimize.brentq(gap, math.log(1.0), math.log(1e4), xtol=1e-6))


def test_transmit_diversity_gain_grows_with_turbulence():
    gains = {}
    for s2 in (0.01, 0.16):
        gains[s2] = 10 * math.log10(_miso_power_for(1, s2) / _miso_power_for(3, s2))
    assert gains[0.16] > gains[0.01]
    assert gains[0.16] > 1.0


def test_transmit_diversity_gain_with_simulated_channel():
    bit_time = 1e-9
    h0 = simulate_impulse_response(WaterType.preset("coastal"), LinkGeometry(25.0, aperture_diameter=0.2),
                                   200_000, seed=1, dt=bit_time / 10, n_bins=400, workers=2)
    pulse = RectangularPulse(bit_time, 1.0)
    isi = isi_integrals(pulse, h0, bit_time, channel_memory(pulse, h0, bit_time), resp=responsivity(0.8, 532.0))
    assert isi.gamma_s > 0

    def power_for(n_tx, sigma_x_sq):
        def gap(dbm):
            scale = 2.0 * float(dbm_to_watts(dbm)) / n_tx
            cfg = MimoConfig(np.full((n_tx, 1), isi.gamma_s * scale), np.tile(isi.gamma_k * scale, (n_tx, 1, 1)),
                             sigma_x_sq, 1e-15)
            return math.log(max(mimo_average_ber(cfg).ber, 1e-300)) - math.log(1e-4)
        return optimize.brentq(gap, -20.0, 80.0, xtol=1e-4)

    gains = {s2: power_for(1, s2) - power_for(3, s2) for s2 in (0.01, 0.16)}
    assert gains[0.16] > gains[0.01]


def test_mimo_budget_fallback_reports_standard_error():
    cfg = MimoConfig(gamma_s=np.full((2, 2), 3.0), gamma_k=np.full((2, 2, 1), 0.3), sigma_x_sq=0.1,
                     sigma_bit=1.0)
    exact = mimo_average_ber(cfg, n_nodes=12).ber
    fallback = mimo_average_ber(cfg, n_nodes=12, budget=10, mc_samples=100_000, seed=3)
    assert fallback.std_error > 0
    assert fallback.warning
    assert abs(fallback.ber - exact) <= 4 * fallback.std_error


def test_mimo_monte_carlo_oracle():
    cfg = MimoConfig(gamma_s=[[3.0], [2.5]], gamma_k=[[[0.3, 0.1]], [[0.2, 0.0]]], sigma_x_sq=0.1,
                     sigma_bit=1.0)
    analytic = mimo_average_ber(cfg, n_nodes=20).ber
    mc = mimo_monte_carlo_ber(cfg, 200_000, seed=8)
    assert abs(mc.estimate - analytic) <= 3 * mc.std_error
