"""
Scenario loading, validation and the figure experiments.

A scenario is one JSON document with a `kind`; whatever it leaves out is
taken from the built-in defaults of that kind. Each runner returns a pandas
DataFrame whose columns are the documented CSV schema of the experiment.
"""
import copy
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

import settings
from models.ber import (
    LinkScenario,
    MimoConfig,
    ReceiverModel,
    RelayChain,
    average_ber_relay,
    chip_power_from_average,
    dbm_to_watts,
    mimo_average_ber,
    mimo_monte_carlo_ber,
    monte_carlo_ber,
)
from models.channel import (
    LinkGeometry,
    RectangularPulse,
    WATER_TYPES,
    WaterType,
    channel_memory,
    fit_double_gamma,
    isi_integrals,
    light_speed_in_water,
    responsivity,
    simulate_impulse_response,
)
from models.errors import AmbiguousPositionError, ParameterError, ScenarioValidationError
from models.locate import (
    AnchorSet,
    anchor_ranges,
    calibrate_distance_polynomial,
    hex_anchor_layout,
    rss_localize,
    tdoa_position,
    uniform_in_hexagon,
)
from models.power import DownlinkModel, allocate_ring_powers, average_power_per_bit, equal_area_rings

logger = logging.getLogger(__name__)

KINDS = ("relay-ber", "localization", "mimo-ber", "power-control")

COLUMNS = {
    "relay-ber": ["power_dbm", "direction", "n_relays", "ber_analytic", "ber_mc", "mc_stderr"],
    "localization": ["trial", "true_x", "true_y", "est_x", "est_y", "err_m", "n_anchors", "method"],
    "mimo-ber": ["power_dbm", "n_tx", "sigma_x_sq", "ber_analytic", "ber_mc", "mc_stderr"],
    "power-control": ["target_ber", "n_rings", "avg_power_per_bit_dbm"],
}

_RECEIVER = {"quantum_efficiency": 0.8, "wavelength_nm": 450.0}
_CODE = {"length": 50, "weight": 3, "max_correlation": 1, "users": 5}

DEFAULTS = {
    "relay-ber": {
        "water": "clear-ocean",
        "link": {"range_m": 90.0, "beam_divergence": 0.0, "aperture_diameter": 0.2},
        "code": _CODE,
        "receiver": {**_RECEIVER, "sigma_chip": 1e-16},
        "bit_rate": 2e6,
        "sigma_x_sq": 0.17,
        "n_relays": [0, 1, 2],
        "directions": ["uplink", "downlink"],
        "sweep_dbm": {"start": -10.0, "stop": 50.0, "step": 2.5},
        "monte_carlo": {"bits": 1_000_000, "min_ber": 1e-4},
        "quadrature_nodes": 30,
    },
    "localization": {
        "water": "pure-sea",
        "link": {"beam_divergence": 0.0, "aperture_diameter": 0.2},
        "receiver": _RECEIVER,
        "cell_radius": 50.0,
        "sigma_x_sq": 0.1,
        "transmit_power": 1.0,
        "sample_time": 1e-6,
        "noise_std": 1e-11,
        "samples_per_estimate": 100,
        "polynomial": {"degree": 5, "pairs": 50},
        "anchors": [3, 7],
        "trials": 1000,
        "methods": ["rss-lls", "tdoa"],
        "tdoa_jitter": 1e-9,
    },
    "mimo-ber": {
        "water": "coastal",
        "link": {"range_m": 25.0, "beam_divergence": 0.0, "aperture_diameter": 0.2},
        "receiver": {"quantum_efficiency": 0.8, "wavelength_nm": 532.0, "sigma_bit": 1e-15},
        "bit_rate": 1e9,
        "n_tx": [1, 2, 3],
        "sigma_x_sq": [0.01, 0.16],
        "photons": 200_000,
        "bins_per_bit": 10,
        "n_bins": 400,
        "sweep_dbm": {"start": -10.0, "stop": 40.0, "step": 2.5},
        "monte_carlo": {"bits": 0, "min_ber": 1e-4},
        "quadrature_nodes": 20,
    },
    "power-control": {
        "water": "clear-ocean",
        "link": {"beam_divergence": 0.006, "aperture_diameter": 0.2},
        "code": _CODE,
        "receiver": {**_RECEIVER, "sigma_chip": 1e-16},
        "bit_rate": 2e6,
        "cell_radius": 90.0,
        "edge_sigma_x_sq": 0.14,
        "n_rings": [1, 2, 3],
        "target_ber": [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8],
        "power_cap_dbm": 60.0,
        "distribution": "uniform",
    },
}


@dataclass
class Scenario:
    kind: str
    seed: int = field(default_factory=lambda: settings.SEED)
    params: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.params[key]

    def get(self, key, default=None):
        return self.params.get(key, default)


def deep_merge(base, override):
    """Recursively overlays `override` on a copy of `base`."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def default_scenario(kind, seed=None):
    if kind not in KINDS:
        raise ParameterError(f"unknown scenario kind '{kind}'; expected one of {KINDS}")
    return Scenario(kind, settings.SEED if seed is None else seed, copy.deepcopy(DEFAULTS[kind]))


def scenario_from_dict(doc):
    doc = dict(doc)
    kind = doc.pop("kind", None)
    if kind not in KINDS:
        raise ScenarioValidationError([{"field": "kind", "message": f"kind must be one of {KINDS}, got {kind!r}"}])
    seed = doc.pop("seed", None)
    base = default_scenario(kind, seed)
    return Scenario(kind, base.seed, deep_merge(base.params, doc))


def load_scenario(path):
    """Reads a JSON scenario file and fills the gaps from the defaults of its kind."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ScenarioValidationError([{"field": "file", "message": f"{path} is not valid JSON: {e}"}])
    return scenario_from_dict(doc)


def _sweep(grid):
    start, stop, step = grid["start"], grid["stop"], grid["step"]
    return np.round(np.arange(start, stop + step / 2.0, step), 10)


def validate(scenario):
    """
    Checks every cross-constraint before anything is computed.

    Returns:
        list[dict]: Diagnostics with 'field' and 'message'; empty when the scenario is valid.
    """
    p = scenario.params
    diagnostics = []

    def fail(name, message):
        diagnostics.append({"field": name, "message": message})

    water = p.get("water")
    if not isinstance(water, dict) and water not in WATER_TYPES:
        fail("water", f"water must be one of {sorted(WATER_TYPES)} or an absorption/scattering pair")

    code = p.get("code")
    if code is not None:
        F, W, M = code["length"], code["weight"], code["users"]
        if W < 1 or F < W:
            fail("code", f"code weight must lie in [1, F], got F={F}, W={W}")
        elif W * W > 2 * F:
            fail("code", f"hit model needs W^2 <= 2F, got F={F}, W={W}")
        if M < 1:
            fail("code.users", "at least one user is required")
        synchronous = scenario.kind == "power-control" or "downlink" in p.get("directions", ())
        if synchronous and W >= 1 and not M < F / W ** 2 + 1:
            fail("code.users", f"synchronous downlink needs M < F/W^2 + 1 = {F / W ** 2 + 1:.2f}, got M={M}")
        if "chip_time" in p:
            expected = 1.0 / (p["bit_rate"] * F)
            if not math.isclose(p["chip_time"], expected, rel_tol=1e-9):
                fail("chip_time", f"chip time must equal 1/(Rb F) = {expected:.3e} s, got {p['chip_time']:.3e} s")

    if p.get("bit_rate", 1.0) <= 0:
        fail("bit_rate", "bit rate must be positive")
    for key in ("sigma_x_sq", "edge_sigma_x_sq"):
        values = np.atleast_1d(p.get(key, 0.0))
        if np.any(values < 0):
            fail(key, "log-amplitude variance must be nonnegative")
    if "sweep_dbm" in p and p["sweep_dbm"]["step"] <= 0:
        fail("sweep_dbm.step", "sweep step must be positive")
    if any(n < 0 for n in p.get("n_relays", ())):
        fail("n_relays", "relay counts must be nonnegative")
    if any(n < 1 for n in p.get("n_tx", ())):
        fail("n_tx", "transmitter counts must be positive")
    if any(n < 3 or n > 7 for n in p.get("anchors", ())):
        fail("anchors", "anchor counts must lie in [3, 7]")
    if any(not 0 < t < 0.5 for t in p.get("target_ber", ())):
        fail("target_ber", "target BERs must lie in (0, 0.5)")
    if any(n < 1 for n in p.get("n_rings", ())):
        fail("n_rings", "ring counts must be positive")
    return diagnostics


def _require_valid(scenario):
    diagnostics = validate(scenario)
    if diagnostics:
        raise ScenarioValidationError(diagnostics)


def _water(p):
    water = p["water"]
    if isinstance(water, dict):
        return WaterType(water["absorption"], water["scattering"], water.get("label", "custom"))
    return WaterType.preset(water)


def _responsivity(p):
    return responsivity(p["receiver"]["quantum_efficiency"], p["receiver"]["wavelength_nm"])


def _point_seed(*parts):
    return int(np.random.SeedSequence([int(x) for x in parts]).generate_state(1)[0])


def _pool_map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


def _frame(kind, rows, sort_by):
    frame = pd.DataFrame(rows, columns=COLUMNS[kind])
    return frame.sort_values(sort_by, kind="mergesort").reset_index(drop=True)


# -- relay BER sweep ----------------------------------------------------------------

def _relay_point(job):
    link, direction, dbm, nodes, mc_bits, min_ber, seed = job
    link = link.with_chip_power(chip_power_from_average(float(dbm_to_watts(dbm)), link.code_length, link.code_weight))
    result = average_ber_relay(link, direction, n_nodes=nodes)
    ber_mc = stderr = float("nan")
    if mc_bits > 0 and result.ber >= min_ber:
        mc = monte_carlo_ber(link, direction, mc_bits, seed)
        ber_mc, stderr = mc.estimate, mc.std_error
    return [dbm, direction, link.chain.n_relays, result.ber, ber_mc, stderr]


def run_relay_ber(scenario, workers=1):
    """BER against average power per bit for uplink and downlink relay chains."""
    _require_valid(scenario)
    p = scenario.params
    water = _water(p)
    geom = LinkGeometry(**p["link"])
    code = p["code"]
    rx = ReceiverModel(_responsivity(p), p["receiver"]["sigma_chip"], 1.0, 1.0 / (p["bit_rate"] * code["length"]))

    jobs = []
    for d_idx, direction in enumerate(p["directions"]):
        for n in p["n_relays"]:
            chain = RelayChain.equidistant(water, geom, n, p["sigma_x_sq"])
            link = LinkScenario(rx, code["length"], code["weight"], code["users"], chain,
                                max_correlation=code["max_correlation"])
            for i, dbm in enumerate(_sweep(p["sweep_dbm"])):
                jobs.append((link, direction, float(dbm), p["quadrature_nodes"], p["monte_carlo"]["bits"],
                             p["monte_carlo"]["min_ber"], _point_seed(scenario.seed, d_idx, n, i)))
    logger.info("relay-ber: %d grid points on %d worker(s)", len(jobs), workers)
    return _frame("relay-ber", _pool_map(_relay_point, jobs, workers), ["direction", "n_relays", "power_dbm"])


# -- localization trials ------------------------------------------------------------

def run_localization(scenario, workers=1):
    """Per-trial RSS (and optionally TDOA) position estimates for users in the central hexagonal cell."""
    _require_valid(scenario)
    p = scenario.params
    water = _water(p)
    r0 = p["cell_radius"]
    geom = LinkGeometry(r0, **p["link"])
    resp = _responsivity(p)
    poly = calibrate_distance_polynomial(water, geom, resp, p["transmit_power"], p["sample_time"],
                                         1.0, (1.0 + math.sqrt(3.0)) * r0,
                                         n_pairs=p["polynomial"]["pairs"], degree=p["polynomial"]["degree"])
    users = uniform_in_hexagon(r0, np.random.default_rng([scenario.seed, 0]), p["trials"])
    v = light_speed_in_water()

    rows = []
    extrapolated = ambiguous = 0
    for n in p["anchors"]:
        anchors = AnchorSet.from_points(hex_anchor_layout(r0, n))
        for trial, user in enumerate(users):
            if "rss-lls" in p["methods"]:
                rng = np.random.default_rng([scenario.seed, 1, trial])
                est = rss_localize(anchors, user, poly, water, geom, resp, p["transmit_power"], p["sample_time"],
                                   p["sigma_x_sq"], p["noise_std"], rng, p["samples_per_estimate"])
                extrapolated += est.extrapolated
                rows.append([trial, user[0], user[1], est.x, est.y, est.error(user), n, "rss-lls"])
            if "tdoa" in p["methods"]:
                rng = np.random.default_rng([scenario.seed, 2, trial])
                ranges = anchor_ranges(anchors, user)
                tdoa = (ranges[1:] - ranges[0]) / v + rng.normal(0.0, p["tdoa_jitter"], n - 1)
                try:
                    x, y = tdoa_position(anchors, tdoa, v)
                except AmbiguousPositionError:
                    ambiguous += 1
                    x = y = float("nan")
                rows.append([trial, user[0], user[1], x, y, math.hypot(x - user[0], y - user[1]), n, "tdoa"])
    if extrapolated:
        logger.warning("localization: %d RSS estimates used an extrapolated distance polynomial", extrapolated)
    if ambiguous:
        logger.warning("localization: %d TDOA solves were ambiguous", ambiguous)
    return _frame("localization", rows, ["method", "n_anchors", "trial"])


# -- MISO sweep -------------------------------------------------------------------------

def _miso_point(job):
    gamma_s, gamma_k, n_tx, s2, sigma_bit, dbm, nodes, mc_bits, min_ber, seed = job
    scale = 2.0 * float(dbm_to_watts(dbm)) / n_tx
    cfg = MimoConfig(np.full((n_tx, 1), gamma_s * scale), np.tile(gamma_k * scale, (n_tx, 1, 1)), s2, sigma_bit)
    result = mimo_average_ber(cfg, n_nodes=nodes, seed=seed)
    if result.warning:
        logger.warning("mimo-ber at %.1f dBm, Nt=%d: %s", dbm, n_tx, result.warning)
    ber_mc, stderr = float("nan"), result.std_error or float("nan")
    if mc_bits > 0 and result.ber >= min_ber:
        mc = mimo_monte_carlo_ber(cfg, mc_bits, seed)
        ber_mc, stderr = mc.estimate, mc.std_error
    return [dbm, n_tx, s2, result.ber, ber_mc, stderr]


def run_miso_ber(scenario, workers=1):
    """MISO BER with equal gain combining; ISI integrals come from a simulated impulse response."""
    _require_valid(scenario)
    p = scenario.params
    water = _water(p)
    geom = LinkGeometry(**p["link"])
    bit_time = 1.0 / p["bit_rate"]
    h0 = simulate_impulse_response(water, geom, p["photons"], scenario.seed, dt=bit_time / p["bins_per_bit"],
                                   n_bins=p["n_bins"], workers=workers)
    if h0.warning:
        logger.warning("mimo-ber: %s", h0.warning)
    else:
        fit = fit_double_gamma(h0)
        logger.info("mimo-ber: double-Gamma fit %s", fit.as_row())
    # unit peak power; each sweep point rescales
    pulse = RectangularPulse(bit_time, 1.0)
    memory = channel_memory(pulse, h0, bit_time)
    isi = isi_integrals(pulse, h0, bit_time, memory, resp=_responsivity(p))
    logger.info("mimo-ber: channel memory %d bit(s), gamma_s=%.3e", memory, isi.gamma_s)

    jobs = []
    for n_tx in p["n_tx"]:
        for s_idx, s2 in enumerate(p["sigma_x_sq"]):
            for i, dbm in enumerate(_sweep(p["sweep_dbm"])):
                jobs.append((isi.gamma_s, np.asarray(isi.gamma_k, dtype=float), n_tx, float(s2),
                             p["receiver"]["sigma_bit"], float(dbm), p["quadrature_nodes"],
                             p["monte_carlo"]["bits"], p["monte_carlo"]["min_ber"],
                             _point_seed(scenario.seed, n_tx, s_idx, i)))
    return _frame("mimo-ber", _pool_map(_miso_point, jobs, workers), ["sigma_x_sq", "n_tx", "power_dbm"])


# -- ring power control -----------------------------------------------------------------

def _power_point(job):
    model, target, n_rings, cap, distribution = job
    plan = allocate_ring_powers(target, equal_area_rings(model.cell_radius, n_rings), model, cap_dbm=cap)
    return [target, n_rings, average_power_per_bit(plan, distribution)[1]]


def run_power_control(scenario, workers=1):
    """Average transmitted power per bit against target BER for equal-area ring plans."""
    _require_valid(scenario)
    p = scenario.params
    code = p["code"]
    r0 = p["cell_radius"]
    model = DownlinkModel(
        water=_water(p),
        geom=LinkGeometry(r0, **p["link"]),
        receiver=ReceiverModel(_responsivity(p), p["receiver"]["sigma_chip"], 1.0,
                               1.0 / (p["bit_rate"] * code["length"])),
        code_length=code["length"],
        code_weight=code["weight"],
        n_users=code["users"],
        cell_radius=r0,
        edge_sigma_x_sq=p["edge_sigma_x_sq"],
    )
    jobs = [(model, t, n, p["power_cap_dbm"], p["distribution"]) for t in p["target_ber"] for n in p["n_rings"]]
    return _frame("power-control", _pool_map(_power_point, jobs, workers), ["n_rings", "target_ber"])


RUNNERS = {
    "relay-ber": run_relay_ber,
    "localization": run_localization,
    "mimo-ber": run_miso_ber,
    "power-control": run_power_control,
}


def run(scenario, workers=None):
    """
    Dispatches a scenario to its experiment.

    Args:
        scenario (Scenario): Loaded scenario.
        workers (int | None): Worker processes; defaults to UWOC_WORKERS.

    Returns:
        pandas.DataFrame: Rows in the CSV schema of the scenario kind, sorted deterministically.
    """
    return RUNNERS[scenario.kind](scenario, workers=settings.WORKERS if workers is None else workers)
