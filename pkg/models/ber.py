"""Analytical and Monte Carlo bit error rates for relay-assisted OCDMA and MIMO links."""
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import reduce

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import erfc

from models.channel import FadingModel, aggregated_loss, sample_fading
from models.errors import ParameterError
from models.ooc import generate_family

logger = logging.getLogger(__name__)

DIRECTIONS = ("uplink", "downlink")
MC_BLOCK = 50_000


def qfunc(x):
    """Gaussian tail probability Q(x) = erfc(x / sqrt(2)) / 2."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))


def chip_power_from_average(avg_power, F, W):
    """Chip power Pc of an OOK user sending P_avg per bit on average (half the bits are ones)."""
    return 2.0 * F * avg_power / W


def average_from_chip_power(chip_power, F, W):
    return W * chip_power / (2.0 * F)


def dbm_to_watts(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watts_to_dbm(watts):
    return 10.0 * np.log10(np.asarray(watts, dtype=float)) + 30.0


@dataclass(frozen=True)
class ReceiverModel:
    """Chip-level photodetector: responsivity, noise per integration window, chip power and time."""

    responsivity: float
    sigma_chip: float
    chip_power: float
    chip_time: float
    sigma_bit: float | None = None

    def __post_init__(self):
        for name in ("responsivity", "sigma_chip", "chip_power", "chip_time"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"receiver {name} must be positive, got {getattr(self, name)}")
        if self.sigma_bit is not None and self.sigma_bit <= 0:
            raise ParameterError("receiver sigma_bit must be positive")

    @property
    def amplitude(self):
        """Integrated photocurrent R * Pc * Tc of an unattenuated ON chip."""
        return self.responsivity * self.chip_power * self.chip_time

    def with_chip_power(self, chip_power):
        return replace(self, chip_power=chip_power)


@dataclass(frozen=True)
class InterferencePattern:
    alpha: tuple
    n_users: int

    def __post_init__(self):
        if any(a < 0 for a in self.alpha):
            raise ParameterError("interference counts must be nonnegative")
        if self.l > self.n_users - 1:
            raise ParameterError(f"{self.l} hits exceed the {self.n_users - 1} interferers")

    @property
    def l(self):
        return sum(self.alpha)


@dataclass(frozen=True)
class RelayChain:
    """
    Serial chain of N relays; hop i has loss hop_losses[i] and fading variance hop_sigma_x_sq[i].

    Uplink interferers reach the first relay over their own link,
    (interferer_loss, interferer_sigma_x_sq). Left unset, they share the
    desired user's first hop.
    """

    hop_losses: tuple
    hop_sigma_x_sq: tuple
    interferer_loss: float | None = None
    interferer_sigma_x_sq: float | None = None

    def __post_init__(self):
        if len(self.hop_losses) < 1 or len(self.hop_losses) != len(self.hop_sigma_x_sq):
            raise ParameterError("relay chain needs one loss and one fading variance per hop")
        if any(not 0 < loss <= 1 for loss in self.hop_losses):
            raise ParameterError(f"hop losses must lie in (0, 1], got {self.hop_losses}")
        if any(s < 0 for s in self.hop_sigma_x_sq):
            raise ParameterError("hop fading variances must be nonnegative")
        if self.interferer_loss is not None and not 0 < self.interferer_loss <= 1:
            raise ParameterError(f"interferer loss must lie in (0, 1], got {self.interferer_loss}")
        if self.interferer_sigma_x_sq is not None and self.interferer_sigma_x_sq < 0:
            raise ParameterError("interferer fading variance must be nonnegative")

    @property
    def n_relays(self):
        return len(self.hop_losses) - 1

    @property
    def hops(self):
        return list(zip(self.hop_losses, self.hop_sigma_x_sq))

    @property
    def interferer_link(self):
        """(loss, fading variance) from an interfering user to the first relay."""
        loss = self.hop_losses[0] if self.interferer_loss is None else self.interferer_loss
        s2 = self.hop_sigma_x_sq[0] if self.interferer_sigma_x_sq is None else self.interferer_sigma_x_sq
        return loss, s2

    @classmethod
    def equidistant(cls, water, geom, n_relays, sigma_x_sq, colocated_interferers=False):
        """
        Splits `geom.range_m` into N+1 equal hops.

        The fading variance is given for the full range and scales linearly
        with hop length. The relays serve the desired user only; the other
        users of the cell stay at the full range from the first relay, with
        the full-range loss and fading. `colocated_interferers` puts them at
        the desired user's position instead.
        """
        hop = geom.range_m / (n_relays + 1)
        loss = aggregated_loss(water, geom, hop)
        hops = n_relays + 1
        if colocated_interferers:
            return cls(tuple([loss] * hops), tuple([sigma_x_sq * hop / geom.range_m] * hops))
        return cls(tuple([loss] * hops), tuple([sigma_x_sq * hop / geom.range_m] * hops),
                   interferer_loss=aggregated_loss(water, geom, geom.range_m), interferer_sigma_x_sq=sigma_x_sq)


@dataclass(frozen=True)
class LinkScenario:
    """Everything the relay BER needs; the uplink interferer link comes from the chain."""

    receiver: ReceiverModel
    code_length: int
    code_weight: int
    n_users: int
    chain: RelayChain
    max_correlation: int = 1

    def __post_init__(self):
        if self.n_users < 1:
            raise ParameterError("at least one user is required")
        if self.code_weight < 1 or self.code_weight > self.code_length:
            raise ParameterError("code weight must lie in [1, F]")
        if self.code_weight ** 2 > 2 * self.code_length:
            raise ParameterError("hit model needs W^2 <= 2F")

    def mai_free_downlink(self):
        """Synchronous downlink condition M < F / W^2 + 1."""
        return self.n_users < self.code_length / self.code_weight ** 2 + 1

    def with_chip_power(self, chip_power):
        return replace(self, receiver=self.receiver.with_chip_power(chip_power))


@dataclass
class BerResult:
    ber: float
    p10: float = 0.0
    p01: float = 0.0
    uncovered_mass: float = 0.0
    std_error: float = 0.0
    warning: str | None = None

    def __float__(self):
        return float(self.ber)


@dataclass
class MonteCarloResult:
    estimate: float
    std_error: float
    n_bits: int
    n_errors: int


@dataclass
class MimoConfig:
    """
    Nt x Nr intensity-modulated link with an equal gain combiner.

    gamma_s[i, j] and gamma_k[i, j, k] are the signal and ISI integrals of
    path i -> j; gamma_k[..., k] belongs to the bit k+1 periods back.
    """

    gamma_s: np.ndarray
    gamma_k: np.ndarray
    sigma_x_sq: np.ndarray
    sigma_bit: float

    def __post_init__(self):
        self.gamma_s = np.atleast_2d(np.asarray(self.gamma_s, dtype=float))
        shape = self.gamma_s.shape
        gamma_k = np.asarray(self.gamma_k, dtype=float)
        if gamma_k.size == 0:
            gamma_k = np.zeros(shape + (0,))
        self.gamma_k = gamma_k.reshape(shape + (-1,))
        self.sigma_x_sq = np.broadcast_to(np.asarray(self.sigma_x_sq, dtype=float), shape).copy()
        if self.sigma_bit <= 0:
            raise ParameterError("sigma_bit must be positive")
        if np.any(self.sigma_x_sq < 0):
            raise ParameterError("path fading variances must be nonnegative")

    @property
    def n_tx(self):
        return self.gamma_s.shape[0]

    @property
    def n_rx(self):
        return self.gamma_s.shape[1]

    @property
    def memory(self):
        return self.gamma_k.shape[2]

    @property
    def isi_free(self):
        return self.memory == 0 or not np.any(self.gamma_k)


def lognormal_nodes(sigma_x_sq, n_nodes):
    """Gauss-Hermite nodes and normalised weights for h = exp(2x), x ~ N(-sigma^2, sigma^2)."""
    if n_nodes < 1:
        raise ParameterError("n_nodes must be >= 1")
    if sigma_x_sq == 0:
        return np.ones(1), np.ones(1)
    x, w = hermgauss(n_nodes)
    h = np.exp(2.0 * (math.sqrt(2.0 * sigma_x_sq) * x - sigma_x_sq))
    return h, w / math.sqrt(math.pi)


def _normal_nodes(n_nodes):
    x, w = hermgauss(n_nodes)
    return math.sqrt(2.0) * x, w / math.sqrt(math.pi)


def gauss_hermite_lognormal_expectation(f, sigma_x_sq, n_nodes):
    """
    E[f(h)] over the normalised log-normal fading.

    Args:
        f (callable): Vectorised function of h.
        sigma_x_sq (float): Log-amplitude variance.
        n_nodes (int): Hermite nodes.

    Returns:
        float: (1/sqrt(pi)) sum_i w_i f(exp(2(sqrt(2) sigma x_i + mu))).
    """
    h, w = lognormal_nodes(sigma_x_sq, n_nodes)
    return float(np.sum(w * np.broadcast_to(np.asarray(f(h), dtype=float), h.shape)))


def cer_first_hop_uplink(bit, h11, beta, rx, loss):
    """
    Chip error rate of the first uplink hop under MAI.

    Returns Q(A (h11 L11 / 2 - beta) / sigma) for an OFF chip and
    Q(A (h11 L11 / 2 + beta) / sigma) for an ON chip, A = R Pc Tc.
    """
    if rx.sigma_chip <= 0:
        raise ParameterError("sigma_chip must be positive")
    sign = -1.0 if bit == 0 else 1.0
    return qfunc(rx.amplitude * (np.asarray(h11) * loss / 2.0 + sign * np.asarray(beta)) / rx.sigma_chip)


def cer_mai_free(h, rx, loss):
    """Symmetric chip error rate Q(R Pc Tc h L / (2 sigma)) of an interference-free hop."""
    return qfunc(rx.amplitude * np.asarray(h) * loss / (2.0 * rx.sigma_chip))


def e2e_cer(per_hop):
    """1 - prod_i (1 - P_i) along the first axis."""
    per_hop = np.asarray(per_hop, dtype=float)
    return 1.0 - np.prod(1.0 - per_hop, axis=0)


def conditional_ber(p10_chips, p01_chips):
    """AND-rule bit errors from per-mark chip errors: (prod P(1|0), 1 - prod(1 - P(0|1)))."""
    p10 = np.asarray(p10_chips, dtype=float)
    p01 = np.asarray(p01_chips, dtype=float)
    return np.prod(p10, axis=0), 1.0 - np.prod(1.0 - p01, axis=0)


def interference_patterns(n_users, W, F, mass_tolerance=1e-9):
    """
    Enumerates the hit patterns of the M-1 interferers on the W marks.

    Each interferer lands on a given mark with probability W / (2F) and
    misses otherwise; patterns are taken in order of increasing hit count
    until the covered probability reaches 1 - mass_tolerance.

    Returns:
        tuple[list[tuple[InterferencePattern, float]], float]: Patterns with
        their probabilities, and the uncovered probability mass.
    """
    p = W / (2.0 * F)
    miss = 1.0 - W * p
    if miss < 0:
        raise ParameterError("hit probability exceeds one; need W^2 <= 2F")
    n_int = n_users - 1
    patterns = []
    covered = 0.0
    for l in range(n_int + 1):
        level = math.comb(n_int, l) * p ** l * miss ** (n_int - l)
        for alpha in itertools.product(range(l + 1), repeat=W):
            if sum(alpha) != l:
                continue
            prob = level * math.factorial(l) / math.prod(math.factorial(a) for a in alpha)
            patterns.append((InterferencePattern(alpha, n_users), prob))
            covered += prob
        if covered >= 1.0 - mass_tolerance:
            break
    return patterns, max(0.0, 1.0 - covered)


def _lognormal_survival(y, scale, sigma_x_sq):
    """P(scale * h > y) for the normalised log-normal h; 1 for y <= 0."""
    y = np.asarray(y, dtype=float)
    if sigma_x_sq == 0:
        return np.where(y < scale, 1.0, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (0.5 * np.log(np.maximum(y, 1e-300) / scale) + sigma_x_sq) / math.sqrt(sigma_x_sq)
    return np.where(y > 0, qfunc(z), 1.0)


def _mai_tables(h1, scenario, max_hits, inner_nodes, mc_samples):
    """
    Chip error tables averaged over the interferer sum beta for 0..max_hits hits.

    T10[a](h1) = E[Q(A (h1 L / 2 - beta) / sigma)] is averaged noise first,
    as P(beta > h1 L / 2 - sigma Z / A), which is smooth in every variable.
    """
    rx = scenario.receiver
    L1 = scenario.chain.hop_losses[0]
    LI, sI = scenario.chain.interferer_link
    u = h1 * L1 / 2.0
    noise = rx.sigma_chip / rx.amplitude
    t10 = [cer_mai_free(h1, rx, L1)]
    t01 = [t10[0]]
    z_nodes, z_weights = _normal_nodes(2 * inner_nodes)
    h_nodes, h_weights = lognormal_nodes(sI, inner_nodes)

    for a in range(1, max_hits + 1):
        if a <= 3:
            # a-1 interferers plus noise on the grid, the last one in closed form
            grids = [z_nodes] + [h_nodes] * (a - 1)
            weights = reduce(np.multiply.outer, [z_weights] + [h_weights] * (a - 1)).ravel()
            mesh = [g.ravel() for g in np.meshgrid(*grids, indexing="ij")]
            others = LI * sum(mesh[1:]) if a > 1 else np.zeros_like(mesh[0])
            y = u[:, None] - noise * mesh[0][None, :] - others[None, :]
            t10.append(_lognormal_survival(y, LI, sI) @ weights)

            beta_grid = reduce(np.multiply.outer, [h_weights] * a).ravel()
            sums = LI * sum(g.ravel() for g in np.meshgrid(*([h_nodes] * a), indexing="ij"))
            t01.append(cer_first_hop_uplink(1, h1[:, None], sums[None, :], rx, L1) @ beta_grid)
        else:
            rng = np.random.default_rng(20_240 + a)
            z = rng.standard_normal(mc_samples)
            fading = FadingModel(sI)
            others = LI * sample_fading(fading, rng, (mc_samples, a - 1)).sum(axis=1)
            y = u[:, None] - noise * z[None, :] - others[None, :]
            t10.append(_lognormal_survival(y, LI, sI).mean(axis=1))
            beta = LI * sample_fading(fading, rng, (mc_samples, a)).sum(axis=1)
            t01.append(cer_first_hop_uplink(1, h1[:, None], beta[None, :], rx, L1).mean(axis=1))
    return t10, t01


def _survival_grid(hops, rx, n_nodes):
    """Product-grid probability that every listed MAI-free hop passes a chip unchanged."""
    survive = np.ones(1)
    weights = np.ones(1)
    for loss, s2 in hops:
        h, w = lognormal_nodes(s2, n_nodes)
        survive = np.multiply.outer(survive, 1.0 - cer_mai_free(h, rx, loss)).ravel()
        weights = np.multiply.outer(weights, w).ravel()
    return survive, weights


def average_ber_relay(scenario, direction, n_nodes=30, mass_tolerance=1e-9, inner_nodes=8, mc_samples=4096):
    """
    Fading- and pattern-averaged BER of an N-relay chip detect-and-forward link.

    The uplink suffers MAI on its first hop only; later hops and the whole
    synchronous downlink are interference free.

    Args:
        scenario (LinkScenario): Receiver, code, users and relay chain.
        direction (str): 'uplink' or 'downlink'.
        n_nodes (int): Hermite nodes per hop fading.
        mass_tolerance (float): Pattern probability mass that may stay unenumerated.
        inner_nodes (int): Hermite nodes per interferer in the MAI tables.
        mc_samples (int): Samples per table entry beyond three hits on one chip.

    Returns:
        BerResult: ber = E[(P(1|0) + P(0|1)) / 2].
    """
    if direction not in DIRECTIONS:
        raise ParameterError(f"direction must be one of {DIRECTIONS}, got '{direction}'")
    rx = scenario.receiver
    W = scenario.code_weight
    hops = scenario.chain.hops

    if direction == "downlink":
        if not scenario.mai_free_downlink():
            raise ParameterError(
                f"synchronous downlink needs M < F/W^2 + 1, got M={scenario.n_users}, "
                f"F={scenario.code_length}, W={W}")
        survive, weights = _survival_grid(hops, rx, n_nodes)
        p10 = (1.0 - survive) ** W
        p01 = 1.0 - survive ** W
        return BerResult(float(weights @ (0.5 * (p10 + p01))), float(weights @ p10), float(weights @ p01))

    patterns, uncovered = interference_patterns(scenario.n_users, W, scenario.code_length, mass_tolerance)
    h1, w1 = lognormal_nodes(hops[0][1], n_nodes)
    rest, w_rest = _survival_grid(hops[1:], rx, n_nodes)
    max_hits = max(max(p.alpha) for p, _ in patterns)
    t10, t01 = _mai_tables(h1, scenario, max_hits, inner_nodes, mc_samples)

    ber = p10_total = p01_total = 0.0
    for pattern, prob in patterns:
        f10 = np.ones((len(h1), len(rest)))
        keep01 = np.ones(len(h1))
        for a in pattern.alpha:
            f10 *= 1.0 - (1.0 - t10[a])[:, None] * rest[None, :]
            keep01 *= 1.0 - t01[a]
        f01 = 1.0 - keep01[:, None] * rest[None, :] ** W
        p10 = w1 @ f10 @ w_rest
        p01 = w1 @ f01 @ w_rest
        p10_total += prob * p10
        p01_total += prob * p01
        ber += prob * 0.5 * (p10 + p01)

    warning = None
    if uncovered > mass_tolerance:
        warning = f"interference patterns leave {uncovered:.3g} probability mass uncovered"
        logger.warning(warning)
    return BerResult(float(ber), float(p10_total), float(p01_total), uncovered_mass=uncovered, warning=warning)


def _expected_min(values, weights):
    """E[min_k B_k] for independent discrete B_k given as (values, weights) lists."""
    grid = np.unique(np.concatenate(values))
    tail = np.ones_like(grid)
    for v, w in zip(values, weights):
        order = np.argsort(v)
        v, w = v[order], w[order]
        cumulative = np.concatenate([[0.0], np.cumsum(w)])
        tail *= 1.0 - cumulative[np.searchsorted(v, grid, side="right")]
    previous = np.concatenate([[1.0], tail[:-1]])
    return float(np.sum(grid * (previous - tail)))


def average_ber_relay_selection(receiver, code_weight, branches, n_nodes=20):
    """
    BER of parallel MAI-free relay paths when the base station picks the most reliable path.

    With perfect CSI the path with the lowest conditional BER carries each
    bit, so the result is E[min_k BER_k(h_k)] over independent branches.

    Args:
        receiver (ReceiverModel): Common chip receiver.
        code_weight (int): W.
        branches (list[RelayChain]): One chain per parallel path.
        n_nodes (int): Hermite nodes per hop.

    Returns:
        float: Selection-combined BER.
    """
    if not branches:
        raise ParameterError("at least one relay branch is required")
    values, weights = [], []
    for chain in branches:
        survive, w = _survival_grid(chain.hops, receiver, n_nodes)
        values.append(0.5 * ((1.0 - survive) ** code_weight + 1.0 - survive ** code_weight))
        weights.append(w)
    return _expected_min(values, weights)


def mimo_conditional_ber(cfg, b0, H, b_seq):
    """
    Conditional BER of the equal gain combiner for a fading matrix and an ISI sequence.

    Returns Q((S - (-1)^b0 * 2 * I) / (2 sqrt(Nr) sigma_Tb)) with
    S = sum h_ij gamma_s_ij and I = sum h_ij sum_k b_k gamma_k_ij.
    """
    H = np.asarray(H, dtype=float)
    b_seq = np.asarray(b_seq, dtype=float).reshape(-1)
    signal = float(np.sum(H * cfg.gamma_s))
    isi = float(np.sum(H * (cfg.gamma_k @ b_seq))) if cfg.memory else 0.0
    sign = 1.0 if b0 == 0 else -1.0
    return float(qfunc((signal - sign * 2.0 * isi) / (2.0 * math.sqrt(cfg.n_rx) * cfg.sigma_bit)))


def _fading_grid(cfg, n_nodes):
    nodes, weights = [], []
    for s2 in cfg.sigma_x_sq.ravel():
        h, w = lognormal_nodes(float(s2), n_nodes)
        nodes.append(h)
        weights.append(w)
    mesh = np.meshgrid(*nodes, indexing="ij")
    H = np.stack([m.ravel() for m in mesh], axis=1)
    return H, reduce(np.multiply.outer, weights).ravel()


def _sequences(memory):
    return np.array(list(itertools.product((0.0, 1.0), repeat=memory))).reshape(-1, memory)


def _mimo_ber_samples(cfg, H, sequences):
    """Sequence-averaged BER for each fading sample (rows of H, paths flattened)."""
    denom = 2.0 * math.sqrt(cfg.n_rx) * cfg.sigma_bit
    signal = H @ cfg.gamma_s.ravel()
    if cfg.memory == 0:
        return qfunc(signal / denom)
    per_lag = H @ cfg.gamma_k.reshape(-1, cfg.memory)
    isi = per_lag @ sequences.T
    ber = 0.5 * (qfunc((signal[:, None] - 2.0 * isi) / denom) + qfunc((signal[:, None] + 2.0 * isi) / denom))
    return ber.mean(axis=1)


def mimo_ber_isi_free(cfg, n_nodes=20):
    """Fast path without ISI: E_H[Q(sum h_ij gamma_s_ij / (2 sqrt(Nr) sigma_Tb))]."""
    H, weights = _fading_grid(cfg, n_nodes)
    signal = H @ cfg.gamma_s.ravel()
    return float(weights @ qfunc(signal / (2.0 * math.sqrt(cfg.n_rx) * cfg.sigma_bit)))


def mimo_average_ber(cfg, n_nodes=20, budget=4_000_000, mc_samples=200_000, seed=0, fast_path=True):
    """
    BER averaged over all 2^Lmax ISI sequences and the Nt x Nr fading matrix.

    The fading expectation is a Gauss-Hermite product sum over every path.
    When nodes^(Nt Nr) * 2^Lmax exceeds `budget` the fading is averaged by
    Monte Carlo instead and a standard error is reported.

    Returns:
        BerResult: ber, with std_error set on the Monte Carlo fallback.
    """
    if fast_path and cfg.isi_free:
        return BerResult(mimo_ber_isi_free(cfg, n_nodes))
    sequences = _sequences(cfg.memory)
    n_paths = cfg.n_tx * cfg.n_rx
    cost = float(n_nodes) ** n_paths * len(sequences)
    if cost <= budget:
        H, weights = _fading_grid(cfg, n_nodes)
        return BerResult(float(weights @ _mimo_ber_samples(cfg, H, sequences)))

    rng = np.random.default_rng(seed)
    if len(sequences) > 4096:
        sequences = rng.integers(0, 2, (4096, cfg.memory)).astype(float)
    H = np.exp(2.0 * rng.normal(-cfg.sigma_x_sq.ravel(), np.sqrt(cfg.sigma_x_sq.ravel()), (mc_samples, n_paths)))
    samples = _mimo_ber_samples(cfg, H, sequences)
    warning = f"quadrature cost {cost:.3g} over budget; averaged {mc_samples} fading samples"
    logger.warning(warning)
    return BerResult(float(samples.mean()), std_error=float(samples.std(ddof=1) / math.sqrt(mc_samples)),
                     warning=warning)


def mimo_monte_carlo_ber(cfg, n_bits, seed, block_size=MC_BLOCK):
    """Bit-level simulation of the combiner: explicit fading, data, ISI and Gaussian noise."""
    if n_bits < 1:
        raise ParameterError("n_bits must be >= 1")
    errors = 0
    done = 0
    block = 0
    while done < n_bits:
        n = min(block_size, n_bits - done)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block])))
        s2 = cfg.sigma_x_sq.ravel()
        H = np.exp(2.0 * rng.normal(-s2, np.sqrt(s2), (n, s2.size)))
        b0 = rng.integers(0, 2, n)
        past = rng.integers(0, 2, (n, cfg.memory)).astype(float)
        signal = H @ cfg.gamma_s.ravel()
        isi = np.sum((H @ cfg.gamma_k.reshape(-1, cfg.memory)) * past, axis=1) if cfg.memory else 0.0
        noise = rng.normal(0.0, math.sqrt(cfg.n_rx) * cfg.sigma_bit, n)
        received = b0 * signal + isi + noise
        errors += int(np.sum((received > signal / 2.0).astype(int) != b0))
        done += n
        block += 1
    estimate = errors / n_bits
    return MonteCarloResult(estimate, math.sqrt(estimate * (1 - estimate) / n_bits), n_bits, errors)


def _relay_hops(tx, fading_draws, rng, rx, hops):
    """Passes ON/OFF chip states through MAI-free detect-and-forward hops."""
    for (loss, _), h in zip(hops, fading_draws):
        level = rx.amplitude * h[:, None] * loss
        received = tx * level + rx.sigma_chip * rng.standard_normal(tx.shape)
        tx = (received > level / 2.0).astype(float)
    return tx


def _simulate_block(job):
    scenario, direction, codes, n, seed, block = job
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block])))
    rx = scenario.receiver
    hops = scenario.chain.hops
    W = scenario.code_weight
    F = scenario.code_length
    bits = rng.integers(0, 2, n)
    draws = [sample_fading(FadingModel(s2), rng, n) for _, s2 in hops]
    marks = np.asarray(codes[0].marks)

    if direction == "uplink":
        loss, _ = hops[0]
        h1 = draws[0]
        level = rx.amplitude * h1[:, None] * loss
        interferer_loss, interferer_s2 = scenario.chain.interferer_link
        mai = np.zeros((n, W))
        for code in codes[1:]:
            chips = code.chips()
            delay = rng.integers(0, F, n)
            current = rng.integers(0, 2, n)
            previous = rng.integers(0, 2, n)
            shifted = (marks[None, :] - delay[:, None]) % F
            data = np.where(marks[None, :] >= delay[:, None], current[:, None], previous[:, None])
            h = sample_fading(FadingModel(interferer_s2), rng, n)
            mai += chips[shifted] * data * h[:, None]
        received = (bits[:, None] * level + rx.amplitude * interferer_loss * mai
                    + rx.sigma_chip * rng.standard_normal((n, W)))
        tx = (received > level / 2.0).astype(float)
        tx = _relay_hops(tx, draws[1:], rng, rx, hops[1:])
    else:
        tx = np.repeat(bits[:, None].astype(float), W, axis=1)
        tx = _relay_hops(tx, draws, rng, rx, hops)

    decided = np.all(tx > 0.5, axis=1).astype(int)
    return int(np.sum(decided != bits))


def monte_carlo_ber(scenario, direction, n_bits, seed, workers=1, family=None, block_size=MC_BLOCK):
    """
    Chip-level end-to-end simulation used as an oracle for `average_ber_relay`.

    Uplink interferers send real codes with uniform random chip delays and
    independent data, so the current or previous bit of each interferer
    lands on the desired marks. Every hop draws one fading coefficient per
    bit shared by its W chips, adds Gaussian noise per chip and forwards the
    hard chip decisions; the destination applies the AND rule.

    Args:
        scenario (LinkScenario): Link description.
        direction (str): 'uplink' or 'downlink'.
        n_bits (int): Bits simulated.
        seed (int): Root seed; block b uses the stream (seed, b).
        workers (int): Worker processes.
        family (OocFamily | None): Codes; generated from the seed when absent.
        block_size (int): Bits per block.

    Returns:
        MonteCarloResult: Error frequency and binomial standard error.
    """
    if direction not in DIRECTIONS:
        raise ParameterError(f"direction must be one of {DIRECTIONS}, got '{direction}'")
    if n_bits < 1:
        raise ParameterError("n_bits must be >= 1")
    if family is None:
        family = generate_family(scenario.code_length, scenario.code_weight, scenario.max_correlation,
                                 scenario.n_users, seed)
    if len(family) < scenario.n_users:
        raise ParameterError(f"{scenario.n_users} users need as many codes, found {len(family)}")
    codes = list(family)[: scenario.n_users]

    sizes = [block_size] * (n_bits // block_size)
    if n_bits % block_size:
        sizes.append(n_bits % block_size)
    jobs = [(scenario, direction, codes, n, seed, i) for i, n in enumerate(sizes)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            errors = sum(pool.map(_simulate_block, jobs))
    else:
        errors = sum(_simulate_block(job) for job in jobs)
    estimate = errors / n_bits
    return MonteCarloResult(estimate, math.sqrt(estimate * (1.0 - estimate) / n_bits), n_bits, errors)
