"""Underwater optical channel: extinction, photon transport, double-Gamma fit, fading and ISI."""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from models.errors import DegenerateResponseError, ParameterError

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0
WATER_REFRACTIVE_INDEX = 1.33
ELECTRON_CHARGE = 1.602176634e-19
PLANCK = 6.62607015e-34

HG_ASYMMETRY = 0.924
ROULETTE_THRESHOLD = 1e-6
ROULETTE_CHANCE = 0.1
PHOTON_BATCH = 20_000


def light_speed_in_water(refractive_index=WATER_REFRACTIVE_INDEX):
    return SPEED_OF_LIGHT / refractive_index


@dataclass(frozen=True)
class WaterType:
    absorption: float
    scattering: float
    label: str = "custom"

    def __post_init__(self):
        if self.absorption < 0 or self.scattering < 0:
            raise ParameterError(f"water coefficients must be nonnegative, got a={self.absorption}, b={self.scattering}")

    @property
    def extinction(self):
        return self.absorption + self.scattering

    @property
    def albedo(self):
        c = self.extinction
        return self.scattering / c if c > 0 else 0.0

    @classmethod
    def preset(cls, name):
        """Looks up one of the named water types."""
        try:
            return WATER_TYPES[name]
        except KeyError:
            raise ParameterError(f"unknown water type '{name}', expected one of {sorted(WATER_TYPES)}") from None


WATER_TYPES = {
    "pure-sea": WaterType(0.0405, 0.0025, "pure-sea"),
    "clear-ocean": WaterType(0.114, 0.037, "clear-ocean"),
    "coastal": WaterType(0.179, 0.219, "coastal"),
}


@dataclass(frozen=True)
class LinkGeometry:
    """Point-to-point link: range, full beam divergence, aperture diameter, full field of view."""

    range_m: float
    beam_divergence: float = 0.0
    aperture_diameter: float = 0.2
    field_of_view: float = math.pi
    wavelength_nm: float = 532.0

    def __post_init__(self):
        if self.range_m <= 0:
            raise ParameterError(f"link range must be positive, got {self.range_m}")
        if self.aperture_diameter <= 0:
            raise ParameterError(f"aperture diameter must be positive, got {self.aperture_diameter}")
        if self.beam_divergence < 0 or self.field_of_view <= 0:
            raise ParameterError("beam divergence must be >= 0 and field of view > 0")


@dataclass
class ImpulseResponse:
    """Binned fading-free response; weights are fractions of transmitted power per bin."""

    t0: float
    dt: float
    weights: np.ndarray
    n_photons: int = 0
    weight_sq: float = 0.0
    warning: str | None = None

    @property
    def total_weight(self):
        return float(np.sum(self.weights))

    def std_error(self):
        """Monte Carlo standard error of the total captured weight."""
        if self.n_photons == 0:
            return 0.0
        mean = self.total_weight / self.n_photons
        var = max(self.weight_sq / self.n_photons - mean * mean, 0.0)
        return math.sqrt(var / self.n_photons)

    def times(self):
        """Bin-centre times in seconds."""
        return self.t0 + (np.arange(len(self.weights)) + 0.5) * self.dt

    def density(self):
        """Response in 1/s at the bin centres."""
        return np.asarray(self.weights, dtype=float) / self.dt

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("t0,dt\n")
            f.write(f"{self.t0!r},{self.dt!r}\n")
            for w in self.weights:
                f.write(f"{float(w)!r}\n")

    @classmethod
    def from_csv(cls, path):
        with open(path) as f:
            lines = [line.strip() for line in f if line.strip()]
        if not lines or lines[0] != "t0,dt":
            raise ParameterError(f"{path}: missing 't0,dt' header")
        t0, dt = (float(v) for v in lines[1].split(","))
        return cls(t0, dt, np.array([float(v) for v in lines[2:]]))


@dataclass(frozen=True)
class DoubleGammaParams:
    c1: float
    c2: float
    c3: float
    c4: float
    t0: float

    def __post_init__(self):
        if self.c2 <= 0 or self.c4 <= 0:
            raise ParameterError("double-Gamma decay rates C2 and C4 must be positive")


@dataclass
class FitResult:
    params: DoubleGammaParams
    residual: float
    relative_residual: float
    converged: bool
    n_evaluations: int

    def as_row(self):
        """CSV-ready report of the fit."""
        p = self.params
        return {"c1": p.c1, "c2": p.c2, "c3": p.c3, "c4": p.c4, "t0": p.t0,
                "residual": self.residual, "relative_residual": self.relative_residual,
                "converged": self.converged}


@dataclass(frozen=True)
class FadingModel:
    """Log-normal turbulence with log-amplitude variance sigma_x_sq and mean -sigma_x_sq."""

    sigma_x_sq: float

    def __post_init__(self):
        if self.sigma_x_sq < 0:
            raise ParameterError(f"log-amplitude variance must be >= 0, got {self.sigma_x_sq}")

    @property
    def mu_x(self):
        return -self.sigma_x_sq

    @classmethod
    def from_scintillation(cls, sigma_i_sq):
        return cls(scintillation_to_logvar(sigma_i_sq))


@dataclass(frozen=True)
class RectangularPulse:
    width: float
    power: float

    def samples(self, dt):
        n = max(1, int(round(self.width / dt)))
        return np.full(n, float(self.power))


@dataclass
class IsiIntegrals:
    gamma_s: float
    gamma_k: np.ndarray  # gamma_k[j] is the window j+1 bits before the current one
    resampled: bool = False

    @property
    def memory(self):
        return len(self.gamma_k)


def responsivity(quantum_efficiency, wavelength_nm):
    """Photodetector responsivity R = eta * q / (h f) in A/W."""
    frequency = SPEED_OF_LIGHT / (wavelength_nm * 1e-9)
    return quantum_efficiency * ELECTRON_CHARGE / (PLANCK * frequency)


def beer_loss(c, L):
    """Exponential extinction exp(-c L)."""
    if c < 0 or L < 0:
        raise ParameterError(f"extinction and range must be >= 0, got c={c}, L={L}")
    return math.exp(-c * L)


def geometric_loss(geom, distance=None):
    """Fraction of a diverging beam's spot that falls on the receiver aperture."""
    d = geom.range_m if distance is None else distance
    if geom.beam_divergence <= 0 or d <= 0:
        return 1.0
    spot = 2.0 * d * math.tan(geom.beam_divergence / 2.0)
    return min(1.0, (geom.aperture_diameter / spot) ** 2)


def aggregated_loss(water, geom, distance=None):
    """Extinction times geometric capture at `distance` (defaults to the link range)."""
    d = geom.range_m if distance is None else distance
    return beer_loss(water.extinction, d) * geometric_loss(geom, d)


def _spin(dirs, g, rng):
    """Deflects unit direction vectors by Henyey-Greenstein polar angles and uniform azimuths."""
    n = len(dirs)
    if g == 0:
        cost = 2.0 * rng.random(n) - 1.0
    else:
        temp = (1.0 - g * g) / (1.0 - g + 2.0 * g * rng.random(n))
        cost = np.clip((1.0 + g * g - temp * temp) / (2.0 * g), -1.0, 1.0)
    sint = np.sqrt(1.0 - cost * cost)
    psi = 2.0 * math.pi * rng.random(n)
    cosp, sinp = np.cos(psi), np.sin(psi)

    ux, uy, uz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    normal = np.abs(uz) > 0.99999
    temp = np.sqrt(np.where(normal, 1.0, 1.0 - uz * uz))
    new = np.empty_like(dirs)
    new[:, 0] = np.where(normal, sint * cosp, sint * (ux * uz * cosp - uy * sinp) / temp + ux * cost)
    new[:, 1] = np.where(normal, sint * sinp, sint * (uy * uz * cosp + ux * sinp) / temp + uy * cost)
    new[:, 2] = np.where(normal, np.sign(uz) * cost, -sint * cosp * temp + uz * cost)
    return new


def _trace_batch(job):
    """Traces one batch of photons; returns (histogram, sum of squared captured weights)."""
    water, geom, n, seed, batch, dt, n_bins, g = job
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, batch])))
    v = light_speed_in_water()
    L = geom.range_m
    t0 = L / v
    window = n_bins * dt
    radius = geom.aperture_diameter / 2.0
    cos_fov = math.cos(min(geom.field_of_view, 2 * math.pi) / 2.0)
    c = water.extinction
    albedo = water.albedo

    cos_cone = 1.0 - rng.random(n) * (1.0 - math.cos(geom.beam_divergence / 2.0))
    sin_cone = np.sqrt(1.0 - cos_cone ** 2)
    phi = 2.0 * math.pi * rng.random(n)
    dirs = np.column_stack([sin_cone * np.cos(phi), sin_cone * np.sin(phi), cos_cone])
    pos = np.zeros((n, 3))
    path = np.zeros(n)
    w = np.ones(n)
    alive = np.ones(n, dtype=bool)
    hist = np.zeros(n_bins)
    weight_sq = 0.0

    while True:
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        if c > 0:
            step = -np.log1p(-rng.random(idx.size)) / c
        else:
            step = np.full(idx.size, np.inf)
        uz = dirs[idx, 2]
        z = pos[idx, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            to_plane = np.where(uz > 0, (L - z) / uz, np.inf)
        crossing = step >= to_plane

        ci = idx[crossing]
        if ci.size:
            d = to_plane[crossing]
            hit = pos[ci, :2] + d[:, None] * dirs[ci, :2]
            arrival = np.maximum((path[ci] + d) / v - t0, 0.0)
            captured = (np.hypot(hit[:, 0], hit[:, 1]) <= radius) & (dirs[ci, 2] >= cos_fov) & (arrival < window)
            bins = (arrival[captured] / dt).astype(int)
            np.add.at(hist, np.minimum(bins, n_bins - 1), w[ci][captured])
            weight_sq += float(np.sum(w[ci][captured] ** 2))
            alive[ci] = False

        mi = idx[~crossing]
        if mi.size == 0:
            continue
        s = step[~crossing]
        pos[mi] += s[:, None] * dirs[mi]
        path[mi] += s
        w[mi] *= albedo
        dirs[mi] = _spin(dirs[mi], g, rng)

        # Earliest possible arrival is a straight run to the plane.
        late = (path[mi] + np.maximum(L - pos[mi, 2], 0.0)) / v - t0 >= window
        alive[mi[late]] = False
        low = mi[(w[mi] < ROULETTE_THRESHOLD) & ~late]
        if low.size:
            survive = rng.random(low.size) < ROULETTE_CHANCE
            w[low[survive]] /= ROULETTE_CHANCE
            alive[low[~survive]] = False
        alive[mi[w[mi] <= 0.0]] = False

    return hist, weight_sq


def simulate_impulse_response(water, geom, n_photons, seed, dt=1e-10, n_bins=400,
                              g=HG_ASYMMETRY, workers=1, batch_size=PHOTON_BATCH):
    """
    Monte Carlo photon transport from a collimated or diverging source to a receiver plane.

    Photons take exponential free paths of mean 1/c, lose the albedo b/c of
    their weight at every interaction, scatter by Henyey-Greenstein angles and
    are played Russian roulette below 1e-6. A photon reaching the plane z = L
    is captured when it lands inside the aperture within the field of view
    and the time window. Photons are split into fixed batches with their own
    counter-based stream, so the result does not depend on `workers`.

    Args:
        water (WaterType): Absorption and scattering coefficients.
        geom (LinkGeometry): Range, divergence, aperture and field of view.
        n_photons (int): Photons launched.
        seed (int): Root seed.
        dt (float): Histogram bin width in seconds.
        n_bins (int): Number of bins after the ballistic arrival time t0.
        g (float): Henyey-Greenstein asymmetry.
        workers (int): Worker processes.
        batch_size (int): Photons per batch.

    Returns:
        ImpulseResponse: Captured weight per arrival-time bin.
    """
    if n_photons < 1:
        raise ParameterError(f"n_photons must be >= 1, got {n_photons}")
    if dt <= 0 or n_bins < 1:
        raise ParameterError("histogram needs dt > 0 and at least one bin")
    sizes = [batch_size] * (n_photons // batch_size)
    if n_photons % batch_size:
        sizes.append(n_photons % batch_size)
    jobs = [(water, geom, n, seed, i, dt, n_bins, g) for i, n in enumerate(sizes)]

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_trace_batch, jobs))
    else:
        parts = [_trace_batch(job) for job in jobs]

    hist = np.zeros(n_bins)
    weight_sq = 0.0
    for part_hist, part_sq in parts:
        hist += part_hist
        weight_sq += part_sq
    weights = hist / n_photons

    warning = None
    if not np.any(weights > 0):
        warning = "no photons captured"
        logger.warning("MC response for %s water at %.1f m captured no photons", water.label, geom.range_m)
    t0 = geom.range_m / light_speed_in_water()
    return ImpulseResponse(t0, dt, weights, n_photons=n_photons, weight_sq=weight_sq, warning=warning)


def eval_double_gamma(p, t):
    """h0(t) = C1 dt e^(-C2 dt) + C3 dt e^(-C4 dt) for dt = t - t0 >= 0, else 0."""
    dt = np.asarray(t, dtype=float) - p.t0
    pos = np.maximum(dt, 0.0)
    value = p.c1 * pos * np.exp(-p.c2 * pos) + p.c3 * pos * np.exp(-p.c4 * pos)
    value = np.where(dt >= 0, value, 0.0)
    return value if value.ndim else float(value)


def _decay_rate(tau, z):
    if len(tau) < 2:
        return None
    slope = np.polyfit(tau, z, 1)[0]
    return -slope if slope < 0 else None


def _initial_guess(tau, y):
    """Decay rates from log-linear fits of ln(y/tau) on both halves of the post-peak tail."""
    peak = int(np.argmax(y))
    tail = np.arange(peak, len(y))
    tail = tail[y[tail] > 0]
    z = np.log(y[tail] / tau[tail])
    half = max(2, len(tail) // 2)
    fast = _decay_rate(tau[tail[:half]], z[:half])
    slow = _decay_rate(tau[tail[half:]], z[half:])
    span = tau[-1] if tau[-1] > 0 else 1.0
    fast = fast or 4.0 / span
    slow = slow or min(fast, 1.0 / span) * 0.5
    if slow >= fast:
        slow = fast * 0.25
    basis = np.column_stack([tau * np.exp(-fast * tau), tau * np.exp(-slow * tau)])
    amps = np.linalg.lstsq(basis, y, rcond=None)[0]
    amps = np.maximum(amps, 1e-6 * max(amps.max(), 1e-12))
    return np.array([amps[0], fast, amps[1], slow])


def fit_double_gamma(h_mc, max_evaluations=5000):
    """
    Nonlinear least-squares fit of the double-Gamma model to a binned response.

    Time is measured in bins after t0 and the amplitude is normalised to the
    histogram peak while fitting; the returned parameters are in seconds.
    The faster decay is always reported as (C1, C2).

    Args:
        h_mc (ImpulseResponse): Binned response.
        max_evaluations (int): Residual evaluations allowed.

    Returns:
        FitResult: Parameters, residual L2 norm, relative residual and convergence flag.
    """
    density = h_mc.density()
    if density.size == 0 or not np.any(density > 0):
        raise DegenerateResponseError("cannot fit a response with no captured weight")
    scale = h_mc.dt
    tau = (np.arange(density.size) + 0.5)
    peak = density.max()
    y = density / peak

    def model(x):
        a1, k2, a3, k4 = x
        return a1 * tau * np.exp(-k2 * tau) + a3 * tau * np.exp(-k4 * tau)

    x0 = _initial_guess(tau, y)
    result = least_squares(lambda x: model(x) - y, x0, bounds=(0.0, np.inf), x_scale="jac",
                           ftol=1e-14, xtol=1e-14, gtol=1e-14, max_nfev=max_evaluations)
    a1, k2, a3, k4 = result.x
    if k2 < k4:
        a1, k2, a3, k4 = a3, k4, a1, k2
    k2, k4 = max(k2, 1e-12), max(k4, 1e-12)
    params = DoubleGammaParams(c1=a1 * peak / scale, c2=k2 / scale, c3=a3 * peak / scale,
                               c4=k4 / scale, t0=h_mc.t0)

    fitted = eval_double_gamma(params, h_mc.times())
    residual = math.sqrt(float(np.sum((fitted - density) ** 2)) * h_mc.dt)
    norm = math.sqrt(float(np.sum(density ** 2)) * h_mc.dt)
    converged = bool(result.success)
    if not converged:
        logger.warning("double-Gamma fit stopped without converging: %s", result.message)
    return FitResult(params, residual, residual / norm, converged, int(result.nfev))


def scintillation_to_logvar(sigma_i_sq):
    """sigma_x^2 = ln(sigma_I^2 + 1) / 4."""
    if sigma_i_sq < 0:
        raise ParameterError(f"scintillation index must be >= 0, got {sigma_i_sq}")
    return 0.25 * math.log1p(sigma_i_sq)


def logvar_to_scintillation(sigma_x_sq):
    """sigma_I^2 = exp(4 sigma_x^2) - 1."""
    return math.expm1(4.0 * sigma_x_sq)


def sample_fading(model, rng, size=None):
    """Draws h = exp(2x) with x ~ N(mu_x, sigma_x^2); E[h] = 1."""
    x = rng.normal(model.mu_x, math.sqrt(model.sigma_x_sq), size)
    return np.exp(2.0 * x)


def lognormal_pdf(h, model):
    """Density of the fading coefficient h."""
    if model.sigma_x_sq <= 0:
        raise ParameterError("the log-normal density needs sigma_x_sq > 0")
    h = np.asarray(h, dtype=float)
    s2 = model.sigma_x_sq
    with np.errstate(divide="ignore"):
        log_h = np.log(h)
    pdf = np.exp(-(log_h - 2.0 * model.mu_x) ** 2 / (8.0 * s2)) / (2.0 * h * math.sqrt(2.0 * math.pi * s2))
    return np.where(h > 0, pdf, 0.0)


def _resample(weights, dt, new_dt):
    edges = np.arange(len(weights) + 1) * dt
    cumulative = np.concatenate([[0.0], np.cumsum(weights)])
    n_new = int(math.ceil(edges[-1] / new_dt - 1e-9))
    new_edges = np.arange(n_new + 1) * new_dt
    return np.diff(np.interp(new_edges, edges, cumulative))


def isi_integrals(pulse, h0, bit_time, memory, resp=1.0):
    """
    Signal and ISI integrals of the received pulse Gamma(t) = pulse * h0.

    Time is counted from the ballistic arrival t0. gamma_s integrates
    [0, Tb); gamma_k[j] integrates [(j+1) Tb, (j+2) Tb), the contribution of
    the bit sent j+1 periods earlier. When Tb is not a whole number of bins
    the response is resampled onto Tb/ceil(Tb/dt) bins first.

    Args:
        pulse (RectangularPulse): Transmitted pulse.
        h0 (ImpulseResponse): Fading-free channel response.
        bit_time (float): Tb in seconds.
        memory (int): Number of preceding bits kept.
        resp (float): Photodetector responsivity in A/W.

    Returns:
        IsiIntegrals: gamma_s and gamma_k in A*s.
    """
    if bit_time <= 0 or memory < 0:
        raise ParameterError("bit time must be positive and memory nonnegative")
    weights = np.asarray(h0.weights, dtype=float)
    dt = h0.dt
    ratio = bit_time / dt
    per_bit = int(round(ratio))
    resampled = False
    if per_bit < 1 or abs(ratio - per_bit) > 1e-6 * ratio:
        per_bit = int(math.ceil(ratio))
        new_dt = bit_time / per_bit
        weights = _resample(weights, dt, new_dt)
        dt = new_dt
        resampled = True
        logger.info("response resampled to %.3g s bins to align with Tb = %.3g s", dt, bit_time)

    received = np.convolve(pulse.samples(dt), weights)
    n_windows = memory + 1
    padded = np.zeros(n_windows * per_bit)
    n = min(len(received), len(padded))
    padded[:n] = received[:n]
    windows = resp * dt * padded.reshape(n_windows, per_bit).sum(axis=1)
    return IsiIntegrals(float(windows[0]), windows[1:].copy(), resampled)


def channel_memory(pulse, h0, bit_time, tolerance=1e-3, max_memory=64):
    """Number of preceding bit windows whose ISI exceeds `tolerance` times the signal integral."""
    isi = isi_integrals(pulse, h0, bit_time, max_memory)
    if isi.gamma_s <= 0:
        return 0
    significant = np.flatnonzero(isi.gamma_k > tolerance * isi.gamma_s)
    return int(significant[-1] + 1) if significant.size else 0
