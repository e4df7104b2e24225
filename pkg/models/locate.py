"""Range-based localization: RSS distance polynomials, linear least squares and TDOA."""
import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial
from scipy.optimize import least_squares

from models.channel import FadingModel, aggregated_loss, sample_fading
from models.errors import AmbiguousPositionError, ConditioningError, GeometryError, ParameterError

logger = logging.getLogger(__name__)


@dataclass
class AnchorSet:
    """
    Base-station anchors translated so that anchor 1 sits at the origin.

    `origin` keeps the original position of anchor 1 so estimates can be
    mapped back.
    """

    positions: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2 or len(self.positions) < 3:
            raise GeometryError("at least three 2D anchors are required")
        if np.linalg.matrix_rank(self.positions[1:], tol=1e-9 * max(1.0, np.abs(self.positions).max())) < 2:
            raise GeometryError("anchors are collinear")

    @classmethod
    def from_points(cls, points):
        points = np.asarray(points, dtype=float)
        return cls(points - points[0], points[0].copy())

    def __len__(self):
        return len(self.positions)

    def absolute(self):
        return self.positions + self.origin

    def subset(self, n):
        return AnchorSet.from_points(self.absolute()[:n])


@dataclass
class RssObservation:
    value: float
    sample_time: float
    avg_power: float

    def __post_init__(self):
        if self.sample_time <= 0:
            raise ParameterError("sample time must be positive")


@dataclass
class DistancePolynomial:
    """Least-squares map from integrated current y to distance, fitted on [y_min, y_max]."""

    poly: Polynomial
    y_min: float
    y_max: float
    max_range: float

    @property
    def degree(self):
        return self.poly.degree()

    @property
    def coefficients(self):
        """b0..bM in powers of y."""
        return self.poly.convert().coef

    def __call__(self, y):
        return self.poly(y)


@dataclass
class DistanceEstimate:
    distance: float
    extrapolated: bool = False


@dataclass
class PositionEstimate:
    x: float
    y: float
    extrapolated: bool = False

    def error(self, truth):
        return math.hypot(self.x - truth[0], self.y - truth[1])


def rss_signal(d, water, geom, resp, avg_power, sample_time, fading=1.0, noise=0.0):
    """
    Integrated photocurrent y = R P T_s h L(d) + v at distance `d`.

    Args:
        d (float): Distance in m.
        water (WaterType): Water coefficients.
        geom (LinkGeometry): Aperture and divergence used by the aggregated loss.
        resp (float): Responsivity in A/W.
        avg_power (float): Average transmitted power in W.
        sample_time (float): Integration time T_s in s.
        fading (float): Fading draw h.
        noise (float): Noise draw v in A*s.

    Returns:
        RssObservation: The observation.
    """
    if d <= 0:
        raise ParameterError(f"distance must be positive, got {d}")
    value = resp * avg_power * sample_time * fading * aggregated_loss(water, geom, d) + noise
    return RssObservation(float(value), sample_time, avg_power)


def averaged_rss(d, water, geom, resp, avg_power, sample_time, sigma_x_sq, noise_std, rng, n_samples=100):
    """Mean of `n_samples` observations taken one coherence time apart (independent fading)."""
    h = sample_fading(FadingModel(sigma_x_sq), rng, n_samples)
    v = rng.normal(0.0, noise_std, n_samples) if noise_std > 0 else np.zeros(n_samples)
    mean_gain = resp * avg_power * sample_time * aggregated_loss(water, geom, d)
    return RssObservation(float(np.mean(mean_gain * h + v)), sample_time, avg_power)


def fit_distance_polynomial(pairs, degree=5, max_range=None):
    """
    Least-squares polynomial d(y) of the given degree.

    Args:
        pairs (list[tuple[float, float]]): Calibration (y, d) pairs.
        degree (int): Polynomial degree M.
        max_range (float | None): Clamp for estimates; defaults to the largest calibration distance.

    Returns:
        DistancePolynomial: The fitted inverse.
    """
    pairs = np.asarray(pairs, dtype=float)
    if pairs.ndim != 2 or len(pairs) < degree + 1:
        raise ConditioningError(f"degree {degree} needs at least {degree + 1} pairs")
    y, d = pairs[:, 0], pairs[:, 1]
    if degree == 0:
        poly = Polynomial([d.mean()])
    else:
        poly, (_, rank, _, _) = Polynomial.fit(y, d, degree, full=True)
        if rank < degree + 1:
            raise ConditioningError(f"design matrix has rank {rank}, need {degree + 1}")
    return DistancePolynomial(poly, float(y.min()), float(y.max()),
                              float(d.max() if max_range is None else max_range))


def calibrate_distance_polynomial(water, geom, resp, avg_power, sample_time, d_min, d_max,
                                  n_pairs=50, degree=5, max_range=None):
    """Fits d(y) to noiseless, fading-free observations at `n_pairs` distances in [d_min, d_max]."""
    distances = np.linspace(d_min, d_max, n_pairs)
    pairs = [(rss_signal(d, water, geom, resp, avg_power, sample_time).value, d) for d in distances]
    return fit_distance_polynomial(pairs, degree, max_range=max_range)


def estimate_distance(y, poly):
    """Evaluates the polynomial; clamps to [0, max_range] and flags extrapolation."""
    value = float(poly(y))
    extrapolated = not (poly.y_min <= y <= poly.y_max)
    clamped = min(max(value, 0.0), poly.max_range)
    if clamped != value:
        extrapolated = True
    if extrapolated:
        logger.debug("distance polynomial extrapolated at y=%.3g", y)
    return DistanceEstimate(clamped, extrapolated)


def lls_position(anchors, distances):
    """
    Linear least-squares position from anchor distances.

    With anchor 1 at the origin, rows (x_i, y_i) of C and entries
    (r_i^2 - d_i^2 + d_1^2) / 2 of D give x = (C^T C)^-1 C^T D.

    Args:
        anchors (AnchorSet): Anchors, anchor 1 first.
        distances (list[float]): Estimated distance to each anchor.

    Returns:
        tuple[float, float]: Position in the original coordinates.
    """
    d = np.asarray(distances, dtype=float)
    if d.shape != (len(anchors),):
        raise ParameterError(f"expected {len(anchors)} distances, got {d.shape}")
    C = anchors.positions[1:]
    D = 0.5 * (np.sum(C ** 2, axis=1) - d[1:] ** 2 + d[0] ** 2)
    normal = C.T @ C
    if np.linalg.cond(normal) > 1e12:
        raise GeometryError("C^T C is singular; anchors are collinear")
    x = np.linalg.solve(normal, C.T @ D)
    return float(x[0] + anchors.origin[0]), float(x[1] + anchors.origin[1])


def _tdoa_residuals(p, anchors, ranges):
    dist = np.hypot(anchors[:, 0] - p[0], anchors[:, 1] - p[1])
    return dist[1:] - dist[0] - ranges


def tdoa_position(anchors, time_differences, v, tolerance=1e-6):
    """
    Hyperbolic positioning from arrival-time differences relative to anchor 1.

    Nonlinear least squares on range-difference residuals starts at the
    anchor centroid. Further starts beyond each anchor look for a second
    minimum with the same residual, which makes the intersection ambiguous.

    Args:
        anchors (AnchorSet): Synchronised anchors.
        time_differences (list[float]): t_i - t_1 for anchors 2..N in s.
        v (float): Propagation speed in m/s.
        tolerance (float): Residual norm difference in m treated as equal.

    Returns:
        tuple[float, float]: Position in the original coordinates.
    """
    pts = anchors.absolute()
    ranges = v * np.asarray(time_differences, dtype=float)
    if ranges.shape != (len(pts) - 1,):
        raise ParameterError(f"expected {len(pts) - 1} time differences, got {ranges.shape}")

    centroid = pts.mean(axis=0)
    spread = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1.0)
    starts = [centroid] + [centroid + 2.0 * (p - centroid) for p in pts]
    fits = [least_squares(_tdoa_residuals, s, args=(pts, ranges), xtol=1e-15, ftol=1e-15, gtol=1e-15)
            for s in starts]
    fits = [f for f in fits if f.status > 0 and np.all(np.isfinite(f.x))]
    if not fits:
        raise AmbiguousPositionError("TDOA solve did not converge")

    best = min(np.linalg.norm(f.fun) for f in fits)
    distinct = []
    for f in fits:
        if np.linalg.norm(f.fun) > best + tolerance:
            continue
        if np.linalg.norm(f.x - centroid) > 100.0 * spread:
            continue
        if all(np.linalg.norm(f.x - u) > 1e-6 * spread for u in distinct):
            distinct.append(f.x)
    if not distinct:
        raise AmbiguousPositionError("TDOA solve diverged away from the anchors")
    if len(distinct) > 1:
        raise AmbiguousPositionError("hyperbolas intersect more than once",
                                     candidates=[tuple(map(float, s)) for s in distinct])
    return float(distinct[0][0]), float(distinct[0][1])


def hex_anchor_layout(cell_radius, n_anchors=7):
    """Serving OBTS at the origin followed by its hexagonal neighbours, spaced sqrt(3) * r0."""
    spacing = math.sqrt(3.0) * cell_radius
    ring = [(spacing * math.cos(math.radians(30 + 60 * k)), spacing * math.sin(math.radians(30 + 60 * k)))
            for k in range(6)]
    return np.array([(0.0, 0.0)] + ring)[:n_anchors]


def uniform_in_hexagon(cell_radius, rng, size):
    """Uniform points in the hexagonal cell of circumradius `cell_radius` centred on the serving OBTS."""
    points = []
    apothem = cell_radius * math.sqrt(3.0) / 2.0
    normals = [(math.cos(math.radians(30 + 60 * k)), math.sin(math.radians(30 + 60 * k))) for k in range(6)]
    while len(points) < size:
        cand = rng.uniform(-cell_radius, cell_radius, (2 * size, 2))
        inside = np.all(np.abs(cand @ np.array(normals[:3]).T) <= apothem, axis=1)
        points.extend(cand[inside][: size - len(points)])
    return np.array(points)


def anchor_ranges(anchors, point):
    """Euclidean distance from `point` to every anchor, in anchor order."""
    pts = anchors.absolute()
    return np.hypot(pts[:, 0] - point[0], pts[:, 1] - point[1])


def rss_localize(anchors, point, poly, water, geom, resp, avg_power, sample_time,
                 sigma_x_sq, noise_std, rng, n_samples=100):
    """
    One RSS localization: averaged observation per anchor, polynomial inversion, LLS.

    Args:
        anchors (AnchorSet): Serving OBTS first.
        point (tuple[float, float]): True user position.
        poly (DistancePolynomial): Calibrated inverse.
        water (WaterType): Water coefficients.
        geom (LinkGeometry): Link geometry for the aggregated loss.
        resp (float): Responsivity in A/W.
        avg_power (float): Average transmitted power in W.
        sample_time (float): Integration time in s.
        sigma_x_sq (float): Log-amplitude variance of the fading.
        noise_std (float): Standard deviation of the additive noise per sample.
        rng (numpy.random.Generator): Trial stream.
        n_samples (int): Samples averaged per anchor.

    Returns:
        PositionEstimate: Estimate with the extrapolation flag of any anchor.
    """
    ranges = np.maximum(anchor_ranges(anchors, point), 1e-3)
    estimates = []
    for d in ranges:
        obs = averaged_rss(d, water, geom, resp, avg_power, sample_time, sigma_x_sq, noise_std, rng, n_samples)
        estimates.append(estimate_distance(obs.value, poly))
    x, y = lls_position(anchors, [e.distance for e in estimates])
    return PositionEstimate(x, y, any(e.extrapolated for e in estimates))
