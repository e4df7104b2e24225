"""Power control for an OBTS cell: sector activation and ring-quantised (QCI) power allocation."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from models.ber import LinkScenario, RelayChain, average_ber_relay, chip_power_from_average, dbm_to_watts, watts_to_dbm
from models.channel import aggregated_loss
from models.errors import InfeasibleError, OutOfCellError, ParameterError, UndefinedBearingError

logger = logging.getLogger(__name__)

BISECTION_STEP_DB = 0.05


@dataclass(frozen=True)
class SectorPlan:
    """
    N_S equal sectors; sector k covers bearings ((k - 1/2) D, (k + 1/2) D] with D = 2 pi / N_S.

    Bearings are measured counter-clockwise from east, so east is the
    centre of sector 0 and a bearing on a boundary belongs to the lower sector.
    """

    n_sectors: int

    def __post_init__(self):
        if self.n_sectors < 1:
            raise ParameterError(f"sector count must be >= 1, got {self.n_sectors}")

    @property
    def width(self):
        return 2.0 * math.pi / self.n_sectors

    @property
    def boundaries(self):
        """(lower, upper] bearing interval of every sector, wrapped into [0, 2 pi)."""
        half = self.width / 2.0
        return [((k * self.width - half) % (2.0 * math.pi), (k * self.width + half) % (2.0 * math.pi))
                for k in range(self.n_sectors)]

    def index(self, bearing):
        if self.n_sectors == 1:
            return 0
        bearing = bearing % (2.0 * math.pi)
        return int(math.ceil((bearing - self.width / 2.0) / self.width - 1e-9)) % self.n_sectors


@dataclass
class RingPlan:
    """Concentric rings with outer radii r_1 < ... < r_NR = cell radius and one power per ring."""

    boundaries: tuple
    powers: tuple = field(default=())

    def __post_init__(self):
        self.boundaries = tuple(float(r) for r in self.boundaries)
        self.powers = tuple(float(p) for p in self.powers)
        if not self.boundaries or self.boundaries[0] <= 0:
            raise ParameterError("ring boundaries must be positive")
        if any(b <= a for a, b in zip(self.boundaries, self.boundaries[1:])):
            raise ParameterError(f"ring boundaries must increase strictly, got {self.boundaries}")
        if self.powers and (len(self.powers) != len(self.boundaries) or min(self.powers) <= 0):
            raise ParameterError("need one positive power per ring")

    @property
    def n_rings(self):
        return len(self.boundaries)

    @property
    def cell_radius(self):
        return self.boundaries[-1]

    def area_weights(self):
        """Fraction of a uniform disk population living in each ring."""
        r = np.concatenate([[0.0], self.boundaries])
        return np.diff(r ** 2) / r[-1] ** 2


@dataclass(frozen=True)
class DownlinkModel:
    """
    Single-hop synchronous downlink from the OBTS to a user at distance d.

    The fading variance grows linearly from zero at the OBTS to
    `edge_sigma_x_sq` at the cell edge.
    """

    water: object
    geom: object
    receiver: object
    code_length: int
    code_weight: int
    n_users: int
    cell_radius: float
    edge_sigma_x_sq: float
    n_nodes: int = 30

    def sigma_x_sq(self, distance):
        return self.edge_sigma_x_sq * distance / self.cell_radius

    def ber(self, avg_power, distance):
        """Downlink BER at `distance` for average transmitted power per bit `avg_power` in W."""
        chain = RelayChain((aggregated_loss(self.water, self.geom, distance),), (self.sigma_x_sq(distance),))
        rx = self.receiver.with_chip_power(chip_power_from_average(avg_power, self.code_length, self.code_weight))
        scenario = LinkScenario(rx, self.code_length, self.code_weight, self.n_users, chain)
        return average_ber_relay(scenario, "downlink", n_nodes=self.n_nodes).ber


def sector_of(mu_position, obts_position, plan):
    """
    Active sector for a user.

    Args:
        mu_position (tuple[float, float]): User position in m.
        obts_position (tuple[float, float]): Base-station position in m.
        plan (SectorPlan): Sector layout.

    Returns:
        int: 0-based sector index.
    """
    dx = mu_position[0] - obts_position[0]
    dy = mu_position[1] - obts_position[1]
    if dx == 0 and dy == 0:
        raise UndefinedBearingError("user coincides with its OBTS; bearing is undefined")
    return plan.index(math.atan2(dy, dx))


def sector_transmit_power(omni_power, plan):
    """Radiated LED power when only one of the N_S sectors is lit."""
    return omni_power / plan.n_sectors


def equal_area_rings(cell_radius, n_rings):
    """Outer radii r_i = r0 * sqrt(i / N_R), giving each ring the same share of a uniform population."""
    if n_rings < 1:
        raise ParameterError(f"ring count must be >= 1, got {n_rings}")
    return tuple(cell_radius * math.sqrt(i / n_rings) for i in range(1, n_rings + 1))


def ring_of(distance, plan):
    """1-based index of the first ring whose outer radius reaches `distance`."""
    if distance < 0:
        raise ParameterError("distance must be nonnegative")
    for i, r in enumerate(plan.boundaries, start=1):
        if distance <= r:
            return i
    raise OutOfCellError(f"distance {distance} m lies beyond the cell radius {plan.cell_radius} m")


def required_power(model, distance, target_ber, cap_dbm=60.0, floor_dbm=-60.0, step_db=BISECTION_STEP_DB):
    """
    Smallest average power per bit meeting `target_ber` at `distance`.

    Bisection in dB stops once the bracket is narrower than `step_db` and
    returns its upper end, so the target is always met.

    Returns:
        float | None: Power in W, or None when even `cap_dbm` misses the target.
    """
    if model.ber(float(dbm_to_watts(cap_dbm)), distance) > target_ber:
        return None
    lo, hi = floor_dbm, cap_dbm
    if model.ber(float(dbm_to_watts(lo)), distance) <= target_ber:
        return float(dbm_to_watts(lo))
    while hi - lo > step_db:
        mid = 0.5 * (lo + hi)
        if model.ber(float(dbm_to_watts(mid)), distance) <= target_ber:
            hi = mid
        else:
            lo = mid
    return float(dbm_to_watts(hi))


def allocate_ring_powers(target_ber, boundaries, model, cap_dbm=60.0):
    """
    Per-ring power that meets the target at each ring's outer radius.

    Args:
        target_ber (float): Required BER.
        boundaries (tuple[float]): Ring outer radii, the last one the cell radius.
        model (DownlinkModel): Channel and BER model.
        cap_dbm (float): Largest admissible average power per bit.

    Returns:
        RingPlan: Boundaries with their allocated powers.
    """
    if not 0 < target_ber < 0.5:
        raise ParameterError(f"target BER must lie in (0, 0.5), got {target_ber}")
    powers = []
    for ring, radius in enumerate(boundaries, start=1):
        power = required_power(model, radius, target_ber, cap_dbm=cap_dbm)
        if power is None:
            raise InfeasibleError(f"ring {ring} (r={radius:.1f} m) misses BER {target_ber:g} at the {cap_dbm} dBm cap",
                                  ring=ring)
        powers.append(power)
    powers = np.maximum.accumulate(powers)
    logger.debug("ring powers for BER %g: %s dBm", target_ber, np.round(watts_to_dbm(powers), 2).tolist())
    return RingPlan(tuple(boundaries), tuple(powers))


def _ring_shares(plan, distribution):
    if distribution == "uniform":
        return plan.area_weights()
    if distribution == "center":
        shares = np.zeros(plan.n_rings)
        shares[0] = 1.0
        return shares
    if callable(distribution):
        edges = np.concatenate([[0.0], plan.boundaries])
        shares = np.array([integrate.quad(distribution, a, b)[0] for a, b in zip(edges, edges[1:])])
        if shares.sum() <= 0:
            raise ParameterError("radial user density integrates to zero over the cell")
        return shares / shares.sum()
    raise ParameterError(f"unknown user distribution '{distribution}'")


def average_power_per_bit(plan, distribution="uniform"):
    """
    Expected transmitted power per bit over the user population.

    Args:
        plan (RingPlan): Allocated plan; a single ring is the uniform scheme.
        distribution (str | callable): 'uniform' over the disk, 'center' or a radial density f(r).

    Returns:
        tuple[float, float]: Power in W and in dBm.
    """
    if not plan.powers:
        raise ParameterError("ring plan carries no powers; allocate first")
    watts = float(np.dot(_ring_shares(plan, distribution), plan.powers))
    return watts, float(watts_to_dbm(watts))
