import math

import numpy as np
import pytest

from models.ber import ReceiverModel
from models.channel import LinkGeometry, WaterType, responsivity
from models.errors import InfeasibleError, OutOfCellError, ParameterError, UndefinedBearingError
from models.power import (
    DownlinkModel,
    RingPlan,
    SectorPlan,
    allocate_ring_powers,
    average_power_per_bit,
    equal_area_rings,
    required_power,
    ring_of,
    sector_of,
    sector_transmit_power,
)

CELL = 90.0


@pytest.fixture(scope="module")
def downlink_model():
    return DownlinkModel(
        water=WaterType.preset("clear-ocean"),
        geom=LinkGeometry(CELL, beam_divergence=0.006, aperture_diameter=0.2),
        receiver=ReceiverModel(responsivity(0.8, 450.0), 1e-16, 1.0, 1e-8),
        code_length=50,
        code_weight=3,
        n_users=5,
        cell_radius=CELL,
        edge_sigma_x_sq=0.14,
    )


def _contains(bearing, lower, upper):
    if math.isclose(lower, upper):
        return True
    if lower < upper:
        return lower < bearing <= upper
    return bearing > lower or bearing <= upper


def test_sector_examples():
    plan = SectorPlan(6)
    assert sector_of((10.0, 0.0), (0.0, 0.0), plan) == 0
    assert sector_of((0.0, 10.0), (0.0, 0.0), plan) == 1
    assert sector_of((-10.0, 0.0), (0.0, 0.0), plan) == 3
    assert sector_of((10.0, -1.0), (0.0, 0.0), plan) == 0
    assert sector_of((15.0, 7.0), (5.0, 7.0), plan) == 0
    boundary = (10 * math.cos(math.pi / 6), 10 * math.sin(math.pi / 6))
    assert sector_of(boundary, (0.0, 0.0), plan) == 0
    for point in ((3.0, 4.0), (-1.0, -8.0), (0.0, -2.0)):
        assert sector_of(point, (0.0, 0.0), SectorPlan(1)) == 0


def test_sector_requires_distinct_positions():
    with pytest.raises(UndefinedBearingError):
        sector_of((4.0, 4.0), (4.0, 4.0), SectorPlan(6))
    with pytest.raises(ParameterError):
        SectorPlan(0)


@pytest.mark.parametrize("n_sectors", [1, 3, 6, 8])
def test_sectors_partition_the_circle(n_sectors):
    plan = SectorPlan(n_sectors)
    for bearing in np.random.default_rng(n_sectors).uniform(0, 2 * math.pi, 500):
        owners = [k for k, (lo, hi) in enumerate(plan.boundaries) if _contains(bearing, lo, hi)]
        assert owners == [plan.index(bearing)]


def test_sector_transmit_power():
    assert sector_transmit_power(6.0, SectorPlan(6)) == pytest.approx(1.0)
    assert sector_transmit_power(6.0, SectorPlan(1)) == 6.0


def test_ring_examples():
    plan = RingPlan(equal_area_rings(CELL, 3))
    assert plan.boundaries[-1] == pytest.approx(CELL)
    assert plan.boundaries[0] == pytest.approx(CELL / math.sqrt(3))
    assert ring_of(0.0, plan) == 1
    assert ring_of(plan.boundaries[0], plan) == 1
    assert ring_of(plan.boundaries[0] + 1e-6, plan) == 2
    assert ring_of(CELL, plan) == 3
    assert ring_of(37.0, RingPlan((CELL,))) == 1
    with pytest.raises(OutOfCellError):
        ring_of(CELL + 0.01, plan)
    assert plan.area_weights() == pytest.approx([1 / 3] * 3)


def test_ring_plan_validation():
    with pytest.raises(ParameterError):
        RingPlan((50.0, 40.0))
    with pytest.raises(ParameterError):
        RingPlan((40.0, 50.0), (1.0,))
    with pytest.raises(ParameterError):
        average_power_per_bit(RingPlan((40.0, 50.0)))


def test_single_ring_is_edge_power(downlink_model):
    plan = allocate_ring_powers(1e-6, (CELL,), downlink_model)
    edge = required_power(downlink_model, CELL, 1e-6)
    assert plan.powers == (pytest.approx(edge),)
    assert average_power_per_bit(plan)[0] == pytest.approx(edge)


def test_ring_powers_are_monotone_and_meet_target(downlink_model):
    plan = allocate_ring_powers(1e-6, equal_area_rings(CELL, 3), downlink_model)
    assert list(plan.powers) == sorted(plan.powers)
    for radius, power in zip(plan.boundaries, plan.powers):
        assert downlink_model.ber(power, radius) <= 1e-6


def test_center_users_pay_ring_one(downlink_model):
    plan = allocate_ring_powers(1e-6, equal_area_rings(CELL, 3), downlink_model)
    assert average_power_per_bit(plan, "center")[0] == pytest.approx(plan.powers[0])
    disk = average_power_per_bit(plan, lambda r: 2 * r / CELL ** 2)[0]
    assert disk == pytest.approx(average_power_per_bit(plan)[0], rel=1e-9)
    with pytest.raises(ParameterError):
        average_power_per_bit(plan, "clustered")


def test_three_rings_save_power_over_uniform(downlink_model):
    uniform = average_power_per_bit(allocate_ring_powers(1e-6, (CELL,), downlink_model))[1]
    quantised = average_power_per_bit(allocate_ring_powers(1e-6, equal_area_rings(CELL, 3), downlink_model))[1]
    # the outer ring still pays the edge power, so equal-area rings save at most 10 log10(3)
    assert 4.5 <= uniform - quantised <= 10 * math.log10(3) + 1e-9


def test_refinement_never_costs_power(downlink_model):
    coarse = allocate_ring_powers(1e-4, (45.0, CELL), downlink_model)
    fine = allocate_ring_powers(1e-4, (45.0, 67.5, CELL), downlink_model)
    single = allocate_ring_powers(1e-4, (CELL,), downlink_model)
    assert average_power_per_bit(fine)[0] <= average_power_per_bit(coarse)[0] <= average_power_per_bit(single)[0]


def test_power_cap_names_the_ring(downlink_model):
    with pytest.raises(InfeasibleError) as err:
        allocate_ring_powers(1e-6, (CELL,), downlink_model, cap_dbm=-30.0)
    assert err.value.ring == 1
    with pytest.raises(InfeasibleError) as err:
        allocate_ring_powers(1e-6, equal_area_rings(CELL, 3), downlink_model, cap_dbm=25.0)
    assert err.value.ring in (2, 3)
