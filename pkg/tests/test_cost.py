import json
import time

import numpy as np
import pytest

from utils.cost import (
    Budgets,
    CostReport,
    HardwareConfig,
    SubkernelPolicy,
    area_estimate,
    budget_violations,
    cost_batch,
    estimate_cost,
    load_hardware_config,
    min_remaining_cost,
    reference_report,
    smallest_work_report,
    spatial_energy,
    spatial_latency,
    spatial_slots,
    temporal_cycles,
    temporal_energy,
    temporal_latency,
    total_work,
    within_budgets,
)
from utils.errors import ConfigError, SpecError
from utils.model import PartialPolicy, QbnPolicy, parse_network_spec


@pytest.fixture
def single_layer():
    return parse_network_spec(json.dumps({
        "name": "single",
        "acc_fp": 0.9,
        "layers": [{
            "kind": "conv", "c_in": 1, "c_out": 2, "kernel": 3, "stride": 1, "feature": 5,
            "macs_per_kernel": 900, "act_sensitivity": 1.0,
            "kernels": [{"variance": 0.5}, {"variance": 0.5}],
        }],
    }))


def test_temporal_example(single_layer, hw):
    policy = QbnPolicy(((4, 4),), (2,))
    assert total_work(single_layer, policy) == 14400
    assert temporal_cycles(single_layer, policy, hw) == 1800
    assert temporal_latency(single_layer, policy, hw) == pytest.approx(1.8e-5)
    assert temporal_energy(single_layer, policy, hw) == pytest.approx(14400 / 8 * 1e-12)


def test_cycles_round_up(single_layer, hw):
    policy = QbnPolicy(((1, 0),), (1,))
    assert temporal_cycles(single_layer, policy, hw) == 113
    assert temporal_energy(single_layer, policy, hw) == pytest.approx(900 / 8 * 1e-12)


def test_area_example(single_layer, hw):
    assert area_estimate(single_layer, QbnPolicy(((4, 2),), (8,)), hw) == 42.0
    assert area_estimate(single_layer, QbnPolicy(((0, 0),), (8,)), hw) == hw.base_area


def test_all_pruned_costs_nothing_but_base_area(tiny2x2, hw):
    report = estimate_cost(tiny2x2, QbnPolicy.uniform(tiny2x2, 0, 8), hw, accuracy=0.5)
    assert report.latency_s == 0.0
    assert report.energy_j == 0.0
    assert report.area_units == hw.base_area


def test_tiny2x2_reference(tiny2x2, hw):
    report = reference_report(tiny2x2, hw)
    assert total_work(tiny2x2, QbnPolicy.uniform(tiny2x2, 8, 8)) == 133632
    assert report.latency_s == pytest.approx(1.6704e-4)
    assert report.area_units == 74.0


def test_spatial_four_slots_per_mac(single_layer):
    hw = HardwareConfig(accelerator="spatial")
    policy = QbnPolicy(((4, 4),), (4,))
    assert spatial_slots(single_layer, policy, hw) == 2 * 900 * 4
    assert spatial_latency(single_layer, policy, hw) == pytest.approx(7200 / 16 / 100e6)
    assert spatial_energy(single_layer, policy, hw) == pytest.approx(7200 * 1e-12 * 4)


def test_spatial_digit_rounding(single_layer):
    policy = QbnPolicy(((3, 1),), (5,))
    assert spatial_slots(single_layer, policy, HardwareConfig(fusion_digit_bits=2)) == 900 * (2 * 3 + 1 * 3)
    assert spatial_slots(single_layer, policy, HardwareConfig(fusion_digit_bits=4)) == 900 * (1 * 2 + 1 * 2)
    assert spatial_slots(single_layer, policy, HardwareConfig(fusion_digit_bits=1)) == 900 * (3 * 5 + 1 * 5)


def test_spatial_uses_widest_subkernel(single_layer):
    hw = HardwareConfig(accelerator="spatial")
    whole = spatial_slots(single_layer, QbnPolicy(((6, 2),), (4,)), hw)
    for size in range(1, 9):
        for low in range(0, 7):
            split = SubkernelPolicy(
                parts=((((size, low), (9 - size, 6)), ((9, 2),)),),
                act_qbn=(4,),
            )
            assert spatial_slots(single_layer, split, hw) == whole


def test_spatial_partitions_exhaustive(single_layer):
    hw = HardwareConfig(accelerator="spatial")
    for size in range(1, 9):
        for first in range(9):
            for second in range(9):
                split = SubkernelPolicy(
                    parts=((((size, first), (9 - size, second)), ((9, 0),)),),
                    act_qbn=(3,),
                )
                expected = 900 * -(-max(first, second) // 2) * 2
                assert spatial_slots(single_layer, split, hw) == expected


def test_invalid_partition(single_layer):
    hw = HardwareConfig(accelerator="spatial")
    uncovered = SubkernelPolicy(parts=((((4, 2), (4, 2)), ((9, 2),)),), act_qbn=(4,))
    with pytest.raises(SpecError, match="invalid partition"):
        spatial_slots(single_layer, uncovered, hw)
    empty = SubkernelPolicy(parts=(((), ((9, 2),)),), act_qbn=(4,))
    with pytest.raises(SpecError, match="invalid partition"):
        spatial_slots(single_layer, empty, hw)


def test_estimate_cost_dispatches_on_accelerator(tiny2x2):
    policy = QbnPolicy(((2, 1), (1, 2)), (1, 2))
    temporal = estimate_cost(tiny2x2, policy, HardwareConfig(), 0.5)
    spatial = estimate_cost(tiny2x2, policy, HardwareConfig(accelerator="spatial"), 0.5)
    assert temporal.latency_s == temporal_latency(tiny2x2, policy, HardwareConfig())
    assert spatial.latency_s == spatial_latency(tiny2x2, policy, HardwareConfig(accelerator="spatial"))
    assert temporal.area_units == spatial.area_units


def test_min_remaining_cost_bounds_every_completion(tiny4x4, hw):
    rng = np.random.default_rng(5)
    for _ in range(50):
        prefix = PartialPolicy.empty(tiny4x4)
        decided = int(rng.integers(0, tiny4x4.n_kernels))
        weights = prefix.weights.copy()
        weights[:decided] = rng.integers(0, 9, size=decided)
        acts = prefix.acts.copy()
        acts[: decided // 4] = rng.integers(1, 9, size=decided // 4)
        prefix = PartialPolicy(weights=weights, acts=acts)
        bound = min_remaining_cost(tiny4x4, prefix, hw)
        for _ in range(20):
            completion = prefix.complete(tiny4x4, fill_weight=int(rng.integers(0, 9)), fill_act=int(rng.integers(1, 9)))
            report = estimate_cost(tiny4x4, completion, hw, accuracy=0.0)
            assert report.latency_s >= bound.latency_s
            assert report.energy_j >= bound.energy_j
            assert report.area_units >= bound.area_units


def test_cost_batch_matches_scalar(tiny4x4):
    rng = np.random.default_rng(9)
    weights = rng.integers(0, 9, size=(40, tiny4x4.n_kernels))
    acts = rng.integers(1, 9, size=(40, tiny4x4.n_layer))
    for hw in (HardwareConfig(), HardwareConfig(accelerator="spatial", fusion_digit_bits=4)):
        latency, energy, area = cost_batch(tiny4x4, hw, weights, acts)
        for row in range(40):
            report = estimate_cost(tiny4x4, QbnPolicy.from_flat(tiny4x4, weights[row], acts[row]), hw, 0.0)
            assert latency[row] == pytest.approx(report.latency_s)
            assert energy[row] == pytest.approx(report.energy_j)
            assert area[row] == report.area_units


def test_budget_violations():
    report = CostReport(accuracy=0.5, latency_s=2e-5, energy_j=1e-9, area_units=42.0)
    assert within_budgets(report, None)
    assert within_budgets(report, Budgets(latency_s=2e-5))
    violations = budget_violations(report, Budgets(latency_s=1e-5, area_units=40.0))
    assert len(violations) == 2
    assert violations[0].startswith("latency")


def test_budgets_reject_negative_values():
    with pytest.raises(ConfigError):
        Budgets(latency_s=-1.0)
    with pytest.raises(ConfigError):
        Budgets(energy_j=float("nan"))


def test_hardware_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="lanes"):
        HardwareConfig(lanes=0)
    with pytest.raises(ConfigError, match="fusion_digit_bits"):
        HardwareConfig(fusion_digit_bits=3)
    with pytest.raises(ConfigError, match="accelerator"):
        HardwareConfig(accelerator="gpu")
    with pytest.raises(ConfigError, match="unknown hardware keys"):
        HardwareConfig.from_mapping({"lanes": 8, "cores": 4})
    with pytest.raises(ConfigError, match="unknown budget keys"):
        HardwareConfig.from_mapping({"budgets": {"power": 1.0}})
    broken = tmp_path / "hw.json"
    broken.write_text("{\n  \"lanes\": \n")
    with pytest.raises(ConfigError, match="line"):
        load_hardware_config(broken)


def test_hardware_config_mapping_round_trip():
    hw = HardwareConfig(lanes=16, budgets=Budgets(latency_s=1e-4))
    assert HardwareConfig.from_mapping(hw.to_mapping()) == hw


def test_cost_report_rejects_negative():
    with pytest.raises(ValueError):
        CostReport(accuracy=0.5, latency_s=-1.0, energy_j=0.0, area_units=1.0)


def test_doubling_lanes_halves_cycles(single_layer, hw):
    policy = QbnPolicy(((4, 4),), (2,))
    wide = HardwareConfig(lanes=2 * hw.lanes)
    assert temporal_cycles(single_layer, policy, wide) == temporal_cycles(single_layer, policy, hw) // 2
    assert temporal_latency(single_layer, policy, wide) == pytest.approx(temporal_latency(single_layer, policy, hw) / 2)
    odd = QbnPolicy(((1, 0),), (1,))
    assert temporal_cycles(single_layer, odd, wide) == -(-temporal_cycles(single_layer, odd, hw) // 2)


@pytest.mark.parametrize("accelerator", ["temporal", "spatial"])
def test_energy_grows_with_every_single_raise(tiny2x2, accelerator):
    hw = HardwareConfig(accelerator=accelerator, fusion_digit_bits=1)
    for weights in np.ndindex(*(4,) * tiny2x2.n_kernels):
        for acts in np.ndindex(*(3,) * tiny2x2.n_layer):
            flat_w = np.array(weights) + 1
            flat_a = np.array(acts) + 1
            base = estimate_cost(tiny2x2, QbnPolicy.from_flat(tiny2x2, flat_w, flat_a), hw, 0.0).energy_j
            for index in range(tiny2x2.n_kernels):
                raised = flat_w.copy()
                raised[index] += 1
                assert estimate_cost(tiny2x2, QbnPolicy.from_flat(tiny2x2, raised, flat_a), hw, 0.0).energy_j > base
            for layer in range(tiny2x2.n_layer):
                raised = flat_a.copy()
                raised[layer] += 1
                assert estimate_cost(tiny2x2, QbnPolicy.from_flat(tiny2x2, flat_w, raised), hw, 0.0).energy_j > base


def test_whole_kernel_policy_matches_its_partition(tiny4x4):
    hw = HardwareConfig(accelerator="spatial")
    policy = QbnPolicy.uniform(tiny4x4, 5, 3)
    assert spatial_slots(tiny4x4, SubkernelPolicy.from_policy(tiny4x4, policy), hw) == spatial_slots(tiny4x4, policy, hw)


@pytest.mark.parametrize("accelerator", ["temporal", "spatial"])
def test_estimators_stay_under_a_millisecond(accelerator):
    layers = [
        {
            "kind": "conv", "c_in": 8, "c_out": 1000, "kernel": 3, "stride": 1, "feature": 8,
            "macs_per_kernel": 576, "act_sensitivity": 1.0,
            "kernels": [{"variance": 0.5}] * 1000,
        }
        for _ in range(10)
    ]
    net = parse_network_spec(json.dumps({"name": "wide", "acc_fp": 0.9, "layers": layers}))
    hw = HardwareConfig(accelerator=accelerator)
    rng = np.random.default_rng(11)
    timings = []
    for _ in range(5):
        policy = QbnPolicy.from_flat(net, rng.integers(0, 9, size=net.n_kernels), rng.integers(1, 9, size=net.n_layer))
        # first call flattens the policy
        estimate_cost(net, policy, hw, accuracy=0.5)
        start = time.perf_counter()
        estimate_cost(net, policy, hw, accuracy=0.5)
        timings.append(time.perf_counter() - start)
    assert net.n_kernels == 10 ** 4
    assert min(timings) < 1e-3


def test_smallest_work_report(tiny2x2, hw):
    floor = smallest_work_report(tiny2x2, hw)
    assert floor.latency_s == pytest.approx(9 / 100e6)
    assert floor.energy_j == pytest.approx(72 / 8 * 1e-12)
    assert floor.area_units == hw.base_area + hw.lanes
