"""Analytical FLOPs model."""

import pytest

from visflow.cost import (
    ARCH_PRESETS,
    ArchDims,
    arch_preset,
    layer_flops,
    preset_cost,
    schedule_cost,
    toy_model_cost,
)
from visflow.errors import ConfigError
from visflow.prune import PruneSchedule, PruneStage, schedule_preset

TFLOP = 1e12


def test_layer_flops_formula():
    dims = ArchDims(layers=1, hidden=3, ffn=5)
    n = 7
    expected = 4 * n * 9 + 2 * 49 * 3 + 2 * n * 3 * 5
    assert layer_flops(n, dims) == expected


def test_seven_b_table_values():
    profile = preset_cost("llava-7b", 576, "aggressive")
    assert profile.baseline_flops / TFLOP == pytest.approx(2.98, abs=0.02)
    assert profile.pruned_flops / TFLOP == pytest.approx(0.73, abs=0.02)
    assert 100.0 * profile.ratio == pytest.approx(24.0, abs=1.0)


def test_thirteen_b_table_values():
    profile = preset_cost("llava-13b", 576, "aggressive")
    assert profile.baseline_flops / TFLOP == pytest.approx(5.81, abs=0.03)
    assert profile.pruned_flops / TFLOP == pytest.approx(1.36, abs=0.02)
    assert 100.0 * profile.ratio == pytest.approx(23.0, abs=1.0)


def test_thirteen_b_prunes_at_its_own_shallow_layer():
    # the deeper model ranks after layer 3, not 2
    preset = arch_preset("llava-13b")
    assert preset.shallow_filter_layer == 3


def test_segments_partition_depth():
    profile = preset_cost("llava-7b", 576, "aggressive")
    bounds = [(s.start_layer, s.end_layer) for s in profile.segments]
    assert bounds[0][0] == 0
    assert bounds[-1][1] == ARCH_PRESETS["llava-7b"].dims.layers
    for (a, b), (c, d) in zip(bounds, bounds[1:]):
        assert b == c
    assert [s.n_tokens for s in profile.segments] == [576, 288, 72]


def test_token_counts_match_executed_pruning():
    # 50% of 576 drops 288; 75% of the 288 survivors drops 216, leaving 72
    sched = PruneSchedule((PruneStage(2, 50.0, "phi_sh"),
                           PruneStage(8, 75.0, "phi_dp")))
    profile = schedule_cost(ArchDims(32, 4096, 11008), 576, sched)
    assert [s.n_tokens for s in profile.segments] == [576, 288, 72]


def test_empty_schedule_costs_baseline():
    profile = schedule_cost(ArchDims(8, 64, 128), 36, PruneSchedule(()))
    assert profile.pruned_flops == profile.baseline_flops
    assert profile.eta == 0.0


def test_toy_model_cost_eta():
    profile = toy_model_cost(8, 64, 128, 36, schedule_preset("toy-aggressive"))
    assert profile.baseline_flops == 10_764_288.0
    assert profile.pruned_flops == 4_621_824.0
    assert profile.eta == pytest.approx(0.57063, abs=5e-6)
    assert profile.eta >= 0.5


def test_ratio_is_pruned_over_baseline():
    profile = toy_model_cost(8, 64, 128, 36, schedule_preset("toy-aggressive"))
    assert profile.ratio == profile.pruned_flops / profile.baseline_flops


def test_unknown_arch_rejected():
    with pytest.raises(ConfigError):
        arch_preset("llava-70b")


def test_cost_counts_only_image_tokens_for_pruning():
    # pruning with zero image tokens changes nothing
    sched = schedule_preset("toy-aggressive")
    profile = schedule_cost(ArchDims(8, 64, 128), 0, sched)
    assert profile.pruned_flops == profile.baseline_flops
