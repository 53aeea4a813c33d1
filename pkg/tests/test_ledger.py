import math

import pytest

from budgetcl.ledger import (BudgetLedger, adam_update_flops, backward_flops, check_budget,
                             forward_flops, memory_capacity, mib, plan_memory, sar_overhead_flops,
                             step_flops)
from budgetcl.netcore import LayerProfile, build_network, parse_layers, profile_layers

PROFILES = [LayerProfile(10, 20, 5), LayerProfile(10, 20, 5), LayerProfile(10, 20, 5)]


def test_step_flops_worked_example():
    # forward 160*3*10 + backward 160*2*20 with one layer frozen
    assert step_flops(PROFILES, 1, 160) == 4800 + 6400
    assert step_flops(PROFILES, 0, 16) == 16 * 30 + 16 * 60
    assert step_flops(PROFILES, 3, 16) == forward_flops(PROFILES, 16)


def test_step_flops_rejects_bad_depth():
    with pytest.raises(ValueError):
        step_flops(PROFILES, 4, 16)
    with pytest.raises(ValueError):
        step_flops(PROFILES, -1, 16)


def test_adam_flops():
    assert adam_update_flops(463_504) == 5_562_048
    assert adam_update_flops(0) == 0
    with pytest.raises(ValueError):
        adam_update_flops(-1)


def test_overhead_formulas():
    o = sar_overhead_flops(16, 2000, 10, 463_504, 33, 64)
    assert o.retrieval == 8110
    assert o.freq_update == 2042
    assert o.fisher == 927_107
    # (5 * 463504 * 0.0005 + 3) * 16 = 18588.16 -> rounded half up
    assert o.similarity == 18588
    assert o.bfc == 3 * 33 + 2 * 64


def test_similarity_rounds_half_up():
    # 5 * 100 * 0.001 + 3 = 3.5 per sample, times 1
    assert sar_overhead_flops(1, 1, 1, 100, 1, 1, 0.001).similarity == 4


def test_backward_monotone_in_depth():
    net = build_network(parse_layers("conv2d(1,4,3,3,1,1); relu; maxpool2d(2); flatten; dense(64,10)"), 0, (1, 8, 8))
    prof = profile_layers(net)
    costs = [backward_flops(prof, n, 8) for n in range(len(prof) + 1)]
    assert costs == sorted(costs, reverse=True)
    assert costs[-1] == 0


def test_ledger_categories_sum():
    led = BudgetLedger()
    c1 = led.charge_step(PROFILES, 0, 16, 15, {"retrieval": 7, "fisher": 3})
    c2 = led.charge_step(PROFILES, 2, 16, 5, {"similarity": 11, "bfc": 2})
    assert c1 == step_flops(PROFILES, 0, 16, 15, 10)
    assert c2 == step_flops(PROFILES, 2, 16, 5, 13)
    assert led.training_total == c1 + c2
    assert led.sar_overhead == 18 and led.freeze_overhead == 5
    led.charge_eval(1000)
    assert led.training_total == c1 + c2
    snap = led.snapshot()
    assert snap["eval_flops"] == 1000 and snap["training_total"] == c1 + c2
    with pytest.raises(KeyError):
        led.charge_step(PROFILES, 0, 1, 0, {"bogus": 1})


def test_check_budget():
    assert check_budget(BudgetLedger()).remaining == math.inf
    assert not check_budget(BudgetLedger()).exhausted
    led = BudgetLedger(flops_cap=0)
    assert check_budget(led).exhausted
    led = BudgetLedger(flops_cap=100)
    assert not check_budget(led, 100).exhausted
    assert check_budget(led, 101).exhausted


def test_capacity_planner():
    assert memory_capacity(8_000_000, 1, 463_504, 0, 3072) == 2000
    assert memory_capacity(8_000_000, 3, 463_504, 0, 3072) == 793
    with pytest.raises(ValueError):
        memory_capacity(1000, 1, 463_504, 0, 3072)
    plan = plan_memory(8_000_000, 463_504, 3072)
    assert plan.capacity == 2000
    assert plan.used_bytes() <= 8_000_000


def test_mib():
    assert mib(7.6) == 7_969_178
    assert mib(1) == 2**20
