import numpy as np
import pytest

from budgetcl.freezing import (FreezePolicy, FreezeState, argmax_last, batch_fi_ratio, bfc,
                               choose_depth, info_per_cost, parse_policy, update_fisher)


def brute_ic(trF, ff_total, bf):
    L = len(trF)
    out = []
    for n in range(L + 1):
        info = sum(trF[i] for i in range(n, L))
        cost = ff_total + sum(bf[i] for i in range(n, L))
        out.append(info / cost)
    return out


def brute_bfc(trF, bf, rho, max_ic):
    return [max_ic * sum(bf[:n]) - sum(rho * t for t in trF[:n]) for n in range(len(trF) + 1)]


def test_worked_example():
    ic = info_per_cost([1, 2, 3], 30, [20, 20, 20])
    assert np.allclose(ic, [6 / 90, 5 / 70, 3 / 50, 0], atol=1e-15)
    m = ic.max()
    b1 = bfc([1, 2, 3], [20, 20, 20], 1.0, m)
    assert np.allclose(b1, [0, 0.4285714, -0.1428571, -1.7142857], atol=1e-6)
    assert argmax_last(b1) == 1
    b2 = bfc([1, 2, 3], [20, 20, 20], 0.1, m)
    assert np.allclose(b2, [0, 1.3285714, 2.5571429, 3.6857143], atol=1e-6)
    assert argmax_last(b2) == 3


def test_brute_force_oracle():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        L = int(rng.integers(1, 9))
        trF = rng.exponential(1.0, L) * (rng.random(L) > 0.2)
        ff = rng.integers(1, 10_000, L)
        bf = rng.integers(0, 20_000, L)
        rho = float(rng.exponential(1.0))
        ic = info_per_cost(trF, float(ff.sum()), bf)
        ref = brute_ic(trF, float(ff.sum()), bf)
        assert np.max(np.abs(ic - ref)) < 1e-12
        got = bfc(trF, bf, rho, ic.max())
        ref_b = brute_bfc(trF, bf, rho, max(ref))
        assert np.max(np.abs(got - ref_b)) < 1e-12 * max(1.0, np.max(np.abs(ref_b)))


def test_zero_fisher_and_errors():
    assert np.all(info_per_cost([0, 0], 10, [1, 1]) == 0)
    with pytest.raises(ValueError):
        info_per_cost([1], 0, [1])


def test_batch_fi_ratio():
    assert batch_fi_ratio(3.0, 3.0) == 1.0
    assert batch_fi_ratio(0.0, 2.0) == 0.0
    assert batch_fi_ratio(4.0, 2.0) == 2.0
    assert batch_fi_ratio(4.0, 0.0) == 1.0


def test_monotone_in_rho():
    rng = np.random.default_rng(3)
    for _ in range(300):
        L = int(rng.integers(1, 7))
        trF = rng.exponential(1.0, L)
        ff, bf = rng.integers(1, 100, L), rng.integers(1, 200, L)
        m = info_per_cost(trF, float(ff.sum()), bf).max()
        rhos = np.sort(rng.exponential(2.0, 6))
        depths = [argmax_last(bfc(trF, bf, r, m)) for r in rhos]
        assert all(a >= b for a, b in zip(depths, depths[1:]))
    trF = np.array([1.0, 1.0])
    assert argmax_last(bfc(trF, [1, 1], 1e9, 0.1)) == 0


def test_argmax_ties_prefer_deeper():
    assert argmax_last([0, 1, 1, 0]) == 2
    assert argmax_last([0, 0, 0]) == 2


def test_update_fisher():
    st = FreezeState.fresh(3)
    g = {0: {"W": np.array([1.0, 2.0]), "b": np.array([0.0])}, 2: {"W": np.zeros(2), "b": np.zeros(1)}}
    update_fisher(st, g, [True, False, True])
    assert np.allclose(st.trF, [0.05, 0, 0])
    st.trF[:] = [1.0, 0.0, 2.0]
    update_fisher(st, {0: {"W": np.zeros(1)}, 2: {"W": np.zeros(1)}}, [True, False, True])
    assert np.allclose(st.trF, [0.99, 0, 1.98])
    with pytest.raises(ValueError):
        update_fisher(st, {0: {"W": np.zeros(1)}}, [True, False, True])


def test_choose_depth_policies():
    ff, bf = [10, 10, 10], [20, 20, 20]
    st = FreezeState.fresh(3)
    dec = choose_depth(st, FreezePolicy("adaptive"), ff, bf, 1.0, 100)
    assert dec.n_star == 0 and dec.fisher_step and dec.rho == 1.0
    assert st.t == 1 and abs(st.gnorm_sq_ema - 0.01) < 1e-15
    st = FreezeState.fresh(3)
    st.trF[:] = [1, 2, 3]
    st.t, st.gnorm_sq_ema = 1, 2.0
    dec = choose_depth(st, FreezePolicy("adaptive"), ff, bf, 2.0, 100)
    assert not dec.fisher_step and dec.n_star == 1
    st.gnorm_sq_ema = 2.0
    assert choose_depth(st, FreezePolicy("adaptive"), ff, bf, 0.2, 100).n_star == 3
    assert choose_depth(FreezeState.fresh(3), parse_policy("constant(2)"), ff, bf, 1, 10).n_star == 2
    assert choose_depth(FreezeState.fresh(3), parse_policy("none"), ff, bf, 1, 10).n_star == 0
    lin = FreezeState.fresh(20)
    lin.t = 50
    assert choose_depth(lin, parse_policy("linear(16)"), [1] * 20, [1] * 20, 1, 100).n_star == 8
    rng = np.random.default_rng(0)
    st = FreezeState.fresh(3)
    ns = {choose_depth(st, parse_policy("random(2)"), ff, bf, 1, 10, rng).n_star for _ in range(100)}
    assert ns == {0, 1, 2}
    with pytest.raises(ValueError):
        choose_depth(FreezeState.fresh(3), parse_policy("constant(4)"), ff, bf, 1, 10)


def test_adaptive_full_step_every_period():
    st = FreezeState.fresh(2, period=4)
    st.trF[:] = [1e-9, 1e-9]
    fisher = [choose_depth(st, FreezePolicy("adaptive"), [1, 1], [5, 5], 1e-6, 100).fisher_step
              for _ in range(20)]
    assert [i for i, f in enumerate(fisher) if f] == [0, 4, 8, 12, 16]


def test_parse_policy():
    assert parse_policy("random(16)") == FreezePolicy("random", 16)
    assert str(parse_policy(" adaptive ")) == "adaptive"
    for bad in ("random", "sometimes(3)", "const(x)"):
        with pytest.raises(ValueError):
            parse_policy(bad)
