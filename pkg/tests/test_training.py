import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtvl import tensor as tn
from mtvl.data import generate_dataset, make_splits
from mtvl.model import ModelConfig, MultiTaskModel
from mtvl.tensor import Tensor
from mtvl.training import (
    LOSSES, Adam, EpochSampler, StarvationError, TaskSpec, allocate_slots, bce, build_task_sequence,
    curriculum_run, derive_joint_plan, icr_loss, icr_loss_from_scores, lr_schedule, train, training_pools,
    vg_loss,
)

SMALL = ModelConfig(d=8, depth=3, k=2, taps={"ICR": 2, "VQA": 3, "VG": 1})


@pytest.fixture(scope="module")
def worlds():
    return generate_dataset(40, seed=0)


@pytest.fixture(scope="module")
def pools(worlds):
    return training_pools(worlds, make_splits(40, seed=0))


def specs(iters=(6, 4, 4), bs=4, steps=(3, 2, 2), config=SMALL):
    return [TaskSpec(t, config.taps[t], bs, n, s) for t, n, s in zip(("ICR", "VQA", "VG"), iters, steps)]


# ---------------------------------------------------------------- losses


def test_bce_examples():
    assert bce([1.0], Tensor([1.0])).item() == pytest.approx(0.0, abs=1e-11)
    assert bce([1.0], Tensor([0.5])).item() == pytest.approx(math.log(2), abs=1e-4)
    assert bce([0.0], Tensor([0.5])).item() == pytest.approx(math.log(2), abs=1e-4)
    assert bce([0.0], Tensor([0.0])).item() >= 0.0
    # fractional targets use the same formula
    assert bce([0.3], Tensor([0.3])).item() == pytest.approx(-(0.3 * math.log(0.3) + 0.7 * math.log(0.7)))


def test_icr_loss_examples():
    assert icr_loss_from_scores(Tensor([0.8, 0.8]), Tensor([0.2, 0.2])).item() == pytest.approx(0.2231, abs=1e-3)
    assert icr_loss_from_scores(Tensor([0.5, 0.5]), Tensor([0.5, 0.5])).item() == pytest.approx(math.log(2))
    assert icr_loss_from_scores(Tensor([1.0, 1.0]), Tensor([0.0, 0.0])).item() == pytest.approx(0.0, abs=1e-10)


def test_vg_loss_example_via_masked_bce():
    scores = Tensor([[[0.9, 0.1, 0.7]]])
    targets = np.array([[[1.0, 0.0, 0.0]]])
    cells = np.array([[[1.0, 1.0, 0.0]]])  # third region is padding
    assert bce(targets, scores, cells).item() == pytest.approx(0.1054, abs=1e-3)


def test_uniform_model_losses_are_ln2(worlds):
    model = MultiTaskModel(SMALL, seed=0)
    for name, p in model.decoders.named_parameters():
        p.data[...] = 0.0
    for task, fn in LOSSES.items():
        assert fn(worlds[:4], model, training=False).item() == pytest.approx(math.log(2), abs=1e-12), task


def test_loss_errors(worlds):
    model = MultiTaskModel(SMALL, seed=0)
    with pytest.raises(ValueError):
        icr_loss(worlds[:1], model)
    with pytest.raises(ValueError):
        vg_loss([], model)


# ---------------------------------------------------------------- optimizer


def test_adam_zero_gradient_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    opt = Adam()
    opt.step({"p": p})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    np.testing.assert_array_equal(opt.m["p"], 0.0)
    np.testing.assert_array_equal(opt.v["p"], 0.0)
    assert p.grad is None


def test_adam_first_step_moves_by_lr():
    for g in (3.0, -0.01):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([g])
        Adam(lr=0.001).step({"p": p})
        assert p.data[0] == pytest.approx(-0.001 * np.sign(g), rel=1e-5)


def test_adam_momentum_accumulates():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam()
    p.grad = np.array([1.0])
    opt.step({"p": p})
    one = -p.data[0]
    p.grad = np.array([1.0])
    opt.step({"p": p})
    assert -p.data[0] > one


def test_adam_matches_reference_simulation():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam(lr=0.01)
    m = v = np.zeros(3)
    x = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        opt.step({"p": p})
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=1e-12)


def test_adam_rejects_non_finite_gradient():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([0.0, np.nan])
    with pytest.raises(FloatingPointError, match="weights"):
        Adam().step({"weights": p})


def test_adam_skips_parameters_without_gradient():
    a, b = Tensor(np.ones(1), requires_grad=True), Tensor(np.ones(1), requires_grad=True)
    a.grad = np.ones(1)
    opt = Adam()
    opt.step({"a": a, "b": b})
    assert b.data[0] == 1.0 and "b" not in opt.steps and opt.steps["a"] == 1


# ---------------------------------------------------------------- lr schedule


def test_lr_schedule_examples():
    assert lr_schedule(99, 100, 0.001) == 0.001
    assert lr_schedule(100, 100, 0.001) == 0.0005
    assert lr_schedule(200, 100, 0.001) == pytest.approx(0.00025)
    with pytest.raises(ValueError):
        lr_schedule(0, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 50))
def test_lr_schedule_piecewise_constant(step):
    values = [lr_schedule(i, step) for i in range(5 * step)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    breaks = [i for i in range(1, len(values)) if values[i] != values[i - 1]]
    assert breaks == [step * k for k in range(1, 5)]


# ---------------------------------------------------------------- plans


def test_plan_examples():
    plan = derive_joint_plan([TaskSpec("ICR", 3, 8, 300, 100), TaskSpec("VQA", 5, 8, 200, 50)], cycle=5)
    assert plan.total_iter == 500 and plan.total_step == 150
    assert plan.alphas == (Fraction(3, 5), Fraction(2, 5))
    three = derive_joint_plan([TaskSpec(t, 1, 1, 10, s) for t, s in zip(("ICR", "VQA", "VG"), (100, 50, 50))])
    assert three.total_step == 200
    single = derive_joint_plan([TaskSpec("VG", 2, 4, 8, 4)], cycle=4)
    assert single.alphas == (1,) and build_task_sequence(single) == [1] * 8
    with pytest.raises(ValueError):
        derive_joint_plan([])


def test_task_sequence_examples():
    plan = derive_joint_plan([TaskSpec("ICR", 3, 8, 6, 1), TaskSpec("VQA", 5, 8, 4, 1)], cycle=5)
    assert build_task_sequence(plan) == [1, 1, 1, 2, 2, 1, 1, 1, 2, 2]
    equal = derive_joint_plan([TaskSpec("ICR", 3, 8, 2, 1), TaskSpec("VQA", 5, 8, 2, 1)], cycle=2)
    assert build_task_sequence(equal) == [1, 2, 1, 2]


def test_starvation_rejected():
    with pytest.raises(StarvationError):
        derive_joint_plan([TaskSpec("ICR", 1, 1, 100, 1), TaskSpec("VQA", 1, 1, 1, 1)], cycle=10)


def test_slots_sum_to_cycle_with_largest_remainder():
    assert allocate_slots([Fraction(1, 3)] * 3, 10) == [4, 3, 3]
    assert allocate_slots([Fraction(3, 5), Fraction(2, 5)], 5) == [3, 2]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 500), min_size=1, max_size=3), st.integers(1, 20))
def test_sequence_counts_are_exact(iters, cycle):
    spec_list = [TaskSpec(t, 1, 1, n, 1) for t, n in zip(("ICR", "VQA", "VG"), iters)]
    try:
        plan = derive_joint_plan(spec_list, cycle)
    except StarvationError:
        return
    seq = build_task_sequence(plan)
    assert sum(plan.slots) == cycle
    assert len(seq) == plan.num_cycle * cycle
    for i, (n, a) in enumerate(zip(plan.slots, plan.alphas), start=1):
        assert seq.count(i) == plan.num_cycle * n
        assert abs(n - cycle * a) < 1


# ---------------------------------------------------------------- loop


def test_epoch_sampler_covers_pool_before_repeating():
    sampler = EpochSampler(list(range(10)), 5, np.random.default_rng(0))
    assert sorted(sampler.next() + sampler.next()) == list(range(10))


@pytest.mark.parametrize("task", ["ICR", "VQA", "VG"])
def test_gradients_stay_on_the_active_path(worlds, task):
    model = MultiTaskModel(SMALL, seed=0)
    loss = LOSSES[task](worlds[:4], model, training=True, rng=np.random.default_rng(0))
    tn.backward(loss)
    tap = SMALL.taps[task]
    prefix = {"ICR": "icr.", "VQA": "vqa.", "VG": "vg."}[task]
    for name, p in model.named_parameters().items():
        active = not name.startswith(("icr.", "vqa.", "vg.")) or name.startswith(prefix)
        if name.startswith("dcl."):
            active = int(name.split(".")[1]) <= tap
        has_grad = p.grad is not None and np.any(p.grad != 0)
        if not active:
            assert not has_grad, name
        elif name.startswith(("dcl.", prefix)):
            assert p.grad is not None, name


def test_zero_learning_rate_leaves_parameters(pools):
    model = MultiTaskModel(SMALL, seed=0)
    before = model.checksum()
    train(derive_joint_plan(specs(), 5), model, pools, seed=0, base_lr=0.0)
    assert model.checksum() == before


def test_update_counts_and_log(pools):
    plan = derive_joint_plan(specs(), 7)  # slots (3, 2, 2), two cycles
    lines = []
    res = train(plan, MultiTaskModel(SMALL, seed=0), pools, seed=0, log_sink=lines.append)
    assert res.updates == {"ICR": 6, "VQA": 4, "VG": 4}
    assert len(lines) == 14 and lines[0].startswith("iter=0 task=ICR lr=0.001 loss=")
    assert [r.lr for r in res.log][-1] == pytest.approx(0.001 * 0.5 ** (13 // 7))


def test_training_is_bit_reproducible(pools):
    plan = derive_joint_plan(specs(), 5)
    runs = []
    for _ in range(2):
        model = MultiTaskModel(SMALL, seed=3)
        res = train(plan, model, pools, seed=7)
        runs.append(([r.format() for r in res.log], model.checksum()))
    assert runs[0] == runs[1]
    model = MultiTaskModel(SMALL, seed=3)
    train(plan, model, pools, seed=8)
    assert model.checksum() != runs[0][1]


def test_tap_mismatch_rejected(pools):
    bad = [TaskSpec("ICR", 3, 4, 4, 1)]
    with pytest.raises(ValueError, match="tap"):
        train(derive_joint_plan(bad, 2), MultiTaskModel(SMALL), pools)


def test_contaminated_manifest_aborts(pools):
    manifest = make_splits(40, seed=0)
    manifest.pools["ICR"]["train"].append(manifest.pools["VG"]["test"][0])
    with pytest.raises(Exception, match=str(manifest.pools["VG"]["test"][0])):
        train(derive_joint_plan(specs(), 5), MultiTaskModel(SMALL), pools, manifest=manifest)


def test_curriculum_single_stage_equals_train(pools):
    spec_map = {s.task: s for s in specs()}
    a = MultiTaskModel(SMALL, seed=1)
    curriculum_run(spec_map, 5, [["ICR"]], a, pools, seed=4)
    b = MultiTaskModel(SMALL, seed=1)
    train(derive_joint_plan([spec_map["ICR"]], 5), b, pools, seed=4)
    assert a.checksum() == b.checksum()


def test_curriculum_carries_parameters(pools):
    model = MultiTaskModel(SMALL, seed=1)
    res = curriculum_run(specs(), 5, [["ICR"], ["ICR", "VQA"], ["ICR", "VQA", "VG"]], model, pools)
    assert len(res.stages) == 3
    for (_, after), (before, _) in zip(res.checksums, res.checksums[1:]):
        assert after == before
    assert [p.tasks for p in res.plans][-1] == tuple(specs())
    assert res.stages[1].log[0].iter == len(res.stages[0].log)


def test_curriculum_errors(pools):
    with pytest.raises(KeyError):
        curriculum_run(specs()[:1], 5, [["VQA"]], MultiTaskModel(SMALL), pools)
    with pytest.raises(ValueError):
        curriculum_run(specs(), 5, [["ICR", "VQA"], ["ICR"]], MultiTaskModel(SMALL), pools)
