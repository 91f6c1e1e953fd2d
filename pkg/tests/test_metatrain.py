import dataclasses

import numpy as np
import pytest
import torch

from mcres.compositions import Level
from mcres.metatrain import (
    MetaConfig, Optimizer, TrainInventory, evaluate_predictions, meta_update, model_config_for, subseed,
    train, train_baseline, virtual_test, virtual_train_step,
)
from mcres.model import SampleStore, checksum, init_params, loss, objective

from conftest import SMALL, flat_sample

QUICK = MetaConfig(epochs=3, iterations_per_epoch=4, embed_dim=4, hidden=8, alpha=1.0, beta=1e-2)


def half_sq(x):
    return 0.5 * (x ** 2).sum()


def shifted(x):
    return 0.5 * ((x - 1) ** 2).sum()


def test_scalar_meta_update():
    theta = torch.tensor([1.0], dtype=torch.float64)
    new, res = meta_update(theta, half_sq, {"k": shifted}, 0.1, 0.1)
    assert abs(float(new) - 0.909) <= 1e-12
    assert float(theta) == 1.0
    same, _ = meta_update(theta, half_sq, {"k": shifted}, 0.1, 1e-300)
    assert float(same) == 1.0


def test_alpha_zero_is_joint_step():
    theta = torch.tensor([0.3, -0.7], dtype=torch.float64)
    new, _ = meta_update(theta, half_sq, {"k": shifted}, 0.0, 0.5)
    assert torch.allclose(new, theta - 0.5 * (theta + (theta - 1)), atol=1e-15, rtol=0)


def test_virtual_step_leaves_theta_alone():
    theta = torch.tensor([1.0, 2.0], dtype=torch.float64)
    before = checksum(theta)
    adapted, value = virtual_train_step(theta, half_sq, 0.1)
    assert torch.allclose(adapted, torch.tensor([0.9, 1.8], dtype=torch.float64))
    assert value == pytest.approx(2.5)
    assert float((adapted - theta).norm()) == pytest.approx(0.1 * float(theta.norm()))
    assert virtual_test(adapted, {"k": shifted})["k"] == pytest.approx(0.5 * (0.1 ** 2 + 0.8 ** 2))
    assert virtual_test(adapted, {}) == {}
    assert checksum(theta) == before
    same, _ = virtual_train_step(theta, half_sq, 0.0)
    assert torch.equal(same, theta)


def test_test_batch_equal_to_train_batch():
    theta = torch.tensor([0.4], dtype=torch.float64)
    adapted, _ = virtual_train_step(theta, half_sq, 0.2)
    assert virtual_test(adapted, {"k": half_sq})["k"] == pytest.approx(float(half_sq(adapted)))


def test_subseeds_are_named():
    assert subseed(0, "split", 1) == subseed(0, "split", 1)
    assert len({subseed(0, "split", e) for e in range(50)}) == 50
    assert subseed(0, "split", 1) != subseed(1, "split", 1)


def test_optimizer_kinds():
    theta = torch.tensor([1.0], dtype=torch.float64)
    g = torch.tensor([0.5], dtype=torch.float64)
    assert float(Optimizer("sgd", 0.1).step(theta, g)) == pytest.approx(0.95)
    assert float(Optimizer("adam", 0.1).step(theta, g)) == pytest.approx(0.9)
    mom = Optimizer("momentum", 0.1, 0.9)
    t1 = mom.step(theta, g)
    t2 = mom.step(t1, g)
    assert float(t2) == pytest.approx(0.95 - 0.1 * (0.9 * 0.5 + 0.5))


def test_config_validation():
    with pytest.raises(ValueError):
        MetaConfig(alpha=0)
    with pytest.raises(ValueError):
        MetaConfig(vtr_fraction=1.0)
    with pytest.raises(ValueError):
        MetaConfig(testing_set_mode="both")


@pytest.fixture(scope="module")
def setup(small_dataset):
    g = SMALL.grammar
    cfg = model_config_for(small_dataset.train, g.shapes, g.colors, QUICK, SMALL.height, SMALL.width)
    return small_dataset, cfg, SampleStore(small_dataset.train, cfg)


def test_objective_descends_on_frozen_batches(setup):
    ds, cfg, store = setup
    ids = [s.id for s in ds.train]
    tr, te = objective(store.batch(ids[:16]), cfg), objective(store.batch(ids[16:32]), cfg)
    theta = init_params(cfg, 0)
    alpha = 0.5

    def total(x):
        x = x.detach().requires_grad_(True)
        with torch.enable_grad():
            (g,) = torch.autograd.grad(tr(x), x)
        return float((tr(x) + te(x - alpha * g)).detach())

    values = [total(theta)]
    for _ in range(60):
        theta, _ = meta_update(theta, tr, {"k": te}, alpha, 0.5)
        values.append(total(theta))
    assert all(b < a for a, b in zip(values, values[1:]))


def test_train_logs_virtuality_and_curriculum(setup):
    ds, cfg, store = setup
    res = train(QUICK, ds.train, cfg, store)
    assert res.steps and all(s.virtual_checksum_ok for s in res.steps)
    by_epoch = {s.epoch: set(s.active_levels) for s in res.steps}
    assert by_epoch == {0: {"WW"}, 1: {"WW", "WP"}, 2: {"WW", "WP", "PP"}}
    for s in res.steps:
        assert set(s.test_losses) <= set(s.active_levels)
        assert np.isfinite(s.train_loss) and all(np.isfinite(v) for v in s.test_losses.values())
    assert res.total_updates == len(res.steps) == 12
    assert len(res.splits) == 3 and len(res.epoch_checkpoints) == 3


def test_train_deterministic(setup):
    ds, cfg, store = setup
    cfg2 = dataclasses.replace(QUICK, epochs=2)
    a, b = train(cfg2, ds.train, cfg, store), train(cfg2, ds.train, cfg, store)
    assert checksum(a.theta) == checksum(b.theta)
    assert [s.to_json() for s in a.steps] == [s.to_json() for s in b.steps]
    assert [s.to_json() for s in a.splits] == [s.to_json() for s in b.splits]


def test_variants_run(setup):
    ds, cfg, store = setup
    for changes in ({"meta": False}, {"testing_set_mode": "merged"}, {"testing_set_mode": "random"},
                    {"curriculum": False}, {"first_order": True}):
        res = train(dataclasses.replace(QUICK, epochs=1, **changes), ds.train, cfg, store)
        assert res.steps
        if changes.get("testing_set_mode") == "merged":
            assert all(set(s.test_losses) == {"merged"} for s in res.steps)
        if changes.get("testing_set_mode") == "random":
            assert not any(sp.annotations for sp in res.splits)
        if changes == {"meta": False}:
            assert res.total_updates == 2 * len(res.steps)
        if changes == {"curriculum": False}:
            assert set(res.steps[0].active_levels) == {"WW", "WP", "PP"}


def test_baseline_zero_epochs_and_budget(setup):
    ds, cfg, store = setup
    res = train_baseline(dataclasses.replace(QUICK, epochs=0), ds.train, cfg, store)
    assert torch.equal(res.theta, init_params(cfg, subseed(QUICK.seed, "init")))
    res = train_baseline(QUICK, ds.train, cfg, store, total_updates=10)
    assert res.total_updates == 10 and [len([s for s in res.steps if s.epoch == e]) for e in range(3)] == [4, 3, 3]


def test_baseline_loss_decreases(setup):
    ds, cfg, store = setup
    cfg_b = dataclasses.replace(QUICK, epochs=4)
    res = train_baseline(cfg_b, ds.train, cfg, store, total_updates=80)
    batch = store.batch([s.id for s in ds.train[:200]])
    per_epoch = [float(loss(th, batch, cfg)) for th in res.epoch_checkpoints]
    assert all(b <= a for a, b in zip(per_epoch, per_epoch[1:]))


def test_novel_labelling_by_hand():
    train_corpus = [flat_sample("a", "dark table"), flat_sample("b", "black coffee"), flat_sample("c", "red cup")]
    test = [flat_sample("t0", "dark coffee"), flat_sample("t1", "dark table"), flat_sample("t2", "green coffee"),
            flat_sample("t3", "red table"), flat_sample("t4", "black cup"), flat_sample("t5", "cup red"),
            flat_sample("t6", "red cup"), flat_sample("t7", "table dark"), flat_sample("t8", "coffee"),
            flat_sample("t9", "blue mug")]
    hand = [True, False, False, True, True, True, False, True, False, False]
    inv = TrainInventory.of(train_corpus)
    assert [inv.is_novel(s) for s in test] == hand


def test_perfect_predictor_has_no_gap(small_dataset):
    inv = TrainInventory.of(small_dataset.train)
    preds = np.stack([np.asarray(s.mask, dtype=float) for s in small_dataset.test])
    rep = evaluate_predictions(preds, small_dataset.test, inv)
    assert rep.gap == 0.0
    assert all(v == 1.0 for v in rep.overall.values())
    assert rep.sizes["novel"] + rep.sizes["non_novel"] == rep.sizes["total"] == len(small_dataset.test)
    assert rep.sizes["novel"] > 0
