import math

import numpy as np
import pytest

from cloudfusion.losses import CSV_COLUMNS
from cloudfusion.nn import load_checkpoint
from cloudfusion.optim import TrainSchedule
from cloudfusion.simulate import toy_triplets
from cloudfusion.train import (
    ImagePool, Trainer, TrainConfig, TrainingDiverged, fit, paired_indices, predict, prepare_samples, toy_config,
)


def test_pool_empty_returns_same():
    pool = ImagePool(50, seed=0)
    img = np.ones((1, 3, 2, 2))
    assert pool.query(img) is img
    assert len(pool) == 1


def test_pool_fills_to_capacity():
    pool = ImagePool(50, seed=0)
    for i in range(50):
        assert pool.query(np.full((1, 1, 1, 1), float(i)))[0, 0, 0, 0] == i
    assert len(pool) == 50
    pool.query(np.zeros((1, 1, 1, 1)))
    assert len(pool) == 50


def _reference_pool(values, capacity, seed):
    gen = np.random.default_rng(seed)
    stored, returned = [], []
    for v in values:
        if len(stored) < capacity:
            stored.append(v)
            returned.append(v)
            continue
        coin = gen.uniform(0, 1)
        if coin > 0.5:
            slot = int(gen.integers(0, capacity))
            returned.append(stored[slot])
            stored[slot] = v
        else:
            returned.append(v)
    return returned


def test_pool_matches_reference():
    pool = ImagePool(50, seed=123)
    values = list(range(1050))
    got = [int(pool.query(np.full((1,), float(v)))[0]) for v in values]
    assert got == _reference_pool(values, 50, 123)
    swaps = sum(g != v for g, v in zip(got[50:], values[50:]))
    assert 0.45 < swaps / 1000 < 0.55


def test_pool_contents_are_past_outputs():
    pool = ImagePool(5, seed=1)
    pushed = set()
    for v in range(40):
        pushed.add(v)
        pool.query(np.full((1,), float(v)))
        assert len(pool) <= 5
        assert {int(b[0]) for b in pool.buffer} <= pushed


def test_paired_indices():
    assert paired_indices(10, 0.5) == [0, 2, 4, 6, 8]
    assert paired_indices(10, 0.0) == []
    assert paired_indices(10, 1.0) == list(range(10))
    assert paired_indices(10, 0.2) == [0, 5]
    assert paired_indices(20, 0.1) == [0, 10]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(paired_fraction=1.5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=4)


@pytest.fixture(scope="module")
def toy_data():
    return toy_triplets(6, 16, seed=3)


def test_paired_fraction_zero_skips_paired_losses(toy_data):
    res = fit(toy_data, toy_config(seed=1, paired_fraction=0.0), max_steps=6)
    assert all(r.pix is None and r.feat is None and r.style is None for r in res.history)
    assert res.paired == []


def test_paired_fraction_one_computes_paired_losses(toy_data):
    res = fit(toy_data, toy_config(seed=1, paired_fraction=1.0), max_steps=3)
    assert all(r.pix is not None and r.feat is not None and r.style is not None for r in res.history)


def test_ablation_cyc_reduces_to_s1_term(toy_data):
    cfg = toy_config(seed=2, ablate_mask=True)
    trainer = Trainer(cfg)
    sample = prepare_samples(toy_data, cfg)[0]
    b, comps = trainer.generator_forward(sample)
    assert np.all(b.m.data == 1)
    s1_term = np.mean(np.abs(b.m.data * (b.s1.data - b.s1_breve.data)))
    assert comps.cyc.item() == pytest.approx(s1_term, rel=1e-6)
    assert comps.aux.item() == 0.0


def test_ablation_aux_zero_every_step(toy_data):
    res = fit(toy_data, toy_config(seed=2, ablate_mask=True), max_steps=6)
    assert all(r.aux == 0.0 for r in res.history)


def test_determinism_20_steps(toy_data):
    a = fit(toy_data, toy_config(seed=4, paired_fraction=0.5), max_steps=20)
    b = fit(toy_data, toy_config(seed=4, paired_fraction=0.5), max_steps=20)
    assert len(a.history) == 20
    assert a.history == b.history
    sa, sb = a.trainer.models.state_dict(), b.trainer.models.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_lr_trace_follows_schedule(toy_data):
    cfg = toy_config(seed=0, schedule=TrainSchedule(2, 3))
    res = fit(toy_data[:2], cfg)
    expected = [cfg.optimizer.learning_rate * max(0.0, 1 - max(0, 1 + n - 2) / 4) for n in range(5)]
    assert res.lr_trace == pytest.approx(expected, abs=0)
    assert res.lr_trace[:2] == [2e-4, 2e-4]
    assert len(res.history) == 10


def test_smoke_fit_32px(tmp_path):
    data = toy_triplets(8, 32, seed=5)
    cfg = toy_config(seed=5, schedule=TrainSchedule(2, 1), crop=32, paired_fraction=0.5)
    res = fit(data, cfg, out_dir=tmp_path)
    assert len(res.history) == 24
    for r in res.history:
        for v in (r.adv, r.cyc, r.idt, r.aux, r.total, r.d_s1, r.d_s2):
            assert math.isfinite(v)
    assert [p.name for p in res.checkpoints] == ["epoch_0.cfw1", "epoch_1.cfw1", "epoch_2.cfw1"]
    state = load_checkpoint(res.checkpoints[-1])
    assert "g_s1s2.encoder.0.weight" in state
    lines = (tmp_path / "losses.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 25
    pred, m_hat = predict(res.trainer.models, data[0])
    assert pred.shape == (3, 32, 32) and m_hat.shape == (1, 32, 32)


def test_empty_dataset():
    with pytest.raises(ValueError):
        fit([], toy_config())


def test_missing_mask_rejected(toy_data):
    from dataclasses import replace
    bare = [replace(t, mask=None) for t in toy_data]
    with pytest.raises(ValueError):
        prepare_samples(bare, toy_config())
    assert len(prepare_samples(bare, toy_config(ablate_mask=True))) == len(bare)


def test_unpaired_samples_are_shuffled(toy_data):
    samples = prepare_samples(toy_data, toy_config(paired_fraction=0.5))
    assert [s.paired for s in samples] == [True, False, True, False, True, False]
    free = sorted(s.s2_cloudfree.tobytes() for s in samples)
    assert free == sorted(t.s2_cloudfree.data.tobytes() for t in toy_data)


def test_nonfinite_loss_named(toy_data):
    cfg = toy_config(seed=0)
    trainer = Trainer(cfg)
    sample = prepare_samples(toy_data, cfg)[0]
    sample.s1 = sample.s1.copy()
    sample.s1[0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="L_"):
        trainer.train_step(sample)
