import csv

import numpy as np
import pytest

from reat.attacks import AttackConfig
from reat.datasets import LongTailSpec, build_long_tailed, split_per_class, synthetic_gaussians
from reat.models import ModelSpec, init_model, load_checkpoint
from reat.rebalance import effective_numbers, rbl_weights
from reat.trainer import TrainConfig, TrainingError, init_state, lr_at_epoch, run_training, train_epoch

ATTACK = AttackConfig(epsilon=0.05, alpha=0.0125, steps=3)


def _task(seed=0):
    src = synthetic_gaussians(3, 6, 0.6, 140, seed=0)
    pool, probe = split_per_class(src, 40, seed=0)
    train, sizes = build_long_tailed(pool, LongTailSpec(3, 10, 100, seed=seed, counts=(100, 30, 10)))
    return train, probe, sizes


def _model(seed=0, **kw):
    return init_model(ModelSpec((6,), 3, widths=(16,), feature_dim=8, init_seed=seed, **kw))


def _cfg(**kw):
    base = dict(method="reat", epochs=3, batch_size=32, lr0=0.05, attack=ATTACK, lam_tail=0.03, probe_size=60, probe_steps=3)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(decay_points=(0.9, 0.5))
    with pytest.raises(ValueError):
        TrainConfig(decay_points=(1.0,))
    with pytest.raises(ValueError):
        TrainConfig(lam_tail=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(method="trades")
    with pytest.raises(ValueError):
        TrainConfig(lt_loss="mse")


def test_step_schedule_80_epochs():
    cfg = TrainConfig(epochs=80, lr0=0.1)
    assert lr_at_epoch(cfg, 0) == pytest.approx(0.1)
    assert lr_at_epoch(cfg, 59) == pytest.approx(0.1)
    assert lr_at_epoch(cfg, 60) == pytest.approx(0.01)
    assert lr_at_epoch(cfg, 75) == pytest.approx(0.001)


def test_generation_attacks():
    assert _cfg(method="pgd-at").generation_attack().objective == "ce"
    assert _cfg(method="pgd-at").generation_attack().step_rule == "sign"
    g = _cfg().generation_attack()
    assert g.objective == "rbl" and g.step_rule == "weighted-sign"
    assert _cfg().probe_attack().steps == 3


def test_reduction_reat_equals_pgd_at():
    train, _, sizes = _task()
    ma, mb = _model(), _model()
    a = init_state(ma, sizes, _cfg(method="pgd-at"))
    red = _cfg(lam_tail=0.0, rbl_weights="uniform", reat_step_rule="sign")
    b = init_state(mb, sizes, red)
    for _ in range(2):
        sa = train_epoch(a, train, _cfg(method="pgd-at"))
        sb = train_epoch(b, train, red)
        assert sa.loss == sb.loss
    assert all(ma.params[k].tobytes() == mb.params[k].tobytes() for k in ma.params)


def test_weight_freeze_discipline_and_counts():
    train, _, sizes = _task()
    cfg = _cfg()
    state = init_state(_model(), sizes, cfg)
    np.testing.assert_allclose(state.weights, rbl_weights(effective_numbers(sizes, sizes)))
    prev_counts = None
    for _ in range(3):
        before = state.weights.copy()
        stats = train_epoch(state, train, cfg)
        assert stats.ae_counts.sum() == len(train)
        np.testing.assert_array_equal(stats.weights_used, before)
        if prev_counts is not None:
            np.testing.assert_allclose(before, rbl_weights(effective_numbers(prev_counts, sizes)), rtol=0, atol=0)
        np.testing.assert_array_equal(state.weights, stats.next_weights)
        assert state.counter.total == 0
        prev_counts = stats.ae_counts


def test_run_training_outputs(tmp_path):
    train, probe, sizes = _task()
    res = run_training(_cfg(), _model(), train, sizes, probe=probe, out_dir=tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert len(rows) == 3
    assert [r["epoch"] for r in rows] == ["1", "2", "3"]
    probes = [float(r["probe_robust_acc"]) for r in rows]
    assert res.best_epoch == int(np.argmax(probes)) + 1
    assert res.best_probe_robust == max(probes)
    best, header = load_checkpoint(tmp_path / "best.ckpt")
    assert header["epoch"] == str(res.best_epoch)
    for k, v in res.best_params.items():
        np.testing.assert_array_equal(best.params[k], v.astype(np.float32).astype(np.float64))
    classes = list(csv.DictReader(open(tmp_path / "class_metrics.csv")))
    assert len(classes) == 3 * 3 * 2  # epochs x classes x {train, probe}
    assert {"init.ckpt", "final.ckpt", "timing.csv"} <= {p.name for p in tmp_path.iterdir()}


def test_zero_epochs_writes_only_init(tmp_path):
    train, probe, sizes = _task()
    model = _model()
    res = run_training(_cfg(epochs=0), model, train, sizes, probe=probe, out_dir=tmp_path)
    assert res.history == []
    ckpts = sorted(p.name for p in tmp_path.iterdir() if p.suffix == ".ckpt")
    assert ckpts == ["final.ckpt", "init.ckpt"]
    assert (tmp_path / "final.ckpt").read_bytes().split(b"\n", 1)[1] == (tmp_path / "init.ckpt").read_bytes().split(b"\n", 1)[1]
    assert len(list(csv.DictReader(open(tmp_path / "metrics.csv")))) == 0


def test_training_is_bitwise_deterministic(tmp_path):
    train, probe, sizes = _task()
    for name in ("a", "b"):
        run_training(_cfg(track_ae_distances=True), _model(), train, sizes, probe=probe, out_dir=tmp_path / name)
    for f in ("init.ckpt", "best.ckpt", "final.ckpt", "metrics.csv", "class_metrics.csv", "ae_distances.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_every_lt_loss_trains_finitely():
    train, _, sizes = _task()
    for kind in ("ce", "bsl", "fl", "en", "ldam"):
        res = run_training(_cfg(lt_loss=kind, epochs=1), _model(), train, sizes)
        assert np.isfinite(res.history[0].loss)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_epoch_and_batch():
    train, _, sizes = _task()
    model = _model()
    model.params["head.w"] = model.params["head.w"] * 1e308
    cfg = _cfg(attack=AttackConfig(epsilon=0.0, steps=0))
    with pytest.raises(TrainingError, match="epoch 0 batch 0"):
        train_epoch(init_state(model, sizes, cfg), train, cfg)
