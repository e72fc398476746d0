import numpy as np
import pytest

from partmatch import training
from partmatch.tensor_io import load_manifest
from partmatch.training import (TrainConfig, build_model, classifier_accuracy, forward_backward, load_train_split,
                                pair_batches, pretrain_classifiers, stripe_features, train, train_step)


@pytest.fixture(scope="module")
def split(tiny_dataset):
    _, feats, poses, labels = load_train_split(load_manifest(tiny_dataset / "manifest.jsonl"))
    return feats, poses, labels


@pytest.fixture(scope="module")
def bank(split):
    feats, _, labels = split
    return pretrain_classifiers(feats, labels, 6)


def _model(split, **kw):
    feats, poses, _ = split
    cfg = TrainConfig(batch_size=8, epochs=2, **kw)
    return cfg, build_model(cfg, poses.shape[-2:], feats.shape[-2:])


def _pair_batch(split, n_pairs=4):
    feats, poses, labels = split
    rows = []
    for y in range(n_pairs):
        rows.extend(np.flatnonzero(labels == y)[:2])
    rows = np.array(rows)
    return feats[rows], poses[rows], labels[rows]


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.epochs, cfg.lr, cfg.lam, cfg.n_parts) == (32, 30, 0.002, 0.9, 6)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(pseudo_label="threshold")  # needs tau
    with pytest.raises((ValueError, TypeError)):
        TrainConfig.from_dict({"batch_size": 8, "momentum": 0.9})


def test_pretrain_separable_and_deterministic(split, bank):
    feats, _, labels = split
    assert classifier_accuracy(bank, feats, labels) >= 0.99
    assert pretrain_classifiers(feats, labels, 6).checksum() == bank.checksum()
    assert bank.frozen
    with pytest.raises(ValueError):
        pretrain_classifiers(feats[:2], np.zeros(2, dtype=int), 6)


def test_stripe_features_are_row_band_means(split):
    feats = split[0][:2]
    parts = stripe_features(feats, 6)
    np.testing.assert_allclose(parts[1, 2], feats[1, :, 4:6].mean(axis=(1, 2)), rtol=1e-6)


def test_lr_zero_leaves_parameters_but_updates_state(split, bank):
    cfg, model = _model(split, lr=0.0)
    before = {k: v.copy() for k, v in model.arrays().items() if not k.startswith(("ma.", "pvp.running"))}
    train_step(model, bank, *_pair_batch(split), cfg)
    after = model.arrays()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert model.state.count == 2  # initialised on the first batch, then updated after the step


def test_routing_classification_only_leaves_pvp_unchanged(split, bank):
    cfg, model = _model(split, pseudo_label="threshold", tau=float("inf"))
    pvp_before = {k: getattr(model.pvp, k).copy() for k in ("weight", "bias", "gamma", "beta")}
    pe_before = model.pe.w1.copy()
    metrics, grads, v_star, _ = forward_backward(model, bank, *_pair_batch(split), cfg)
    assert not v_star.any() and metrics["L_v"] == 0 and metrics["L_m"] == 0
    assert all(not g.any() for g in grads["pvp"].values())
    train_step(model, bank, *_pair_batch(split), cfg)
    assert all(np.array_equal(pvp_before[k], getattr(model.pvp, k)) for k in pvp_before)
    assert not np.array_equal(pe_before, model.pe.w1)


def test_bank_untouched_by_training(split, bank):
    cfg, model = _model(split)
    before = bank.checksum()
    train(model, bank, *split, cfg)
    assert bank.checksum() == before


def test_unfrozen_bank_rejected(split, bank):
    cfg, model = _model(split)
    from partmatch.losses import ToyClassifierBank
    with pytest.raises(ValueError):
        train(model, ToyClassifierBank(bank.weight.copy(), bank.bias.copy()), *split, cfg)


def test_batch_must_hold_pairs(split, bank):
    cfg, model = _model(split)
    f, p, y = _pair_batch(split)
    with pytest.raises(ValueError):
        train_step(model, bank, f[:1], p[:1], y[:1], cfg)
    with pytest.raises(ValueError):
        train_step(model, bank, f[1:3], p[1:3], y[1:3], cfg)


def test_t_steps_give_t_rows(split, bank):
    cfg, model = _model(split, max_iters=3)
    rows = train(model, bank, *split, cfg)
    assert [r["step"] for r in rows] == [1, 2, 3]
    cfg, model = _model(split)
    rows = train(model, bank, *split, cfg)
    assert len(rows) == 4  # 8 identities, 4 per batch: 2 batches per epoch, 2 epochs
    assert {"L_v", "L_m", "L_c", "mean_selected", "lr"} <= set(rows[0])


def test_pair_batches_layout(split):
    labels = split[2]
    cfg = TrainConfig(batch_size=8)
    batches = list(pair_batches(labels, cfg, np.random.default_rng(0)))
    assert len(batches) == 2
    seen = []
    for b in batches:
        assert len(b) == 8
        assert np.all(labels[b[0::2]] == labels[b[1::2]])
        assert np.all(b[0::2] != b[1::2])
        seen.extend(labels[b[0::2]])
    assert sorted(seen) == list(range(8))


@pytest.mark.xfail(strict=True, reason="argmax part reassignment, pseudo-label flips and the moving edge "
                                       "average make the step objective discontinuous; see the smooth checks below")
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_non_increasing_small_lr(split, bank, seed):
    cfg, model = _model(split, lr=1e-4, seed=seed)
    batch = _pair_batch(split)
    totals = []
    for _ in range(10):
        m = train_step(model, bank, *batch, cfg).metrics
        totals.append(m["L_v"] + m["L_m"] + m["L_c"])
    assert all(b <= a + 1e-9 for a, b in zip(totals, totals[1:])), totals


def _frozen_total(model, bank, batch, cfg, v_star, monkeypatch):
    """Summed L_v + L_m + L_c with pseudo-labels held at ``v_star`` and the EMA state untouched."""
    monkeypatch.setattr(training, "pseudo_labels", lambda raw, model, cfg: v_star)
    pvp_stats = (model.pvp.running_mean.copy(), model.pvp.running_var.copy())
    metrics, grads, _, _ = forward_backward(model, bank, *batch, cfg)
    model.pvp.running_mean, model.pvp.running_var = pvp_stats
    n_pairs = batch[0].shape[0] // 2
    return n_pairs * (metrics["L_v"] + metrics["L_m"] + metrics["L_c"]), grads


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_routed_gradient_is_total_loss_gradient(split, bank, seed, monkeypatch):
    cfg, model = _model(split, seed=seed)
    batch = _pair_batch(split)
    _, _, v_star, raw = forward_backward(model, bank, *batch, cfg)
    _, grads = _frozen_total(model, bank, batch, cfg, v_star, monkeypatch)
    rng = np.random.default_rng(seed)
    groups = {"pe": model.pe, "pga": model.pga, "pvp": model.pvp}
    for group, name in [("pe", "w1"), ("pe", "b2"), ("pga", "weight"), ("pga", "bias"), ("pvp", "weight"),
                        ("pvp", "gamma"), ("pvp", "beta")]:
        arr = getattr(groups[group], name)
        for flat in rng.choice(arr.size, size=min(4, arr.size), replace=False):
            idx = np.unravel_index(flat, arr.shape)
            orig = arr[idx]
            h = 1e-6
            arr[idx] = orig + h
            up, _ = _frozen_total(model, bank, batch, cfg, v_star, monkeypatch)
            arr[idx] = orig - h
            down, _ = _frozen_total(model, bank, batch, cfg, v_star, monkeypatch)
            arr[idx] = orig
            numeric = (up - down) / (2 * h)
            assert grads[group][name][idx] == pytest.approx(numeric, rel=1e-4, abs=1e-6), (group, name, idx)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_small_step_descends_with_frozen_choices(split, bank, seed, monkeypatch):
    cfg, model = _model(split, seed=seed)
    batch = _pair_batch(split)
    _, _, v_star, _ = forward_backward(model, bank, *batch, cfg)
    before, grads = _frozen_total(model, bank, batch, cfg, v_star, monkeypatch)
    training.sgd_update(model, grads, 1e-6)
    after, _ = _frozen_total(model, bank, batch, cfg, v_star, monkeypatch)
    assert after < before


def test_training_deterministic(split, bank):
    outs = []
    for _ in range(2):
        cfg, model = _model(split, max_iters=4)
        rows = train(model, bank, *split, cfg)
        outs.append((rows, {k: v.tobytes() for k, v in model.arrays().items()}))
    assert outs[0] == outs[1]
