import itertools
import os

import numpy as np
import pytest

from oracle_reference import shedd_losses_ref
from shedd import augment as A
from shedd import data as D
from shedd import losses as L
from shedd import model as M
from shedd import nn
from shedd import tensor as T
from shedd import trainer as TR
from shedd.errors import ConfigError, ContractError


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def tiny_benchmark(seed=3):
    cfg = D.SyntheticBenchConfig(num_classes=3, latent_dim=8, source_channels=4,
                                 target_channels=2, image_size=8,
                                 source_samples=48, target_samples=36,
                                 nuisance_source=1.0, nuisance_target=1.0,
                                 noise=0.3, seed=seed)
    return D.generate_synthetic_benchmark(cfg)


def tiny_config(**overrides):
    base = dict(epochs=2, batch_size=4, labels_per_class=2, channels=(4,),
                embed_dim=8, seed=9, eval_batch=64)
    base.update(overrides)
    return TR.ExperimentConfig(**base)


def tiny_model(seed=1):
    return M.SheddModel.build((4, 8), (2, 8), 3, 8, rng(seed), channels=(4,),
                              source_range=(0.0, 1.0), target_range=(0.0, 1.0))


def fixed_batches(seed=2, batch=2):
    g = rng(seed)
    xs = g.uniform(0, 1, (batch, 4, 8, 8)).astype(np.float32)
    ys = g.integers(0, 3, batch)
    xt = g.uniform(0, 1, (batch, 2, 8, 8)).astype(np.float32)
    yt = g.integers(0, 3, batch)
    xu = g.uniform(0, 1, (batch, 2, 8, 8)).astype(np.float32)
    xu_hat = A.augment_batch(xu, rng(seed + 1), A.AugmentConfig())
    return xs, ys, xt, yt, xu, xu_hat


# ---------------------------------------------------------------------------
# config and ablations

def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(tau=1.5).validate()
    with pytest.raises(ConfigError):
        tiny_config(lr=0.0).validate()
    with pytest.raises(ConfigError):
        cfg = tiny_config()
        cfg.toggles = L.Toggles.none()
        cfg.validate()
    tiny_config().validate()


EXPECTED_ROWS = {
    "abla1": ("cl_st",),
    "abla2": ("cl_st", "orth_st", "dom_st"),
    "abla3": ("cl_st", "orth_st", "dom_st", "orth_uu", "dom_uu"),
    "abla4": ("cl_st", "orth_st", "dom_st", "pl_u"),
    "abla5": ("cl_st", "dom_st", "dom_uu", "pl_u"),
    "abla6": ("cl_st", "orth_st", "orth_uu", "pl_u"),
    "full": ("cl_st", "orth_st", "dom_st", "orth_uu", "dom_uu", "pl_u"),
}


@pytest.mark.parametrize("row,enabled", EXPECTED_ROWS.items())
def test_ablation_toggle_patterns(row, enabled):
    cfg = TR.apply_ablation(tiny_config(), row)
    for name in L.COMPONENTS:
        assert getattr(cfg.toggles, name) == (name in enabled)


def test_unknown_ablation_row():
    with pytest.raises(ConfigError):
        TR.apply_ablation(tiny_config(), "abla9")


# ---------------------------------------------------------------------------
# loss computation vs the independent oracle

def test_losses_match_numpy_reference():
    model = tiny_model()
    xs, ys, xt, yt, xu, xu_hat = fixed_batches()
    total, bundle = TR.compute_losses(model, xs, ys, xt, yt, xu, xu_hat,
                                      tau=0.5, toggles=L.Toggles())
    params = {name: p.data for name, p in model.named_parameters()}
    arch = model.architecture()
    ref = shedd_losses_ref(params, arch, xs, ys, xt, yt, xu, xu_hat, tau=0.5)
    for name in L.COMPONENTS:
        assert getattr(bundle, name) == pytest.approx(ref[name], abs=1e-5), name
    assert bundle.total == pytest.approx(ref["total"], abs=1e-5)
    assert bundle.retained_count == ref["retained"]


def test_total_equals_component_sum_for_all_64_toggle_combos():
    model = tiny_model(seed=5)
    xs, ys, xt, yt, xu, xu_hat = fixed_batches(seed=6)
    for bits in itertools.product([False, True], repeat=6):
        toggles = L.Toggles(**dict(zip(
            ("cl_st", "orth_st", "dom_st", "orth_uu", "dom_uu", "pl_u"), bits)))
        total, bundle = TR.compute_losses(model, xs, ys, xt, yt, xu, xu_hat,
                                          tau=0.5, toggles=toggles)
        enabled_sum = sum(getattr(bundle, name)
                          for name in L.COMPONENTS if getattr(toggles, name))
        assert bundle.total == pytest.approx(enabled_sum, abs=1e-6)
        if total is None:
            assert all(not b for b in bits)


def test_disabled_components_report_zero_and_build_no_graph():
    model = tiny_model(seed=7)
    xs, ys, xt, yt, xu, xu_hat = fixed_batches(seed=8)
    toggles = L.Toggles(cl_st=True, orth_st=False, dom_st=False,
                        orth_uu=False, dom_uu=False, pl_u=False)
    total, bundle = TR.compute_losses(model, xs, ys, xt, yt, xu, xu_hat,
                                      tau=0.5, toggles=toggles)
    for name in ("orth_st", "dom_st", "orth_uu", "dom_uu", "pl_u"):
        assert getattr(bundle, name) == 0.0
    T.backward(total)
    for _, p in model.domain_head.named_parameters():
        assert p.grad is None  # unreachable from the task path
    for _, p in model.task_head.named_parameters():
        assert p.grad is not None


def test_misaligned_batches_rejected():
    model = tiny_model()
    xs, ys, xt, yt, xu, xu_hat = fixed_batches()
    with pytest.raises(ContractError):
        TR.compute_losses(model, xs[:1], ys[:1], xt, yt, xu, xu_hat,
                          tau=0.5, toggles=L.Toggles())


def test_pseudo_label_gradients_ignore_source_prob_values():
    # two detached source-probability tensors with identical mask+labels must
    # produce identical losses and gradients
    logits = T.Tensor(rng(40).uniform(-1, 1, (4, 3)), requires_grad=True, dtype=np.float64)
    probs_a = T.softmax(logits, axis=1)
    base = np.array([[0.98, 0.01, 0.01], [0.4, 0.3, 0.3],
                     [0.1, 0.85, 0.05], [0.2, 0.2, 0.6]])
    shifted = np.array([[0.999, 0.0005, 0.0005], [0.5, 0.25, 0.25],
                        [0.05, 0.9, 0.05], [0.3, 0.1, 0.6]])
    loss_a, _ = L.pseudo_label_loss(base, probs_a, tau=0.5)
    loss_a.backward()
    grad_a = logits.grad.copy()
    logits.zero_grad()
    probs_b = T.softmax(logits, axis=1)
    loss_b, _ = L.pseudo_label_loss(shifted, probs_b, tau=0.5)
    loss_b.backward()
    assert loss_a.item() == pytest.approx(loss_b.item(), abs=1e-9)
    np.testing.assert_allclose(grad_a, logits.grad, atol=1e-9)


def test_perfectly_fit_model_is_near_stationary():
    model = tiny_model(seed=11)
    # saturate the task head toward class 0 and feed class-0 labels only
    model.task_head.linear.bias.data[:] = np.array([30.0, -30.0, -30.0], dtype=np.float32)
    xs, _, xt, _, xu, _ = fixed_batches(seed=12)
    ys = np.zeros(2, dtype=np.int64)
    yt = np.zeros(2, dtype=np.int64)
    cfg = tiny_config()
    cfg.toggles = L.Toggles(cl_st=True, orth_st=False, dom_st=False,
                            orth_uu=False, dom_uu=False, pl_u=False)
    params = model.named_parameters()
    opt = nn.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    ema = nn.Ema(params)
    before = {n: p.data.copy() for n, p in params}
    bundle = TR.train_step(model, opt, ema, (xs, ys, xt, yt, xu), cfg,
                           rng(13), A.AugmentConfig())
    assert bundle.total <= 1e-5
    for n, p in params:
        # AdamW moves each weight at most ~lr (+ decay) per step
        assert np.abs(p.data - before[n]).max() <= cfg.lr * (1.0 + np.abs(before[n]).max())


# ---------------------------------------------------------------------------
# train() end to end on a tiny benchmark

def test_epochs_zero_returns_initialized_model_and_chance_f1():
    src, tgt = tiny_benchmark()
    cfg = tiny_config(epochs=0)
    res = TR.train(cfg, src, tgt)
    assert res.log_rows == []
    # chance level for balanced C=3: Monte-Carlo of a label-independent
    # uniform predictor gives weighted F1 ~= 1/3
    g = rng(123)
    chance = []
    for _ in range(200):
        import shedd.evaluation as E
        labels = tgt.labels[: len(tgt.labels)]
        preds = g.integers(0, 3, labels.shape[0])
        chance.append(E.weighted_f1(labels, preds, 3).weighted_f1)
    assert abs(res.final_report.weighted_f1 - np.mean(chance)) <= 0.25


def test_training_log_columns_and_artifacts(tmp_path):
    src, tgt = tiny_benchmark()
    cfg = tiny_config(epochs=2)
    res = TR.train(cfg, src, tgt, run_dir=str(tmp_path / "run"))
    log_path = tmp_path / "run" / "log.csv"
    assert log_path.exists()
    header = log_path.read_text().splitlines()[0].split(",")
    assert header == TR.LOG_COLUMNS
    assert (tmp_path / "run" / "metrics.json").exists()
    assert (tmp_path / "run" / "checkpoint_full" / "index.json").exists()
    assert (tmp_path / "run" / "checkpoint_inference" / "index.json").exists()
    assert len(res.log_rows) == 2


def test_per_epoch_total_is_sum_of_components():
    src, tgt = tiny_benchmark()
    res = TR.train(tiny_config(epochs=2), src, tgt)
    for row in res.log_rows:
        parts = (row["l_cl_ST"] + row["l_dom_ST"] + row["l_dom_UU"] +
                 row["l_orth_ST"] + row["l_orth_UU"] + row["l_pl_U"])
        assert row["total"] == pytest.approx(parts, abs=1e-5)


def test_train_deterministic_same_seed(tmp_path):
    src, tgt = tiny_benchmark()
    res_a = TR.train(tiny_config(epochs=2), src, tgt, run_dir=str(tmp_path / "a"))
    res_b = TR.train(tiny_config(epochs=2), src, tgt, run_dir=str(tmp_path / "b"))
    assert res_a.log_rows == res_b.log_rows
    bytes_a = (tmp_path / "a" / "log.csv").read_bytes()
    bytes_b = (tmp_path / "b" / "log.csv").read_bytes()
    assert bytes_a == bytes_b
    for blob in sorted(os.listdir(tmp_path / "a" / "checkpoint_full")):
        assert (tmp_path / "a" / "checkpoint_full" / blob).read_bytes() == \
            (tmp_path / "b" / "checkpoint_full" / blob).read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    src, tgt = tiny_benchmark()
    straight = TR.train(tiny_config(epochs=4), src, tgt,
                        run_dir=str(tmp_path / "straight"))

    part = TR.train(tiny_config(epochs=2), src, tgt, run_dir=str(tmp_path / "resumed"))
    resumed = TR.train(tiny_config(epochs=4), src, tgt,
                       run_dir=str(tmp_path / "resumed"), resume=True)

    assert len(resumed.log_rows) == 4
    assert resumed.log_rows == straight.log_rows
    assert resumed.final_report.to_dict() == straight.final_report.to_dict()
    log_a = (tmp_path / "straight" / "log.csv").read_bytes()
    log_b = (tmp_path / "resumed" / "log.csv").read_bytes()
    assert log_a == log_b
    for blob in sorted(os.listdir(tmp_path / "straight" / "checkpoint_full")):
        assert (tmp_path / "straight" / "checkpoint_full" / blob).read_bytes() == \
            (tmp_path / "resumed" / "checkpoint_full" / blob).read_bytes()


def test_evaluation_under_ema_restores_raw_parameters():
    src, tgt = tiny_benchmark()
    cfg = tiny_config(epochs=1)
    res = TR.train(cfg, src, tgt)
    params = {n: p.data.copy() for n, p in res.model.named_parameters()}
    report = TR._evaluate_under_ema(res.model, res.ema, tgt.images[:8],
                                    tgt.labels[:8], 3, 8)
    for n, p in res.model.named_parameters():
        np.testing.assert_array_equal(p.data, params[n])
    assert 0.0 <= report.weighted_f1 <= 1.0
