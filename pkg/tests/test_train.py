import io
import json

import numpy as np
import pytest

from skd.checkpoint import load_checkpoint, params_digest
from skd.data import Dataset, SyntheticConfig, generate_synthetic
from skd.errors import ConfigError, ContractError
from skd.losses import LossWeights
from skd.model import BackboneConfig, init_params
from skd.train import (AugmentConfig, SgdConfig, TrainState, clip_grad_norm, gen0_objective, lr_at, run_gen0,
                       run_gen1, sgd_step, train_gen0)
from skd.tensor import Tensor

NO_AUG = AugmentConfig(flip_prob=0.0, crop_pad=0)


@pytest.fixture(scope="module")
def tiny_data():
    ds = generate_synthetic(SyntheticConfig(num_classes=6, samples_per_class=8, image_size=8, max_shift=0))
    return ds


@pytest.fixture(scope="module")
def tiny_cfg():
    return BackboneConfig(block_filters=(4, 8), input_size=8, num_classes=6)


def one_param_state(w0, momentum=0.9, wd=0.0, lr=0.1):
    cfg = BackboneConfig(block_filters=(1,), input_size=1, num_classes=1)
    params = init_params(cfg, 0, dtype=np.float64)
    params.theta["weight"].data = np.array([[w0]])
    return TrainState(params), SgdConfig(lr=lr, momentum=momentum, weight_decay=wd)


def test_sgd_momentum_matches_hand_computation():
    state, cfg = one_param_state(1.0)
    w, v = 1.0, 0.0
    for step, g in enumerate([0.5, -0.2, 0.3]):
        sgd_step(state, {"theta.weight": np.array([[g]])}, cfg)
        v = g if step == 0 else 0.9 * v + g
        w -= 0.1 * v
        assert state.params.theta["weight"].data[0, 0] == pytest.approx(w, abs=1e-15)


def test_sgd_weight_decay_is_coupled():
    state, cfg = one_param_state(2.0, momentum=0.0, wd=0.5, lr=0.1)
    sgd_step(state, {"theta.weight": np.array([[0.0]])}, cfg)
    assert state.params.theta["weight"].data[0, 0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_sgd_touches_only_named_parameters():
    state, cfg = one_param_state(1.0)
    before = params_digest(state.params, "psi.")
    sgd_step(state, {"theta.weight": np.array([[1.0]])}, cfg)
    assert params_digest(state.params, "psi.") == before


def test_sgd_rejects_unknown_and_misshapen():
    state, cfg = one_param_state(1.0)
    with pytest.raises(ContractError):
        sgd_step(state, {"nope": np.zeros(1)}, cfg)
    with pytest.raises(ContractError):
        sgd_step(state, {"theta.weight": np.zeros((2, 2))}, cfg)


def test_lr_schedule():
    cfg = SgdConfig(lr=0.05, lr_drop_epoch=20, lr_drop_factor=0.1)
    assert lr_at(cfg, 19) == 0.05 and lr_at(cfg, 20) == pytest.approx(0.005)
    preset = SgdConfig.paper_preset()
    assert (preset.epochs, preset.lr_drop_epoch) == (65, 60)


@pytest.mark.parametrize("kwargs", [dict(lr=0), dict(momentum=1.0), dict(weight_decay=-1), dict(batch_size=0),
                                    dict(lr_drop_factor=0), dict(max_grad_norm=-1)])
def test_sgd_config_validation(kwargs):
    with pytest.raises(ConfigError):
        SgdConfig(**kwargs)


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    out = clip_grad_norm(g, 1.0)
    assert np.sqrt(out["a"] ** 2 + out["b"] ** 2)[0] == pytest.approx(1.0)
    assert out["a"][0] / out["b"][0] == pytest.approx(0.75)
    assert clip_grad_norm(g, 10.0) is g and clip_grad_norm(g, 0.0) is g


def test_gen0_loss_decreases_and_logs(tiny_data, tiny_cfg):
    buf = io.StringIO()
    cfg = SgdConfig(lr=0.05, epochs=8, batch_size=16, max_grad_norm=1.0)
    x, y = tiny_data.images[:24], tiny_data.labels[:24]
    init = init_params(tiny_cfg, 0)
    state = run_gen0(tiny_data, cfg, LossWeights(alpha=1.0), tiny_cfg, augment=NO_AUG, log_file=buf)
    assert gen0_objective(state.params, x, y, 1.0) < gen0_objective(init, x, y, 1.0)
    lines = [json.loads(s) for s in buf.getvalue().splitlines()]
    assert lines[0]["event"] == "config" and lines[0]["loss"]["alpha"] == 1.0
    assert set(lines[1]) == {"step", "epoch", "lr", "loss", "loss_ce", "loss_ss"}
    assert len(lines) - 1 == 8 * 3
    assert all(abs(r["loss"] - (r["loss_ce"] + r["loss_ss"])) < 1e-4 for r in lines[1:])


def test_gen0_is_deterministic(tiny_data, tiny_cfg):
    cfg = SgdConfig(epochs=1, batch_size=16)
    a = train_gen0(tiny_data, cfg, LossWeights(), tiny_cfg)
    b = train_gen0(tiny_data, cfg, LossWeights(), tiny_cfg)
    assert params_digest(a) == params_digest(b)


def test_gen0_crop_pretext_runs(tiny_data, tiny_cfg):
    state = run_gen0(tiny_data, SgdConfig(epochs=1, batch_size=16), LossWeights(), tiny_cfg, pretext="crop",
                     augment=NO_AUG)
    assert state.step == 3


def test_crop_objective_splits_full_and_quadrant_views(tiny_data, tiny_cfg):
    from skd.augment import crop_quadrant
    from skd.losses import cross_entropy, self_supervision_loss
    from skd.model import forward

    params = init_params(tiny_cfg, seed=3, dtype=np.float64)
    x = tiny_data.images[::8][:4].astype(np.float64)
    y = tiny_data.labels[::8][:4]
    ce = cross_entropy(forward(params, x)[1], y).item()
    crops = np.concatenate([crop_quadrant(x, q) for q in range(4)])
    ss = self_supervision_loss(forward(params, crops)[2], np.repeat(np.arange(4), 4)).item()
    assert gen0_objective(params, x, y, 0.0, pretext="crop") == pytest.approx(ce, rel=1e-12)
    assert gen0_objective(params, x, y, 1.5, pretext="crop") == pytest.approx(ce + 1.5 * ss, rel=1e-12)


def test_gen0_checkpoints_per_epoch(tmp_path, tiny_data, tiny_cfg):
    run_gen0(tiny_data, SgdConfig(epochs=2, batch_size=48), LossWeights(), tiny_cfg, checkpoint_dir=tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["gen0_epoch000.skdc", "gen0_epoch001.skdc"]
    _, meta = load_checkpoint(tmp_path / files[1])
    assert meta["epoch"] == 1 and meta["generation"] == 0


def test_gen0_rejects_mismatched_config(tiny_data):
    with pytest.raises(ConfigError):
        run_gen0(tiny_data, SgdConfig(epochs=1), LossWeights(), BackboneConfig(block_filters=(4, 8), input_size=8))
    with pytest.raises(ConfigError):
        run_gen0(tiny_data, SgdConfig(epochs=1), LossWeights(),
                 BackboneConfig(block_filters=(4, 8), input_size=8, num_classes=6), pretext="jigsaw")


def test_gen1_freezing_contracts(tiny_data, tiny_cfg):
    teacher = init_params(tiny_cfg, 3)
    t_digest = params_digest(teacher)
    buf = io.StringIO()
    state = run_gen1(teacher, tiny_data, SgdConfig(epochs=1, batch_size=16), LossWeights(beta=0.1), log_file=buf)
    assert params_digest(teacher) == t_digest
    assert params_digest(state.params, "psi.") == params_digest(teacher, "psi.")
    assert params_digest(state.params, "phi.") != params_digest(teacher, "phi.")
    rec = json.loads(buf.getvalue().splitlines()[1])
    assert set(rec) == {"step", "epoch", "lr", "loss", "loss_kd", "loss_l2"}


def test_gen1_identity_step_is_fixed_point(tiny_data, tiny_cfg):
    teacher = init_params(tiny_cfg, 3, dtype=np.float64)
    cfg = SgdConfig(epochs=1, batch_size=len(tiny_data), weight_decay=0.0)
    state = run_gen1(teacher, tiny_data, cfg, LossWeights(beta=0.0), augment=NO_AUG)
    for (name, a), (_, b) in zip(teacher, state.params):
        assert np.max(np.abs(a.data - b.data)) <= 1e-12, name


def test_gen1_rejects_bad_twin_and_student(tiny_data, tiny_cfg):
    teacher = init_params(tiny_cfg, 0)
    with pytest.raises(ConfigError):
        run_gen1(teacher, tiny_data, SgdConfig(epochs=1), LossWeights(), twin_rotation=45)
    other = init_params(BackboneConfig(block_filters=(4, 4), input_size=8, num_classes=6), 0)
    with pytest.raises(ContractError):
        run_gen1(teacher, tiny_data, SgdConfig(epochs=1), LossWeights(), student=other)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_refuses_non_finite_loss(tiny_data, tiny_cfg):
    from skd.errors import NumericError
    params = init_params(tiny_cfg, 0)
    params.theta["weight"].data[...] = np.float32(1e38)
    with pytest.raises(NumericError):
        run_gen0(tiny_data, SgdConfig(epochs=1), LossWeights(), tiny_cfg, init=params)
