import struct
from collections import OrderedDict
from dataclasses import replace

import numpy as np
import pytest

from gcnreg import autodiff as ad
from gcnreg.errors import ContractError, DimensionError, FormatError, UnsupportedVersionError
from gcnreg.features import DescriptorConfig
from gcnreg.geometry import PointCloud, normalize
from gcnreg.matching import LbpConfig
from gcnreg.training import (
    AdamState,
    Checkpoint,
    TrainConfig,
    adam_step,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    loss,
    read_loss_log,
    save_checkpoint,
    train,
)

TINY = TrainConfig(
    samples_per_epoch=3,
    n_points=64,
    descriptor=DescriptorConfig(k_graph=6, layer_widths=(8, 8, 8), out_dim=8, align_point_widths=(8, 8), align_hidden=8),
    lbp=LbpConfig(k_candidates=4, k_source=4),
)


def clouds(count=3, n=64):
    rng = np.random.default_rng(0)
    return [normalize(PointCloud(rng.normal(size=(n, 3)) * rng.uniform(0.3, 1.0, 3))) for _ in range(count)]


# --- loss ---------------------------------------------------------------------------


def test_loss_is_mean_absolute_error():
    w = ad.Tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]], dtype=np.float64)
    gt = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, 0.5]])
    assert loss(w, gt).item() == pytest.approx(np.abs(w.data - gt).mean())
    assert loss(ad.Tensor(gt), gt).item() == 0.0


def test_loss_single_unit_residual():
    assert loss(ad.Tensor(np.ones((1, 3))), np.zeros((1, 3))).item() == 1.0


def test_loss_matches_loop_oracle():
    rng = np.random.default_rng(3)
    w, gt = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    total = 0.0
    for i in range(20):
        for j in range(3):
            total += abs(w[i, j] - gt[i, j])
    assert abs(loss(ad.Tensor(w), gt).item() - total / 60) < 1e-7


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        loss(ad.Tensor(np.zeros((3, 3))), np.zeros((2, 3)))


# --- Adam ---------------------------------------------------------------------------


def test_adam_first_step_moves_by_lr_sign():
    p = OrderedDict(w=np.array([1.0, -2.0, 0.5]))
    g = {"w": np.array([0.3, -4.0, 1e-3])}
    new, state = adam_step(p, g, AdamState.zeros_like(p), lr=0.01)
    np.testing.assert_allclose(new["w"], p["w"] - 0.01 * np.sign(g["w"]), rtol=1e-6)
    assert state.step == 1
    np.testing.assert_array_equal(p["w"], [1.0, -2.0, 0.5])


def test_adam_unit_gradient_first_step():
    p = OrderedDict(w=np.zeros(4))
    new, _ = adam_step(p, {"w": np.ones(4)}, AdamState.zeros_like(p), lr=1e-4)
    np.testing.assert_allclose(new["w"], -1e-4, atol=1e-9)


def test_adam_zero_gradient_decays_moments():
    p = OrderedDict(w=np.array([0.5, -1.0]))
    state = AdamState.zeros_like(p)
    _, state = adam_step(p, {"w": np.array([1.0, 2.0])}, state)
    new, after = adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_allclose(after.m["w"], 0.9 * state.m["w"])
    np.testing.assert_allclose(after.v["w"], 0.999 * state.v["w"])
    # parameters still move on the remaining momentum, but not when moments start at zero
    fresh, _ = adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p))
    np.testing.assert_array_equal(fresh["w"], p["w"])


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(1)
    p = OrderedDict(w=rng.normal(size=4))
    state = AdamState.zeros_like(p)
    m = v = np.zeros(4)
    ref = p["w"].copy()
    for t in range(1, 6):
        g = rng.normal(size=4)
        p, state = adam_step(p, {"w": g}, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-12)


def test_adam_shape_mismatch():
    p = OrderedDict(w=np.zeros(3))
    with pytest.raises(DimensionError):
        adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p))


# --- config -------------------------------------------------------------------------


def test_config_text_round_trip():
    cfg = replace(TINY, learning_rate=3e-4, seed=2**63, max_rotation=0.25)
    assert TrainConfig.from_text(cfg.to_text()) == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ContractError):
        TrainConfig.from_text("[train]\nbogus = 1\n")
    with pytest.raises(ContractError):
        TrainConfig.from_text("[nonsense]\nx = 1\n")
    with pytest.raises(ContractError):
        TrainConfig.from_text("[train]\nepochs = many\n")


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ContractError):
        TrainConfig(epochs=0)


# --- training loop ------------------------------------------------------------------


def test_train_is_deterministic_and_logs(tmp_path):
    models = clouds()
    p1, s1, l1 = train(models, TINY, log_path=tmp_path / "a.csv")
    p2, s2, l2 = train(models, TINY, log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert read_loss_log(tmp_path / "a.csv") == l1 == l2
    assert s1.step == 3
    for k in p1:
        np.testing.assert_array_equal(p1[k].data, p2[k].data)


def test_train_resume_equals_uninterrupted():
    models = clouds()
    full_p, full_s, full_l = train(models, replace(TINY, samples_per_epoch=4))
    half_p, half_s, half_l = train(models, replace(TINY, samples_per_epoch=2))
    rest_p, rest_s, rest_l = train(models, replace(TINY, samples_per_epoch=2), params=half_p, state=half_s)
    assert half_l + rest_l == full_l
    for k in full_p:
        np.testing.assert_array_equal(rest_p[k].data, full_p[k].data)


def test_train_changes_parameters():
    models = clouds()
    from gcnreg.features import init_params
    from gcnreg.rng import derive_seed

    init = init_params(TINY.descriptor, derive_seed(TINY.seed, "init"))
    trained, _, losses = train(models, TINY)
    assert all(np.isfinite(losses))
    assert any(not np.array_equal(init[k].data, trained[k].data) for k in init)


def test_zero_steps_leaves_params_unchanged():
    from gcnreg.features import init_params
    from gcnreg.rng import derive_seed

    init = init_params(TINY.descriptor, derive_seed(TINY.seed, "init"))
    params, state, losses = train(clouds(), replace(TINY, samples_per_epoch=0))
    assert losses == [] and state.step == 0
    for k in init:
        np.testing.assert_array_equal(params[k].data, init[k].data)


def test_train_needs_models():
    with pytest.raises(ContractError):
        train([], TINY)


# --- checkpoints --------------------------------------------------------------------


def sample_checkpoint():
    rng = np.random.default_rng(2)
    tensors = OrderedDict(
        [
            ("a.weight", rng.normal(size=(3, 4)).astype(np.float32)),
            ("b", rng.normal(size=5)),
            ("scalar", np.array(2.5, dtype=np.float32)),
        ]
    )
    return Checkpoint(tensors, step=17, config=TINY.to_text())


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ck = sample_checkpoint()
    raw = encode_checkpoint(ck)
    back = decode_checkpoint(raw)
    assert list(back.tensors) == list(ck.tensors)
    for k in ck.tensors:
        assert back.tensors[k].dtype == ck.tensors[k].dtype
        np.testing.assert_array_equal(back.tensors[k], ck.tensors[k])
    assert back.step == 17 and back.config == ck.config
    save_checkpoint(back, tmp_path / "c.bin")
    assert (tmp_path / "c.bin").read_bytes() == raw
    assert encode_checkpoint(load_checkpoint(tmp_path / "c.bin")) == raw


def test_checkpoint_layout():
    raw = encode_checkpoint(Checkpoint(OrderedDict(x=np.array([1.0], dtype=np.float32)), 3, "cfg"))
    assert raw[:4] == b"RDRG"
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert struct.unpack("<H", raw[12:14]) == (1,) and raw[14:15] == b"x"
    assert raw[15] == 1 and struct.unpack("<I", raw[16:20]) == (1,) and raw[20] == 0
    assert struct.unpack("<f", raw[21:25]) == (1.0,)
    assert struct.unpack("<QI", raw[25:37]) == (3, 3) and raw[37:] == b"cfg"


def test_training_checkpoint_restores_state():
    params, state, _ = train(clouds(), TINY)
    ck = decode_checkpoint(encode_checkpoint(Checkpoint.from_training(params, state, TINY)))
    restored = ck.adam_state()
    assert restored.step == state.step
    for k in params:
        np.testing.assert_array_equal(ck.params()[k].data, params[k].data)
        np.testing.assert_array_equal(restored.m[k], state.m[k])
        np.testing.assert_array_equal(restored.v[k], state.v[k])
    assert TrainConfig.from_text(ck.config) == TINY


@pytest.mark.parametrize(
    "mutate, offset",
    [
        (lambda r: b"XXXX" + r[4:], 0),
        (lambda r: r[:30], None),
        (lambda r: r + b"\x00", None),
        (lambda r: r[:4] + struct.pack("<I", 1) + struct.pack("<I", 9) + r[12:], None),
        (lambda r: b"", 0),
    ],
)
def test_corrupt_checkpoints_rejected(mutate, offset):
    raw = encode_checkpoint(sample_checkpoint())
    with pytest.raises(FormatError) as info:
        decode_checkpoint(mutate(raw))
    assert "offset" in str(info.value)
    if offset is not None:
        assert f"offset {offset}" in str(info.value)


def test_bad_dtype_code_rejected():
    raw = bytearray(encode_checkpoint(Checkpoint(OrderedDict(x=np.zeros(1, dtype=np.float32)), 0, "")))
    raw[20] = 7
    with pytest.raises(FormatError, match="offset 20"):
        decode_checkpoint(bytes(raw))


def test_unsupported_version():
    raw = encode_checkpoint(sample_checkpoint())
    with pytest.raises(UnsupportedVersionError):
        decode_checkpoint(raw[:4] + struct.pack("<I", 2) + raw[8:])


def test_unsupported_dtype_on_save():
    with pytest.raises(ContractError):
        encode_checkpoint(Checkpoint(OrderedDict(x=np.zeros(2, dtype=np.int32)), 0, ""))
