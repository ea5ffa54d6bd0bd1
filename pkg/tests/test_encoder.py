import numpy as np
import pytest
import torch

from epiforge.encoder import (
    DivergenceError,
    EncoderConfig,
    WeightFormatError,
    adam_step,
    backward,
    encode,
    gradient_check,
    init_encoder,
    load_weights,
    parameter_shapes,
    save_weights,
    sgd_step,
    states_equal,
)


def images(n, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, 128, 128, 3))


@pytest.fixture(scope="module")
def state():
    return init_encoder(EncoderConfig(embed_dim=16, depth=2, heads=2), seed=3)


def const_grads(state, value):
    return {k: torch.full_like(v, value) for k, v in state.parameters.items()}


def test_config_invariants():
    with pytest.raises(ValueError):
        EncoderConfig(patch_size=15)
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=30, heads=4)


def test_init_is_seeded_and_truncated():
    a, b = init_encoder(seed=1), init_encoder(seed=1)
    assert states_equal(a, b)
    assert not states_equal(a, init_encoder(seed=2))
    w = a.parameters["patch_embed.weight"]
    assert w.abs().max() <= 0.04 and abs(float(w.std()) - 0.02) < 0.005
    assert torch.equal(a.parameters["blocks.0.norm1.weight"], torch.ones(64, dtype=torch.float64))
    assert not a.parameters["blocks.0.attn.qkv.bias"].any()


def test_encode_shape():
    out = encode(init_encoder(seed=0), images(7))
    assert out.shape == (7, 64) and out.dtype == torch.float64


def test_wrong_shape_rejected(state):
    with pytest.raises(ValueError):
        encode(state, np.zeros((2, 64, 64, 3)))


def test_rows_are_pure(state):
    x = images(4, seed=1)
    base = encode(state, x)
    dup = encode(state, np.stack([x[2], x[0], x[2]]))
    assert torch.equal(dup[0], dup[2])
    perm = [3, 1, 0, 2]
    assert torch.allclose(encode(state, x[perm]), base[perm], rtol=0, atol=1e-13)
    assert torch.equal(encode(state, x), base)


def test_backward_linearity(state):
    x = images(2, seed=2)
    zero = backward(state, x, torch.zeros(2, 16, dtype=torch.float64))
    assert all(not g.any() for g in zero.values())
    up = torch.randn(2, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    g1, g2 = backward(state, x, up), backward(state, x, 2 * up)
    for k in g1:
        assert torch.allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)
    with pytest.raises(ValueError):
        backward(state, x, torch.zeros(3, 16, dtype=torch.float64))


def test_gradient_check(state):
    report = gradient_check(state, images(2, seed=4), samples_per_tensor=4)
    assert set(report) == set(parameter_shapes(state.config))
    assert max(report.values()) < 1e-3


def test_sgd_arithmetic():
    cfg = EncoderConfig(embed_dim=4, depth=1, heads=1)
    s = init_encoder(cfg)
    s = type(s)(cfg, {k: torch.ones_like(v) for k, v in s.parameters.items()})
    out = sgd_step(s, const_grads(s, 2.0), 5e-5)
    assert all(torch.allclose(v, torch.full_like(v, 0.9999), rtol=0, atol=1e-15) for v in out.parameters.values())
    assert out.step_count == 1
    same = sgd_step(s, const_grads(s, 2.0), 0.0)
    assert all(torch.equal(same.parameters[k], s.parameters[k]) for k in s.parameters)


def test_sgd_two_steps_sum(state):
    g = {k: torch.randn_like(v) for k, v in state.parameters.items()}
    two = sgd_step(sgd_step(state, g, 0.1), g, 0.1)
    one = sgd_step(state, {k: 2 * v for k, v in g.items()}, 0.1)
    for k in g:
        assert torch.allclose(two.parameters[k], one.parameters[k], rtol=0, atol=1e-14)


def test_sgd_rejects_nan(state):
    g = const_grads(state, 0.0)
    g["pos_embed"] = g["pos_embed"].clone()
    g["pos_embed"][0, 0] = float("nan")
    with pytest.raises(DivergenceError):
        sgd_step(state, g, 0.1)
    with pytest.raises(KeyError):
        sgd_step(state, {"pos_embed": g["pos_embed"]}, 0.1)


def test_adam_first_step_oracle(state):
    lr = 1e-3
    g = {k: torch.where(torch.rand_like(v) < 0.5, -0.3, 0.3).to(v.dtype) for k, v in state.parameters.items()}
    out = adam_step(state, g, lr)
    # m_hat = g, v_hat = g^2 -> delta = -lr * g / (|g| + eps)
    for k, grad in g.items():
        delta = out.parameters[k] - state.parameters[k]
        want = -lr * grad / (grad.abs() + 1e-8)
        assert torch.allclose(delta, want, rtol=1e-10, atol=1e-18)
        assert torch.equal(torch.sign(delta), -torch.sign(grad))
    assert float(out.optimizer_state["adam.t"]) == 1.0


def test_adam_scale_invariant_first_step(state):
    # magnitudes kept away from zero so eps stays negligible
    g = {k: torch.sign(torch.randn_like(v)) * (0.5 + torch.rand_like(v)) for k, v in state.parameters.items()}
    a = adam_step(state, g, 1e-3)
    b = adam_step(state, {k: 10 * v for k, v in g.items()}, 1e-3)
    for k in g:
        assert torch.allclose(a.parameters[k], b.parameters[k], rtol=0, atol=1e-10)


def test_adam_zero_gradient_fixed(state):
    s = state
    for _ in range(5):
        s = adam_step(s, const_grads(state, 0.0), 1e-2)
    assert all(torch.equal(s.parameters[k], state.parameters[k]) for k in state.parameters)
    assert s.step_count == 5


def test_weights_round_trip(state, tmp_path):
    trained = adam_step(state, const_grads(state, 0.5), 1e-3)
    path = save_weights(trained, tmp_path / "w.epif")
    loaded = load_weights(path)
    assert states_equal(loaded, trained)
    assert path.read_bytes()[:4] == b"EPIF"


def test_truncated_file(state, tmp_path):
    data = save_weights(state, tmp_path / "w.epif").read_bytes()
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        (tmp_path / "cut.epif").write_bytes(data[:cut])
        with pytest.raises(WeightFormatError):
            load_weights(tmp_path / "cut.epif")


def test_wrong_magic_and_version(state, tmp_path):
    data = bytearray(save_weights(state, tmp_path / "w.epif").read_bytes())
    (tmp_path / "m.epif").write_bytes(b"NOPE" + bytes(data[4:]))
    with pytest.raises(WeightFormatError, match="magic"):
        load_weights(tmp_path / "m.epif")
    data[4] = 9
    (tmp_path / "v.epif").write_bytes(bytes(data))
    with pytest.raises(WeightFormatError, match="version"):
        load_weights(tmp_path / "v.epif")


def test_mismatched_config_names_tensor(state, tmp_path):
    path = save_weights(state, tmp_path / "w.epif")
    with pytest.raises(WeightFormatError, match="patch_embed.weight"):
        load_weights(path, EncoderConfig(embed_dim=32, depth=2, heads=2))
