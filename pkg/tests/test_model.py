import numpy as np
import pytest

from permtensor import autodiff as ad
from permtensor.autodiff import Tensor
from permtensor.loss import LossWeights, physics_loss
from permtensor.model import (ConfigError, Model, ModelConfig, block_local_attention,
                              film_modulate, grid_global_attention, load_checkpoint,
                              mbconv_block, save_checkpoint)


def attn_params(rng, C):
    p = {"ln.g": Tensor(np.ones(C)), "ln.b": Tensor(np.zeros(C))}
    for m in "qkvo":
        p[f"{m}.w"] = Tensor(rng.standard_normal((C, C)) / np.sqrt(C))
        p[f"{m}.b"] = Tensor(0.1 * rng.standard_normal(C))
    return p


def images(rng, n, size):
    return (rng.random((n, size, size)) < 0.3).astype(float)


def test_block_attention_is_window_local(rng):
    p = attn_params(rng, 4)
    x = rng.standard_normal((1, 8, 8, 4))
    y0 = block_local_attention(Tensor(x), p, 4, 2).data
    x2 = x.copy()
    x2[0, 1, 2] += [1.0, -0.5, 0.3, 0.0]  # not a uniform shift, which LN removes                      # lives in window (0, 0)
    y1 = block_local_attention(Tensor(x2), p, 4, 2).data
    changed = np.abs(y1 - y0).max(axis=-1)[0] > 0
    assert changed[:4, :4].all() and not changed[4:, :].any() and not changed[:, 4:].any()


def test_grid_attention_couples_matching_offsets(rng):
    p = attn_params(rng, 4)
    x = rng.standard_normal((1, 8, 8, 4))
    y0 = grid_global_attention(Tensor(x), p, 4, 2).data
    x2 = x.copy()
    x2[0, 1, 2] += [1.0, -0.5, 0.3, 0.0]  # not a uniform shift, which LN removes
    y1 = grid_global_attention(Tensor(x2), p, 4, 2).data
    changed = np.abs(y1 - y0).max(axis=-1)[0] > 0
    rows, cols = np.nonzero(changed)
    assert set(zip(rows % 4, cols % 4)) == {(1, 2)}
    assert changed.sum() == 4


def test_grid_equals_block_for_single_window(rng):
    p = attn_params(rng, 4)
    x = Tensor(rng.standard_normal((2, 4, 4, 4)))
    assert np.array_equal(grid_global_attention(x, p, 4, 2).data,
                          block_local_attention(x, p, 4, 2).data)
    small = Tensor(rng.standard_normal((1, 2, 2, 4)))
    assert np.array_equal(grid_global_attention(small, p, 4, 2).data,
                          block_local_attention(small, p, 4, 2).data)


def test_attention_token_permutation_equivariance(rng):
    # no positional bias: permuting the windows permutes the output
    p = attn_params(rng, 4)
    x = rng.standard_normal((1, 8, 8, 4))
    y = block_local_attention(Tensor(x), p, 4, 2).data
    swapped = np.concatenate([x[:, :, 4:], x[:, :, :4]], axis=2)
    ys = block_local_attention(Tensor(swapped), p, 4, 2).data
    assert np.allclose(ys, np.concatenate([y[:, :, 4:], y[:, :, :4]], axis=2), atol=1e-14)


def test_mbconv_identity_with_zero_projection(rng):
    C, E = 4, 8
    p = {"ln.g": Tensor(np.ones(C)), "ln.b": Tensor(np.zeros(C)),
         "expand.w": Tensor(rng.standard_normal((C, E))), "expand.b": Tensor(np.zeros(E)),
         "dw.w": Tensor(rng.standard_normal((3, 3, E))), "dw.b": Tensor(np.zeros(E)),
         "project.w": Tensor(np.zeros((E, C))), "project.b": Tensor(np.zeros(C))}
    x = rng.standard_normal((2, 4, 4, C))
    assert np.array_equal(mbconv_block(Tensor(x), p).data, x)
    p["project.w"] = Tensor(rng.standard_normal((E, 6)))
    p["project.b"] = Tensor(np.zeros(6))
    assert mbconv_block(Tensor(x), p).shape == (2, 4, 4, 6)


def test_film_modulation_hand_case(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    e = Tensor(rng.standard_normal((2, 5)))
    p = {"gamma.w": Tensor(np.zeros((5, 4))), "gamma.b": Tensor(np.full(4, 2.0)),
         "beta.w": Tensor(np.zeros((5, 4))), "beta.b": Tensor(np.zeros(4))}
    assert np.array_equal(film_modulate(Tensor(x), e, p).data, 2 * x)
    p["beta.b"] = Tensor(np.arange(4.0))
    assert np.array_equal(film_modulate(Tensor(x), e, p).data, 2 * x + np.arange(4.0))


def test_film_is_identity_at_init(rng):
    m = Model(ModelConfig(), seed=3)
    imgs = images(rng, 3, 32)
    phi = np.array([0.6, 0.7, 0.8])
    a = m.forward(imgs, phi).data
    b = m.forward(imgs, phi, film=False).data
    assert np.abs(a - b).max() <= 1e-12


def test_encoder_receives_gradient(rng, tiny_model_cfg):
    m = Model(tiny_model_cfg, seed=1)
    imgs = images(rng, 4, 16)
    out = m.forward(imgs, rng.uniform(0.5, 0.9, 4))
    ad.backward(ad.sum_(ad.square(out)))
    last = [n for n in m.params.names(["encoder"]) if n.endswith(".w")][-1]
    assert np.abs(m.params[last].grad).max() > 0


def test_desk_parameter_count():
    assert Model(ModelConfig()).params.count() == 92_644


def test_init_output_bias_and_determinism(rng, tiny_model_cfg):
    mean = [2.0, 0.1, 0.1, 1.5]
    a = Model(tiny_model_cfg, seed=7, label_mean=mean)
    b = Model(tiny_model_cfg, seed=7, label_mean=mean)
    assert a.params.blob() == b.params.blob()
    assert a.params.blob() != Model(tiny_model_cfg, seed=8, label_mean=mean).params.blob()
    assert np.array_equal(a.params["head.out.b"].data, mean)
    imgs = images(rng, 2, 16)
    assert np.array_equal(a.forward(imgs, 0.7).data, b.forward(imgs, 0.7).data)


def test_dropout_modes(rng, tiny_model_cfg):
    m = Model(tiny_model_cfg, seed=0)
    imgs = images(rng, 4, 16)
    ev = m.forward(imgs, 0.7).data
    t1 = m.forward(imgs, 0.7, train=True, seed=5).data
    t2 = m.forward(imgs, 0.7, train=True, seed=5).data
    assert np.array_equal(t1, t2) and not np.array_equal(t1, ev)
    from dataclasses import replace
    m0 = Model(replace(tiny_model_cfg, dropout_p=0.0), seed=0)
    assert np.array_equal(m0.forward(imgs, 0.7, train=True, seed=5).data, m0.forward(imgs, 0.7).data)


def test_predict_batches_match_forward(rng, tiny_model_cfg):
    m = Model(tiny_model_cfg, seed=0)
    imgs = images(rng, 5, 16)
    phi = rng.uniform(0.5, 0.9, 5)
    assert np.allclose(m.predict(imgs, phi, batch_size=2), m.forward(imgs, phi).data, atol=1e-13)


def test_wrong_image_size(tiny_model_cfg):
    with pytest.raises(ad.ShapeError):
        Model(tiny_model_cfg).forward(np.zeros((1, 32, 32)), 0.5)


@pytest.mark.parametrize("kwargs", [dict(image_size=20), dict(stage_channels=(15, 32, 64)),
                                    dict(film_stages=(5,)), dict(dropout_p=1.0),
                                    dict(blocks_per_stage=(1, 1))])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_config_roundtrip():
    cfg = ModelConfig(film_stages=(0, 2))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.stage_resolutions == [8, 4, 2]


def test_full_gradient_check(rng, tiny_model_cfg):
    from dataclasses import replace
    m = Model(replace(tiny_model_cfg, dropout_p=0.0), seed=2)
    # move FiLM off the identity so its weights matter
    for n in m.params.names(["encoder"]):
        m.params[n].data = 0.3 * rng.standard_normal(m.params[n].shape)
    imgs = images(rng, 3, 16)
    phi = rng.uniform(0.5, 0.9, 3)
    truth = np.array([[2.0, 0.1, 0.1, 1.0], [1.0, -0.2, -0.2, 3.0], [0.5, 0.0, 0.0, 0.7]])
    params = [m.params[n] for n in m.params.names()]

    def f():
        return physics_loss(m.forward(imgs, phi), truth, LossWeights())["total"]
    assert f().item() > 0
    assert ad.gradient_check(f, params) < 1e-4


def test_checkpoint_roundtrip(tmp_path, rng, tiny_model_cfg):
    m = Model(tiny_model_cfg, seed=4, label_mean=[1, 0, 0, 1])
    path = save_checkpoint(m, tmp_path / "ck", step=3)
    m2, manifest = load_checkpoint(path)
    assert manifest["step"] == 3 and m2.cfg == m.cfg
    assert m2.params.blob() == m.params.blob()
    assert m2.params.groups == m.params.groups
    blob = bytearray((path / "params.bin").read_bytes())
    blob[0] ^= 1
    (path / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_parameter_groups(tiny_model_cfg):
    ps = Model(tiny_model_cfg).params
    assert set(ps.group_set()) == {"stem", "stage0", "encoder", "film", "head"}
    ps.set_trainable_groups(["head"])
    assert all(n.startswith("head.") for n in ps.trainable())
    assert all(ps.groups[n] in ("stem", "stage0") for n in ps.backbone_names())
    with pytest.raises(ValueError):
        ps.load_state({n: np.zeros(1) for n in ps.names()})
