"""Network shapes, fusion, gradients, time binding and checkpoints."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiqt import model as M
from multiqt.model import CheckpointError, ModelConfig, MultiQT
from multiqt.numcore import ShapeError, grad_check
from multiqt.train import batch_loss_and_grads


def inputs(cfg, t_a, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(t_a, cfg.audio_features)).astype(dtype),
            rng.normal(size=(t_a // 2, cfg.text_features)).astype(dtype))


@pytest.fixture(scope="module")
def full_model():
    return MultiQT.init(ModelConfig(), seed=0)


# -- geometry ----------------------------------------------------------------

def test_default_receptive_fields():
    rf = M.receptive_fields(ModelConfig())
    assert rf["audio"][0] == 1 + 9 + 19 * 2 + 39 * 4 == 204
    assert rf["text"][0] == 1 + 19 + 39 * 2 == 98


def test_default_strides_and_output_length(full_model):
    cfg = full_model.config
    assert cfg.audio_geometry[0] == 8 and cfg.text_geometry[0] == 4
    xa, xs = inputs(cfg, 1600)
    assert M.predict(full_model, xa, xs).shape == (200, 6)


@settings(max_examples=40, deadline=None)
@given(t_s=st.integers(4, 200))
def test_encoder_lengths_agree(t_s):
    cfg = ModelConfig.tiny()
    m = MultiQT.init(cfg, 1)
    xa, xs = inputs(cfg, 2 * t_s)
    res = M.forward(m, [xa], [xs])
    assert res.lengths == [(2 * t_s) // 4]
    fa = M.forward(MultiQT.init(M.unimodal(cfg, "audio"), 1), [xa], [None])
    ft = M.forward(MultiQT.init(M.unimodal(cfg, "text"), 1), [None], [xs])
    assert fa.lengths == ft.lengths == res.lengths


def test_length_mismatch_cites_both_lengths(full_model):
    xa, _ = inputs(full_model.config, 160)
    _, xs = inputs(full_model.config, 200)
    with pytest.raises(ShapeError, match=r"T_a=160.*T_s=100"):
        M.predict(full_model, xa, xs)


def test_fused_dims():
    assert ModelConfig().fused_dim == 256
    assert ModelConfig(fusion="tensor").fused_dim == 129 * 129 == 16641


def test_zero_input_gives_zero_pre_bn_activations():
    cfg = ModelConfig.tiny()
    m = MultiQT.init(cfg, 0)
    res = M.forward(m, [np.zeros((32, 3), np.float32)], [np.zeros((16, 4), np.float32)])
    # biases start at zero, so every conv output (pre-BN) is zero
    for entry in res.tape:
        if entry[0] == "conv":
            for c in entry[2]:
                cols, _, w, _ = c
                assert not (cols @ w.reshape(-1, w.shape[-1])).any()


# -- fusion ------------------------------------------------------------------

def test_concat_fusion_definition():
    za, zs = np.arange(6.0).reshape(3, 2), -np.arange(9.0).reshape(3, 3)
    z = M.fuse(za, zs, "concat")
    np.testing.assert_array_equal(z, np.hstack([za, zs]))


def test_tensor_fusion_toy():
    a1, a2, b1, b2 = 2.0, 3.0, 5.0, 7.0
    z = M.fuse(np.array([[a1, a2]]), np.array([[b1, b2]]), "tensor")[0]
    assert z.tolist() == [1, b1, b2, a1, a1 * b1, a1 * b2, a2, a2 * b1, a2 * b2]


def test_tensor_fusion_of_zeros():
    z = M.fuse(np.zeros((4, 3)), np.zeros((4, 3)), "tensor")
    assert z[:, 0].tolist() == [1] * 4 and not z[:, 1:].any()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.integers(1, 6), da=st.integers(1, 5), ds=st.integers(1, 5))
def test_tensor_fusion_subsumes_concat(seed, t, da, ds):
    rng = np.random.default_rng(seed)
    za, zs = rng.normal(size=(t, da)), rng.normal(size=(t, ds))
    z = M.fuse(za, zs, "tensor")
    np.testing.assert_array_equal(z[:, 1:ds + 1], zs)
    np.testing.assert_array_equal(z[:, (ds + 1)::(ds + 1)], za)


def test_fusion_is_per_timestep():
    rng = np.random.default_rng(0)
    za, zs = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    for mode in ("concat", "tensor"):
        base = M.fuse(za, zs, mode)
        za2 = za.copy()
        za2[3] += 1
        moved = M.fuse(za2, zs, mode)
        np.testing.assert_array_equal(np.delete(moved, 3, 0), np.delete(base, 3, 0))


# -- forward -----------------------------------------------------------------

@pytest.mark.parametrize("modality", ["both", "audio", "text"])
def test_rows_are_distributions(modality):
    cfg = ModelConfig.desk(modality=modality)
    m = MultiQT.init(cfg, 3)
    xa, xs = inputs(cfg, 400, seed=1)
    p = M.predict(m, xa if cfg.uses_audio else None, xs if cfg.uses_text else None)
    assert p.shape == (50, 6)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)


def test_argmax_ties_to_lowest_class():
    p = np.array([[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]])
    assert M.argmax_labels(p).tolist() == [0, 1]


def test_text_permutation_changes_output_deterministically():
    cfg = ModelConfig.desk()
    m = MultiQT.init(cfg, 0)
    xa, xs = inputs(cfg, 400, seed=2)
    base = M.predict(m, xa, xs)
    perm = np.random.default_rng(5).permutation(xs.shape[0])
    first = M.predict(m, xa, xs[perm])
    second = M.predict(m, xa, xs[np.random.default_rng(5).permutation(xs.shape[0])])
    assert not np.array_equal(base, first)
    np.testing.assert_array_equal(first, second)


def test_multitask_head_shapes():
    cfg = ModelConfig.tiny(multitask=True)
    m = MultiQT.init(cfg, 0)
    xa, xs = inputs(cfg, 40)
    p, pb = M.predict_both(m, xa, xs)
    assert p.shape == (10, 3) and pb.shape == (10, 2)


def test_unimodal_variant_is_exact_restriction():
    cfg = ModelConfig.tiny()
    both = MultiQT.init(cfg, 4)
    audio = MultiQT(M.unimodal(cfg, "audio"),
                    {k: v for k, v in both.params.items() if k in M.param_shapes(M.unimodal(cfg, "audio"))})
    xa, xs = inputs(cfg, 48)
    za_both = M._encode(both, "audio", [xa], [12], False, None, {}, [])
    za_audio = M._encode(audio, "audio", [xa], [12], False, None, {}, [])
    np.testing.assert_array_equal(za_both, za_audio)


@pytest.mark.parametrize("fusion", ["concat", "tensor"])
def test_time_binding(fusion):
    """Step t only sees audio frames 8t-r_l..8t+r_r and text frames 4t-r_l..4t+r_r."""
    cfg = ModelConfig(fusion=fusion) if fusion == "concat" else ModelConfig.desk(fusion=fusion)
    m = MultiQT.init(cfg, 0)
    xa, xs = inputs(cfg, 1600, seed=3)
    base = M.predict(m, xa, xs)
    t = 100                                    # 1-indexed output step
    rfa, la, ra = M.receptive_fields(cfg)["audio"]
    rfs, ls, rs = M.receptive_fields(cfg)["text"]
    xa2, xs2 = xa.copy(), xs.copy()
    xa2[: 8 * t - la - 1] = 9.0                # 0-indexed frames before the window
    xa2[8 * t + ra:] = -9.0
    xs2[: 4 * t - ls - 1] = 9.0
    xs2[4 * t + rs:] = -9.0
    moved = M.predict(m, xa2, xs2)
    np.testing.assert_array_equal(moved[t - 1], base[t - 1])
    xa3 = xa.copy()
    xa3[8 * t - 1] += 5.0                      # inside the window
    assert not np.array_equal(M.predict(m, xa3, xs)[t - 1], base[t - 1])


# -- gradients ---------------------------------------------------------------

@pytest.mark.parametrize("fusion,multitask", [("concat", False), ("tensor", True)])
def test_gradient_check_tiny(fusion, multitask):
    cfg = ModelConfig.tiny(fusion=fusion, multitask=multitask, conv_dropout=0.0, trunk_dropout=0.0)
    m = MultiQT.init(cfg, 0, dtype=np.float64)
    rng = np.random.default_rng(1)
    xs_a = [rng.normal(size=(24, 3)), rng.normal(size=(16, 3))]
    xs_s = [rng.normal(size=(12, 4)), rng.normal(size=(8, 4))]
    ys = [rng.integers(0, 3, 6), rng.integers(0, 3, 4)]

    def f(params):
        step = batch_loss_and_grads(m.with_params(params), xs_a, xs_s, ys, beta=0.5, l2=0.1, training=True)
        return step.total, step.grads

    assert grad_check(f, m.trainable(), max_entries=6, seed=2) < 1e-5


# -- checkpoints -------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    m = MultiQT.init(ModelConfig.desk(multitask=True), 7)
    p1, p2 = tmp_path / "a.mqt", tmp_path / "b.mqt"
    M.save(m, p1)
    loaded = M.load(p1, expected_classes=6)
    M.save(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.config == m.config
    for k in m.params:
        np.testing.assert_array_equal(loaded.params[k], m.params[k])


def test_load_errors(tmp_path):
    m = MultiQT.init(ModelConfig.tiny(), 0)
    path = tmp_path / "m.mqt"
    M.save(m, path)
    with pytest.raises(CheckpointError, match="K=3"):
        M.load(path, expected_classes=6)
    data = path.read_bytes()
    bad = tmp_path / "bad.mqt"
    bad.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        M.load(bad)
    bad.write_bytes(data[: len(data) - 7])
    with pytest.raises(CheckpointError):
        M.load(bad)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(modality="video")
    with pytest.raises(ValueError):
        ModelConfig(fusion="sum")
    with pytest.raises(ValueError):
        ModelConfig(audio_layers=((3, 4, 2),))      # stride 2 is not twice the text stride 4
