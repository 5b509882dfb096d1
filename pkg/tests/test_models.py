import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrgan import layers as L
from mrgan import tensor as T
from mrgan.models import (Model, Node, ProGANStage, build_dcgan, build_progan, build_srresgan, build_unet,
                          count_params, forward_shapes, stage_ladder, transfer_params)
from mrgan.optim import InitScheme
from mrgan.tensor import Tensor, grad_check, no_grad


def init(m, seed=0):
    return m.initialize(np.random.default_rng(seed), InitScheme("he_normal_paper", fan_in=True))


def run(m, x, train=False):
    with no_grad():
        return m(Tensor(x), train=train).data


def test_unet_counts():
    assert count_params(build_unet(32, True)) == (8_641_697, 8_635_809)
    assert count_params(build_unet(64, True)) == (34_535_745, 34_523_969)
    assert count_params(build_unet(64, False)) == (34_512_193, 34_512_193)


def test_unet_bn_gap_halves_with_filters():
    gaps = [np.subtract(*count_params(build_unet(b, True))) for b in (8, 16, 32, 64)]
    assert gaps == [gaps[0] * 2 ** i for i in range(4)]


def test_unet_counts_independent_of_resolution():
    assert count_params(build_unet(8, True, input_res=32)) == count_params(build_unet(8, True, input_res=128))


def test_unet_forward_range_and_shape():
    m = init(build_unet(8, True, input_res=32))
    y = run(m, np.random.default_rng(1).standard_normal((2, 1, 32, 32)))
    assert y.shape == (2, 1, 32, 32) and y.min() >= 0 and y.max() <= 1
    with pytest.raises(L.ShapeError):
        build_unet(8, True, input_res=40)


def test_dense_count():
    m = Model("tiny", [Node("input", L.Input((2,))), Node("fc", L.Dense(2, 3))])
    assert count_params(m) == (9, 9)


def test_dcgan_full_size_shapes():
    g, d = build_dcgan()
    assert forward_shapes(g)[-1][1] == (1, 256, 256)
    assert forward_shapes(d)[-1][1] == (1, 1, 1)


def test_dcgan_desk_scale_shape_ladder():
    g, d = build_dcgan(latent=32, base_res=4, target_res=16, g_filters=32, d_filters=16, disc_final_res=4)
    spatial = [s[-1] for _, s in forward_shapes(g)[1:]]
    assert spatial[0] == 4 and spatial[-1] == 16
    assert all(b in (a, 2 * a) for a, b in zip(spatial, spatial[1:]))
    dspatial = [s[-1] for _, s in forward_shapes(d) if len(s) == 3 and s[-1] > 1]
    assert dspatial[0] == 16 and all(b in (a, a // 2) for a, b in zip(dspatial, dspatial[1:]))
    init(g), init(d)
    out = run(d, run(g, np.random.default_rng(2).standard_normal((2, 32))))
    assert out.shape == (2, 1, 1, 1) and np.all((out > 0) & (out < 1))
    with pytest.raises(ValueError):
        build_dcgan(target_res=100)


def test_srresgan_full_size():
    g, d = build_srresgan()
    shapes = [s for _, s in forward_shapes(g)]
    assert shapes[-1] == (1, 256, 256)
    assert [s[-1] for s in shapes if len(s) == 3 and s[0] == 64 and s[-1] > 16] == [32, 64, 128, 256]
    dshapes = [s for _, s in forward_shapes(d)]
    assert (2048, 2, 2) in dshapes
    widths = sorted({s[0] for s in dshapes if len(s) == 3 and 32 <= s[0] <= 1024})
    assert widths == [32, 64, 128, 256, 512, 1024]
    with pytest.raises(ValueError):
        build_srresgan(target_res=8)


def test_srresgan_single_block_end_to_end_gradient():
    g, d = build_srresgan(latent=8, n_res_blocks=1, target_res=16, g_filters=4, d_filters=4)
    init(g, 3), init(d, 4)
    z = np.random.default_rng(5).standard_normal((2, 8))
    assert grad_check(lambda v: T.reduce_mean(d(g(v))), z, 1e-5) < 1e-3


def test_progan_base_stage():
    g, d = build_progan(ProGANStage(4))
    shapes = [s for _, s in forward_shapes(g)]
    assert shapes[0] == (512, 1, 1) and (512, 4, 4) in shapes and shapes[-1] == (1, 4, 4)
    dshapes = [s for _, s in forward_shapes(d)]
    assert (513, 4, 4) in dshapes


def test_progan_stage_validation():
    for bad in (dict(resolution=2), dict(resolution=512), dict(resolution=12),
                dict(resolution=8, phase="stabilize", alpha=0.5), dict(resolution=4, phase="transition", alpha=0.0)):
        with pytest.raises(ValueError):
            ProGANStage(**bad)


def test_stage_ladder():
    assert stage_ladder(32) == [4, 8, 16, 32]
    assert stage_ladder(4) == [4]


def _mini(stage):
    return build_progan(stage, latent=16, fbase=128, fmax=16, kernel=3)


def test_progan_weights_carry_across_stages():
    g8, _ = _mini(ProGANStage(8))
    g16, _ = _mini(ProGANStage(16, "transition", 0.0))
    init(g8)
    init(g16, 1)
    copied = transfer_params(g8, g16)
    assert copied and all(np.array_equal(g8.params[n].data, g16.params[n].data) for n in copied)


@settings(max_examples=10)
@given(st.sampled_from([8, 16]))
def test_progan_params_independent_of_batch(res):
    g, _ = _mini(ProGANStage(res))
    init(g)
    z = np.random.default_rng(res).standard_normal((3, 16))
    a = run(g, z)
    b = np.concatenate([run(g, z[i:i + 1]) for i in range(3)])
    assert np.allclose(a, b, atol=1e-6)


@pytest.mark.parametrize("builder", [
    lambda: (build_unet(8, True, input_res=32),),
    lambda: build_dcgan(latent=16, base_res=4, target_res=16, g_filters=16, d_filters=8, disc_final_res=4),
    lambda: build_srresgan(latent=16, n_res_blocks=2, target_res=32, g_filters=8, d_filters=4),
    lambda: _mini(ProGANStage(16, "transition", 0.5)),
])
def test_symbolic_shapes_match_numeric_forward(builder):
    models = builder()
    rng = np.random.default_rng(6)
    for m in models:
        init(m)
        x = rng.standard_normal((2,) + m.input_shape)
        outs = {}
        with no_grad():
            prev = None
            y = Tensor(x)
            for node in m.nodes:
                args = [outs[n] for n in node.inputs] if node.inputs else [prev]
                y = node.layer.forward(y) if isinstance(node.layer, L.Input) else node.layer.forward(*args)
                outs[node.name] = prev = y
        assert [s for _, s in forward_shapes(m)] == [outs[n.name].shape[1:] for n in m.nodes]


@given(st.floats(-50, 50, allow_nan=False))
def test_generator_outputs_in_tanh_range(scale):
    g, _ = build_dcgan(latent=8, base_res=4, target_res=16, g_filters=8, d_filters=4, disc_final_res=4)
    init(g)
    y = run(g, scale * np.ones((2, 8)))
    assert np.all(np.abs(y) <= 1)


def test_trainable_partition():
    m = init(build_unet(8, True, input_res=32))
    total, trainable = count_params(m)
    frozen = [p for p in m.params.values() if not p.trainable]
    assert sum(p.size for p in frozen) == total - trainable
    assert set(m.trainable_params()) | {p.name for p in frozen} == set(m.params)


def test_strict_load_rejects_missing():
    m = init(build_unet(8, False, input_res=32))
    arrays = {n: p.data for n, p in m.params.items()}
    arrays.pop(next(iter(arrays)))
    with pytest.raises(KeyError):
        m.load_params(arrays)
