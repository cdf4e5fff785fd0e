import itertools

import numpy as np
import pytest

from dlkd.errors import ConfigError, FormatError, ShapeError
from dlkd.model import (
    ModelConfig,
    build_classifier,
    checkpoint_bytes,
    forward,
    load_model,
    model_from_bytes,
    r2plus1d_block,
    save_model,
)
from dlkd.tensor import Tensor, backward, finite_diff_grad, precision, relative_error, softmax

SMALL = ModelConfig(num_classes=4, input_shape=(3, 4, 8, 8), widths=(4, 6), seed=3)


def test_same_seed_same_parameters():
    a, b = build_classifier(SMALL), build_classifier(SMALL)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_seed_changes_parameters():
    a = build_classifier(SMALL)
    b = build_classifier(ModelConfig(**{**SMALL.__dict__, "seed": 4}))
    assert any(a.params[k].data.tobytes() != b.params[k].data.tobytes() for k in a.params)


def test_parameter_count_closed_form():
    config = ModelConfig(num_classes=8, input_shape=(3, 8, 32, 32), widths=(8, 16),
                         spatial_kernel=3, temporal_kernel=3)
    # block0: 8*3*1*3*3 + 8 + 8*8*3 + 8 = 424; block1: 16*8*9 + 16 + 16*16*3 + 16 = 1952; head: 8*16 + 8 = 136
    assert build_classifier(config).num_parameters() == 424 + 1952 + 136 == 2512


def test_init_is_bounded_by_fan_in():
    model = build_classifier(SMALL)
    for name, p in model.params.items():
        if name.endswith("bias"):
            assert not p.data.any()
        else:
            bound = np.sqrt(3.0 / np.prod(p.shape[1:]))
            assert np.abs(p.data).max() <= bound


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(input_shape=(3, 2, 8, 8), temporal_kernel=3),
        dict(input_shape=(3, 4, 8, 8), widths=(4, 4, 4, 4), spatial_kernel=3),
        dict(num_classes=1),
        dict(spatial_kernel=2),
    ],
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**{**dict(input_shape=(3, 4, 8, 8)), **kwargs})


def _block_params(c_in, c_out, rng, zero_bias=False):
    sb = np.zeros(c_out) if zero_bias else rng.standard_normal(c_out)
    tb = np.zeros(c_out) if zero_bias else rng.standard_normal(c_out)
    return (
        Tensor(rng.standard_normal((c_out, c_in, 1, 3, 3))),
        Tensor(sb),
        Tensor(rng.standard_normal((c_out, c_out, 3, 1, 1))),
        Tensor(tb),
    )


class TestBlock:
    def test_zero_in_zero_out(self, rng):
        out = r2plus1d_block(Tensor(np.zeros((2, 4, 8, 8))), _block_params(2, 3, rng, zero_bias=True))
        assert out.shape == (3, 4, 4, 4)
        assert not out.data.any()

    def test_delta_kernels_give_relu(self, rng):
        spatial = np.zeros((1, 1, 1, 3, 3))
        spatial[0, 0, 0, 1, 1] = 1.0
        temporal = np.zeros((1, 1, 3, 1, 1))
        temporal[0, 0, 1, 0, 0] = 1.0
        x = rng.uniform(0, 1, size=(1, 4, 6, 6))
        with precision(np.float64):
            params = (Tensor(spatial), Tensor(np.zeros(1)), Tensor(temporal), Tensor(np.zeros(1)))
            out = r2plus1d_block(Tensor(x), params, spatial_stride=1)
        np.testing.assert_array_equal(out.data, np.maximum(x, 0))

    def test_output_halves_space(self, rng):
        out = r2plus1d_block(Tensor(np.ones((2, 4, 8, 10))), _block_params(2, 5, rng))
        assert out.shape == (5, 4, 4, 5)

    def test_gradient_wrt_kernels(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        sw, sb, tw, tb = (p.data.astype(np.float64) for p in _block_params(2, 3, rng))

        def loss(s, t):
            return r2plus1d_block(Tensor(x, dtype=np.float64), (s, Tensor(sb), t, Tensor(tb))).sum()

        s = Tensor(sw, requires_grad=True, dtype=np.float64)
        t = Tensor(tw, requires_grad=True, dtype=np.float64)
        backward(loss(s, t))
        assert relative_error(s.grad, finite_diff_grad(lambda v: loss(v, Tensor(tw)), sw)) < 1e-4
        assert relative_error(t.grad, finite_diff_grad(lambda v: loss(Tensor(sw), v), tw)) < 1e-4


def manual_forward(clip, spatial_w, spatial_b, temporal_w, temporal_b, head_w, head_b):
    """Single block, single channel, spelled out cell by cell (any odd temporal kernel)."""
    _, t_len, h_len, w_len = clip.shape
    padded = np.zeros((t_len, h_len + 2, w_len + 2))
    padded[:, 1:-1, 1:-1] = clip[0]
    h_out, w_out = (h_len + 1) // 2, (w_len + 1) // 2
    spatial = np.zeros((t_len, h_out, w_out))
    for t, i, j in itertools.product(range(t_len), range(h_out), range(w_out)):
        acc = spatial_b
        for p, q in itertools.product(range(3), range(3)):
            acc += padded[t, 2 * i + p, 2 * j + q] * spatial_w[p][q]
        spatial[t, i, j] = max(acc, 0.0)
    temporal = np.zeros_like(spatial)
    for t, i, j in itertools.product(range(t_len), range(h_out), range(w_out)):
        acc = temporal_b
        half = len(temporal_w) // 2
        for a in range(len(temporal_w)):
            src = t + a - half
            if 0 <= src < t_len:
                acc += spatial[src, i, j] * temporal_w[a]
        temporal[t, i, j] = max(acc, 0.0)
    pooled = temporal.sum() / temporal.size
    return [head_w[k] * pooled + head_b[k] for k in range(len(head_b))]


class TestForward:
    def test_zero_clip_gives_uniform_softmax(self):
        model = build_classifier(SMALL)
        logits = forward(model, np.zeros(SMALL.input_shape, dtype=np.float32))
        assert np.all(logits.data == logits.data[0])
        np.testing.assert_allclose(softmax(logits).data, np.full(4, 0.25), atol=1e-7)

    def test_deterministic(self, rng):
        model = build_classifier(SMALL)
        clip = rng.uniform(0, 1, size=SMALL.input_shape).astype(np.float32)
        assert forward(model, clip).data.tobytes() == forward(model, clip).data.tobytes()

    def test_shape_mismatch_names_both(self):
        model = build_classifier(SMALL)
        with pytest.raises(ShapeError, match=r"\(3, 4, 8, 8\).*\(3, 4, 8, 9\)"):
            forward(model, np.zeros((3, 4, 8, 9), dtype=np.float32))

    @pytest.mark.parametrize("frames, kt", [(2, 1), (3, 3)])
    def test_matches_manual_forward(self, frames, kt):
        config = ModelConfig(num_classes=2, input_shape=(1, frames, 4, 4), widths=(1,),
                             temporal_kernel=kt, seed=5)
        model = build_classifier(config)
        model.params["block0.spatial.bias"].data[...] = 0.05
        model.params["block0.temporal.bias"].data[...] = -0.02
        model.params["head.bias"].data[...] = [0.1, -0.3]
        clip = (np.arange(16 * frames, dtype=np.float32).reshape(1, frames, 4, 4) % 7) / 7
        p = {k: v.data.astype(np.float64) for k, v in model.params.items()}
        expected = manual_forward(
            clip.astype(np.float64),
            p["block0.spatial.weight"][0, 0, 0].tolist(),
            float(p["block0.spatial.bias"][0]),
            p["block0.temporal.weight"][0, 0, :, 0, 0].tolist(),
            float(p["block0.temporal.bias"][0]),
            p["head.weight"][:, 0].tolist(),
            p["head.bias"].tolist(),
        )
        np.testing.assert_allclose(forward(model, clip).data, expected, atol=1e-5)

    @pytest.mark.parametrize("shape", [(3, 4, 8, 8), (1, 6, 16, 12), (2, 3, 9, 9)])
    def test_output_has_k_entries(self, shape):
        model = build_classifier(ModelConfig(num_classes=5, input_shape=shape, widths=(2, 3)))
        assert forward(model, np.zeros(shape, dtype=np.float32)).shape == (5,)
        assert forward(model, np.zeros((3,) + shape, dtype=np.float32)).shape == (3, 5)

    def test_teacher_and_student_share_shapes(self):
        teacher, student = build_classifier(SMALL), build_classifier(SMALL)
        assert {k: v.shape for k, v in teacher.params.items()} == {k: v.shape for k, v in student.params.items()}

    def test_input_scaling(self, rng):
        scaled = ModelConfig(**{**SMALL.__dict__, "input_mean": 0.45, "input_std": 0.225})
        plain = build_classifier(SMALL)
        model = build_classifier(scaled)
        clip = rng.uniform(0, 1, size=SMALL.input_shape)
        with precision(np.float64):
            for m in (plain, model):
                m.params = {k: Tensor(v.data.astype(np.float64), requires_grad=True) for k, v in m.params.items()}
            expected = forward(plain, (clip - 0.45) / 0.225).data
            got = forward(model, clip).data
        np.testing.assert_allclose(got, expected, rtol=1e-12)


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path):
        model = build_classifier(SMALL)
        for p in model.params.values():
            p.data += np.float32(0.125)
        save_model(model, tmp_path / "m.ckpt")
        loaded = load_model(tmp_path / "m.ckpt")
        assert loaded.config == model.config
        assert list(loaded.params) == list(model.params)
        assert checkpoint_bytes(loaded) == checkpoint_bytes(model)
        assert loaded.digest() == model.digest()

    def test_header_layout(self):
        buf = checkpoint_bytes(build_classifier(SMALL))
        assert buf[:4] == b"DLKD"
        assert int.from_bytes(buf[4:6], "little") == 1

    @pytest.mark.parametrize("cut", [3, 10, 50, -1])
    def test_truncated(self, cut):
        buf = checkpoint_bytes(build_classifier(SMALL))
        with pytest.raises(FormatError):
            model_from_bytes(buf[:cut])

    def test_bad_magic(self):
        buf = checkpoint_bytes(build_classifier(SMALL))
        with pytest.raises(FormatError, match="offset 0"):
            model_from_bytes(b"XXXX" + buf[4:])
