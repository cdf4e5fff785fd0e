import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlkd import data as D
from dlkd.errors import ConfigError, FormatError

DIMS = (3, 8, 32, 32)


@pytest.fixture(scope="module")
def eight_by_twenty():
    return D.generate_dataset(8, 20, (1, 6, 16, 16), seed=5)


def test_generation_is_bitwise_deterministic():
    a = D.generate_dataset(3, 2, DIMS, seed=9)
    b = D.generate_dataset(3, 2, DIMS, seed=9)
    assert a.clips == b.clips


def test_seed_matters():
    a = D.generate_dataset(2, 1, DIMS, seed=1)
    b = D.generate_dataset(2, 1, DIMS, seed=2)
    assert a.clips != b.clips


def test_counts_and_labels(eight_by_twenty):
    assert len(eight_by_twenty) == 160
    assert sorted(set(eight_by_twenty.labels.tolist())) == list(range(8))
    assert len(set(eight_by_twenty.ids)) == 160


def test_render_order_does_not_matter():
    ds = D.generate_dataset(4, 3, DIMS, seed=21)
    lone = D.render_clip(2, DIMS, 21, 2 * 3 + 1)
    assert lone.tobytes() == ds.clips[7].data.tobytes()


def test_bright_domain(eight_by_twenty):
    means = [c.data.mean() for c in eight_by_twenty.clips]
    assert min(means) >= 0.4
    assert all(c.data.min() >= 0 and c.data.max() <= 1 for c in eight_by_twenty.clips)


@pytest.mark.parametrize("kwargs", [dict(num_classes=9), dict(num_classes=1), dict(dims=(1, 3, 8, 8))])
def test_bad_generation_config(kwargs):
    args = dict(num_classes=2, clips_per_class=2, dims=DIMS, seed=0)
    args.update(kwargs)
    with pytest.raises(ConfigError):
        D.generate_dataset(**args)


def _blob_trajectory(clip):
    """Per-frame centroid and spread of (frame - per-pixel temporal minimum)."""
    frames = clip.data.mean(axis=0)
    weights = frames - frames.min(axis=0, keepdims=True)
    weights = np.maximum(weights - 0.5 * weights.max(axis=(1, 2), keepdims=True), 0)
    rows, cols = np.mgrid[0 : frames.shape[1], 0 : frames.shape[2]]
    mass = weights.sum(axis=(1, 2))
    r = (weights * rows).sum(axis=(1, 2)) / mass
    c = (weights * cols).sum(axis=(1, 2)) / mass
    return r, c


@pytest.fixture(scope="module")
def motion_set():
    return D.generate_dataset(8, 6, DIMS, seed=31)


def _of(dataset, motion):
    label = D.MOTIONS.index(motion)
    return [c for c in dataset.clips if c.label == label]


@pytest.mark.parametrize(
    "motion, axis, sign",
    [("translate-right", 1, 1), ("translate-left", 1, -1), ("translate-down", 0, 1), ("translate-up", 0, -1)],
)
def test_translation_centroids_move_monotonically(motion_set, motion, axis, sign):
    for clip in _of(motion_set, motion):
        track = _blob_trajectory(clip)[axis]
        assert np.all(sign * np.diff(track) > 0), track


@pytest.mark.parametrize("motion, sign", [("rotate-cw", 1), ("rotate-ccw", -1)])
def test_rotation_sense(motion_set, motion, sign):
    for clip in _of(motion_set, motion):
        r, c = _blob_trajectory(clip)
        # z-component of the cross product of successive displacement vectors, image axes (x=col, y=row)
        dx, dy = np.diff(c), np.diff(r)
        turn = dx[:-1] * dy[1:] - dy[:-1] * dx[1:]
        assert np.all(sign * turn > 0), turn


@pytest.mark.parametrize("motion, sign", [("expand", 1), ("contract", -1)])
def test_size_change(motion_set, motion, sign):
    for clip in _of(motion_set, motion):
        frames = clip.data.mean(axis=0)
        bright = (frames - frames.min(axis=0)).reshape(frames.shape[0], -1)
        area = (bright > 0.1).sum(axis=1)
        assert sign * (area[-1] - area[0]) > 0


class TestDarken:
    def test_identity(self, motion_set):
        clip = motion_set.clips[0]
        out = D.darken(clip, D.DarkenParams(1.0, 1.0, 0.0))
        assert out == clip

    def test_hand_value(self):
        clip = D.VideoClip(np.full((1, 1, 1, 1), 0.5, dtype=np.float32), 0, "a")
        out = D.darken(clip, D.DarkenParams(2.0, 0.5, 0.0))
        assert abs(float(out.data.max()) - 0.125) < 1e-7

    def test_darkens_generated_clips(self, motion_set):
        params = D.DarkenParams(2.0, 0.3, 0.02, seed=3)
        for clip in motion_set.clips:
            assert D.darken(clip, params).data.mean() < clip.data.mean()

    def test_preserves_metadata_and_range(self, motion_set):
        params = D.DarkenParams(2.2, 0.3, 0.2, seed=3)
        for clip in motion_set.clips:
            out = D.darken(clip, params)
            assert (out.label, out.clip_id, out.shape) == (clip.label, clip.clip_id, clip.shape)
            assert out.data.min() >= 0 and out.data.max() <= 1

    def test_noise_depends_only_on_seed_and_id(self, motion_set):
        params = D.DarkenParams(seed=4)
        whole = D.darken_dataset(motion_set, params)
        reversed_order = [D.darken(c, params) for c in reversed(motion_set.clips)][::-1]
        assert whole.clips == reversed_order

    def test_rejects_bad_params(self):
        with pytest.raises(Exception):
            D.DarkenParams(gamma_dark=0.5)
        with pytest.raises(Exception):
            D.DarkenParams(scale=0.0)


class TestSplit:
    def test_paper_ratio(self, eight_by_twenty):
        train, test = D.split(eight_by_twenty, 0.8, seed=1)
        assert (len(train), len(test)) == (128, 32)
        assert np.bincount(train.labels).tolist() == [16] * 8
        assert np.bincount(test.labels).tolist() == [4] * 8

    def test_same_seed_same_split(self, eight_by_twenty):
        assert D.split(eight_by_twenty, 0.8, 3)[0].ids == D.split(eight_by_twenty, 0.8, 3)[0].ids

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
    def test_partition(self, eight_by_twenty, fraction, seed):
        train, test = D.split(eight_by_twenty, fraction, seed)
        assert set(train.ids) | set(test.ids) == set(eight_by_twenty.ids)
        assert not set(train.ids) & set(test.ids)
        expected = int(np.floor(fraction * 20 + 0.5))
        assert np.bincount(train.labels, minlength=8).tolist() == [expected] * 8

    def test_tiny_class_rejected(self):
        ds = D.generate_dataset(2, 1, (1, 4, 8, 8), seed=0)
        with pytest.raises(ConfigError):
            D.split(ds, 0.5, 0)

    @pytest.mark.parametrize("fraction", [0.0, 1.0, 1.5])
    def test_bad_fraction(self, eight_by_twenty, fraction):
        with pytest.raises(ConfigError):
            D.split(eight_by_twenty, fraction, 0)


class TestClipFiles:
    def test_round_trip(self, tmp_path, motion_set):
        clip = D.darken(motion_set.clips[3], D.DarkenParams(seed=1))
        D.write_clip(clip, tmp_path / "c.dlkc")
        assert D.read_clip(tmp_path / "c.dlkc") == clip

    def test_file_size(self, tmp_path, motion_set):
        clip = motion_set.clips[0]
        D.write_clip(clip, tmp_path / "c.dlkc")
        size = (tmp_path / "c.dlkc").stat().st_size
        header = 4 + 2 + 2 + 4 * 4 + 2 + len(clip.clip_id)
        assert size == header + 4 * int(np.prod(clip.shape))
        assert D.clip_header_size(clip.clip_id) == header

    @pytest.mark.parametrize("cut", [2, 10, 30, -4])
    def test_truncated(self, motion_set, cut):
        buf = D.clip_to_bytes(motion_set.clips[0])
        with pytest.raises(FormatError, match="offset"):
            D.clip_from_bytes(buf[:cut])

    def test_bad_magic_and_version(self, motion_set):
        buf = bytearray(D.clip_to_bytes(motion_set.clips[0]))
        with pytest.raises(FormatError, match="magic"):
            D.clip_from_bytes(b"NOPE" + bytes(buf[4:]))
        buf[4] = 99
        with pytest.raises(FormatError, match="version"):
            D.clip_from_bytes(bytes(buf))


def test_dataset_directory_round_trip(tmp_path):
    ds = D.darken_dataset(D.generate_dataset(2, 3, (1, 4, 8, 8), seed=2), D.DarkenParams(seed=2))
    D.save_dataset(ds, tmp_path)
    header = (tmp_path / "manifest.txt").read_text().splitlines()[0]
    assert header.startswith("#dlkd-manifest v1") and "gamma_dark=2.2" in header
    loaded = D.load_dataset(tmp_path)
    assert loaded.clips == ds.clips
    assert loaded.class_names == ds.class_names
    assert loaded.params["seed"] == 2


def test_bench_constants():
    ds = D.bench_dataset()
    assert len(ds) == 320
    assert ds.dims == (3, 8, 32, 32)
    assert ds.params["name"] == "dlkd-bench-v1"
    assert (ds.params["gamma_dark"], ds.params["scale"], ds.params["noise"]) == (2.2, 0.3, 0.02)
