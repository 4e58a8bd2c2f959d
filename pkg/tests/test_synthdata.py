"""
Test cases for synthetic clip generation, masking and the dataset format.
"""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from maura.exceptions import ManifestMismatchError, ValidationError
from maura.synthdata import (
    SceneSpec,
    VideoClip,
    cosine_ratio,
    export_gif,
    export_png_strip,
    full_frame_mask,
    generate_clip,
    generate_dataset,
    patch_mask,
    read_dataset,
    write_dataset,
)


@pytest.fixture
def red_square():
    return SceneSpec(shape="square", color=(0.9, 0.1, 0.1), velocity=(2.0, 0.0), start=(10.0, 16.0), radius=4)


class TestGenerateClip:
    """Test cases for rendering a single scene"""

    def test_shapes_and_range(self, red_square):
        sample = generate_clip(red_square, n_frames=8, size=32, seed=1)
        assert sample.clip.pixels.shape == (8, 3, 32, 32)
        assert sample.masks.shape == (8, 32, 32)
        assert sample.sketch.shape == (32, 32)
        assert 0.0 <= sample.clip.pixels.min() and sample.clip.pixels.max() <= 1.0
        assert sample.sketch.any()

    def test_caption_follows_motion(self, red_square):
        assert generate_clip(red_square, 8, 32, 0).caption == "a red square moves right"
        still = SceneSpec(shape="circle", color=(0.1, 0.2, 0.9), radius=4)
        assert generate_clip(still, 8, 32, 0).caption == "a blue circle stays still"

    def test_object_moves(self, red_square):
        masks = generate_clip(red_square, 8, 32, 0).masks
        cols = [np.nonzero(m.any(axis=0))[0].mean() for m in masks]
        assert cols[-1] > cols[0]

    def test_deterministic(self, red_square):
        a = generate_clip(red_square, 8, 32, 3)
        b = generate_clip(red_square, 8, 32, 3)
        np.testing.assert_array_equal(a.clip.pixels, b.clip.pixels)

    @pytest.mark.parametrize("n_frames,size", [(0, 32), (8, 30), (8, 0)])
    def test_bad_dims(self, red_square, n_frames, size):
        with pytest.raises(ValidationError):
            generate_clip(red_square, n_frames, size, 0)

    def test_unknown_shape(self):
        with pytest.raises(ValidationError):
            SceneSpec(shape="hexagon", color=(1.0, 0.0, 0.0))


class TestGenerateDataset:
    """Test cases for multi-clip generation"""

    def test_worker_count_does_not_change_results(self):
        one = generate_dataset(6, 4, 16, seed=5, workers=1)
        many = generate_dataset(6, 4, 16, seed=5, workers=3)
        assert [s.id for s in one] == [s.id for s in many]
        for a, b in zip(one, many):
            np.testing.assert_array_equal(a.clip.pixels, b.clip.pixels)

    def test_seed_changes_scenes(self):
        a = generate_dataset(4, 4, 16, seed=0)
        b = generate_dataset(4, 4, 16, seed=1)
        assert any(x.spec != y.spec for x, y in zip(a, b))


class TestMasking:
    """Test cases for patch and full-frame masking"""

    @pytest.fixture
    def clip(self, red_square):
        return generate_clip(red_square, 8, 32, 0).clip

    def test_patch_ratio_zero_is_identity(self, clip):
        masked, event = patch_mask(clip, 16, 0.0, seed=0)
        np.testing.assert_array_equal(masked.pixels, clip.pixels)
        assert event.patches == ()

    def test_patch_ratio_one_zeroes_all(self, clip):
        masked, _ = patch_mask(clip, 16, 1.0, seed=0)
        assert not masked.pixels.any()

    def test_patch_count(self, clip):
        # 8 frames x 2 x 2 patches = 32, ceil(0.3 * 32) = 10
        _, event = patch_mask(clip, 16, 0.3, seed=0)
        assert len(event.patches) == 10

    def test_patch_size_must_tile(self, clip):
        with pytest.raises(ValidationError):
            patch_mask(clip, 8, 0.5, seed=0)

    def test_full_frame(self, clip):
        masked, index = full_frame_mask(clip, seed=4)
        assert 0 <= index < 8
        assert not masked.pixels[index].any()
        others = [i for i in range(8) if i != index]
        np.testing.assert_array_equal(masked.pixels[others], clip.pixels[others])

    def test_full_frame_needs_two_frames(self):
        single = VideoClip(np.zeros((1, 3, 16, 16), dtype=np.float32))
        with pytest.raises(ValidationError):
            full_frame_mask(single, seed=0)

    def test_cosine_ratio_endpoints(self):
        assert cosine_ratio(0, 100, 0.2, 0.6) == pytest.approx(0.2)
        assert cosine_ratio(100, 100, 0.2, 0.6) == 0.6
        assert cosine_ratio(50, 100, 0.2, 0.6) == pytest.approx(0.4)

    @settings(max_examples=50, deadline=None)
    @given(
        total=st.integers(min_value=1, max_value=500),
        lo=st.floats(min_value=0.0, max_value=0.5),
        span=st.floats(min_value=0.0, max_value=0.5),
    )
    def test_cosine_ratio_monotone(self, total, lo, span):
        values = [cosine_ratio(s, total, lo, lo + span) for s in range(total + 1)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert all(lo <= v <= lo + span for v in values)


class TestDatasetIO:
    """Test cases for the on-disk dataset"""

    def test_round_trip(self, tmp_path, samples):
        write_dataset(samples, tmp_path)
        back = read_dataset(tmp_path)
        assert [s.id for s in back] == [s.id for s in samples]
        for a, b in zip(samples, back):
            np.testing.assert_array_equal(a.clip.pixels, b.clip.pixels)
            np.testing.assert_array_equal(a.masks, b.masks)
            assert a.caption == b.caption
            assert a.spec == b.spec

    def test_missing_file(self, tmp_path, samples):
        write_dataset(samples, tmp_path)
        (tmp_path / f"{samples[0].id}_masks.maura").unlink()
        with pytest.raises(ManifestMismatchError, match="missing"):
            read_dataset(tmp_path)

    def test_manifest_shape_mismatch(self, tmp_path, samples):
        write_dataset(samples, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest[0]["n_frames"] = 4
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ManifestMismatchError):
            read_dataset(tmp_path)

    def test_no_manifest(self, tmp_path):
        with pytest.raises(ManifestMismatchError):
            read_dataset(tmp_path)


class TestExport:
    """Test cases for GIF and PNG export"""

    def test_gif_frames(self, tmp_path, red_square):
        clip = generate_clip(red_square, 8, 32, 0).clip
        path = export_gif(clip, tmp_path / "clip.gif", scale=2)
        with Image.open(path) as im:
            assert im.n_frames == 8
            assert im.size == (64, 64)

    def test_png_strip(self, tmp_path, samples):
        path = export_png_strip(samples[0].clip, tmp_path / "clip.png", scale=1)
        with Image.open(path) as im:
            assert im.size == (8 * 32, 32)
