"""
Tests for view generation and the torch Dataset adapters.
"""
import numpy as np
import pytest
import torch

from augmentation.datasets import EvalDataset, ViewPairDataset
from augmentation.views import (
    CropFlipDraw,
    Normalization,
    PhotometricDraw,
    augment,
    blur_kernel_size,
    contrastive_augment,
    draw_crop_flip,
    draw_photometric,
    eval_view,
    make_view_pair,
    render_view,
    sample_seed_sequence,
    seeded_generator,
    student_policy,
    teacher_policy,
    weak_augment,
)
from ingest.manifest import open_split
from shared.models import AugmentationPolicy, StudentAugmentation
from tests.conftest import synthetic_images


IDENTITY = Normalization(mean=[0.0, 0.0, 0.0], std=[1.0, 1.0, 1.0])


@pytest.fixture
def image():
    return synthetic_images(1, 32, seed=3)[0]


@pytest.fixture
def settings():
    return StudentAugmentation()


def generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


class TestCropFlip:
    """Tests for random-resized-crop draws"""

    def test_box_inside_image_and_ratio_in_range(self):
        policy = AugmentationPolicy(kind="weak", crop_ratio_low=0.2)
        gen = generator(0)
        for _ in range(200):
            draw = draw_crop_flip(32, 32, policy, gen)
            assert 0 <= draw.top and draw.top + draw.height <= 32
            assert 0 <= draw.left and draw.left + draw.width <= 32
            assert 0.2 <= draw.scale <= 1.0

    def test_full_ratio_without_aspect_change_is_identity_box(self):
        policy = AugmentationPolicy(kind="weak", crop_ratio_low=1.0, aspect_ratio=(1.0, 1.0), flip_prob=0.0)
        draw = draw_crop_flip(32, 32, policy, generator(1))
        assert draw == CropFlipDraw.full(32, 32)

    def test_flip_probability_extremes(self):
        never = AugmentationPolicy(kind="weak", flip_prob=0.0)
        always = AugmentationPolicy(kind="weak", flip_prob=1.0)
        assert not any(draw_crop_flip(32, 32, never, generator(s)).flip for s in range(20))
        assert all(draw_crop_flip(32, 32, always, generator(s)).flip for s in range(20))


class TestRender:
    """Tests for applying drawn views"""

    def test_identity_draw_keeps_pixels(self, image):
        view = render_view(image, CropFlipDraw.full(32, 32), PhotometricDraw.skip(), 32, IDENTITY)
        expected = torch.from_numpy(image).permute(2, 0, 1).float() / 255.0
        assert torch.allclose(view, expected, atol=1e-6)

    def test_flip_mirrors_columns(self, image):
        plain = render_view(image, CropFlipDraw.full(32, 32), PhotometricDraw.skip(), 32, IDENTITY)
        flipped = render_view(
            image, CropFlipDraw(0, 0, 32, 32, flip=True), PhotometricDraw.skip(), 32, IDENTITY
        )
        assert torch.equal(flipped, plain.flip(-1))

    def test_grayscale_channels_equal(self, image):
        view = render_view(image, CropFlipDraw.full(32, 32), PhotometricDraw(grayscale=True), 32, IDENTITY)
        assert torch.allclose(view[0], view[1]) and torch.allclose(view[1], view[2])

    def test_output_side_and_normalization(self, image):
        norm = Normalization(mean=[0.5, 0.5, 0.5], std=[0.25, 0.25, 0.25])
        view = render_view(image, CropFlipDraw(4, 4, 20, 20, flip=False), PhotometricDraw.skip(), 16, norm)
        assert view.shape == (3, 16, 16)
        assert view.min() >= -2.0 - 1e-6 and view.max() <= 2.0 + 1e-6

    def test_blur_kernel_is_odd_tenth_of_side(self):
        assert blur_kernel_size(32) == 5
        assert blur_kernel_size(64) == 7
        assert blur_kernel_size(96) == 11


class TestAugment:
    """Tests for the weak/contrastive generators"""

    def test_weak_view_is_deterministic_per_seed(self, image, settings):
        policy = teacher_policy("weak", 32, settings)
        a = weak_augment(image, policy, generator(9), IDENTITY)
        b = weak_augment(image, policy, generator(9), IDENTITY)
        assert torch.equal(a, b)

    def test_weak_rejects_contrastive_policy(self, image, settings):
        with pytest.raises(ValueError):
            weak_augment(image, student_policy(settings, 32), generator(0), IDENTITY)

    def test_contrastive_rejects_weak_policy(self, image, settings):
        with pytest.raises(ValueError):
            contrastive_augment(image, teacher_policy("weak", 32, settings), generator(0), IDENTITY)

    def test_contrastive_with_stages_off_equals_weak(self, image):
        """Test that weak views are contrastive views whose color stages never fire"""
        weak = AugmentationPolicy(kind="weak")
        colorless = AugmentationPolicy(kind="contrastive", grayscale_prob=0.0, blur_prob=0.0)
        for seed in range(5):
            a = weak_augment(image, weak, generator(seed), IDENTITY)
            b = contrastive_augment(image, colorless, generator(seed), IDENTITY)
            assert torch.equal(a, b)

    def test_photometric_stream_layout_is_fixed(self, settings):
        """Test that stage probabilities do not change the draws that follow"""
        gen_a, gen_b = generator(4), generator(4)
        draw_photometric(AugmentationPolicy(kind="contrastive"), gen_a)
        draw_photometric(student_policy(settings, 32), gen_b)
        assert torch.equal(torch.rand(3, generator=gen_a), torch.rand(3, generator=gen_b))

    def test_augment_dispatches_on_kind(self, image, settings):
        policy = student_policy(settings, 32)
        assert torch.equal(
            augment(image, policy, generator(2), IDENTITY),
            contrastive_augment(image, policy, generator(2), IDENTITY),
        )


class TestTeacherPolicies:
    """Tests for teacher-path presets"""

    def test_weak_is_crop_and_flip(self, settings):
        assert teacher_policy("weak", 32, settings) == teacher_policy("crop+flip", 32, settings)

    def test_none_only_resizes(self, image, settings):
        policy = teacher_policy("none", 32, settings)
        view = weak_augment(image, policy, generator(0), IDENTITY)
        expected = torch.from_numpy(image).permute(2, 0, 1).float() / 255.0
        assert policy.flip_prob == 0.0
        assert torch.allclose(view, expected, atol=1e-6)

    def test_photometric_presets_are_contrastive(self, settings):
        policy = teacher_policy("crop+blur", 32, settings)
        assert policy.kind == "contrastive"
        assert policy.blur_prob == settings.blur_prob
        assert policy.color_jitter is None
        assert policy.flip_prob == 0.0

    def test_contrastive_preset_matches_student(self, settings):
        assert teacher_policy("contrastive", 32, settings) == student_policy(settings, 32)

    def test_unknown_stage(self, settings):
        with pytest.raises(ValueError, match="sepia"):
            teacher_policy("crop+sepia", 32, settings)


class TestViewPair:
    """Tests for per-sample view pairs"""

    def test_shapes_follow_crop_sides(self, image, settings):
        pair = make_view_pair(
            image, teacher_policy("weak", 32, settings), student_policy(settings, 32),
            [32, 16], sample_seed_sequence(0, 0, 5), IDENTITY, source_id=5,
        )
        assert pair.teacher_view.shape == (3, 32, 32)
        assert [v.shape for v in pair.student_views] == [(3, 32, 32), (3, 16, 16)]
        assert pair.source_id == 5

    def test_seeded_by_seed_epoch_and_id(self, image, settings):
        args = (image, teacher_policy("weak", 32, settings), student_policy(settings, 32), [32])
        a = make_view_pair(*args, sample_seed_sequence(0, 1, 7), IDENTITY)
        b = make_view_pair(*args, sample_seed_sequence(0, 1, 7), IDENTITY)
        c = make_view_pair(*args, sample_seed_sequence(0, 2, 7), IDENTITY)

        assert torch.equal(a.student_views[0], b.student_views[0])
        assert not torch.equal(a.student_views[0], c.student_views[0])

    def test_empty_crop_sides(self, image, settings):
        with pytest.raises(ValueError):
            make_view_pair(image, teacher_policy("weak", 32, settings), student_policy(settings, 32),
                           [], sample_seed_sequence(0, 0, 0), IDENTITY)

    def test_seeded_generator_is_reproducible(self):
        a = seeded_generator(np.random.SeedSequence([1, 2, 3]))
        b = seeded_generator(np.random.SeedSequence([1, 2, 3]))
        assert torch.equal(torch.rand(4, generator=a), torch.rand(4, generator=b))


class TestEvalView:
    """Tests for deterministic evaluation preprocessing"""

    def test_center_crop_of_larger_image(self):
        big = synthetic_images(1, 96, seed=0)[0]
        view = eval_view(big, 64, IDENTITY)
        assert view.shape == (3, 64, 64)

    def test_same_side_is_identity(self, image):
        view = eval_view(image, 32, IDENTITY)
        expected = torch.from_numpy(image).permute(2, 0, 1).float() / 255.0
        assert torch.allclose(view, expected, atol=1e-6)


class TestDatasets:
    """Tests for the Dataset adapters"""

    def test_view_pair_dataset_items(self, tiny_cifar, settings):
        dataset = ViewPairDataset(
            open_split(tiny_cifar), teacher_policy("weak", 32, settings), student_policy(settings, 32),
            [32, 16], IDENTITY, seed=0,
        )
        teacher_view, student_views, record_id = dataset[3]

        assert len(dataset) == 32
        assert teacher_view.shape == (3, 32, 32)
        assert len(student_views) == 2
        assert record_id == 3

    def test_view_pair_dataset_epoch_changes_views(self, tiny_cifar, settings):
        dataset = ViewPairDataset(
            open_split(tiny_cifar), teacher_policy("weak", 32, settings), student_policy(settings, 32),
            [32], IDENTITY, seed=0,
        )
        first = dataset[0][1][0]
        dataset.set_epoch(1)
        assert not torch.equal(first, dataset[0][1][0])

    def test_eval_dataset_labels(self, tiny_cifar):
        dataset = EvalDataset(open_split(tiny_cifar), 32, IDENTITY)
        image, label, record_id = dataset[13]
        assert image.shape == (3, 32, 32)
        assert label.dtype == torch.long and int(label) == 3
        assert record_id == 13
