"""
Tests for backbones, heads and the student/teacher pair.
"""
import pytest
import torch
import torch.nn as nn

from model.networks import (
    Embedder,
    ProjectionHead,
    build_backbone,
    forward_embed,
    init_pair,
    l2_normalize,
    predictor_forward,
)
from pipeline.error_handling import ConfigurationError, NumericError
from shared.models import BackboneSpec, ProjectionHeadSpec


HEAD = ProjectionHeadSpec(hidden_dim=32, output_dim=8)


@pytest.fixture(scope="module")
def pair():
    return init_pair(BackboneSpec(arch="resnet18_small"), HEAD, seed=0, momentum=0.99)


def tiny_embedder() -> Embedder:
    """Linear 'backbone' with batch norm, for fast grouping checks"""
    torch.manual_seed(0)
    backbone = nn.Sequential(nn.Flatten(), nn.Linear(12, 6), nn.BatchNorm1d(6))
    return Embedder(backbone, nn.Identity())


class TestBackbone:
    """Tests for ResNet construction"""

    def test_small_stem(self):
        net = build_backbone(BackboneSpec(arch="resnet18_small"))
        assert net.conv1.kernel_size == (3, 3)
        assert net.conv1.stride == (1, 1)
        assert isinstance(net.maxpool, nn.Identity)

    def test_imagenet_stem_kept_for_resnet18(self):
        net = build_backbone(BackboneSpec(arch="resnet18"))
        assert net.conv1.kernel_size == (7, 7)
        assert isinstance(net.maxpool, nn.MaxPool2d)

    def test_pooled_feature_dim(self):
        net = build_backbone(BackboneSpec(arch="resnet18_small")).eval()
        with torch.no_grad():
            assert net(torch.randn(2, 3, 32, 32)).shape == (2, 512)

    def test_projection_head_shape(self):
        head = ProjectionHead(512, HEAD)
        assert head(torch.randn(3, 512)).shape == (3, 8)
        assert not any(isinstance(m, nn.BatchNorm1d) for m in head.modules())


class TestForwardEmbed:
    """Tests for grouped batch-norm forwarding"""

    def test_groups_equal_chunkwise_forward(self):
        model = tiny_embedder().train()
        views = torch.randn(8, 3, 2, 2)
        grouped = forward_embed(model, views, bn_groups=2)
        manual = torch.cat([model(views[:4]), model(views[4:])])
        assert torch.allclose(grouped, manual, atol=1e-6)

    def test_groups_differ_from_whole_batch(self):
        model = tiny_embedder().train()
        views = torch.randn(8, 3, 2, 2)
        views[4:] += 5.0
        assert not torch.allclose(forward_embed(model, views, bn_groups=2), forward_embed(model, views, bn_groups=1))

    def test_indivisible_batch(self):
        with pytest.raises(ConfigurationError, match="bn_groups"):
            forward_embed(tiny_embedder(), torch.randn(6, 3, 2, 2), bn_groups=4)


class TestL2Normalize:
    """Tests for unit-norm projection"""

    def test_unit_rows(self):
        z = l2_normalize(torch.randn(5, 7))
        assert torch.allclose(z.norm(dim=1), torch.ones(5), atol=1e-6)

    def test_known_row(self):
        assert torch.allclose(l2_normalize(torch.tensor([[3.0, 4.0]])), torch.tensor([[0.6, 0.8]]))

    def test_scale_invariant_and_idempotent(self):
        v = torch.randn(4, 6)
        z = l2_normalize(v)
        assert torch.allclose(l2_normalize(2.5 * v), z, atol=1e-6)
        assert torch.allclose(l2_normalize(z), z, atol=1e-7)

    def test_zero_row_named(self):
        vectors = torch.randn(4, 3)
        vectors[2] = 0.0
        with pytest.raises(NumericError, match="row 2"):
            l2_normalize(vectors)

    def test_nan_row(self):
        vectors = torch.randn(3, 3)
        vectors[0, 1] = float("nan")
        with pytest.raises(NumericError, match="row 0"):
            l2_normalize(vectors)


class TestStudentTeacherPair:
    """Tests for pair initialization"""

    def test_teacher_starts_as_student_copy(self, pair):
        student = dict(pair.student.encoder_parameters())
        for name, param in pair.teacher.encoder_parameters():
            assert torch.equal(param, student[name])

    def test_teacher_not_trainable(self, pair):
        assert not any(p.requires_grad for p in pair.teacher.parameters())
        assert all(p.requires_grad for p in pair.student.parameters())

    def test_teacher_has_no_predictor(self):
        pair = init_pair(BackboneSpec(), HEAD, seed=0, predictor_hidden_dim=16)
        assert pair.student.predictor is not None
        assert pair.teacher.predictor is None
        assert predictor_forward(pair.student, torch.randn(4, 8)).shape == (4, 8)

    def test_predictor_missing(self, pair):
        with pytest.raises(ConfigurationError, match="predictor"):
            predictor_forward(pair.student, torch.randn(2, 8))

    def test_seeded_init(self):
        a = init_pair(BackboneSpec(), HEAD, seed=3)
        b = init_pair(BackboneSpec(), HEAD, seed=3)
        c = init_pair(BackboneSpec(), HEAD, seed=4)
        assert a.teacher_state_hash() == b.teacher_state_hash()
        assert a.teacher_state_hash() != c.teacher_state_hash()

    def test_init_leaves_global_rng_alone(self):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        init_pair(BackboneSpec(), HEAD, seed=0)
        assert torch.equal(torch.rand(3), expected)
