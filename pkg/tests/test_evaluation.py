"""
Tests for kNN monitoring, linear evaluation and embedding export.
"""
import numpy as np
import pytest
import torch
import torch.nn as nn

from evaluation.export import EMB_HEADER, export_embeddings, read_embeddings, write_embeddings
from evaluation.features import FeatureSet, parameter_hash
from evaluation.knn import knn_eval, knn_predict, knn_top1
from evaluation.linear import linear_eval, read_report, score_classifier
from pipeline.checkpoint import CheckpointMeta, save_checkpoint
from pipeline.error_handling import CheckpointError, EvaluationError, ExportError
from pipeline.trainer import build_state
from shared.models import DatasetSpec, LinearEvalConfig
from shared.packed_store import UNLABELED
from tests.conftest import pack_synthetic


@pytest.fixture
def checkpoint(tiny_config, tmp_path):
    """Untrained pair saved as a final checkpoint of the tiny config"""
    state = build_state(tiny_config, steps_per_epoch=4)
    meta = CheckpointMeta(config_hash=tiny_config.config_hash(), epoch=2, step=8, kind="final", dataset="cifar10")
    return save_checkpoint(tmp_path / "run" / "checkpoints" / "final.pt", meta, tiny_config, state.pair)


@pytest.fixture
def linear_config():
    return LinearEvalConfig(epochs=2, milestones=[1], batch_size=8, augment=False)


def one_hot_set(classes: list[int], labels: list[int], dim: int = 4) -> FeatureSet:
    features = torch.eye(dim)[classes]
    return FeatureSet(features=features, labels=torch.tensor(labels), ids=torch.arange(len(labels)))


class TestKnn:
    """Tests for the weighted kNN classifier"""

    def test_nearest_neighbour_label(self):
        bank = one_hot_set([0, 1, 2, 3], [0, 1, 2, 3])
        scores = knn_predict(torch.eye(4)[[2]], bank.features, bank.labels, num_classes=4, k=1, temperature=0.1)
        assert scores.shape == (1, 4)
        assert int(scores.argmax()) == 2

    def test_perfect_separation(self):
        bank = one_hot_set([0, 0, 1, 1, 2, 2], [0, 0, 1, 1, 2, 2])
        queries = one_hot_set([0, 1, 2], [0, 1, 2])
        assert knn_top1(bank, queries, num_classes=3, k=2) == 100.0

    def test_votes_weighted_by_similarity(self):
        features = torch.tensor([[1.0, 0.0], [0.6, 0.8], [0.6, 0.8]])
        scores = knn_predict(torch.tensor([[1.0, 0.0]]), features, torch.tensor([0, 1, 1]), 2, k=3, temperature=0.1)
        assert int(scores.argmax()) == 0

    def test_unlabeled_bank_rows_ignored(self):
        bank = one_hot_set([0, 1, 2], [0, UNLABELED, 2])
        with pytest.raises(EvaluationError, match="2 labeled"):
            knn_top1(bank, one_hot_set([0], [0]), num_classes=3, k=3)

    def test_k_larger_than_bank(self):
        with pytest.raises(EvaluationError, match="k=10"):
            knn_top1(one_hot_set([0, 1], [0, 1]), one_hot_set([0], [0]), num_classes=2, k=10)

    def test_checkpoint_knn(self, checkpoint, tiny_cifar):
        top1 = knn_eval(checkpoint, tiny_cifar, k=5, batch_size=8)
        assert 0.0 <= top1 <= 100.0
        assert top1 * 20 / 100 == pytest.approx(round(top1 * 20 / 100))

    def test_checkpoint_from_other_dataset(self, checkpoint, tmp_path):
        with pytest.raises(EvaluationError, match="cifar10"):
            knn_eval(checkpoint, DatasetSpec(name="cifar100", root_path=tmp_path), k=5)


class TestScoreClassifier:
    """Tests for accuracy computation"""

    def test_top1_top5_and_per_class(self):
        test = one_hot_set([0, 1, 1, 2], [0, 1, 2, 0], dim=3)
        top1, top5, per_class = score_classifier(nn.Identity(), test, num_classes=3)
        assert top1 == 50.0
        assert top5 == 100.0
        assert per_class == [50.0, 100.0, 0.0]

    def test_empty_test_set(self):
        empty = torch.zeros(0, dtype=torch.long)
        with pytest.raises(EvaluationError):
            score_classifier(nn.Identity(), FeatureSet(torch.zeros(0, 3), empty, empty), num_classes=3)

    def test_parameter_hash_tracks_changes(self):
        layer = nn.Linear(2, 2)
        before = parameter_hash(layer)
        assert parameter_hash(layer) == before
        with torch.no_grad():
            layer.bias.add_(1.0)
        assert parameter_hash(layer) != before


class TestLinearEval:
    """Tests for the frozen-backbone linear classifier"""

    def test_report_written(self, checkpoint, tiny_cifar, linear_config, tmp_path):
        report = linear_eval(checkpoint, tiny_cifar, linear_config, out_dir=tmp_path / "eval")

        assert 0.0 <= report.top1 <= report.top5 <= 100.0
        assert report.num_test == 20
        assert len(report.per_class_accuracy) == 10
        assert report.dataset == "cifar10"
        assert read_report(tmp_path / "eval" / "linear_eval.json") == report
        assert (tmp_path / "eval" / "linear_eval.jsonl").read_text().count("linear_epoch") == 2

    def test_augmented_linear_eval(self, checkpoint, tiny_cifar, tmp_path):
        config = LinearEvalConfig(epochs=2, milestones=[1], batch_size=8, augment=True)
        report = linear_eval(checkpoint, tiny_cifar, config)
        assert 0.0 <= report.top1 <= 100.0

    def test_seeded_linear_eval_is_reproducible(self, checkpoint, tiny_cifar, linear_config):
        first = linear_eval(checkpoint, tiny_cifar, linear_config)
        second = linear_eval(checkpoint, tiny_cifar, linear_config)
        assert first.per_class_accuracy == second.per_class_accuracy

    def test_missing_checkpoint(self, tiny_cifar, linear_config, tmp_path):
        with pytest.raises(CheckpointError, match="missing.pt"):
            linear_eval(tmp_path / "missing.pt", tiny_cifar, linear_config)

    def test_dataset_mismatch(self, checkpoint, linear_config, tmp_path):
        with pytest.raises(EvaluationError, match="labels do not match"):
            linear_eval(checkpoint, DatasetSpec(name="cifar100", root_path=tmp_path), linear_config)

    def test_unlabeled_train_split_refused(self, checkpoint, tmp_path, linear_config):
        root = tmp_path / "unlabeled"
        pack_synthetic(root, "cifar10", "test", 10, seed=1)
        spec = pack_synthetic(root, "cifar10", "train", 16, labeled=False)
        with pytest.raises(EvaluationError, match="fully labeled"):
            linear_eval(checkpoint, spec, linear_config)


class TestExport:
    """Tests for the embedding file format and export"""

    def test_file_layout(self, tmp_path):
        path = write_embeddings(
            tmp_path / "e.bin", np.array([3, 4]), np.array([1, -1]), np.ones((2, 5), dtype=np.float32)
        )
        assert path.stat().st_size == EMB_HEADER.size + 2 * (4 + 4 + 5 * 4)
        ids, labels, vectors = read_embeddings(path)
        assert ids.tolist() == [3, 4]
        assert labels.tolist() == [1, -1]
        assert vectors.shape == (2, 5)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(EMB_HEADER.pack(b"NOTEMB\x00\x00", 1, 0, 4))
        with pytest.raises(ExportError, match="not an embedding file"):
            read_embeddings(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "short.bin"
        path.write_bytes(EMB_HEADER.pack(b"RSSLEMB\x00", 1, 5, 4))
        with pytest.raises(ExportError, match="expected 5 rows"):
            read_embeddings(path)

    @pytest.mark.parametrize("features,dim", [("embedding", 16), ("backbone", 512)])
    def test_export_split(self, checkpoint, tiny_cifar, tmp_path, features, dim):
        out = export_embeddings(checkpoint, tiny_cifar.with_split("test"), tmp_path / "emb.bin", features, batch_size=8)
        ids, labels, vectors = read_embeddings(out)

        assert ids.tolist() == list(range(20))
        assert labels.tolist() == [i % 10 for i in range(20)]
        assert vectors.shape == (20, dim)
        assert np.isfinite(vectors).all()
