import numpy as np
import pytest
import torch

from adasam.evaluation import DscReport, dsc, evaluate_split, predict_mask, restrict_to_box
from adasam.losses import dice_loss
from adasam.prompting import BBoxPrompt


def test_dsc_identical_masks():
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[2:5, 2:5] = 1
    assert dsc(mask, mask, 1) == 1.0


def test_dsc_disjoint_masks():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros((8, 8), dtype=np.uint8)
    a[0, 0] = 1
    b[7, 7] = 1
    assert dsc(a, b, 1) == 0.0


def test_dsc_known_overlap():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros((8, 8), dtype=np.uint8)
    a[0, 0] = a[0, 1] = 1
    b[0, 1] = b[0, 2] = 1
    assert dsc(a, b, 1) == pytest.approx(0.5)


def test_dsc_empty_conventions():
    empty = np.zeros((4, 4), dtype=np.uint8)
    one = empty.copy()
    one[0, 0] = 2
    assert dsc(empty, empty, 2) == 1.0
    assert dsc(one, empty, 2) == 0.0
    assert dsc(empty, one, 2) == 0.0


def test_dsc_symmetry():
    rng = np.random.default_rng(0)
    for _ in range(25):
        a = rng.integers(0, 3, size=(10, 10)).astype(np.uint8)
        b = rng.integers(0, 3, size=(10, 10)).astype(np.uint8)
        for label in (1, 2):
            assert dsc(a, b, label) == dsc(b, a, label)


def test_dsc_shape_mismatch():
    with pytest.raises(ValueError):
        dsc(np.zeros((4, 4)), np.zeros((5, 5)), 1)


def test_hard_dice_loss_complements_dsc():
    rng = np.random.default_rng(1)
    for _ in range(25):
        gt = rng.integers(0, 2, size=(6, 6))
        pred_labels = rng.integers(0, 2, size=(6, 6))
        if gt.sum() == 0 or pred_labels.sum() == 0:
            continue
        pred = np.zeros((2, 6, 6))
        for label in range(2):
            pred[label][pred_labels == label] = 1.0
        loss = float(dice_loss(torch.tensor(pred), torch.tensor(gt), eps=1e-12))
        assert 1.0 - loss == pytest.approx(dsc(pred_labels, gt, 1), abs=1e-5)


def test_restrict_to_box():
    mask = np.ones((8, 8), dtype=np.uint8)
    out = restrict_to_box(mask, BBoxPrompt(2, 3, 5, 6))
    assert out.sum() == 9
    assert out[3, 2] == 1 and out[0, 0] == 0


# ---------------------------------------------------------------------------
# split evaluation with a perfect-oracle stub
# ---------------------------------------------------------------------------


class OracleStub(torch.nn.Module):
    """Fakes the model surface: decodes every slice into its ground truth."""

    def __init__(self, manifest):
        super().__init__()
        from adasam.model import ModelConfig
        from adasam.phantom import load_mask

        self.config = ModelConfig(
            image_size=manifest.config.image_size, patch_size=8,
            embed_dim=8, heads=2, depth=1, decoder_dim=8, decoder_heads=2, lora_rank=0,
        )
        self._masks = {
            record.id: load_mask(manifest.mask_path(record)) for record in manifest.records
        }
        self._images_to_id = {}
        from adasam.phantom import load_image

        for record in manifest.records:
            key = load_image(manifest.image_path(record)).tobytes()
            self._images_to_id[key] = record.id

    def encode_image(self, image):
        image = np.asarray(image, dtype=np.float32)
        self._current = self._images_to_id[image.tobytes()]
        return torch.zeros(1, 8, 4, 4)

    def classify(self, features):
        probs = torch.zeros(1, 4)
        probs[0, 0] = 1.0  # unused in full_box mode beyond bookkeeping
        return probs

    def encode_prompt(self, box):
        return torch.zeros(1, 2, 8)

    def decode_mask(self, features, prompt):
        mask = torch.from_numpy(self._masks[self._current].astype(np.int64))
        logits = torch.full((1, 3, *mask.shape), -10.0)
        for label in range(3):
            logits[0, label][mask == label] = 10.0
        return logits


def test_oracle_stub_scores_one(tiny_dataset):
    stub = OracleStub(tiny_dataset)
    report = evaluate_split(stub, tiny_dataset, "test", prompt_mode="full_box")
    assert report.overall["mean"] == pytest.approx(1.0)
    for stats in report.per_label.values():
        if stats["n"]:
            assert stats["mean"] == pytest.approx(1.0)


def test_report_roundtrip(tiny_dataset, tmp_path):
    stub = OracleStub(tiny_dataset)
    report = evaluate_split(stub, tiny_dataset, "test", prompt_mode="full_box")
    path = tmp_path / "report.json"
    report.save(path)
    loaded = DscReport.load(path)
    assert loaded.to_dict() == report.to_dict()


def test_trained_model_beats_untrained(phantom_dataset, smoke_model):
    from adasam.model import AdaSamModel
    from conftest import small_model_config

    untrained = AdaSamModel(small_model_config(seed=1))
    trained_report = evaluate_split(smoke_model, phantom_dataset, "test")
    untrained_report = evaluate_split(untrained, phantom_dataset, "test")
    assert trained_report.overall["mean"] > untrained_report.overall["mean"]


def test_oracle_box_beats_full_box(phantom_dataset, smoke_model):
    """Prompt informativeness: decoding with the ground-truth box is at least
    as good on average as decoding with the whole image as the prompt."""
    from adasam.phantom import load_image, load_mask
    from adasam.prompting import mask_to_bbox

    oracle_scores, full_scores = [], []
    for record in phantom_dataset.split_records("test"):
        if record.slice_class == 0:
            continue
        image = load_image(phantom_dataset.image_path(record))
        gt = load_mask(phantom_dataset.mask_path(record))
        with torch.no_grad():
            features = smoke_model.encode_image(image)
            for scores, box in (
                (oracle_scores, mask_to_bbox(gt, pad=4)),
                (full_scores, BBoxPrompt.full_image(64, 64)),
            ):
                logits = smoke_model.decode_mask(features, smoke_model.encode_prompt(box))
                pred = restrict_to_box(
                    logits[0].argmax(dim=0).numpy().astype(np.uint8), box
                )
                for label in (1, 2):
                    if (gt == label).any() or (pred == label).any():
                        scores.append(dsc(pred, gt, label))
    assert np.mean(oracle_scores) >= np.mean(full_scores)


def test_predict_mask_modes(phantom_dataset, smoke_model):
    from adasam.phantom import load_image

    record = phantom_dataset.split_records("test")[0]
    image = load_image(phantom_dataset.image_path(record))
    mask, box, predicted = predict_mask(smoke_model, image, prompt_mode="auto")
    assert mask.shape == (64, 64)
    if box is not None:
        outside = mask.copy()
        outside[box.y_min:box.y_max, box.x_min:box.x_max] = 0
        assert outside.sum() == 0  # nothing predicted outside the prompt box
    with pytest.raises(ValueError):
        predict_mask(smoke_model, image, prompt_mode="bogus")
