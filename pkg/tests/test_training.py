import json

import numpy as np
import pytest
import torch

from adasam.model import AdaSamModel, load_checkpoint
from adasam.phantom import DatasetManifest
from adasam.training import (
    BEST_CHECKPOINT,
    TrainConfig,
    _load_split_tensors,
    fit,
    init_train_state,
    inverse_frequency_alpha,
    select_labeled,
    train_step,
)
from conftest import tiny_model_config


def _batch_from(data, rows):
    return {
        "ids": [data["ids"][i] for i in rows],
        "images": data["images"][rows],
        "masks": data["masks"][rows],
        "classes": data["classes"][rows],
    }


# ---------------------------------------------------------------------------
# labeled-slice selection
# ---------------------------------------------------------------------------


def test_select_labeled_zero_budget(tiny_dataset):
    assert select_labeled(tiny_dataset, 0, seed=0) == ()


def test_select_labeled_covers_classes(tiny_dataset):
    train = tiny_dataset.split_records("train")
    present = {r.slice_class for r in train}
    chosen = select_labeled(tiny_dataset, max(5, len(present)), seed=3)
    by_id = {r.id: r.slice_class for r in train}
    assert present <= {by_id[i] for i in chosen}
    assert len(chosen) == max(5, len(present))


def test_select_labeled_deterministic(tiny_dataset):
    a = select_labeled(tiny_dataset, 6, seed=42)
    b = select_labeled(tiny_dataset, 6, seed=42)
    c = select_labeled(tiny_dataset, 6, seed=43)
    assert a == b
    assert a != c  # overwhelmingly likely for this seed pair


def test_select_labeled_small_budget_prefers_rare(tiny_dataset):
    train = tiny_dataset.split_records("train")
    counts = {}
    for record in train:
        counts[record.slice_class] = counts.get(record.slice_class, 0) + 1
    by_id = {r.id: r.slice_class for r in train}
    chosen = select_labeled(tiny_dataset, 1, seed=0)
    assert len(chosen) == 1
    rarest = min(counts, key=lambda c: (counts[c], c))
    assert by_id[chosen[0]] == rarest


def test_select_labeled_budget_exceeds_train(tiny_dataset):
    with pytest.raises(ValueError):
        select_labeled(tiny_dataset, 10_000, seed=0)


def test_select_labeled_full_budget(tiny_dataset):
    train = tiny_dataset.split_records("train")
    chosen = select_labeled(tiny_dataset, len(train), seed=1)
    assert set(chosen) == {r.id for r in train}


def test_inverse_frequency_alpha(tiny_dataset):
    alpha = inverse_frequency_alpha(tiny_dataset, 4)
    assert len(alpha) == 4
    assert all(a > 0 for a in alpha)
    counts = np.zeros(4)
    for record in tiny_dataset.split_records("train"):
        counts[record.slice_class] += 1
    present = counts > 0
    values = np.array(alpha)[present]
    assert values.mean() == pytest.approx(1.0, abs=1e-9)
    # rarer class gets the larger weight
    order = np.argsort(counts[present])
    assert values[order[0]] >= values[order[-1]]


# ---------------------------------------------------------------------------
# train_step contracts
# ---------------------------------------------------------------------------


def test_budget_zero_step_trains_classifier_only(tiny_dataset):
    model = AdaSamModel(tiny_model_config())
    config = TrainConfig(label_budget=0, seed=0, epochs=1)
    state = init_train_state(model, tiny_dataset, config)
    data = _load_split_tensors(tiny_dataset, "train")
    state = train_step(model, _batch_from(data, list(range(8))), state, config)
    assert state.last["seg"] == 0.0
    decoder_grads = [p.grad for p in model.mask_decoder.parameters()]
    assert all(g is None or float(g.abs().max()) == 0.0 for g in decoder_grads)
    prompt_grads = [p.grad for p in model.prompt_encoder.parameters()]
    assert all(g is None or float(g.abs().max()) == 0.0 for g in prompt_grads)


def test_unlabeled_batch_never_touches_decoder(tiny_dataset):
    model = AdaSamModel(tiny_model_config())
    config = TrainConfig(label_budget=4, seed=0, epochs=1)
    state = init_train_state(model, tiny_dataset, config)
    data = _load_split_tensors(tiny_dataset, "train")
    unlabeled_rows = [i for i, sid in enumerate(data["ids"]) if sid not in state.labeled_ids][:8]
    state = train_step(model, _batch_from(data, unlabeled_rows), state, config)
    decoder_grads = [p.grad for p in model.mask_decoder.parameters()]
    assert all(g is None or float(g.abs().max()) == 0.0 for g in decoder_grads)


def test_labeled_batch_produces_seg_gradient(tiny_dataset):
    model = AdaSamModel(tiny_model_config())
    config = TrainConfig(label_budget=8, seed=0, epochs=1)
    state = init_train_state(model, tiny_dataset, config)
    data = _load_split_tensors(tiny_dataset, "train")
    labeled_rows = [i for i, sid in enumerate(data["ids"]) if sid in state.labeled_ids]
    # keep only labeled slices with foreground so a box must exist
    rows = [i for i in labeled_rows if int(data["classes"][i]) > 0][:4]
    state = train_step(model, _batch_from(data, rows), state, config)
    assert state.last["seg"] > 0.0
    grads = [p.grad for p in model.mask_decoder.parameters() if p.grad is not None]
    assert any(float(g.abs().max()) > 0 for g in grads)


def test_losses_fall_over_training(tiny_dataset):
    torch.manual_seed(0)
    model = AdaSamModel(tiny_model_config(seed=3))
    config = TrainConfig(label_budget=12, seed=0, epochs=1, seg_warmup_epochs=0)
    state = init_train_state(model, tiny_dataset, config)
    data = _load_split_tensors(tiny_dataset, "train")
    rng = np.random.default_rng(0)
    first = None
    for step in range(200):
        rows = [int(i) for i in rng.choice(len(data["ids"]), size=8, replace=False)]
        state = train_step(model, _batch_from(data, rows), state, config)
        if first is None:
            first = dict(state.running)
    assert state.running["cls"] < first["cls"]
    assert state.running["seg"] < first["seg"]
    assert state.running["total"] < first["total"]


def test_two_pass_mode_runs_two_updates(tiny_dataset):
    model = AdaSamModel(tiny_model_config())
    config = TrainConfig(label_budget=0, seed=0, epochs=1, two_pass=True)
    state = init_train_state(model, tiny_dataset, config)
    data = _load_split_tensors(tiny_dataset, "train")
    state = train_step(model, _batch_from(data, list(range(4))), state, config)
    assert state.step == 2


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def test_fit_one_epoch_report(tiny_dataset, tmp_path):
    model = AdaSamModel(tiny_model_config())
    config = TrainConfig(epochs=1, label_budget=4, seed=0)
    report = fit(model, tiny_dataset, config, tmp_path)
    assert len(report["epochs"]) == 1
    assert (tmp_path / "training_report.json").exists()
    assert (tmp_path / BEST_CHECKPOINT / "config.json").exists()
    assert sorted(report["selected_labeled"]) == report["selected_labeled"]
    assert len(report["selected_labeled"]) == 4


def test_fit_deterministic_across_runs(tiny_dataset, tmp_path):
    losses = []
    for run in range(2):
        model = AdaSamModel(tiny_model_config(seed=5))
        config = TrainConfig(epochs=2, label_budget=6, seed=9)
        report = fit(model, tiny_dataset, config, tmp_path / f"run{run}")
        losses.append([e["total_loss"] for e in report["epochs"]])
    assert losses[0] == losses[1]


def test_best_checkpoint_reproduces_val_dsc(tiny_dataset, tmp_path):
    from adasam.evaluation import evaluate_split

    model = AdaSamModel(tiny_model_config(seed=6))
    config = TrainConfig(epochs=2, label_budget=6, seed=1)
    report = fit(model, tiny_dataset, config, tmp_path)
    best = load_checkpoint(tmp_path / BEST_CHECKPOINT)
    val = evaluate_split(best, tiny_dataset, "val", tau=config.tau, pad=config.pad)
    assert val.overall["mean"] == pytest.approx(report["best_val_dsc"], abs=1e-6)


def test_fit_report_is_json_serializable(tiny_dataset, tmp_path):
    model = AdaSamModel(tiny_model_config())
    config = TrainConfig(epochs=1, label_budget=0, seed=0)
    fit(model, tiny_dataset, config, tmp_path)
    parsed = json.loads((tmp_path / "training_report.json").read_text())
    assert parsed["config"]["label_budget"] == 0
    assert parsed["epochs"][0]["seg_loss"] is None  # budget 0 has no seg term


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(label_budget=-1)
    with pytest.raises(ValueError):
        TrainConfig(tau=1.5)
