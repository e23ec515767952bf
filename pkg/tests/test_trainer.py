import json

import numpy as np
import pytest

import deepkernel.trainer as trainer_mod
from deepkernel.autodiff import Tensor
from deepkernel.phantom import load_manifest
from deepkernel.trainer import (
    ConfigSchemaError,
    ExperimentConfig,
    MissingArtifactError,
    Model,
    clone_config,
    cross_validation_split,
    evaluate,
    evaluate_model,
    load_checkpoint,
    rows_to_csv,
    summarise,
    train,
)


def small_config(**overrides):
    raw = {
        "network": {"widths": [4, 8, 8, 8], "patch_top": 4},
        "optimiser": {"base_lr": 1e-3},
        "training": {"batch_size": 4, "epochs": 2, "n_folds": 3, "fold": 0, "seed": 0},
    }
    cfg = ExperimentConfig.from_dict(raw)
    return clone_config(cfg, **overrides) if overrides else cfg


def checkpoint_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- configuration --------------------------------------------------------------------
def test_schema_errors_list_every_bad_key():
    with pytest.raises(ConfigSchemaError) as exc:
        ExperimentConfig.from_dict({"network": {"widthz": [1]}, "training": {"epochs": "ten"}, "extra": 1})
    text = " ".join(exc.value.problems)
    assert "network.widthz" in text and "training.epochs" in text and "extra" in text
    assert len(exc.value.problems) == 3


def test_default_config_round_trip(tmp_path):
    cfg = ExperimentConfig()
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(path).to_dict() == cfg.to_dict()
    changed = clone_config(cfg, **{"network.patch_top": 8, "constraints.gamma_max": 0.01})
    assert changed.network.patch_top == 8 and changed.constraints.gamma_max == 0.01
    assert cfg.constraints.gamma_max == 0.0


def test_cross_validation_split():
    folds = cross_validation_split(10, 5, 0)
    tests = sorted(i for f in folds for i in f["test"])
    assert tests == list(range(10))
    for f in folds:
        assert len(f["test"]) == 2 and len(f["val"]) == 2
        assert not set(f["train"]) & set(f["test"]) and not set(f["val"]) & set(f["test"])
        assert sorted(f["train"] + f["val"] + f["test"]) == list(range(10))
    assert folds == cross_validation_split(10, 5, 0)
    assert folds != cross_validation_split(10, 5, 1)
    with pytest.raises(ValueError):
        cross_validation_split(3, 5, 0)


# -- training -----------------------------------------------------------------------------
def test_loss_decomposition(tiny_dataset):
    cfg = small_config(**{"constraints.gamma_max": 0.01, "constraints.gamma_min": 0.001, "training.epochs": 3})
    run, _ = train(cfg, tiny_dataset)
    assert run.status == "complete" and len(run.batches) == 3
    for ld, lmax, lmin, total in run.batches:
        assert lmax > 0 and lmin > 0
        assert total == pytest.approx(ld + 0.01 * lmax + 0.001 * lmin, abs=1e-6)


def test_data_loss_decreases(tiny_dataset):
    cfg = small_config(**{"network.patch_top": 1, "training.epochs": 100, "training.max_batches": 50})
    run, _ = train(cfg, tiny_dataset)
    ld = np.array([b[0] for b in run.batches])
    assert len(ld) == 50
    assert ld[-5:].mean() < ld[:5].mean()


def test_training_is_deterministic(tiny_dataset, tmp_path):
    cfg = small_config(**{"constraints.gamma_max": 0.01, "constraints.gamma_min": 0.001})
    train(cfg, tiny_dataset, tmp_path / "a")
    train(cfg, tiny_dataset, tmp_path / "b")
    a, b = checkpoint_bytes(tmp_path / "a"), checkpoint_bytes(tmp_path / "b")
    assert a.keys() == b.keys()
    assert all(a[k] == b[k] for k in a)
    train(clone_config(cfg, **{"training.seed": 1}), tiny_dataset, tmp_path / "c")
    c = checkpoint_bytes(tmp_path / "c")
    assert any(c[k] != a[k] for k in a if k.startswith("net/"))


def test_zero_weights_match_build_without_constraints(tiny_dataset, tmp_path, monkeypatch):
    cfg = small_config()
    train(cfg, tiny_dataset, tmp_path / "with")

    def absent(*args, **kwargs):
        raise AssertionError("constraint machinery constructed")

    monkeypatch.setattr(trainer_mod, "InfoConstraints", absent)
    monkeypatch.setattr(trainer_mod, "discriminator_step", absent)
    train(cfg, tiny_dataset, tmp_path / "without")
    a, b = checkpoint_bytes(tmp_path / "with"), checkpoint_bytes(tmp_path / "without")
    assert a == b


def test_constraints_reject_single_sample_batches(tiny_dataset):
    cfg = small_config(**{"constraints.gamma_max": 0.01, "training.batch_size": 1})
    with pytest.raises(ValueError, match="batch size"):
        train(cfg, tiny_dataset)


def test_missing_training_drf(tiny_dataset):
    with pytest.raises(MissingArtifactError):
        train(small_config(**{"training.train_drf": 100}), tiny_dataset)


# -- checkpoints and evaluation -------------------------------------------------------------
@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    run, model = train(small_config(), tiny_dataset, out)
    return run, model, out


def test_checkpoint_round_trip(trained, tiny_dataset):
    run, model, out = trained
    restored, index = load_checkpoint(out)
    manifest = load_manifest(tiny_dataset)
    cases = run.fold["test"]
    a = evaluate_model(model, tiny_dataset, manifest, cases, [20, 1000], 20)
    b = evaluate_model(restored, tiny_dataset, manifest, cases, [20, 1000], 20)
    assert rows_to_csv(a) == rows_to_csv(b)
    assert index["pet_scale"] == run.pet_scale
    with pytest.raises(MissingArtifactError):
        load_checkpoint(out / "nowhere")


def test_eval_at_training_drf_reproduces_validation(trained, tiny_dataset):
    run, _, out = trained
    rows = evaluate(out, tiny_dataset, [20], cases=run.fold["val"])
    assert np.mean([r["psnr"] for r in rows]) == pytest.approx(run.validation["psnr"], abs=1e-6)
    assert np.mean([r["ssim"] for r in rows]) == pytest.approx(run.validation["ssim"], abs=1e-6)


def test_evaluation_rows(trained, tiny_dataset, tmp_path):
    run, _, out = trained
    rows = evaluate(out, tiny_dataset, [20, 100, 1000], out_csv=tmp_path / "m.csv")
    assert len(rows) == len(run.fold["test"]) * 3
    skipped = [r for r in rows if r["drf"] == 100]
    assert all(r["status"] == "skipped" and "psnr" not in r for r in skipped)
    ok = [r for r in rows if r["status"] == "ok"]
    assert all(r["in_distribution"] == (r["drf"] == 20) for r in ok)
    assert all(np.isfinite(r["psnr"]) and -1 <= r["ssim"] <= 1 for r in ok)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert len(lines) == len(rows) + 1 and lines[0].startswith("case,drf,method")
    assert set(summarise(rows)) == {20, 1000}


class IdentityNet:
    """Returns the centre slice of the PET input."""

    dtype = np.float64

    def eval(self):
        return self

    def __call__(self, pet, t1, t2):
        return Tensor(pet[..., pet.shape[-1] // 2 :][..., :1]), {}


def test_identity_model_reproduces_input_metrics(tiny_dataset):
    manifest = load_manifest(tiny_dataset)
    model = Model(IdentityNet(), 1.0, small_config())
    a = evaluate_model(model, tiny_dataset, manifest, [0, 1], [20, 1000], 20)
    b = evaluate_model(None, tiny_dataset, manifest, [0, 1], [20, 1000], 20, method="model")
    assert rows_to_csv(a) == rows_to_csv(b)
