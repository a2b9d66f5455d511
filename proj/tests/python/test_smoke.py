import math

import numpy as np
import pytest

import attncalib as ac

TINY = {
    "model": {"grid_h": 3, "grid_w": 3, "embed_dim": 16, "heads": 2, "layers": 2, "mlp_hidden": 32},
    "synth": {"corpus": {"items": 80, "max_side": 1, "max_objects": 2}, "validation_scenes": 30},
    "pretrain": {"epochs": 1, "batch_size": 8},
    "dac": {"train": {"max_steps": 2, "batch_size": 2, "grad_accum": 1}},
    "eval": {"pope_scenes": 4, "pope_per_scene": 1, "mme_scenes": 2, "caption_scenes": 2, "quadrant_scenes": 4},
}


@pytest.fixture(scope="module")
def cfg():
    return ac.resolve_config(TINY)


@pytest.fixture(scope="module")
def model(cfg):
    return ac.pretrain(cfg)


def test_config_defaults_and_overrides():
    d = ac.default_config()
    assert d["model"]["layers"] == 4
    r = ac.resolve_config({}, ["dac.train.lambda=0.1"])
    assert r["dac"]["train"]["lambda"] == 0.1
    with pytest.raises(ValueError, match="model.nope"):
        ac.resolve_config({"model": {"nope": 1}})
    with pytest.raises(ac.ConfigError):
        ac.resolve_config({}, ["dac.train.tau=0"])


def test_metric_functions():
    e = math.e
    z = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=float)
    assert ac.nt_xent(z, 1.0) == pytest.approx(-math.log(e / (e + 2)), abs=1e-9)
    assert ac.compute_w(np.array([[0.1, 0.4, 0.25, 0.25]]))[0] == pytest.approx([2.5, 0.625, 1, 1])
    assert ac.apply_uac_row([0.2, 0.2, 0.6], [2, 0.5]) == pytest.approx([4 / 11, 1 / 11, 6 / 11])
    assert ac.kl_from_uniform([1, 0, 0, 0]) == pytest.approx(math.log(4))
    m = ac.pope_metrics(2, 1, 2, 1)
    assert m["accuracy"] == pytest.approx(4 / 6)
    assert ac.mme_score([True, True, True, False])["score"] == 125.0
    assert ac.chair([["a", "cat", "and", "a", "dog"]], [["cat"]])["per_object_rate"] == 0.5


def test_model_forward_and_checkpoint(cfg, tmp_path):
    m = ac.new_model(cfg, 3)
    patches = ac.white_patches(cfg)
    assert patches.shape == (9, cfg["model"]["patch_dim"])
    logits = m.forward(patches, [1, 2])
    assert logits.shape == (11, cfg["model"]["vocab_size"])
    path = tmp_path / "m.ckpt"
    m.save(path)
    assert ac.Model.load(path).parameter_hash == m.parameter_hash
    with pytest.raises(OSError):
        ac.Model.load(tmp_path / "missing.ckpt")


def test_calibration_round(cfg, model):
    base = ac.white_probe(model, cfg)
    cal = ac.fit_uac(model, cfg)
    assert len(cal) > 0
    calibrated = ac.white_probe(model, cfg, calibration=cal)
    for layer in calibrated["layers"]:
        assert layer["kl"] < 1e-6
    assert len(base["layers"]) == len(calibrated["layers"])

    h = model.parameter_hash
    dac = ac.train_dac(model, cfg, layers=[0, 1])
    assert model.parameter_hash == h
    assert dac.layers == [0, 1]
    report = ac.evaluate(model, cfg, calibration=cal, dac=dac, captions=False)
    assert "pope" in report and "quadrants" in report
