import json
import math

import numpy as np
import pytest

import covalign as ca


def test_pearson_self_and_anti():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(4, 6))
    corr, valid = ca.pearson_matrix(f, f)
    assert all(valid)
    np.testing.assert_allclose(np.diag(corr), 1.0, atol=1e-12)
    anti, _ = ca.pearson_matrix(f, -f)
    np.testing.assert_allclose(np.diag(anti), -1.0, atol=1e-12)
    np.testing.assert_allclose(corr, np.corrcoef(f)[:4, :4], atol=1e-12)


def test_pool_matches_einsum():
    rng = np.random.default_rng(1)
    feats = rng.uniform(size=(5, 3, 4))
    probs = ca.softmax_channel(rng.normal(size=(3, 3, 4)))
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-12)
    f, mass, valid = ca.pool(feats, probs)
    np.testing.assert_allclose(f, np.einsum("ik,ck->ic", probs.reshape(3, -1), feats.reshape(5, -1)) / 12, atol=1e-12)
    assert math.isclose(sum(mass), 12.0, abs_tol=1e-9)
    assert all(valid)


def test_losses():
    assert ca.mse_align_loss(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == pytest.approx(5.0)
    ortho = np.array([[1, -1, 0, 0], [0, 0, 1, -1], [1, 1, -1, -1]], dtype=float)
    assert ca.cr_loss(ortho, ortho) == pytest.approx(0.0, abs=1e-12)
    same = np.tile([1.0, 2.0, 3.0], (3, 1))
    assert ca.cr_loss(same, same) == pytest.approx(-math.log(1e-6) * 6 / 9)
    assert ca.triplet_align_loss(ortho, ortho) >= 0.0
    probs = np.full((2, 1, 2), 0.5)
    assert ca.cross_entropy(probs, np.array([[0, 1]], dtype=np.uint8)) == pytest.approx(2 * math.log(2))


def test_iou():
    per_class, miou = ca.iou(np.array([0, 0, 1, 1], np.uint8), np.array([0, 1, 1, 1], np.uint8), 3)
    assert per_class[0] == pytest.approx(0.5)
    assert per_class[1] == pytest.approx(2 / 3)
    assert per_class[2] is None
    assert miou == pytest.approx((0.5 + 2 / 3) / 2)


def test_contract_errors():
    with pytest.raises(ValueError):
        ca.pearson_matrix(np.ones((2, 1)), np.ones((2, 1)))


def test_generate_is_deterministic():
    src, tgt = ca.default_benchmark()
    assert len(src["class_priors"]) == 5
    a = ca.generate(None, 2, 7)
    b = ca.generate(src, 2, 7)
    assert a[1][0].shape == (3, 64, 64)
    np.testing.assert_array_equal(a[1][0], b[1][0])
    np.testing.assert_array_equal(a[1][1], b[1][1])
    t = ca.generate(None, 1, 7, target=True)
    assert not np.array_equal(t[0][0], a[0][0])


def test_model_predict_uniform():
    model = ca.SegModel(widths=[4, 4], num_classes=5, downsample_factor=2, seed=0)
    image = ca.generate(None, 1, 0)[0][0]
    labels, conf = model.predict(image)
    assert labels.shape == (64, 64)
    assert (labels == 0).all()
    np.testing.assert_allclose(conf, 0.2, atol=1e-12)


def test_gen_run_eval_diag(tmp_path):
    spec, tspec = ca.default_benchmark()
    for s in (spec, tspec):
        s["image_size"] = 16
        s["scale_range"] = [[1, 1]] + [[3, 8]] * 4
    cfg = {
        "model": {"widths": [4, 6], "downsample_factor": 2},
        "stage": {"max_stages": 1, "iters_per_stage": 2, "pretrain_iters": 2, "batch_size": 2},
        "data": {"source_spec": spec, "target_spec": tspec, "train_count": 4, "eval_count": 2},
        "diag_batch": 2,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert len(ca.config_hash(path)) == 16
    ca.gen(tmp_path / "data", config=path)
    with pytest.raises(ValueError):
        ca.gen(tmp_path / "data", config=path)
    src_miou, tgt_miou = ca.run(tmp_path / "data", tmp_path / "run", config=path, method="dca")
    assert 0.0 <= src_miou <= 1.0 and 0.0 <= tgt_miou <= 1.0
    assert (tmp_path / "run" / "checkpoints" / "final.ckpt").exists()
    table = ca.evaluate([tmp_path / "run"], tmp_path / "data", tmp_path / "eval.csv")
    assert "mIoU" in table
    ca.diag(tmp_path / "run" / "checkpoints" / "final.ckpt", tmp_path / "data", tmp_path / "diag", config=path)
    assert (tmp_path / "diag" / "corr_source_target.csv").exists()
    with pytest.raises(OSError):
        ca.SegModel.load(tmp_path / "missing.ckpt")
