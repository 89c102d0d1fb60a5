import csv

import numpy as np
import pytest

import smkd

MICRO = """\
dataset = synthetic
synthetic_classes = 12
synthetic_per_class = 10
image_size = 16
patch_size = 4
embed_dim = 16
depth = 2
num_heads = 2
head_hidden_dim = 32
head_bottleneck_dim = 16
head_out_dim = 32
warmup_epochs = 1
batch_size = 16
queries = 5
episodes = 20
epochs = 2
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "micro.cfg"
    path.write_text(MICRO)
    return path


def test_pretrain_train_eval(config, tmp_path):
    pre = smkd.pretrain(config, out_dir=tmp_path / "pre")
    assert len(pre["log"]["epoch"]) == 2
    info = smkd.checkpoint_info(pre["checkpoint"])
    assert info["stage"] == "ssl_pretrain"
    assert info["epoch"] == 2

    tr = smkd.train(config, init=pre["checkpoint"], out_dir=tmp_path / "train", loss="cls+patch")
    assert "loss_patch" in tr["log"]
    assert smkd.checkpoint_info(tr["checkpoint"])["stage"] == "supervised"

    ev = smkd.evaluate(tr["checkpoint"], out_dir=tmp_path / "eval")
    assert ev["rows"]
    for row in ev["rows"]:
        acc = np.array(row["accuracies"])
        assert len(acc) == 20
        assert row["mean_acc"] == pytest.approx(acc.mean())
        assert row["ci95"] == pytest.approx(1.96 * acc.std() / np.sqrt(len(acc)))
    with open(ev["report"]) as f:
        assert len(list(csv.DictReader(f))) == len(ev["rows"])


def test_errors_map_to_exceptions(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text(MICRO + "no_such_key = 1\n")
    with pytest.raises(smkd.ConfigError, match="no_such_key"):
        smkd.pretrain(bad, out_dir=tmp_path / "out")
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    with pytest.raises(smkd.FormatError):
        smkd.checkpoint_info(junk)
    assert issubclass(smkd.FormatError, smkd.Error)


def test_match_patches_against_numpy():
    rng = np.random.default_rng(0)
    t = rng.standard_normal((9, 5)).astype(np.float32)
    s = rng.standard_normal((11, 5)).astype(np.float32)
    idx, sims = smkd.match_patches(t, s)
    tn = t / np.linalg.norm(t, axis=1, keepdims=True)
    sn = s / np.linalg.norm(s, axis=1, keepdims=True)
    cos = tn.astype(np.float64) @ sn.astype(np.float64).T
    assert list(idx) == list(cos.argmax(axis=1))
    np.testing.assert_allclose(sims, cos.max(axis=1), rtol=1e-5)


def test_block_mask_count():
    for ratio in (0.1, 0.3, 0.5):
        m = smkd.block_mask(4, 4, ratio, seed=3)
        assert m.shape == (4, 4)
        assert m.sum() == int(np.ceil(ratio * 16))
