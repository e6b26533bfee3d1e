import json
import math
from pathlib import Path

import numpy as np
import pytest

import repmech
from repmech import exporter


def small_config(vocab):
    cfg = repmech.toy_config(vocab)
    cfg.update(n_layers=2, d_model=16, n_heads=2, d_head=8, d_mlp=32)
    return cfg


@pytest.fixture(scope="module")
def tok():
    return repmech.train_bpe("the quick brown fox jumps over the lazy dog", 20)


@pytest.fixture(scope="module")
def model(tok):
    return repmech.make_toy_model(small_config(tok.vocab_size), 3)


def test_tokenizer_round_trip(tok):
    for text in ["the lazy fox", "unseen words: éè!", ""]:
        assert tok.decode(tok.encode(text)) == text.encode()


def test_logits_shape_and_determinism(model, tok):
    ids = tok.encode("the quick fox")
    a = repmech.forward_logits(model, ids)
    b = repmech.forward_logits(model, ids)
    assert a.shape == (len(ids), tok.vocab_size)
    assert np.array_equal(a, b)


def test_zero_alpha_matches_base(model, tok):
    ids = tok.encode("over the dog")
    direction = np.ones(16, dtype=np.float32).tolist()
    base = repmech.forward_logits(model, ids)
    assert np.array_equal(repmech.steered_logits(model, ids, direction, 1, 0.0), base)
    assert not np.array_equal(repmech.steered_logits(model, ids, direction, 0, 8.0), base)


def test_kl_recovery_synthetic():
    # 1 - KL(c||p)/KL(c||k) written out with natural logs
    c, k, p = [0.8, 0.2], [0.5, 0.5], [0.7, 0.3]
    kl = lambda a, b: sum(x * math.log(x / y) for x, y in zip(a, b))
    want = 1 - kl(c, p) / kl(c, k)
    assert abs(repmech.kl_recovery(c, k, p) - want) < 1e-6
    assert abs(want - 0.8665) < 1e-3
    with pytest.raises(repmech.RepmechError):
        repmech.kl_recovery(c, c, p)


def test_archive_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b.c": np.arange(5, dtype=np.float32)}
    repmech.save_archive(tensors, tmp_path / "t.rta")
    back = repmech.load_archive(tmp_path / "t.rta")
    assert set(back) == set(tensors)
    for k, v in tensors.items():
        assert np.array_equal(back[k], v)


def test_errors_are_translated(tmp_path):
    with pytest.raises(repmech.RepmechError):
        repmech.load_archive(tmp_path / "missing.rta")


def test_export_interface_parity(tmp_path, model, tok):
    repmech.save_model(model, tmp_path / "model.rta", tmp_path / "config.json")
    tok.save(tmp_path / "vocab.json", tmp_path / "merges.txt")
    cfg = model.config
    manifest = exporter.ExportManifest(
        source="toy",
        weight_map=[exporter.WeightMapping(name, "src." + name) for name in repmech.required_weights(cfg)],
        golden_prompts=[exporter.GoldenPrompt("p0", "the quick dog", tok.encode("the quick dog"))],
    )
    assert manifest.missing_weights(cfg) == []
    ids = tok.encode("the quick dog")
    logits = repmech.forward_logits(model, ids)[:8]
    repmech.save_archive({repmech.golden_key("p0"): logits}, tmp_path / "golden.rta")
    manifest.write(tmp_path)
    report = exporter.verify(tmp_path)
    assert report["passed"]
    assert report["prompts"][0]["max_abs_diff"] == 0.0

    with pytest.raises(NotImplementedError):
        exporter.export("some/checkpoint", tmp_path)
    assert exporter.main(["--source", "x", "--dest", str(tmp_path)]) == 1


def test_cli_in_process(tmp_path):
    assert repmech.cli(["selftest", "--out", str(tmp_path)]) == 0
    checks = json.loads(Path(tmp_path, "selftest.json").read_text())
    assert all(c["passed"] for c in checks)
    assert repmech.cli(["no-such-command"]) == 1
