import numpy as np
import pytest

from fclm.fg_align import ForegroundTokenSet
from fclm.numerics import cosine_similarity
from fclm.toy_harness import (
    ToyEncoder,
    TrainConfig,
    TrainingDiverged,
    cluster_alignment_stat,
    encode_patches,
    make_blob_dataset,
    prompt_embed,
    run_training,
)


def test_encode_shapes(rng):
    enc = ToyEncoder.init(16, 8, rng)
    assert encode_patches(rng.integers(0, 256, (16, 16, 3)), enc).num_tokens == 1
    g = encode_patches(rng.integers(0, 256, (32, 32, 3)), enc)
    assert g.shape == (2, 2, 8)
    with pytest.raises(ValueError):
        encode_patches(np.zeros((20, 16, 3)), enc)


def test_zero_image_zero_token(rng):
    enc = ToyEncoder.init(4, 5, rng)
    # pixel value 127.5 maps to 0 after centering
    g = encode_patches(np.full((8, 8, 3), 127.5), enc)
    np.testing.assert_allclose(g.tokens, 0.0, atol=1e-12)


def test_prompt_embed():
    np.testing.assert_array_equal(prompt_embed(None, 6).vector, np.zeros(6))
    np.testing.assert_array_equal(prompt_embed(("none",), 6).vector, np.zeros(6))
    a, b = prompt_embed(("point", 0.1, 0.2), 16), prompt_embed(("point", 0.1, 0.2), 16)
    np.testing.assert_array_equal(a.vector, b.vector)
    far = prompt_embed(("point", 0.7, 0.6), 16)
    assert cosine_similarity(a.vector, far.vector) < 0.99
    assert prompt_embed(("box", 0.1, 0.1, 0.5, 0.6), 16).kind == "box"
    with pytest.raises(ValueError):
        prompt_embed(("point", 1.5, 0.2), 16)
    with pytest.raises(ValueError):
        prompt_embed(("circle", 0.5), 16)


def test_cluster_stat(rng):
    a = rng.normal(size=(200, 2))
    assert cluster_alignment_stat(ForegroundTokenSet(a, np.arange(200)), ForegroundTokenSet(a, np.arange(200))) == 0.0
    b = rng.normal(size=(200, 2)) + np.array([10.0, 0.0])
    assert cluster_alignment_stat(a, b) >= 5
    with pytest.raises(ValueError):
        cluster_alignment_stat(a[:1], b[:1])


def test_blob_dataset():
    ds = make_blob_dataset(8, 16, 0)
    assert len(ds) == 8
    s = ds[0]
    assert s.pair.image_a.shape == (16, 16, 3)
    fg = s.mask > 0.5
    np.testing.assert_array_equal(s.pair.image_a[fg], s.pair.image_b[fg])
    assert set(np.unique(s.depth.values)) == {0.125, 1.0}


def test_zero_steps():
    log, model = run_training(make_blob_dataset(), TrainConfig(steps=0))
    assert log.records == [] and log.final is None


def test_determinism():
    ds = make_blob_dataset()
    cfg = TrainConfig(steps=5, seed=3)
    assert run_training(ds, cfg)[0].to_jsonl() == run_training(ds, cfg)[0].to_jsonl()


def test_divergence_reports_step():
    with pytest.raises(TrainingDiverged, match="step"):
        run_training(make_blob_dataset(), TrainConfig(steps=50, lr=1e4))


def test_record_fields():
    log, _ = run_training(make_blob_dataset(), TrainConfig(steps=2, task="matting"))
    assert list(log.records[0]) == ["step", "l_kd", "l_adv", "l_ot", "l_head", "total", "disc_acc", "align_stat"]


def test_alignment_improves_over_training():
    log, _ = run_training(make_blob_dataset(), TrainConfig())
    first, last = log.records[0], log.records[-1]
    assert last["total"] <= 0.5 * first["total"]
    assert log.final["align_stat"] < first["align_stat"]
    assert log.final["disc_acc"] <= 0.6
