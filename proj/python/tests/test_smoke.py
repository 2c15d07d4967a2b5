import numpy as np
import pytest

import veinatn as va


def small_config(classes):
    c = va.ModelConfig()
    c.num_classes = classes
    c.input_size = 32
    c.pool_grid = 4
    return c


def test_default_parameter_count():
    c = va.ModelConfig()
    assert va.count_params(c) == 58188
    layout = dict(va.parameter_layout(c))
    assert layout["block1.conv.weight"] == [32, 3, 7, 7]
    assert sum(int(np.prod(s)) for s in layout.values()) == 58188


def test_clahe_one_tile_no_clip_is_global_equalization():
    rng = np.random.default_rng(0)
    img = rng.integers(20, 200, size=(23, 31), dtype=np.uint8)
    out = va.clahe(img, 1, 1, float("inf"))
    levels = np.unique(img)
    hist = np.array([(img == v).sum() for v in levels])
    cdf = np.cumsum(hist)
    # Round half away from zero.
    lut = np.floor(255.0 * (cdf - cdf[0]) / (img.size - cdf[0]) + 0.5).astype(np.uint8)
    expected = lut[np.searchsorted(levels, img)]
    assert np.array_equal(out, expected)
    flat = np.full((16, 16), 77, dtype=np.uint8)
    assert len(np.unique(va.clahe(flat))) == 1


def test_image_round_trip(tmp_path):
    img = np.arange(12 * 7, dtype=np.uint8).reshape(7, 12)
    for name in ("a.pgm", "a.png"):
        va.save_image(img, str(tmp_path / name))
        assert np.array_equal(va.load_image(str(tmp_path / name)), img)
    with pytest.raises(OSError):
        va.load_image(str(tmp_path / "missing.pgm"))


def test_metrics_against_brute_force():
    rng = np.random.default_rng(3)
    gen = rng.normal(0.7, 0.15, 40)
    imp = rng.normal(0.4, 0.15, 120)
    eer, thr = va.eer(gen, imp)
    best = None
    for t in np.unique(np.concatenate([gen, imp])):
        fmr, fnmr = (imp >= t).mean(), (gen < t).mean()
        gap = abs(fmr * len(gen) * len(imp) - fnmr * len(gen) * len(imp))
        if best is None or gap < best[0] - 1e-9:
            best = (gap, (fmr + fnmr) / 2, t)
    assert eer == pytest.approx(best[1], abs=1e-12)
    assert thr == best[2]
    det = va.det_curve(gen, imp)
    assert det.shape[1] == 3
    assert np.all(np.diff(det[:, 0]) > 0)
    tar, _, under = va.tar_at_fmr(gen, imp, 0.01)
    assert 0.0 <= tar <= 1.0 and under


def test_protocol_counts_and_scores(tmp_path):
    va.make_toy_dataset(str(tmp_path), identities=3, samples=2, size=32, seed=1)
    assert va.count_scores(str(tmp_path), "heldin") == (6, 12)
    n = va.Checkpoint.init(small_config(3), 1)
    e = va.Checkpoint.init(small_config(3), 2)
    probe = va.load_image(str(tmp_path / "id000" / "s1" / "000.pgm"))
    total = 0.0
    for k in range(3):
        cn, ce, fused = va.comparison_score(n, e, probe, k)
        assert fused == cn + ce
        total += fused
    assert total == pytest.approx(2.0, abs=1e-5)
    probs = n.predict(probe)
    assert probs.shape == (3,)
    assert probs.sum() == pytest.approx(1.0, abs=1e-5)


def test_checkpoint_round_trip_and_training(tmp_path):
    va.make_toy_dataset(str(tmp_path / "data"), identities=2, samples=2, size=32, seed=4)
    ck = va.train(small_config(2), str(tmp_path / "data"), epochs=1, augment=False, seed=3)
    assert ck.epoch == 1
    assert len(ck.loss_curve) == 1
    ck.save(str(tmp_path / "m.vann"))
    back = va.Checkpoint.load(str(tmp_path / "m.vann"))
    assert back.num_params == ck.num_params == va.count_params(small_config(2))
    assert np.array_equal(back.parameter("fc.weight"), ck.parameter("fc.weight"))


def test_explain_shape_and_determinism():
    ck = va.Checkpoint.init(small_config(2), 5)
    img = np.random.default_rng(1).integers(0, 255, size=(32, 32), dtype=np.uint8)
    a = va.explain(ck, img, 1, grid_x=4, grid_y=2, samples=32, seed=7)
    b = va.explain(ck, img, 1, grid_x=4, grid_y=2, samples=32, seed=7)
    assert a.shape == (2, 4)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        va.explain(ck, img, 1, samples=4)


def test_bad_arguments_raise():
    with pytest.raises(ValueError):
        va.clahe(np.zeros((4, 4), dtype=np.uint8), 8, 1, 2.0)
    with pytest.raises(ValueError):
        va.clahe(np.zeros((2, 4, 4), dtype=np.uint8))
