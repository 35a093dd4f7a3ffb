import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdcn import synth as S
from sdcn.io import load_dataset, read_dataset_header, save_dataset, describe_dataset


def test_templates_cover_five_per_class_and_are_distinct():
    kinds = [(t.class_kind, t.class_id) for t in S.TEMPLATES]
    assert sorted(kinds) == [(k, i) for k in (0, 1) for i in range(1, 6)]
    assert all(len(t.scatterers) >= 2 for t in S.TEMPLATES)
    chips = [S.make_object_chip(t, 0.0, h=24, w=24).ravel() for t in S.TEMPLATES]
    for i in range(len(chips)):
        for j in range(i):
            assert not np.allclose(chips[i], chips[j])


def test_object_chip_deterministic_and_normalized():
    t = S.template(S.TARGET, 2)
    a = S.make_object_chip(t, 47.5, seed=3)
    b = S.make_object_chip(t, 47.5, seed=3)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3, 32, 32)
    assert np.abs(a).max() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("shape", [(32, 32), (24, 24), (17, 17)])
def test_rotation_by_180_degrees(shape):
    for t in S.TEMPLATES:
        for a in (0.0, 37.0):
            x0 = S.make_object_chip(t, a, h=shape[0], w=shape[1], seed=1)
            x180 = S.make_object_chip(t, a + 180.0, h=shape[0], w=shape[1], seed=1)
            np.testing.assert_allclose(x180, x0[:, ::-1, ::-1], atol=1e-9)


def test_hv_is_weakest_channel():
    chips, *_ = S.clean_training_chips(24, 24)
    power = (chips ** 2).mean(axis=(2, 3))  # per chip, per channel
    assert np.all(power[:, 1] < 0.5 * np.minimum(power[:, 0], power[:, 2]))
    mean = power.mean(axis=0)
    assert mean[1] < 0.5 * min(mean[0], mean[2])


def test_object_chip_errors():
    t = S.template(S.CONFUSER, 1)
    with pytest.raises(ValueError, match="aspect angle"):
        S.make_object_chip(t, 360.0)
    with pytest.raises(ValueError, match="too small"):
        S.make_object_chip(t, 0.0, h=6, w=32)
    with pytest.raises(ValueError, match="duplicate"):
        S.make_object_chip(t, 0.0, channels=("HH", "HH"))
    with pytest.raises(ValueError):
        S.make_object_chip(t, 0.0, channels=())
    with pytest.raises(KeyError):
        S.template(S.TARGET, 6)


def test_ground_rms_and_linear_scaling():
    g1 = S.make_ground_chip(S.GroundModel(1.0, seed=5))
    g5 = S.make_ground_chip(S.GroundModel(5.0, seed=5))
    rms = np.sqrt((g1 ** 2).mean(axis=(1, 2)))
    np.testing.assert_allclose(rms, 1.0, atol=1e-6)
    np.testing.assert_allclose(g5, 5 * g1, rtol=1e-9)
    with pytest.raises(ValueError):
        S.GroundModel(0.0)


def test_ground_seeds_are_nearly_uncorrelated():
    cs = []
    for i in range(100):
        a = S.make_ground_chip(S.GroundModel(seed=2 * i))
        b = S.make_ground_chip(S.GroundModel(seed=2 * i + 1))
        cs.append(np.corrcoef(a.ravel(), b.ravel())[0, 1])
    assert np.mean(np.abs(cs)) < 0.2
    assert abs(np.mean(cs)) < 0.05


def test_ground_co_pol_channels_share_structure():
    g = S.make_ground_chip(S.GroundModel(seed=0), 64, 64)
    assert np.corrcoef(g[0].ravel(), g[2].ravel())[0, 1] > 0.3


def test_augment_rules():
    rng = np.random.default_rng(0)
    x, g = rng.standard_normal((2, 3, 8, 8))
    np.testing.assert_array_equal(S.augment(x, g, 0.0), x)
    np.testing.assert_allclose(S.augment(x, g, 2.0), S.augment(x, g, 1.0) + g, atol=1e-15)
    assert np.linalg.norm(S.augment(x, g, 3.7) - x) == pytest.approx(3.7 * np.linalg.norm(g),
                                                                      rel=1e-12)
    with pytest.raises(ValueError):
        S.augment(x, g[:2], 1.0)
    with pytest.raises(ValueError):
        S.augment(x, g, -1.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.integers(0, 1000))
def test_augment_additive_in_lambda(a, b, seed):
    rng = np.random.default_rng(seed)
    x, g = rng.standard_normal((2, 2, 4, 4))
    np.testing.assert_allclose(S.augment(x, g, a + b), S.augment(x, g, a) + b * g, atol=1e-12)


def test_training_set_protocol():
    ds = S.build_training_set(200, seed=1, h=16, w=16, n_grounds=10)
    assert len(ds) == 400
    assert np.bincount(ds.labels).tolist() == [200, 200]
    assert ds.lambdas.min() >= 0.5 and ds.lambdas.max() <= 5.5
    assert set(ds.meta["angle"].tolist()) <= set(S.TRAIN_ANGLES)
    # mixing exactness against the stored ground pool index
    g = ds.ground
    first = {}
    for i, gi in enumerate(ds.meta["ground"]):
        first.setdefault(gi, i)
        np.testing.assert_allclose(g[i], g[first[gi]], atol=1e-12)
    np.testing.assert_allclose(ds.x_tilde - ds.lambdas[:, None, None, None] * g, ds.x,
                               atol=1e-12)
    # labels follow the clean chip's class
    clean, labels, *_ = S.clean_training_chips(16, 16)
    for i in range(0, 400, 37):
        match = [j for j in range(len(clean)) if np.array_equal(clean[j], ds.x[i])]
        assert labels[match[0]] == ds.labels[i]


def test_training_set_deterministic_and_seed_dependent():
    a = S.build_training_set(20, seed=4, h=16, w=16, n_grounds=5)
    b = S.build_training_set(20, seed=4, h=16, w=16, n_grounds=5)
    c = S.build_training_set(20, seed=5, h=16, w=16, n_grounds=5)
    np.testing.assert_array_equal(a.x_tilde, b.x_tilde)
    assert not np.array_equal(a.x_tilde, c.x_tilde)


def test_training_set_errors():
    with pytest.raises(ValueError):
        S.build_training_set(0)
    with pytest.raises(ValueError):
        S.build_training_set(1, lambda_range=(3, 1))


def test_test_set_protocol():
    ds = S.build_test_set(n_angles=4, seed=0, h=16, w=16)
    assert len(ds) == 5 * 10 * 4
    assert sorted(set(ds.lambdas.tolist())) == [1.0, 2.0, 3.0, 4.0, 5.0]
    assert ds.lambda_levels == (1.0, 2.0, 3.0, 4.0, 5.0)
    assert not set(ds.meta["angle"].tolist()) & set(S.TRAIN_ANGLES)
    for lam in S.TEST_LAMBDAS:
        part = ds.partition(lam)
        assert len(part) == 40 and np.bincount(part.labels).tolist() == [20, 20]
    # angles and grounds are shared between levels
    p1, p3 = ds.partition(1.0), ds.partition(3.0)
    np.testing.assert_array_equal(p1.x, p3.x)
    np.testing.assert_allclose(p1.ground, p3.ground, atol=1e-12)


def test_test_set_paper_counts_arithmetic():
    assert len(S.TEST_LAMBDAS) * len(S.TEMPLATES) * 100 == 5000


def test_select_channels():
    ds = S.build_test_set(n_angles=1, h=16, w=16)
    full = S.select_channels(ds, "HH-HV-VV")
    np.testing.assert_array_equal(full.x_tilde, ds.x_tilde)
    hh = S.select_channels(ds, "HH")
    assert hh.x.shape[1] == 1 and hh.channels == ("HH",)
    twice = S.select_channels(S.select_channels(ds, "HH-VV"), "VV")
    np.testing.assert_array_equal(twice.x, S.select_channels(ds, "VV").x)
    assert S.parse_combo("vv-hh") == ("HH", "VV")
    with pytest.raises(ValueError, match="not present"):
        S.select_channels(hh, "VV")


def test_channel_subsets_render_consistently():
    t = S.template(S.TARGET, 1)
    full = S.make_object_chip(t, 10.0, seed=2)
    part = S.make_object_chip(t, 10.0, channels=("VV", "HH"), seed=2)
    np.testing.assert_array_equal(part, full[[2, 0]])


def test_dataset_container_round_trip(tmp_path):
    ds = S.build_test_set(n_angles=2, h=16, w=16, channels=("HH", "VV"))
    path = tmp_path / "t.sdcd"
    save_dataset(path, ds)
    back = load_dataset(path)
    for f in ("x_tilde", "x", "labels", "lambdas"):
        np.testing.assert_array_equal(getattr(back, f), getattr(ds, f))
    assert back.channels == ("HH", "VV") and back.lambda_levels == ds.lambda_levels
    hd = read_dataset_header(path)
    assert hd["samples"] == len(ds) and hd["height"] == 16
    text = describe_dataset(path)
    assert "HH-VV" in text and "16x16" in text
    raw = path.read_bytes()
    assert raw[:5] == b"SDCD1"
    # per record: label byte, lambda, two 2x16x16 float64 tensors
    # magic, n + c, two 2-byte names, H W, lambda range + level count, 5 levels
    header = 5 + 5 + 2 * 3 + 8 + 20 + 5 * 8
    assert len(raw) == header + len(ds) * (1 + 8 + 2 * 2 * 256 * 8)
    path.write_bytes(raw[:-3])
    with pytest.raises(ValueError, match="payload"):
        load_dataset(path)
