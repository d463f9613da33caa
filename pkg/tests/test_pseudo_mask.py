import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import gaussian_filter

from xdom import pseudo_mask as pm
from xdom.errors import ConfigError, InputError, ModeError
from xdom.model import K_PLUS_1, DualHeadModel

from oracles import resize_bilinear_corners

unit_maps = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                   elements=st.floats(0, 1))


def _classifier(seed=0, symmetric=False):
    torch.manual_seed(seed)
    m = DualHeadModel(3, image_size=16, width=8, channels=16).eval()
    if symmetric:
        with torch.no_grad():
            for mod in m.modules():
                if isinstance(mod, torch.nn.Conv2d):
                    mod.weight.copy_((mod.weight + mod.weight.flip(-1)) / 2)
    return m


def test_cam_from_features_examples():
    assert pm.cam_from_features([[1.0, 2.0]], np.array([3.0, 4.0]).reshape(2, 1, 1), 0)[0, 0] == 11
    zero = pm.cam_from_features(np.zeros((2, 3)), np.random.rand(3, 4, 4), 1)
    assert not zero.any()
    rng = np.random.default_rng(0)
    W, G = rng.normal(size=(3, 5)), rng.normal(size=(5, 2, 2))
    expect = np.array([[sum(W[2, c] * G[c, i, j] for c in range(5)) for j in range(2)]
                       for i in range(2)])
    np.testing.assert_allclose(pm.cam_from_features(W, G, 2), expect, atol=1e-9)


def test_cam_matches_features_and_excludes_bias():
    m = _classifier()
    x = torch.rand(3, 16, 16)
    with torch.no_grad():
        m.classifier.bias.fill_(100.0)
        g = m.features(x[None])[0].double().numpy()
    w = m.classifier_weights()[0].detach().numpy()
    raw = pm.cam_from_features(w, g, 1)
    np.testing.assert_allclose(pm.cam(m, x, 1), resize_bilinear_corners(raw, 16, 16), atol=1e-6)


def test_cam_errors():
    m = _classifier()
    with pytest.raises(InputError):
        pm.cam(m, torch.rand(3, 16, 16), 3)
    with pytest.raises(ModeError):
        pm.cam(DualHeadModel(3, K_PLUS_1, 16), torch.rand(3, 16, 16), 0)


def test_degenerate_ensemble_equals_cam():
    m = _classifier()
    x = torch.rand(4, 3, 16, 16)
    cfg = pm.MaskConfig(scales=(1.0,), use_flips=False, gaussian_sigma=0.0)
    batched = pm.multiscale_cam(m, x, [0, 1, 2, 0], cfg)
    for k, y in enumerate([0, 1, 2, 0]):
        single = pm.multiscale_cam(m, x[k], y, cfg)
        np.testing.assert_array_equal(single, pm.cam(m, x[k], y))
        # batching changes float32 accumulation order only
        np.testing.assert_allclose(batched[k], single, atol=1e-6)


def test_default_ensemble_matches_manual_average():
    m = _classifier(1)
    x = torch.rand(2, 3, 16, 16)
    labels = [2, 0]
    w = m.classifier_weights()[0].detach().numpy()
    got = pm.multiscale_cam(m, x, labels, pm.MaskConfig())
    for k, y in enumerate(labels):
        maps = []
        for s in (0.5, 1.0, 1.5, 2.0):
            size = int(round(16 * s))
            xs = F.interpolate(x[k:k + 1], size=(size, size), mode="bilinear", align_corners=True)
            for flip in (False, True):
                inp = xs.flip(-1) if flip else xs
                with torch.no_grad():
                    g = m.features(inp)[0].double().numpy()
                raw = pm.cam_from_features(w, g, y)
                if flip:
                    raw = raw[:, ::-1]
                maps.append(resize_bilinear_corners(raw, 16, 16))
        assert len(maps) == 8
        expect = gaussian_filter(np.mean(maps, axis=0), 1.0, mode="nearest")
        np.testing.assert_allclose(got[k], expect, atol=1e-6)


def test_ensemble_is_flip_symmetric_on_symmetric_input():
    m = _classifier(2, symmetric=True)
    half = torch.rand(1, 3, 16, 8)
    x = torch.cat([half, half.flip(-1)], dim=-1)
    out = pm.multiscale_cam(m, x, [1], pm.MaskConfig())[0]
    np.testing.assert_allclose(out, out[:, ::-1], atol=1e-6)


def test_too_small_scale_is_config_error():
    with pytest.raises(ConfigError):
        pm.multiscale_cam(_classifier(), torch.rand(1, 3, 16, 16), [0],
                          pm.MaskConfig(scales=(0.1,)))
    with pytest.raises(ConfigError):
        pm.MaskConfig(scales=()).validate()


def test_normalize_examples():
    m = np.array([[2.0, 4.0], [6.0, 3.0]])
    n = pm.normalize_map(m)
    assert n[0, 1] == 0.5 and n.min() == 0 and n.max() == 1
    assert not pm.normalize_map(np.full((3, 3), 7.0)).any()


@settings(max_examples=100, deadline=None)
@given(m=unit_maps, t1=st.floats(0.01, 0.99), t2=st.floats(0.01, 0.99))
def test_threshold_is_antitone(m, t1, t2):
    lo, hi = sorted((t1, t2))
    a = pm.threshold_mask(m, pm.MaskConfig(theta=lo))
    b = pm.threshold_mask(m, pm.MaskConfig(theta=hi))
    assert np.all(b <= a)


def test_threshold_examples():
    assert pm.threshold_mask(np.array([[0.5]]), pm.MaskConfig(theta=0.5))[0, 0]
    assert not pm.threshold_mask(np.full((2, 2), 0.49), pm.MaskConfig()).any()
    m = np.array([[0.2, 0.4], [0.9, 0.9]])
    got = pm.threshold_mask(m, pm.MaskConfig(threshold_mode="mean"))
    np.testing.assert_array_equal(got, [[False, False], [True, True]])


@settings(max_examples=50, deadline=None)
@given(mask=arrays(bool, (5, 6)), y=st.integers(0, 3))
def test_label_map_partition(mask, y):
    lm = pm.build_label_map(mask, y, 4)
    assert set(np.unique(lm)) <= {y, 4}
    assert (lm == y).sum() == mask.sum()


def test_label_map_extremes():
    assert (pm.build_label_map(np.ones((2, 2)), 1, 4) == 1).all()
    assert (pm.build_label_map(np.zeros((2, 2)), 1, 4) == 4).all()
    with pytest.raises(InputError):
        pm.build_label_map(np.ones((2, 2)), 4, 4)


def test_mask_iou_examples():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert pm.mask_iou(a, a) == 1.0
    assert pm.mask_iou(a, ~a) == 0.0
    half = np.zeros_like(a)
    half[0] = True
    assert pm.mask_iou(half, a) == 0.5
    assert pm.mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(InputError):
        pm.mask_iou(a, a[:2])


def test_masks_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    masks = rng.random((3, 8, 8)) > 0.5
    labels = [0, 2, 1]
    pm.save_masks(tmp_path, ["a", "b", "c"], masks, labels, 3, pm.MaskConfig(), {"x": 1})
    ids, back, maps, manifest = pm.load_masks(tmp_path)
    assert ids == ["a", "b", "c"] and manifest["stats"] == {"x": 1}
    np.testing.assert_array_equal(back, masks)
    for k, y in enumerate(labels):
        np.testing.assert_array_equal(maps[k], pm.build_label_map(masks[k], y, 3))
    assert json.loads((tmp_path / "manifest.json").read_text())["background_index"] == 3
