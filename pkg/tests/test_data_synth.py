import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import Point, Polygon, box

from xdom import data_synth as ds
from xdom.errors import ConfigError, PlacementError


# --- independent rasteriser: float geometry on pixel centres ----------------

def _polygon_oracle(shape, s):
    c = s / 2.0
    if shape == "square":
        return box(0, 0, s, s)
    if shape == "triangle":
        half = (s + 0.5) / 2.0
        return Polygon([(c, -0.5), (c - half, s), (c + half, s)])
    if shape == "diamond":
        h = s / 2.0
        return Polygon([(c - h, c), (c, c - h), (c + h, c), (c, c + h)])
    t = max(1, s // 3) / 2.0
    frame = box(-1, -1, s + 1, s + 1)
    if shape == "cross":
        return box(c - t, -1, c + t, s + 1).union(box(-1, c - t, s + 1, c + t))
    if shape == "ex":
        big = 4 * s
        band1 = Polygon([(c - big - t, c - big), (c - big + t, c - big),
                         (c + big + t, c + big), (c + big - t, c + big)])
        band2 = Polygon([(c - big - t, c + big), (c - big + t, c + big),
                         (c + big + t, c - big), (c + big - t, c - big)])
        return band1.union(band2).intersection(frame)
    return None


def oracle_mask(shape, s):
    out = np.zeros((s, s), dtype=bool)
    poly = _polygon_oracle(shape, s)
    c = s / 2.0
    for i in range(s):
        for j in range(s):
            x, y = j + 0.5, i + 0.5
            if poly is not None:
                out[i, j] = poly.covers(Point(x, y))
            else:
                r = np.hypot(x - c, y - c)
                inside = r <= s / 2.0
                if shape == "ring":
                    inside = inside and r >= (s // 2) / 2.0
                out[i, j] = inside
    return out


@pytest.mark.parametrize("shape", sorted(ds.SHAPES))
def test_shape_raster_matches_geometry_oracle(shape):
    for s in range(2, 33):
        np.testing.assert_array_equal(ds.shape_mask(shape, s), oracle_mask(shape, s),
                                      err_msg=f"{shape} size {s}")


@pytest.mark.parametrize("shape", sorted(ds.SHAPES))
def test_shapes_fill_their_bounding_box(shape):
    for s in range(3, 33):
        m = ds.shape_mask(shape, s)
        rows, cols = np.flatnonzero(m.any(1)), np.flatnonzero(m.any(0))
        assert (rows[0], rows[-1], cols[0], cols[-1]) == (0, s - 1, 0, s - 1)


def test_square_area():
    for s in (2, 5, 11):
        _, mask = ds.render_example("square", "noise", (1, 2, s), seed=0)
        assert mask.sum() == s * s


@settings(max_examples=60, deadline=None)
@given(shape=st.sampled_from(sorted(ds.SHAPES)), size=st.integers(3, 20),
       top=st.integers(0, 12), left=st.integers(0, 12), seed=st.integers(0, 2**32))
def test_render_mask_extent_equals_placement(shape, size, top, left, seed):
    image, mask = ds.render_example(shape, "stripes_h4", (top, left, size), seed)
    rows, cols = np.flatnonzero(mask.any(1)), np.flatnonzero(mask.any(0))
    assert (rows[0], cols[0], rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1) == (top, left, size, size)
    assert image.shape == (32, 32, 3) and image.dtype == np.float32
    assert image.min() >= 0 and image.max() <= 1
    np.testing.assert_array_equal(np.round(image * 255) / 255, image)


def test_render_is_deterministic():
    a = ds.render_example("circle", "noise", (4, 4, 12), seed=7)
    b = ds.render_example("circle", "noise", (4, 4, 12), seed=7)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


@pytest.mark.parametrize("placement", [(0, 0, 33), (-1, 0, 5), (30, 0, 5), (0, 28, 5), (0, 0, 1)])
def test_render_rejects_bad_placement(placement):
    with pytest.raises(PlacementError):
        ds.render_example("square", "noise", placement, seed=0)


def test_unknown_ids_are_config_errors():
    with pytest.raises(ConfigError):
        ds.shape_mask("hexagon", 5)
    with pytest.raises(ConfigError):
        ds.render_example("square", "plaid", (0, 0, 5), seed=0)


def test_id_dataset_balance_and_fractions():
    spec = ds.DatasetSpec(n_train=200, n_test=40)
    train, test = ds.gen_id_dataset(spec)
    assert len(train) == 200 and len(test) == 40
    assert np.bincount(train.labels(), minlength=4).tolist() == [50, 50, 50, 50]
    lo, hi = spec.fg_fraction_range
    for e in list(train) + list(test):
        frac = e.true_mask.mean()
        assert lo <= frac <= hi
        assert e.shape == spec.shapes_per_class[e.label]
        assert e.texture_id in spec.id_texture_ids
        top, left, size = e.placement
        expect = np.zeros_like(e.true_mask)
        expect[top:top + size, left:left + size] = ds.shape_mask(e.shape, size)
        np.testing.assert_array_equal(e.true_mask, expect)


@pytest.mark.parametrize("bad", [dict(num_classes=1, shapes_per_class=("square",)),
                                 dict(id_texture_ids=()),
                                 dict(image_size=8),
                                 dict(fg_fraction_range=(0.4, 0.2)),
                                 dict(shapes_per_class=("square", "square", "circle", "cross"))])
def test_invalid_spec(bad):
    with pytest.raises(ConfigError):
        ds.gen_id_dataset(ds.DatasetSpec(n_train=4, n_test=4, **bad))


def test_unreachable_fraction_is_config_error():
    with pytest.raises(ConfigError):
        ds.DatasetSpec(fg_fraction_range=(0.97, 0.98)).validate()


def test_ood_kinds_respect_shift_separation(tiny_spec):
    held_shapes, held_tex = tiny_spec.held_out_shapes, tiny_spec.held_out_textures
    sem = ds.gen_ood_dataset("semantic", tiny_spec, 30)
    dom = ds.gen_ood_dataset("domain", tiny_spec, 30)
    both = ds.gen_ood_dataset("both", tiny_spec, 30)
    for e in sem:
        assert e.shape in held_shapes and e.texture_id in tiny_spec.id_texture_ids
        assert e.label == ds.NO_LABEL
    for e in dom:
        assert e.shape in tiny_spec.shapes_per_class and e.texture_id in held_tex
        assert e.label == tiny_spec.shapes_per_class.index(e.shape)
    for e in both:
        assert e.shape in held_shapes and e.texture_id in held_tex
    assert {e.split_tag for e in sem} == {"ood_semantic"}


def test_domain_split_can_include_bare_textures(tiny_spec):
    dom = ds.gen_ood_dataset("domain", tiny_spec, 40, empty_fraction=1.0)
    assert all(e.shape is None and not e.true_mask.any() for e in dom)
    assert all(e.label == ds.NO_LABEL for e in dom)


def test_ood_without_held_out_pool_fails(tiny_spec):
    spec = ds.DatasetSpec(n_train=4, n_test=4, id_texture_ids=tuple(ds.TEXTURES))
    with pytest.raises(ConfigError):
        ds.gen_ood_dataset("domain", spec, 5)
    with pytest.raises(ConfigError):
        ds.gen_ood_dataset("sideways", tiny_spec, 5)


def test_serialisation_is_byte_stable_and_round_trips(tiny_spec, tmp_path):
    train, _ = ds.gen_id_dataset(tiny_spec)
    train2, _ = ds.gen_id_dataset(tiny_spec)
    ds.save_example_set(train, tmp_path / "a", tiny_spec)
    ds.save_example_set(train2, tmp_path / "b", tiny_spec)
    assert ds.directory_digest(tmp_path / "a") == ds.directory_digest(tmp_path / "b")
    back = ds.load_example_set(tmp_path / "a")
    np.testing.assert_array_equal(back.images(), train.images())
    np.testing.assert_array_equal(back.masks(), train.masks())
    assert back.ids() == train.ids() and back.labels().tolist() == train.labels().tolist()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == tiny_spec.seed
    mask_png = np.asarray(ds.Image.open(tmp_path / "a" / manifest["examples"][0]["mask"]))
    assert mask_png.ndim == 2 and set(np.unique(mask_png)) <= {0, 255}


def test_seed_changes_the_data(tiny_spec):
    a, _ = ds.gen_id_dataset(tiny_spec)
    b, _ = ds.gen_id_dataset(ds.DatasetSpec(n_train=48, n_test=16, seed=4))
    assert not np.array_equal(a.images(), b.images())
