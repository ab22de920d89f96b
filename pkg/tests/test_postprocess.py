import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from mssunet import postprocess as pp
from mssunet.volume import LabelMask
from oracles import (enumerate_sparse_masks, flood_fill_components, ids_partition, pointset_partition,
                     same_partition)


def _blob(shape, centre, r):
    z, y, x = np.indices(shape)
    c = np.asarray(centre)
    return (z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2 <= r * r


def test_component_examples():
    m = np.zeros((3, 3, 3), np.uint8)
    m[1, 1, 1] = 1
    lab = pp.connected_components(m, 1)
    assert lab.count == 1 and lab.sizes() == [1]
    assert lab.components[0].bbox == ((1, 2), (1, 2), (1, 2))
    m[0, 0, 0] = 1
    assert pp.connected_components(m, 1, 6).count == 2
    assert pp.connected_components(m, 1, 26).count == 1
    with pytest.raises(ValueError):
        pp.connected_components(m, 1, 18)
    with pytest.raises(ValueError):
        pp.connected_components(m, 0)


@pytest.mark.parametrize("connectivity", [6, 26])
def test_random_masks_match_flood_fill(connectivity):
    rng = np.random.default_rng(connectivity)
    for _ in range(30):
        m = (rng.random((20, 20, 20)) < rng.uniform(0.05, 0.35)).astype(np.uint8)
        lab = pp.connected_components(m, 1, connectivity)
        assert same_partition(lab.ids, flood_fill_components(m, connectivity))
        assert sorted(np.unique(lab.ids[lab.ids > 0])) == list(range(1, lab.count + 1))


def test_small_masks_exhaustive():
    for m, coords in enumerate_sparse_masks((3, 3, 3), 3):
        for k in (6, 26):
            lab = pp.connected_components(m, 1, k)
            assert ids_partition(lab.ids, coords) == pointset_partition(coords, k)


def _kidneys(sizes_r, shape=(30, 30, 60)):
    m = np.zeros(shape, np.uint8)
    for i, r in enumerate(sizes_r):
        m[_blob(shape, (15, 15, 8 + 16 * i), r)] = 1
    return m


def test_two_comparable_kidneys_kept():
    m = LabelMask(_kidneys([5, 4.7]))
    audit = {}
    out = pp.filter_kidneys(m, audit=audit)
    np.testing.assert_array_equal(out.data, m.data)
    assert audit["kidney"]["dropped"] == []


def _sized(sizes):
    m = np.zeros((len(sizes) * 2, 200, 1), np.uint8)
    for i, n in enumerate(sizes):
        m[2 * i, :n, 0] = 1
    return m


def test_size_rule_100_90_5():
    out = pp.filter_kidneys(LabelMask(_sized([100, 90, 5]))).data
    assert sorted(pp.connected_components(out, 1).sizes()) == [90, 100]


def test_size_rule_100_6():
    out = pp.filter_kidneys(LabelMask(_sized([100, 6]))).data
    assert pp.connected_components(out, 1).sizes() == [100]
    # exactly at the threshold the runner-up stays
    out = pp.filter_kidneys(LabelMask(_sized([100, 10]))).data
    assert sorted(pp.connected_components(out, 1).sizes()) == [10, 100]


def test_no_kidney_leaves_mask(caplog):
    m = LabelMask(np.zeros((4, 4, 4), np.uint8))
    assert pp.filter_kidneys(m) is m
    assert "no kidney" in caplog.text


def test_tumor_rules():
    m = _kidneys([5])
    m[15, 15, 8] = 2  # embedded
    m[2, 2, 50] = 2  # floating
    out = pp.filter_tumors(LabelMask(m)).data
    assert out[15, 15, 8] == 2
    assert out[2, 2, 50] == 0
    # a tumor voxel touching a kidney voxel only at a corner
    m2 = np.zeros((3, 3, 3), np.uint8)
    m2[0, 0, 0] = 1
    m2[1, 1, 1] = 2
    assert pp.filter_tumors(LabelMask(m2), 26).data[1, 1, 1] == 2
    assert pp.filter_tumors(LabelMask(m2), 6).data[1, 1, 1] == 0


def test_figure_style_fixture():
    shape = (30, 30, 60)
    m = _kidneys([5, 5], shape)
    attached = _blob(shape, (15, 15, 12), 2.5)
    m[attached] = 2
    floating = _blob(shape, (25, 25, 50), 2)
    m[floating] = 2
    m[_blob(shape, (3, 3, 45), 1)] = 1  # tiny false-positive kidney
    audit = {}
    out = pp.postprocess(LabelMask(m), audit=audit).data
    assert np.all(out[floating] == 0)
    assert np.all(out[attached] == 2)
    assert out[3, 3, 45] == 0
    assert pp.connected_components(out, 1).count == 2
    assert len(audit["tumor"]["dropped"]) == 1 and len(audit["kidney"]["dropped"]) == 1


def _random_label_mask(rng, shape=(10, 10, 10)):
    k = ndimage.gaussian_filter(rng.random(shape), 1.0)
    t = ndimage.gaussian_filter(rng.random(shape), 1.0)
    m = np.zeros(shape, np.uint8)
    m[k > np.quantile(k, 0.8)] = 1
    m[t > np.quantile(t, 0.9)] = 2
    return m


def test_clean_mask_unchanged():
    m = _kidneys([5, 5])
    m[15, 15, 8] = 2
    out = pp.postprocess(LabelMask(m)).data
    np.testing.assert_array_equal(out, m)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.sampled_from([6, 26]))
def test_idempotent_and_only_removes(seed, conn):
    m = _random_label_mask(np.random.default_rng(seed))
    once = pp.postprocess(LabelMask(m), conn).data
    twice = pp.postprocess(LabelMask(once), conn).data
    np.testing.assert_array_equal(once, twice)
    changed = once != m
    assert np.all(once[changed] == 0)
    assert pp.connected_components(once, 1, conn).count <= 2
    kid = once == 1
    for c in range(1, pp.connected_components(once, 2, conn).count + 1):
        comp = pp.connected_components(once, 2, conn).ids == c
        assert pp.touches(comp, kid, conn)
