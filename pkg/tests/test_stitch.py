import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from mmsr.data import CTVolume, IntensityMap
from mmsr.errors import ParameterError, ShapeError
from mmsr.losses import nn_upsample_g
from mmsr.networks import SRGeneratorSpec, build_sr_generator
from mmsr.stitch import export_png_slices, plan_tiles, super_resolve_slice, super_resolve_volume, weight_map


def stub(x):
    return nn_upsample_g(x, 8)


def coverage(plan):
    count = np.zeros(plan.padded_shape, dtype=int)
    for r, c, h, w in plan.tiles:
        assert r >= 0 and c >= 0 and r + h <= plan.padded_shape[0] and c + w <= plan.padded_shape[1]
        count[r:r + h, c:c + w] += 1
    return count


def test_single_tile_without_padding():
    plan = plan_tiles((64, 64), 64, 0)
    assert plan.tiles == ((0, 0, 64, 64),)
    assert plan.padding == (0, 0, 0, 0)


def test_100_by_100_needs_four_tiles_and_128_padding():
    plan = plan_tiles((100, 100), 64, 0)
    assert len(plan.tiles) == 4
    assert plan.padded_shape == (128, 128)
    assert (coverage(plan) == 1).all()


def test_invalid_plans():
    with pytest.raises(ParameterError):
        plan_tiles((32, 32), 16, 16)
    with pytest.raises(ParameterError):
        plan_tiles((32, 32), 4, 0)
    with pytest.raises(ShapeError):
        plan_tiles((32,), 16, 0)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 150), w=st.integers(1, 150), tile=st.integers(8, 64), frac=st.floats(0, 0.99))
def test_plan_coverage(h, w, tile, frac):
    overlap = int(frac * tile)
    plan = plan_tiles((h, w), tile, overlap)
    count = coverage(plan)
    t, b, l, r = plan.padding
    assert plan.padded_shape[0] >= h and plan.padded_shape[1] >= w
    assert (count >= 1).all()
    if overlap == 0:
        assert (count == 1).all()
    assert plan == plan_tiles((h, w), tile, overlap)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 40), w=st.integers(1, 40), tile=st.integers(8, 24), frac=st.floats(0, 0.9),
       seed=st.integers(0, 2**32 - 1))
def test_tiled_stub_equals_whole_slice(h, w, tile, frac, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, (h, w)).astype(np.float32)
    plan = plan_tiles((h, w), tile, int(frac * tile))
    out = super_resolve_slice(stub, x, plan)
    assert out.shape == (8 * h, 8 * w) and out.dtype == np.float32
    np.testing.assert_array_equal(out, np.repeat(np.repeat(x, 8, 0), 8, 1))


@pytest.mark.parametrize("tile,overlap", [(16, 0), (16, 4), (16, 8), (24, 6), (64, 8)])
def test_blend_weights_sum_to_one(tile, overlap):
    np.testing.assert_allclose(weight_map(plan_tiles((70, 45), tile, overlap)), 1.0, atol=1e-6, rtol=0)


def test_constant_slice_is_seamless_and_overlap_invariant():
    x = np.full((40, 52), 0.3, dtype=np.float32)
    a = super_resolve_slice(stub, x, plan_tiles(x.shape, 16, 0))
    b = super_resolve_slice(stub, x, plan_tiles(x.shape, 16, 8))
    assert a.var() == 0
    np.testing.assert_array_equal(a, b)


def test_plan_must_match_slice():
    with pytest.raises(ShapeError):
        super_resolve_slice(stub, np.zeros((10, 10)), plan_tiles((12, 10), 8, 0))
    with pytest.raises(ShapeError):
        super_resolve_slice(stub, np.zeros((10, 10, 2)), plan_tiles((10, 10), 8, 0))


def test_generator_with_wrong_scale_is_rejected():
    with pytest.raises(ShapeError):
        super_resolve_slice(lambda t: nn_upsample_g(t, 4), np.zeros((10, 10)), plan_tiles((10, 10), 8, 0))


def small_g1():
    return build_sr_generator(SRGeneratorSpec(base_width=8, n_res_blocks=1), seed=3)


def test_volume_super_resolution_contract():
    rng = np.random.default_rng(0)
    vol = CTVolume(rng.uniform(-1, 1, (32, 32, 4)), (0.625, 0.625, 0.6), "clinical", "c0",
                   intensity_map=IntensityMap(-1000.0, -200.0))
    g1 = small_g1()
    out = super_resolve_volume(g1, vol, tile_size=16, overlap=4)
    assert out.shape == (256, 256, 4)
    assert out.spacing == pytest.approx((0.625 / 8, 0.625 / 8, 0.6))
    assert out.modality == "synthetic-micro"
    assert out.intensity_map == vol.intensity_map
    assert np.abs(out.voxels).max() <= 1
    again = super_resolve_volume(g1, vol, tile_size=16, overlap=4)
    np.testing.assert_array_equal(out.voxels, again.voxels)
    # tiling a real generator still assembles slice by slice
    np.testing.assert_array_equal(out.voxels[:, :, 2], super_resolve_slice(g1, vol.axial(2), plan_tiles((32, 32), 16, 4)))


def test_unnormalized_volume_rejected():
    vol = CTVolume(np.full((16, 16, 1), -800.0), (1, 1, 1), "clinical", "raw")
    with pytest.raises(ParameterError):
        super_resolve_volume(stub, vol, 8, 0)


def test_png_export_is_16_bit_with_window_sidecar(tmp_path):
    v = np.linspace(-1, 1, 16 * 16 * 2).reshape(16, 16, 2)
    vol = CTVolume(v, (0.1, 0.1, 0.6), "synthetic-micro", "sr")
    paths = export_png_slices(vol, tmp_path)
    assert len(paths) == 2
    img = np.asarray(Image.open(paths[0]))
    assert img.dtype in (np.uint16, np.int32) and img.min() == 0
    np.testing.assert_array_equal(img, np.rint((v[:, :, 0] + 1) / 2 * 65535).astype(img.dtype))
    side = json.loads((tmp_path / "slice_window.json").read_text())
    assert side["window"] == [-1.0, 1.0] and side["bit_depth"] == 16
