import numpy as np
import pytest

from vinenav.raster import (
    CtrlMap,
    CumSegMap,
    DepthMap,
    RasterConfig,
    SegMap,
    depth_binary_mask,
    fuse_segmentations,
    load_depth,
    load_manifest,
    load_mask,
    make_ctrl_map,
    save_depth,
    save_mask,
)


def seg(cells, t=0):
    return SegMap(cells=np.asarray(cells, dtype=np.uint8), timestamp=t)


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def test_fuse_all_zero_maps():
    maps = [seg(np.zeros((4, 4)), t) for t in range(3)]
    cum = fuse_segmentations(maps)
    assert cum.window == 3
    assert not cum.cells.any()


def test_fuse_identical_single_pixel():
    cells = np.zeros((8, 8))
    cells[5, 5] = 1
    cum = fuse_segmentations([seg(cells, t) for t in range(3)])
    assert cum.cells[5, 5] == 3
    assert cum.cells.sum() == 3


def test_fuse_matches_elementwise_addition_oracle():
    rng = np.random.default_rng(42)
    for _ in range(20):
        maps = [seg(rng.integers(0, 2, (8, 8)), t) for t in range(3)]
        cum = fuse_segmentations(maps)
        # independent oracle: naive per-cell triple loop
        expected = np.zeros((8, 8), dtype=int)
        for i in range(8):
            for j in range(8):
                for m in maps:
                    expected[i, j] += int(m.cells[i, j])
        assert np.array_equal(cum.cells, expected)


def test_fuse_rejects_dimension_mismatch():
    maps = [seg(np.zeros((4, 4)), 0), seg(np.zeros((4, 5)), 1)]
    with pytest.raises(ValueError, match="dimension"):
        fuse_segmentations(maps)


def test_fuse_rejects_non_consecutive_timestamps():
    maps = [seg(np.zeros((4, 4)), 0), seg(np.zeros((4, 4)), 2)]
    with pytest.raises(ValueError, match="consecutive"):
        fuse_segmentations(maps)


def test_fuse_rejects_empty_window():
    with pytest.raises(ValueError):
        fuse_segmentations([])


def test_cumsegmap_rejects_counts_beyond_window():
    with pytest.raises(ValueError):
        CumSegMap(cells=np.full((2, 2), 4), window=3)


# ---------------------------------------------------------------------------
# depth thresholding
# ---------------------------------------------------------------------------


def test_depth_mask_strict_threshold():
    depth = DepthMap(cells=np.array([[4.0, 1.9], [2.5, 2.0]], dtype=np.float32))
    mask = depth_binary_mask(depth, 0.5)  # d_depth = 2.0
    assert mask[0, 0] == 0  # the max itself
    assert mask[0, 1] == 1  # 1.9 < 2.0
    assert mask[1, 0] == 0  # 2.5 >= 2.0
    assert mask[1, 1] == 0  # exactly at the threshold -> far


def test_depth_mask_full_fraction_keeps_all_but_max():
    depth = DepthMap(cells=np.array([[1.0, 2.0], [3.0, np.nan]], dtype=np.float32))
    mask = depth_binary_mask(depth, 1.0)
    assert mask.tolist() == [[1, 1], [0, 0]]  # max cell and invalid cell are 0


def test_depth_mask_matches_scan_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        cells = rng.uniform(0.1, 9.0, (8, 8)).astype(np.float32)
        cells[rng.random((8, 8)) < 0.1] = np.nan
        depth = DepthMap(cells=cells)
        got = depth_binary_mask(depth, 0.3)
        # independent oracle: find the max, then compare every cell
        mx = -1.0
        for i in range(8):
            for j in range(8):
                v = cells[i, j]
                if np.isfinite(v) and v > mx:
                    mx = v
        for i in range(8):
            for j in range(8):
                v = cells[i, j]
                want = 1 if np.isfinite(v) and v < 0.3 * mx else 0
                assert got[i, j] == want


def test_depth_mask_requires_a_valid_cell():
    depth = DepthMap(cells=np.full((3, 3), np.nan, dtype=np.float32))
    with pytest.raises(ValueError, match="valid"):
        depth_binary_mask(depth, 0.5)


def test_depth_mask_monotone_in_fraction():
    rng = np.random.default_rng(11)
    for _ in range(50):
        depth = DepthMap(cells=rng.uniform(0.0, 5.0, (10, 10)).astype(np.float32))
        l1, l2 = sorted(rng.uniform(0.05, 1.0, 2))
        m1 = depth_binary_mask(depth, float(l1))
        m2 = depth_binary_mask(depth, float(l2))
        assert np.all(m1 <= m2)  # 1-cells of the tighter mask are a subset


def test_depth_mask_scale_invariance():
    rng = np.random.default_rng(12)
    for _ in range(50):
        cells = rng.uniform(0.1, 8.0, (10, 10)).astype(np.float32)
        base = depth_binary_mask(DepthMap(cells=cells), 0.4)
        for factor in (0.25, 0.5, 2.0, 8.0):  # powers of two scale exactly
            scaled = depth_binary_mask(DepthMap(cells=cells * factor), 0.4)
            assert np.array_equal(base, scaled)


def test_depthmap_rejects_negative_values():
    with pytest.raises(ValueError, match="non-negative"):
        DepthMap(cells=np.array([[-1.0, 2.0]], dtype=np.float32))


# ---------------------------------------------------------------------------
# control-map intersection
# ---------------------------------------------------------------------------


def test_ctrl_map_all_pass():
    cum = CumSegMap(cells=np.full((4, 4), 3), window=3)
    ctrl = make_ctrl_map(cum, np.ones((4, 4), dtype=np.uint8), 1)
    assert ctrl.cells.all()


def test_ctrl_map_depth_annihilates():
    cum = CumSegMap(cells=np.full((4, 4), 3), window=3)
    ctrl = make_ctrl_map(cum, np.zeros((4, 4), dtype=np.uint8), 1)
    assert not ctrl.cells.any()


def test_ctrl_map_matches_per_cell_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        cum = CumSegMap(cells=rng.integers(0, 4, (8, 8)), window=3)
        mask = rng.integers(0, 2, (8, 8)).astype(np.uint8)
        got = make_ctrl_map(cum, mask, 2)
        for i in range(8):
            for j in range(8):
                want = 1 if cum.cells[i, j] >= 2 and mask[i, j] == 1 else 0
                assert got.cells[i, j] == want


def test_ctrl_map_popcount_bound():
    rng = np.random.default_rng(6)
    for _ in range(30):
        cum = CumSegMap(cells=rng.integers(0, 4, (8, 8)), window=3)
        mask = rng.integers(0, 2, (8, 8)).astype(np.uint8)
        ctrl = make_ctrl_map(cum, mask, 2)
        assert ctrl.cells.sum() <= min((cum.cells >= 2).sum(), mask.sum())


def test_ctrl_map_rejects_dimension_mismatch():
    cum = CumSegMap(cells=np.zeros((4, 4), dtype=int), window=3)
    with pytest.raises(ValueError, match="mismatch"):
        make_ctrl_map(cum, np.zeros((4, 5), dtype=np.uint8), 1)


def test_raster_config_validation():
    with pytest.raises(ValueError):
        RasterConfig(l_depth=0.0)
    with pytest.raises(ValueError):
        RasterConfig(l_depth=1.5)
    with pytest.raises(ValueError):
        RasterConfig(s_window=3, fusion_threshold=4)
    cfg = RasterConfig()
    assert (cfg.s_window, cfg.l_depth, cfg.fusion_threshold) == (3, 0.5, 1)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def test_mask_roundtrip_checkerboard(tmp_path):
    cells = np.indices((8, 8)).sum(axis=0) % 2
    m = seg(cells, t=12)
    path = tmp_path / "mask_000012.png"
    save_mask(m, path)
    back = load_mask(path)
    assert np.array_equal(back.cells, m.cells)
    assert back.timestamp == 12  # parsed from the filename


def test_mask_rejects_stray_values(tmp_path):
    from PIL import Image

    arr = np.zeros((4, 4), dtype=np.uint8)
    arr[1, 1] = 7
    path = tmp_path / "bad.png"
    Image.fromarray(arr, mode="L").save(path)
    with pytest.raises(ValueError, match="malformed"):
        load_mask(path)


def test_depth_png_millimeter_quantization(tmp_path):
    cells = np.array([[1.234, 0.5], [4.0, np.nan]], dtype=np.float32)
    path = tmp_path / "depth.png"
    save_depth(DepthMap(cells=cells), path)
    back = load_depth(path)
    assert back.cells[0, 0] == np.float32(1234 / 1000.0)
    assert back.cells[0, 1] == np.float32(0.5)
    assert np.isnan(back.cells[1, 1])  # invalid survives as no-return


def test_depth_raw_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    cells = rng.uniform(0, 10, (6, 5)).astype(np.float32)
    cells[0, 0] = np.nan
    path = tmp_path / "depth.raw"
    save_depth(DepthMap(cells=cells), path)
    back = load_depth(path)
    assert np.array_equal(back.cells, cells, equal_nan=True)


def test_depth_raw_rejects_truncation(tmp_path):
    path = tmp_path / "depth.raw"
    save_depth(DepthMap(cells=np.ones((4, 4), dtype=np.float32)), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(ValueError, match="malformed"):
        load_depth(path)


def test_load_with_shape_bounds(tmp_path):
    m = seg(np.zeros((4, 4)))
    path = tmp_path / "m_0.png"
    save_mask(m, path)
    with pytest.raises(ValueError, match="shape"):
        load_mask(path, expect_shape=(8, 8))


def test_manifest_parsing(tmp_path):
    (tmp_path / "frames").mkdir()
    manifest = tmp_path / "frames" / "index.txt"
    manifest.write_text(
        "# comment\n"
        "0 m0.png d0.png center\n"
        "\n"
        "1 m1.png d1.png center\n"
        "2 m2.png d2.png\n"
    )
    entries = load_manifest(manifest)
    assert [e.frame_index for e in entries] == [0, 1, 2]
    assert entries[0].mask_path == tmp_path / "frames" / "m0.png"
    assert entries[0].label == "center"
    assert entries[2].label is None


def test_manifest_rejects_bad_lines(tmp_path):
    manifest = tmp_path / "index.txt"
    manifest.write_text("0 only_two.png\n")
    with pytest.raises(ValueError, match="fields"):
        load_manifest(manifest)
    manifest.write_text("x m.png d.png\n")
    with pytest.raises(ValueError, match="integer"):
        load_manifest(manifest)


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------


def test_fusion_linearity_random_windows():
    rng = np.random.default_rng(99)
    for _ in range(30):
        h, w = rng.integers(2, 12, 2)
        s = int(rng.integers(1, 5))
        maps = [seg(rng.integers(0, 2, (h, w)), t) for t in range(s)]
        cum = fuse_segmentations(maps)
        stacked = np.stack([m.cells for m in maps])
        assert np.array_equal(cum.cells, stacked.sum(axis=0))
        assert cum.cells.max() <= s


def test_frame_buffer_keeps_latest_window():
    from vinenav.raster import FrameBuffer

    buf = FrameBuffer(window=3)
    depths = []
    for t in range(5):
        d = DepthMap(cells=np.full((2, 2), float(t + 1), dtype=np.float32))
        depths.append(d)
        buf.push(seg(np.zeros((2, 2)), t), d)
        snap = buf.snapshot()
        if t < 2:
            assert snap is None
        else:
            masks, depth = buf.snapshot()
            assert [m.timestamp for m in masks] == [t - 2, t - 1, t]
            assert depth is depths[-1]
    with pytest.raises(ValueError):
        FrameBuffer(window=0)


def test_frame_buffer_concurrent_producer():
    import threading

    from vinenav.raster import FrameBuffer

    buf = FrameBuffer(window=3)

    def produce():
        for t in range(300):
            d = DepthMap(cells=np.full((2, 2), 1.0, dtype=np.float32))
            buf.push(seg(np.zeros((2, 2)), t), d)

    thread = threading.Thread(target=produce)
    thread.start()
    consecutive_ok = True
    while thread.is_alive():
        snap = buf.snapshot()
        if snap is not None:
            masks, _ = snap
            ts = [m.timestamp for m in masks]
            consecutive_ok &= ts == list(range(ts[0], ts[0] + 3))
    thread.join()
    assert consecutive_ok
    masks, _ = buf.snapshot()
    assert [m.timestamp for m in masks] == [297, 298, 299]


def test_maps_are_immutable():
    m = seg(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        m.cells[0, 0] = 1
    d = DepthMap(cells=np.ones((2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        d.cells[0, 0] = 2.0
    c = CtrlMap(cells=np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ValueError):
        c.cells[0, 0] = 1
