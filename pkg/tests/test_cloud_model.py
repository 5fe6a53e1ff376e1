import struct

import numpy as np
import pytest

from helpers import make_cloud
from towerseg.cloud_model import (HEADER_SIZE, ClassLabel, GroundModel, HeightFrame, LoadError,
                                  PointCloud, Window, decode_binary, encode_binary, read_ground,
                                  read_tile, scale_radiometry, split_blocks_train_test, write_ground,
                                  write_tile)


def test_empty_cloud_round_trip(tmp_path):
    cloud = PointCloud(np.zeros((0, 8)), [], HeightFrame.HAS)
    write_tile(cloud, tmp_path / "e.pct")
    raw = (tmp_path / "e.pct").read_bytes()
    assert len(raw) == HEADER_SIZE == 13
    back = read_tile(tmp_path / "e.pct")
    assert len(back) == 0 and back.height_frame == HeightFrame.HAS


@pytest.mark.parametrize("fmt", ["binary", "csv"])
def test_round_trip_1000_points(tmp_path, fmt):
    cloud = make_cloud(1000, seed=3, frame=HeightFrame.HAS)
    path = tmp_path / f"c.{fmt}"
    write_tile(cloud, path, fmt)
    back = read_tile(path, fmt)
    assert back.height_frame == HeightFrame.HAS
    np.testing.assert_array_equal(back.data, cloud.data)
    np.testing.assert_array_equal(back.labels, cloud.labels)


def test_same_cloud_written_twice_is_byte_identical(tmp_path):
    cloud = make_cloud(200, seed=1)
    write_tile(cloud, tmp_path / "a.pct")
    write_tile(cloud, tmp_path / "b.pct")
    assert (tmp_path / "a.pct").read_bytes() == (tmp_path / "b.pct").read_bytes()


def test_binary_layout_matches_documented_header():
    cloud = make_cloud(3, seed=2, frame=HeightFrame.HAG)
    raw = encode_binary(cloud)
    assert raw[:4] == b"PCT1"
    frame, count = struct.unpack_from("<BQ", raw, 4)
    assert (frame, count) == (1, 3)
    assert len(raw) == 13 + 3 * 33
    first = struct.unpack_from("<8fB", raw, 13)
    np.testing.assert_array_equal(np.float32(first[:8]), cloud.data[0])
    assert first[8] == cloud.labels[0]


def test_radiometry_out_of_range_rejected_before_writing(tmp_path):
    cloud = make_cloud(10)
    data = cloud.data.copy()
    data[4, 5] = 1.5
    bad = PointCloud(data, cloud.labels, cloud.height_frame)
    with pytest.raises(ValueError):
        write_tile(bad, tmp_path / "bad.pct")
    assert not (tmp_path / "bad.pct").exists()


def test_csv_nan_reports_line(tmp_path):
    path = tmp_path / "n.csv"
    path.write_text("x,y,z,intensity,r,g,b,nir,label\n"
                    "1,2,3,0.1,0.1,0.1,0.1,0.1,2\n"
                    "1,2,NaN,0.1,0.1,0.1,0.1,0.1,2\n")
    with pytest.raises(LoadError) as err:
        read_tile(path, "csv")
    assert err.value.offset == 2
    assert "line 2" in str(err.value)


def test_binary_errors_carry_byte_offsets():
    raw = encode_binary(make_cloud(4))
    with pytest.raises(LoadError) as err:
        decode_binary(raw[:-5])
    assert err.value.offset == 13 + 3 * 33
    with pytest.raises(LoadError) as err:
        decode_binary(b"PCTX" + raw[4:])
    assert err.value.offset == 0
    broken = bytearray(raw)
    broken[13 + 33 + 8:13 + 33 + 12] = struct.pack("<f", float("inf"))
    with pytest.raises(LoadError) as err:
        decode_binary(bytes(broken))
    assert err.value.offset == 13 + 33 + 8


def test_read_preserves_order_of_intensity_ramp(tmp_path):
    cloud = make_cloud(500, seed=9)
    data = cloud.data.copy()
    data[:, 3] = np.linspace(0, 1, 500, dtype=np.float32)
    write_tile(PointCloud(data, cloud.labels, cloud.height_frame), tmp_path / "r.pct")
    back = read_tile(tmp_path / "r.pct")
    assert np.all(np.diff(back.data[:, 3]) > 0)


def test_csv_nine_digits_reparse_to_same_float32(tmp_path, rng):
    data = rng.uniform(-1e4, 1e4, size=(300, 8)).astype(np.float32)
    data[:, 3:] = rng.uniform(0, 1, size=(300, 5))
    cloud = PointCloud(data, np.full(300, 3), HeightFrame.HAS)
    write_tile(cloud, tmp_path / "p.csv", "csv")
    np.testing.assert_array_equal(read_tile(tmp_path / "p.csv", "csv").data, data)


def test_bounds_enclose_points_and_invalid_bounds_rejected():
    cloud = make_cloud(50)
    xmin, ymin, xmax, ymax = cloud.bounds
    assert xmin <= cloud.x.min() and cloud.x.max() <= xmax
    assert ymin <= cloud.y.min() and cloud.y.max() <= ymax
    with pytest.raises(ValueError):
        PointCloud(cloud.data, cloud.labels, cloud.height_frame, (50, 50, 51, 51)).validate()


def test_scale_radiometry_16bit():
    np.testing.assert_allclose(scale_radiometry(np.array([0, 65535])), [0.0, 1.0])


def test_window_contains_target_follows_labels():
    data = np.zeros((3, 8), dtype=np.float32)
    data[:, :2] = 20.0
    w = Window(20, 20, 40, data, [ClassLabel.BACKGROUND] * 3)
    assert not w.contains_target
    w2 = Window(20, 20, 40, data, [ClassLabel.BACKGROUND, ClassLabel.TOWER, ClassLabel.GROUND])
    assert w2.contains_target
    assert w2.window_id == "@20.000,20.000"


def test_ground_round_trip_and_lookup(tmp_path):
    elev = np.arange(12, dtype=float).reshape(3, 4) + 100.0
    g = GroundModel(10.0, 20.0, 2.0, elev)
    write_ground(g, tmp_path / "g.csv")
    back = read_ground(tmp_path / "g.csv")
    np.testing.assert_array_equal(back.elevation, elev)
    assert (back.origin_x, back.origin_y, back.cell_size) == (10.0, 20.0, 2.0)
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[:5]] == ["origin_x", "origin_y", "cell_size", "rows", "cols"]
    # row 0 is the southern edge; far edges are closed
    assert back.elevation_at([10.5], [20.5])[0] == 100.0
    assert back.elevation_at([18.0], [26.0])[0] == 111.0
    with pytest.raises(ValueError):
        back.elevation_at([9.9], [21.0])


def test_split_blocks_examples():
    towers = {f"t{i}" for i in range(10)}
    everything = towers | {f"n{i}" for i in range(5)}
    train, test = split_blocks_train_test(towers, everything, 0.1, seed=4)
    assert len(test) == 1 and test <= towers
    assert train | test == everything and not train & test
    assert split_blocks_train_test(towers, everything, 0.1, seed=4) == (train, test)

    towers98 = {f"t{i}" for i in range(98)}
    _, test98 = split_blocks_train_test(towers98, towers98, 0.1, seed=0)
    assert 10 <= len(test98) <= 11

    with pytest.raises(ValueError):
        split_blocks_train_test(set(), everything, 0.1)
    with pytest.raises(ValueError):
        split_blocks_train_test(towers, everything, 1.0)
