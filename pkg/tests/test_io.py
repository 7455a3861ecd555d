import numpy as np
import pytest

from trusskit import io as tio
from trusskit.errors import (
    ConfigRangeError,
    ConfigTypeError,
    LengthMismatchError,
    MalformedHeaderError,
    MissingAttributesError,
    MissingXyzError,
    TrussKitError,
    TruncatedBodyError,
    UnknownKeyError,
)
from trusskit.geom import LabeledCloud, Pose, estimate_normals


def random_cloud(rng, n, with_pose=True):
    pose = Pose((1.0, -2.0, 3.0), (1.0, 0.0, 0.0, 0.0)) if with_pose else Pose()
    return LabeledCloud(rng.normal(size=(n, 3)) * 5,
                        rng.integers(0, 40, n), sensor_pose=pose)


class TestPcdRoundTrip:
    def test_empty_cloud(self):
        blob = tio.write_pcd(LabeledCloud(np.zeros((0, 3))))
        text_head = blob[:200].decode()
        assert "POINTS 0" in text_head
        back = tio.read_pcd(blob)
        assert len(back) == 0

    def test_binary_bit_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            cloud = random_cloud(rng, int(rng.integers(1, 300)))
            blob = tio.write_pcd(cloud, mode="binary")
            back = tio.read_pcd(blob)
            assert np.array_equal(back.points.astype(np.float32),
                                  cloud.points.astype(np.float32))
            assert np.array_equal(back.face_label, cloud.face_label)
            assert back.sensor_pose == cloud.sensor_pose
            # byte determinism
            assert blob == tio.write_pcd(cloud, mode="binary")

    def test_ascii_binary_agree(self):
        rng = np.random.default_rng(1)
        cloud = random_cloud(rng, 64)
        a = tio.read_pcd(tio.write_pcd(cloud, mode="ascii"))
        b = tio.read_pcd(tio.write_pcd(cloud, mode="binary"))
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.face_label, b.face_label)

    def test_minimal_ascii_file(self):
        text = ("VERSION .7\nFIELDS x y z label\nSIZE 4 4 4 4\n"
                "TYPE F F F U\nCOUNT 1 1 1 1\nWIDTH 2\nHEIGHT 1\n"
                "VIEWPOINT 0 0 0 1 0 0 0\nPOINTS 2\nDATA ascii\n"
                "0.5 0 1 0\n1 2 3 7\n")
        cloud = tio.read_pcd(text.encode())
        assert len(cloud) == 2
        assert cloud.face_label.tolist() == [0, 7]

    def test_truncated_body(self):
        text = ("VERSION .7\nFIELDS x y z label\nSIZE 4 4 4 4\n"
                "TYPE F F F U\nCOUNT 1 1 1 1\nWIDTH 10\nHEIGHT 1\n"
                "POINTS 10\nDATA ascii\n" + "1 2 3 0\n" * 9)
        with pytest.raises(TruncatedBodyError):
            tio.read_pcd(text.encode())
        cloud = random_cloud(np.random.default_rng(2), 10)
        blob = tio.write_pcd(cloud, mode="binary")
        with pytest.raises(TruncatedBodyError):
            tio.read_pcd(blob[:-4])

    def test_intensity_carries_labels(self):
        text = ("VERSION .7\nFIELDS x y z intensity\nSIZE 4 4 4 4\n"
                "TYPE F F F F\nCOUNT 1 1 1 1\nWIDTH 3\nHEIGHT 1\n"
                "POINTS 3\nDATA ascii\n"
                "0 0 0 0.0\n1 0 0 4.0\n0 1 0 17.2\n")
        cloud = tio.read_pcd(text.encode())
        assert cloud.face_label.tolist() == [0, 4, 17]

    def test_column_order_and_extra_fields(self):
        text = ("VERSION .7\nFIELDS label z y x extra\nSIZE 4 4 4 4 8\n"
                "TYPE U F F F F\nCOUNT 1 1 1 1 1\nWIDTH 1\nHEIGHT 1\n"
                "POINTS 1\nDATA ascii\n9 3 2 1 0.25\n")
        cloud = tio.read_pcd(text.encode())
        assert np.allclose(cloud.points[0], [1, 2, 3])
        assert cloud.face_label[0] == 9

    def test_missing_xyz(self):
        text = ("VERSION .7\nFIELDS x y label\nSIZE 4 4 4\nTYPE F F U\n"
                "COUNT 1 1 1\nWIDTH 1\nHEIGHT 1\nPOINTS 1\nDATA ascii\n1 2 0\n")
        with pytest.raises(MissingXyzError):
            tio.read_pcd(text.encode())

    def test_fuzzed_headers_raise_typed_errors(self):
        rng = np.random.default_rng(3)
        base = tio.write_pcd(random_cloud(rng, 20), mode="binary")
        junk = [b"", b"\x00\x01\x02", b"VERSION .7\n", b"DATA binary\n",
                b"not a pcd at all\n\n\n"]
        for blob in junk:
            with pytest.raises(TrussKitError):
                tio.read_pcd(blob)
        for _ in range(300):
            mutated = bytearray(base)
            for _ in range(rng.integers(1, 8)):
                pos = rng.integers(0, min(len(mutated), 180))
                mutated[pos] = rng.integers(0, 256)
            try:
                tio.read_pcd(bytes(mutated))
            except TrussKitError:
                pass   # typed rejection is the contract

    def test_unsupported_data_mode(self):
        text = ("VERSION .7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\n"
                "COUNT 1 1 1\nWIDTH 0\nHEIGHT 0\nPOINTS 0\n"
                "DATA binary_compressed\n")
        with pytest.raises(MalformedHeaderError):
            tio.read_pcd(text.encode())


class TestFeatureExport:
    def make(self, rng, n=100):
        pts = np.column_stack([rng.uniform(-1, 1, (n, 2)), np.zeros(n)])
        cloud = LabeledCloud(pts, rng.integers(0, 3, n))
        normals, curv = estimate_normals(cloud, k=10, viewpoint=(0, 0, 5))
        return cloud, normals, curv

    def test_plane_curvature_zero_column(self, tmp_path):
        cloud, normals, curv = self.make(np.random.default_rng(4))
        path = tmp_path / "f.pcd"
        tio.export_features(cloud, normals, curv, path)
        _, arrays = tio.read_pcd_arrays(path)
        assert set(arrays) == {"x", "y", "z", "nx", "ny", "nz",
                               "curvature", "label"}
        assert np.abs(arrays["curvature"]).max() <= 1e-9

    def test_round_trip_and_unit_norms(self, tmp_path):
        cloud, normals, curv = self.make(np.random.default_rng(5))
        blob = tio.export_features(cloud, normals, curv)
        _, arrays = tio.read_pcd_arrays(blob)
        got = np.column_stack([arrays["nx"], arrays["ny"], arrays["nz"]])
        assert np.abs(np.linalg.norm(got, axis=1) - 1.0).max() <= 1e-6
        assert np.array_equal(arrays["label"],
                              cloud.face_label.astype(np.uint32))
        assert np.array_equal(
            np.column_stack([arrays["x"], arrays["y"], arrays["z"]]),
            cloud.points.astype(np.float32))

    def test_missing_attributes(self):
        cloud = LabeledCloud(np.zeros((4, 3)))
        with pytest.raises(MissingAttributesError):
            tio.export_features(cloud)


class TestPlyExport:
    def test_perfect_prediction_colors(self):
        rng = np.random.default_rng(6)
        cloud = random_cloud(rng, 40)
        truth = cloud.truss_mask
        text = tio.export_ply_colored(cloud, truth, truth)
        body = text.split("end_header\n")[1].strip().splitlines()
        colors = {tuple(int(v) for v in line.split()[3:]) for line in body}
        assert colors <= {(0, 255, 0), (0, 0, 0)}

    def test_inverted_prediction_colors(self):
        rng = np.random.default_rng(7)
        cloud = random_cloud(rng, 40)
        truth = cloud.truss_mask
        text = tio.export_ply_colored(cloud, ~truth, truth)
        body = text.split("end_header\n")[1].strip().splitlines()
        colors = {tuple(int(v) for v in line.split()[3:]) for line in body}
        assert colors <= {(255, 0, 0), (255, 165, 0)}

    def test_vertex_count_and_no_truth(self, tmp_path):
        rng = np.random.default_rng(8)
        for n in (1, 17, 230):
            cloud = random_cloud(rng, n)
            pred = rng.random(n) < 0.5
            path = tmp_path / f"v{n}.ply"
            tio.export_ply_colored(cloud, pred, None, path)
            text = path.read_text()
            assert f"element vertex {n}" in text
            assert len(text.split("end_header\n")[1].strip().splitlines()) == n

    def test_length_mismatch(self):
        cloud = LabeledCloud(np.zeros((3, 3)))
        with pytest.raises(LengthMismatchError):
            tio.export_ply_colored(cloud, [True] * 2)


class TestConfig:
    def test_empty_file_all_defaults(self):
        cfg = tio.loads_config("")
        assert cfg.pipeline.voxel_leaf == 0.1
        assert cfg.pipeline.ransac_threshold == 0.5
        assert cfg.pipeline.density_radius == 0.25
        assert cfg.pipeline.density_min_points == 10
        assert cfg.sensor.v_resolution == 128
        assert cfg.sensor.h_resolution == 512
        assert cfg.sensor.noise_sigma == 0.008
        assert cfg.scene.structure is None

    def test_range_error_names_key(self):
        with pytest.raises(ConfigRangeError) as err:
            tio.loads_config("[pipeline]\nratio_threshold = 1.5\n")
        assert "ratio_threshold" in str(err.value)

    def test_unknown_key_named(self):
        with pytest.raises(UnknownKeyError) as err:
            tio.loads_config("[pipeline]\nvoxel_lief = 0.1\n")
        assert "voxel_lief" in str(err.value)
        with pytest.raises(UnknownKeyError):
            tio.loads_config("[nonsense]\nx = 1\n")

    def test_type_error(self):
        with pytest.raises(ConfigTypeError):
            tio.loads_config("[pipeline]\nnormal_k = thirty\n")
        with pytest.raises(ConfigTypeError):
            tio.loads_config("[truss]\nnode_counts = 2 2\n")

    def test_full_round_trip_idempotent(self, tmp_path):
        text = """
[sensor]
v_resolution = 32
h_resolution = 128
noise_sigma = 0.004

[truss]
node_counts = 6 5 10
crossed = true
label_mode = per_bar

[scene]
tree_count = 7
seed = 3

[boxes]
count = 12

[pipeline]
eigen_mode = magnitude
rg_min_cluster = 20

[dataset]
n_scans = 5
seed = 11
"""
        path = tmp_path / "run.cfg"
        path.write_text(text)
        cfg = tio.load_config(path)
        assert cfg.scene.structure.node_counts == (6, 5, 10)
        assert cfg.scene.structure.crossed is True
        assert cfg.scene.boxes.count == 12
        assert cfg.pipeline.eigen_mode == "magnitude"
        again = tio.loads_config(tio.dump_config(cfg))
        assert again == cfg
        third = tio.loads_config(tio.dump_config(again))
        assert third == cfg

    def test_overrides_validated(self):
        cfg = tio.loads_config("", overrides={"pipeline.normal_k": "12"})
        assert cfg.pipeline.normal_k == 12
        with pytest.raises(UnknownKeyError):
            tio.loads_config("", overrides={"pipeline.nope": "1"})
        with pytest.raises(ConfigRangeError):
            tio.loads_config("", overrides={"sensor.v_resolution": "0"})
