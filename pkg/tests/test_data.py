import numpy as np
import pytest

from heatgen.data import (
    CELEBAHQ_TEST_COUNT,
    CELEBAHQ_TRAIN_COUNT,
    SHAPENET_CHAIR_TEST_COUNT,
    SHAPENET_CHAIR_TRAIN_COUNT,
    TexturedSample,
    atlas_to_vertices,
    bake_image_to_vertices,
    build_batch,
    face_colors_from_atlas,
    from_model_space,
    load_field,
    load_sample,
    read_split,
    sample_image_bilinear,
    save_field,
    to_model_space,
    write_split,
)
from heatgen.fields import SignalField
from heatgen.mesh import Mesh
from heatgen.procedural import make_grid, make_icosphere


@pytest.fixture(scope="module")
def sphere():
    return make_icosphere(1)


@pytest.fixture(scope="module")
def sphere_uv(sphere):
    v = sphere.vertices
    u = (np.arctan2(v[:, 1], v[:, 0]) / (2 * np.pi)) % 1.0
    w = (v[:, 2] + 1.0) / 2.0
    return np.stack([u, w], axis=1)


class TestBaking:
    def test_constant_gray_image(self, sphere, sphere_uv):
        image = np.full((16, 16, 3), 0.5)
        sample = bake_image_to_vertices(image, sphere_uv, sphere, "gray")
        assert np.allclose(sample.colors.values, 0.5, atol=1e-12)
        assert sample.source_id == "gray"
        assert sample.mesh_id == sphere.mesh_id

    def test_corner_texel_exact(self):
        # uv = (0, 0) addresses the bottom-left texel under the
        # bottom-origin v convention
        image = np.zeros((2, 2, 3))
        image[1, 0] = [0.2, 0.4, 0.6]   # bottom-left in row-major storage
        out = sample_image_bilinear(image, np.array([[0.0, 0.0]]))
        assert np.allclose(out[0], [0.2, 0.4, 0.6], atol=1e-15)

    def test_all_four_corners(self):
        image = np.zeros((2, 2, 1))
        image[0, 0], image[0, 1] = 1.0, 2.0   # top row
        image[1, 0], image[1, 1] = 3.0, 4.0   # bottom row
        uv = np.array([[0, 1], [1, 1], [0, 0], [1, 0]], dtype=float)
        out = sample_image_bilinear(image, uv)[:, 0]
        assert np.array_equal(out, [1.0, 2.0, 3.0, 4.0])

    def test_bilinear_midpoint(self):
        image = np.zeros((2, 2, 1))
        image[0, 0], image[0, 1], image[1, 0], image[1, 1] = 1, 2, 3, 4
        out = sample_image_bilinear(image, np.array([[0.5, 0.5]]))
        assert np.isclose(out[0, 0], 2.5)

    def test_uv_outside_clamps_with_warning(self):
        image = np.full((4, 4, 3), 0.25)
        with pytest.warns(UserWarning, match="clamp"):
            out = sample_image_bilinear(image, np.array([[1.5, -0.5]]))
        assert np.allclose(out, 0.25)

    def test_missing_uv_rejected(self, sphere):
        with pytest.raises(ValueError, match="uv"):
            bake_image_to_vertices(np.zeros((4, 4, 3)), None, sphere)

    def test_uv_count_mismatch(self, sphere):
        with pytest.raises(ValueError, match="count"):
            bake_image_to_vertices(np.zeros((4, 4, 3)),
                                   np.zeros((7, 2)), sphere)

    def test_deterministic_bytes(self, tmp_path, sphere, sphere_uv, rng):
        image = rng.uniform(size=(8, 8, 3))
        s1 = bake_image_to_vertices(image, sphere_uv, sphere, "x")
        s2 = bake_image_to_vertices(image, sphere_uv, sphere, "x")
        p1, p2 = tmp_path / "a.hgtx", tmp_path / "b.hgtx"
        save_field(s1, p1)
        save_field(s2, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestAtlas:
    def test_constant_color(self, sphere):
        colors = np.tile([0.3, 0.6, 0.9], (sphere.n_faces, 1))
        sample = atlas_to_vertices(colors, sphere)
        assert np.allclose(sample.colors.values, [0.3, 0.6, 0.9], atol=1e-12)

    def test_area_weighted_average(self):
        # vertex 0 is shared by two faces with areas 1 and 3 and colors 0, 1
        verts = [[0, 0, 0], [2, 0, 0], [0, 1, 0], [-6, 0, 0], [0, -1, 0]]
        m = Mesh(verts, [[0, 1, 2], [0, 3, 4]])
        assert np.allclose(m.face_areas, [1.0, 3.0])
        colors = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        sample = atlas_to_vertices(colors, m)
        assert np.allclose(sample.colors.values[0], 0.75)

    def test_convex_combination(self, sphere, rng):
        colors = rng.uniform(size=(sphere.n_faces, 3))
        sample = atlas_to_vertices(colors, sphere)
        for i in range(0, sphere.n_vertices, 5):
            incident = sphere.vertex_faces(i)
            lo = colors[incident].min(axis=0) - 1e-12
            hi = colors[incident].max(axis=0) + 1e-12
            assert (sample.colors.values[i] >= lo).all()
            assert (sample.colors.values[i] <= hi).all()

    def test_vertex_without_faces_rejected(self):
        m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [9, 9, 9]], [[0, 1, 2]])
        with pytest.raises(ValueError, match="vertex 3"):
            atlas_to_vertices(np.zeros((1, 3)), m)

    def test_shape_check(self, sphere):
        with pytest.raises(ValueError, match="face colors"):
            atlas_to_vertices(np.zeros((3, 3)), sphere)

    def test_face_colors_from_atlas_centroids(self):
        image = np.full((4, 4, 3), 0.5)
        out = face_colors_from_atlas(image, np.array([[0.5, 0.5], [0.1, 0.9]]))
        assert np.allclose(out, 0.5)


class TestBatching:
    def test_exact_fit_no_padding(self, rng):
        f = SignalField(rng.uniform(0, 1, size=(10, 3)), "aa")
        batch = build_batch([f], capacity=10)
        assert batch.mask.all()
        assert np.array_equal(batch.counts, [10])

    def test_two_sizes_masked(self, rng):
        fa = SignalField(rng.uniform(0, 1, size=(10, 3)), "aa")
        fb = SignalField(rng.uniform(0, 1, size=(20, 3)), "bb")
        batch = build_batch([fa, fb], capacity=32)
        assert batch.values.shape == (2, 32, 3)
        assert batch.mask[0].sum() == 10
        assert batch.mask[1].sum() == 20
        assert np.abs(batch.values[0, 10:]).max() == 0.0
        assert batch.mesh_ids == ["aa", "bb"]

    def test_oversize_rejected(self, rng):
        f = SignalField(rng.uniform(0, 1, size=(100, 3)), "aa")
        with pytest.raises(ValueError, match="decimate"):
            build_batch([f], capacity=64)

    def test_textured_samples_accepted(self, sphere, rng):
        s = TexturedSample(
            SignalField(rng.uniform(0, 1, size=(sphere.n_vertices, 3)),
                        sphere.mesh_id), "t0")
        batch = build_batch([s], capacity=64)
        assert batch.source_ids == ["t0"]

    def test_default_capacity(self):
        from heatgen.data import DEFAULT_CAPACITY

        assert DEFAULT_CAPACITY == 60_000


class TestFieldFiles:
    def test_roundtrip(self, tmp_path, sphere, rng):
        values = rng.uniform(0, 1, size=(sphere.n_vertices, 3)).astype(np.float32)
        sample = TexturedSample(
            SignalField(values.astype(np.float64), sphere.mesh_id), "src-1")
        path = tmp_path / "s.hgtx"
        save_field(sample, path)
        back, source_id = load_field(path)
        assert source_id == "src-1"
        assert back.mesh_id == sphere.mesh_id
        assert np.array_equal(back.values, values.astype(np.float64))

    def test_load_sample_range_checked(self, tmp_path, rng):
        field = SignalField(rng.uniform(2.0, 3.0, size=(5, 3)), "")
        path = tmp_path / "bad.hgtx"
        save_field(field, path)
        load_field(path)  # raw load is fine
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            load_sample(path)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.hgtx"
        p.write_bytes(b"JUNKJUNKJUNK" + b"\x00" * 64)
        with pytest.raises(ValueError, match="not a baked field"):
            load_field(p)

    def test_textured_sample_validation(self, rng):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            TexturedSample(SignalField(rng.uniform(-2, -1, size=(4, 3))), "x")
        with pytest.raises(ValueError, match="3 channels"):
            TexturedSample(SignalField(rng.uniform(0, 1, size=(4, 2))), "x")


class TestSplits:
    def test_roundtrip(self, tmp_path):
        ids = [f"img{i:05d}.png" for i in range(10)]
        path = tmp_path / "split.txt"
        write_split(ids, path)
        assert read_split(path) == ids

    def test_blank_lines_skipped(self, tmp_path):
        p = tmp_path / "s.txt"
        p.write_text("a.png\n\n  \nb.png\n")
        assert read_split(p) == ["a.png", "b.png"]

    def test_reference_corpus_sizes(self):
        # documented split sizes of the reference datasets
        assert CELEBAHQ_TRAIN_COUNT == 24_183
        assert CELEBAHQ_TEST_COUNT == 2_824
        assert CELEBAHQ_TRAIN_COUNT + CELEBAHQ_TEST_COUNT <= 30_000
        assert SHAPENET_CHAIR_TRAIN_COUNT == 2_412
        assert SHAPENET_CHAIR_TEST_COUNT == 311


class TestModelSpace:
    def test_roundtrip(self, rng):
        x = rng.uniform(0, 1, size=(10, 3))
        assert np.allclose(from_model_space(to_model_space(x)), x, atol=1e-15)

    def test_ranges(self):
        assert to_model_space(np.array(0.0)) == -1.0
        assert to_model_space(np.array(1.0)) == 1.0
        assert from_model_space(np.array(-1.0)) == 0.0
