"""World generator statistics, class remapping, NSRT round-trips."""

import numpy as np
import pytest

from crossres.data import (
    CCLC_CLASSES, NLCD_CLASSES, TARGET_CLASSES, ClassMap, DataError, FormatError,
    RasterTensor, SceneSpec, checkpoint_read, checkpoint_write, crop_patches,
    default_class_map, raster_read, raster_write, remap_classes, synth_world,
)


class TestSynthWorld:
    def test_noise_free_world_outdated_equals_truth_blocks(self):
        spec = SceneSpec(size=64, blobs=1, rho_mis=0.0, rho_chg=0.0, block=8, seed=3)
        _, truth, outdated = synth_world(spec)
        assert len(np.unique(truth)) == 1
        np.testing.assert_array_equal(truth, outdated)

    def test_corruption_rate_binomial(self):
        # 10000 blocks at rho_mis = 0.2: observed fraction within 3 sigma
        spec = SceneSpec(size=800, blobs=8, rho_mis=0.2, rho_chg=0.0, block=8, seed=4)
        _, truth, outdated = synth_world(spec)
        tb = truth.reshape(100, 8, 100, 8).transpose(0, 2, 1, 3)
        ob = outdated.reshape(100, 8, 100, 8).transpose(0, 2, 1, 3)
        # block-majority of truth (no temporal change applied here)
        from crossres.data import _block_majority
        majority = _block_majority(truth, 8, 4)
        flipped = (ob[:, :, 0, 0] != majority).mean()
        sigma = np.sqrt(0.2 * 0.8 / 10000)
        assert abs(flipped - 0.2) <= 3 * sigma

    def test_deterministic_per_seed(self):
        spec = SceneSpec(size=64, seed=5)
        a = synth_world(spec)
        b = synth_world(spec)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_seed_override(self):
        spec = SceneSpec(size=64, seed=5)
        a = synth_world(spec, seed=6)
        b = synth_world(spec, seed=5)
        assert not np.array_equal(a[1], b[1])

    def test_block_interior_reproduction_when_clean(self):
        # blobs much larger than blocks: away from boundaries the LR product
        # reproduces the truth exactly when both noise rates are zero
        spec = SceneSpec(size=128, blobs=4, rho_mis=0.0, rho_chg=0.0, block=8, seed=7)
        _, truth, outdated = synth_world(spec)
        boundary = np.zeros_like(truth, dtype=bool)
        diff = (truth[1:, :] != truth[:-1, :])
        boundary[1:, :] |= diff
        boundary[:-1, :] |= diff
        diffc = (truth[:, 1:] != truth[:, :-1])
        boundary[:, 1:] |= diffc
        boundary[:, :-1] |= diffc
        # dilate boundary to the block footprint
        blocks_touching = boundary.reshape(16, 8, 16, 8).any(axis=(1, 3))
        interior = ~blocks_touching.repeat(8, axis=0).repeat(8, axis=1)
        assert interior.any()
        np.testing.assert_array_equal(truth[interior], outdated[interior])

    def test_image_statistics(self):
        spec = SceneSpec(size=128, seed=8)
        image, truth, _ = synth_world(spec)
        assert image.shape == (128, 128, 4) and image.dtype == np.float32
        from crossres.data import CLASS_MEANS
        for k in range(4):
            sel = truth == k
            if sel.sum() > 500:
                got = image[sel].mean(axis=0)
                np.testing.assert_allclose(got, CLASS_MEANS[k], atol=0.02)

    def test_invalid_spec(self):
        with pytest.raises(DataError):
            SceneSpec(size=60, block=8).validate()
        with pytest.raises(DataError):
            SceneSpec(rho_mis=1.5).validate()


class TestClassMap:
    @pytest.mark.parametrize("name,target", [
        ("Open Water", "Water"),
        ("Deciduous Forest", "Tree canopy"),
        ("Cultivated Crops", "Low vegetation"),
        ("Developed High Intensity", "Impervious Surface"),
        ("Perennial Ice/Snow", "Water"),
    ])
    def test_source_product_merges(self, name, target):
        cmap = default_class_map("nlcd")
        assert cmap.target_of(name) == TARGET_CLASSES.index(target)

    @pytest.mark.parametrize("name,target", [
        ("Roads", "Impervious Surface"),
        ("Buildings", "Impervious Surface"),
        ("Barren", "Impervious Surface"),
        ("Tree Canopy", "Tree canopy"),
        ("Water", "Water"),
    ])
    def test_reference_merges(self, name, target):
        cmap = default_class_map("cclc")
        assert cmap.target_of(name) == TARGET_CLASSES.index(target)

    def test_vocabulary_sizes(self):
        assert len(NLCD_CLASSES) == 16 and len(CCLC_CLASSES) == 6
        assert len(default_class_map("nlcd").lookup()) == 16

    def test_remap_raster(self):
        cmap = default_class_map("nlcd")
        labels = np.array([[0, 7], [12, 2]])  # water, forest, pasture, developed
        out = remap_classes(labels, cmap)
        np.testing.assert_array_equal(out, [[3, 2], [1, 0]])

    def test_unmapped_class_named(self):
        cmap = default_class_map("cclc")
        with pytest.raises(DataError, match="17"):
            remap_classes(np.array([[17]]), cmap)
        with pytest.raises(DataError, match="Lava"):
            cmap.target_of("Lava")


class TestCropPatches:
    def test_aligned_offsets(self):
        spec = SceneSpec(size=64, seed=9)
        image, truth, outdated = synth_world(spec)
        patches = crop_patches(image, truth, outdated, n=4, size=32, seed=0)
        assert len(patches) == 4
        for img, tr, od in patches:
            assert img.shape == (32, 32, 4) and tr.shape == (32, 32)
            # crops are aligned: the image crop matches the truth crop's means
            from crossres.data import CLASS_MEANS
            err = np.abs(img - CLASS_MEANS[tr].astype(np.float32)).mean()
            assert err < 0.15

    def test_bounds_sweep(self):
        image = np.zeros((40, 40, 4), dtype=np.float32)
        labels = np.zeros((40, 40), dtype=np.uint8)
        for seed in range(1000):
            for img, tr, od in crop_patches(image, labels, labels, 2, 16, seed):
                assert img.shape == (16, 16, 4)

    def test_oversized_patch_rejected(self):
        image = np.zeros((16, 16, 4), dtype=np.float32)
        labels = np.zeros((16, 16), dtype=np.uint8)
        with pytest.raises(DataError):
            crop_patches(image, labels, labels, 1, 32, 0)

    def test_deterministic(self):
        spec = SceneSpec(size=64, seed=10)
        image, truth, outdated = synth_world(spec)
        a = crop_patches(image, truth, outdated, 3, 16, seed=1)
        b = crop_patches(image, truth, outdated, 3, 16, seed=1)
        for (x, y, z), (u, v, w) in zip(a, b):
            assert np.array_equal(x, u) and np.array_equal(y, v) and np.array_equal(z, w)


class TestNSRT:
    def test_header_arithmetic(self, tmp_path):
        p = tmp_path / "one.nsrt"
        raster_write(p, RasterTensor(np.array([[[7]]], dtype=np.uint8), tag="labels"))
        assert p.stat().st_size == 28 + 1  # header + single u8 payload
        back = raster_read(p)
        assert back.data[0, 0, 0] == 7 and back.tag == "labels"

    def test_roundtrip_bit_exact_sweep(self, tmp_path):
        rng = np.random.default_rng(11)
        for i in range(100):
            dtype = [np.uint8, np.float32, np.float64][i % 3]
            h, w, c = rng.integers(1, 9, size=3)
            if dtype == np.uint8:
                data = rng.integers(0, 256, size=(h, w, c)).astype(dtype)
            else:
                data = rng.normal(size=(h, w, c)).astype(dtype)
            p = tmp_path / f"r{i}.nsrt"
            raster_write(p, RasterTensor(data, tag="image"))
            back = raster_read(p)
            assert back.data.dtype == dtype
            assert np.array_equal(back.data, data)
            assert back.data.tobytes() == data.tobytes()

    def test_corrupt_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.nsrt"
        raster_write(p, RasterTensor(np.zeros((2, 2, 1), dtype=np.float32)))
        raw = bytearray(p.read_bytes())
        raw[0] = ord(b"X")
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            raster_read(p)

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "short.nsrt"
        raster_write(p, RasterTensor(np.zeros((4, 4, 2), dtype=np.float32)))
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(FormatError, match="truncated"):
            raster_read(p)

    def test_unknown_dtype_rejected(self, tmp_path):
        p = tmp_path / "odd.nsrt"
        raster_write(p, RasterTensor(np.zeros((1, 1, 1), dtype=np.uint8)))
        raw = bytearray(p.read_bytes())
        raw[5] = 9  # dtype code
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="dtype"):
            raster_read(p)

    def test_checkpoint_roundtrip(self, tmp_path):
        rng = np.random.default_rng(12)
        params = [("enc.weight", rng.normal(size=(3, 4)).astype(np.float32)),
                  ("enc.bias", rng.normal(size=4).astype(np.float32))]
        p = tmp_path / "model.nsrt"
        checkpoint_write(p, params)
        back = checkpoint_read(p)
        assert set(back) == {"enc.weight", "enc.bias"}
        np.testing.assert_array_equal(back["enc.weight"], params[0][1].reshape(-1))
