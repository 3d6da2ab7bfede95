import filecmp
import os
import shutil
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polardeblur.dataset import (
    IMAGE_NAMES,
    QMAX,
    DatasetConfig,
    RecordSpec,
    augment_set,
    build_dataset,
    declared_record_count,
    load_dataset_config,
    load_manifest,
    load_split,
    make_record,
    read_png16,
    read_scene,
    regenerate_record,
    snap_polarized_set,
    write_png16,
    write_scene,
)
from polardeblur.errors import ConfigError, DomainError, IntegrityError
from polardeblur.polar_core import (
    PolarizedImageSet,
    render_polarized_set,
    stokes_from_set,
    validate_physical,
)
from polardeblur.scenes import generate_procedural_scene

from conftest import TINY


def random_set(seed, shape=(6, 5, 3)):
    # p capped like the scene generator, so 16-bit snapping stays admissible
    rng = np.random.default_rng(seed)
    return render_polarized_set(rng.uniform(0, 1, shape), rng.uniform(0, 0.95, shape), rng.uniform(0, np.pi, shape))


class TestScenes:
    def test_physical(self):
        for seed in range(5):
            i, p, t = generate_procedural_scene(seed, 64, 80)
            assert i.shape == p.shape == t.shape == (64, 80, 3)
            assert validate_physical(render_polarized_set(i, p, t), 1e-6).passed
            assert t.min() >= 0 and t.max() < np.pi
            assert p.min() >= 0 and p.max() <= 1

    def test_deterministic(self):
        a, b = generate_procedural_scene(9, 64, 64), generate_procedural_scene(9, 64, 64)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_too_small(self):
        with pytest.raises(DomainError):
            generate_procedural_scene(0, 32, 64)

    def test_dolp_histogram_spans(self):
        # empirical check over 100 scenes; thresholds frozen well below the
        # measured values (99/100 scenes span the range; smallest bin mass 1.3%)
        ps = [generate_procedural_scene(s, 64, 64)[1] for s in range(100)]
        pooled = np.concatenate([p.ravel() for p in ps])
        assert pooled.min() <= 0.05 and pooled.max() >= 0.8
        assert sum(p.min() <= 0.05 and p.max() >= 0.8 for p in ps) >= 95
        hist, _ = np.histogram(pooled, bins=np.arange(0.05, 0.8 + 1e-9, 0.05))
        assert np.all(hist / pooled.size >= 0.005)


class TestQuantization:
    def test_snap_keeps_identity(self):
        snapped = snap_polarized_set(random_set(0, (32, 32, 3)))
        assert validate_physical(snapped, 1e-5).passed
        a = [np.asarray(x, np.float64) for x in snapped.images()]
        assert np.max(np.abs(a[0] + a[2] - a[1] - a[3])) <= 1e-7
        for x in a:
            np.testing.assert_allclose(x * QMAX, np.round(x * QMAX), atol=1e-3)

    def test_png_roundtrip(self, tmp_path):
        img = np.random.default_rng(0).uniform(0, 1, (7, 9, 3)).astype(np.float32)
        write_png16(tmp_path / "a.png", img)
        back = read_png16(tmp_path / "a.png")
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 0.5 / QMAX + 1e-7
        # channel order is preserved (no silent BGR swap)
        rgb = np.zeros((2, 2, 3), np.float32)
        rgb[..., 0] = 1.0
        write_png16(tmp_path / "r.png", rgb)
        np.testing.assert_array_equal(read_png16(tmp_path / "r.png"), rgb)

    def test_png_not_16bit(self, tmp_path):
        import cv2

        cv2.imwrite(str(tmp_path / "b.png"), np.zeros((4, 4, 3), np.uint8))
        with pytest.raises(IntegrityError, match="b.png"):
            read_png16(tmp_path / "b.png")


class TestAugmentation:
    def test_rot90_relabeling(self):
        s = random_set(1)
        out = augment_set(s, 1, False)
        st0, st1 = stokes_from_set(s), stokes_from_set(out)
        rot = lambda a: np.rot90(a, 1, axes=(0, 1))  # noqa: E731
        for got, src in zip(out.images(), (s.i090, s.i135, s.i000, s.i045)):
            np.testing.assert_array_equal(got, rot(src))
        np.testing.assert_allclose(st1.s0, rot(st0.s0), rtol=0, atol=1e-15)
        np.testing.assert_array_equal(st1.s1, -rot(st0.s1))
        np.testing.assert_array_equal(st1.s2, -rot(st0.s2))

    def test_flip_relabeling(self):
        s = random_set(2)
        out = augment_set(s, 0, True)
        st0, st1 = stokes_from_set(s), stokes_from_set(out)
        fl = lambda a: a[:, ::-1]  # noqa: E731
        for got, src in zip(out.images(), (s.i000, s.i135, s.i090, s.i045)):
            np.testing.assert_array_equal(got, fl(src))
        np.testing.assert_allclose(st1.s0, fl(st0.s0), rtol=0, atol=1e-15)
        np.testing.assert_array_equal(st1.s1, fl(st0.s1))
        np.testing.assert_array_equal(st1.s2, -fl(st0.s2))

    @pytest.mark.parametrize("rot90,flip", [(r, f) for r in range(4) for f in (False, True)])
    def test_matches_transformed_scene(self, rot90, flip):
        # oracle: transform the (I, p, theta) fields geometrically, move theta
        # accordingly (mirror: -theta, quarter turn: +pi/2), then render
        rng = np.random.default_rng(3)
        shape = (6, 8, 3)
        i, p, t = rng.uniform(0, 1, shape), rng.uniform(0, 1, shape), rng.uniform(0, np.pi, shape)
        geo = lambda a: np.rot90(a[:, ::-1] if flip else a, rot90, axes=(0, 1))  # noqa: E731
        t2 = (-t if flip else t) + rot90 * np.pi / 2
        expected = render_polarized_set(geo(i), geo(p), np.mod(geo(t2), np.pi))
        got = augment_set(render_polarized_set(i, p, t), rot90, flip)
        for a, b in zip(got.images(), expected.images()):
            np.testing.assert_allclose(a, b, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(0, 7), st.booleans())
    def test_preserves_invariants_property(self, seed, rot90, flip):
        s = snap_polarized_set(random_set(seed))
        out = augment_set(s, rot90, flip)
        assert validate_physical(out, 1e-5).passed
        # pixels are only permuted, so the multiset of |(s1, s2)|^2 is unchanged
        st0, st1 = stokes_from_set(s), stokes_from_set(out)
        np.testing.assert_array_equal(np.sort((st0.s1**2 + st0.s2**2).ravel()), np.sort((st1.s1**2 + st1.s2**2).ravel()))


class TestConfig:
    def test_defaults_full_scale_counts(self):
        cfg = DatasetConfig()
        assert declared_record_count(cfg, "train") == 8000
        assert declared_record_count(cfg, "test") == 300

    def test_overrides(self, tmp_path):
        path = tmp_path / "ds.txt"
        path.write_text("scenes_train=3\n# comment\nnoise.read_sigma=0.02\naugment=false\n")
        cfg = load_dataset_config(path, {"scenes_train": "5", "traj.anisotropy": "0.5"})
        assert cfg.scenes_train == 5 and cfg.noise.read_sigma == 0.02 and cfg.augment is False
        assert cfg.traj.anisotropy == 0.5

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            load_dataset_config(overrides={"scenes_trian": "1"})
        with pytest.raises(ConfigError):
            load_dataset_config(overrides={"noise.bogus": "1"})

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            load_dataset_config(overrides={"scenes_train": "many"})
        with pytest.raises(ConfigError):
            load_dataset_config(overrides={"crop_train": "4"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_dataset_config(tmp_path / "nope.txt")


class TestBuild:
    def test_record_count(self, tmp_path):
        cfg = load_dataset_config(overrides={"scenes_train": "2", "traj_per_scene_train": "3", "augment": "false",
                                             "crop_train": "32", "scene_margin": "16", "latent_frames": "3"})
        m = build_dataset(cfg, tmp_path, splits=("train",))
        assert len(m["train"]) == 6
        assert load_manifest(tmp_path)["train"].augmentation == "none"

    def test_layout(self, tiny_dataset):
        scene = tiny_dataset / "train" / "s0000_t00"
        names = sorted(p.name for p in scene.iterdir())
        assert names == sorted([f"{n}.png" for n in IMAGE_NAMES] + ["meta.txt"])
        man = load_manifest(tiny_dataset)
        assert len(man["train"]) == 4 and len(man["test"]) == 1
        assert man["train"].crop == 64 and man["train"].augmentation == "dihedral"

    def test_byte_identical_regeneration(self, tmp_path, tiny_cfg, tiny_dataset):
        other = tmp_path / "again"
        build_dataset(tiny_cfg, other)
        cmp = filecmp.dircmp(tiny_dataset, other)
        files = []
        for dirpath, _, fnames in os.walk(tiny_dataset):
            for f in fnames:
                rel = Path(dirpath).relative_to(tiny_dataset) / f
                files.append(rel)
                assert (tiny_dataset / rel).read_bytes() == (other / rel).read_bytes(), rel
        assert len(files) == 5 * 11 + 2
        assert not cmp.left_only and not cmp.right_only

    def test_regenerate_from_meta(self, tiny_dataset):
        rec = read_scene(tiny_dataset / "train" / "s0001_t01")
        again = regenerate_record(rec.meta)
        for k, v in rec.images().items():
            np.testing.assert_array_equal(v, again.images()[k], err_msg=k)

    def test_records_valid(self, tiny_dataset):
        for split in ("train", "test"):
            for rec in load_split(tiny_dataset, split):
                assert validate_physical(rec.sharp_set, 1e-5).passed
                assert rec.sharp_set.shape == rec.blurry_set.shape == rec.sharp_unpolarized.shape
                assert rec.border_margin >= 1

    def test_unpolarized_consistent(self, tiny_dataset):
        rec = read_scene(tiny_dataset / "test" / "s0000_t00")
        np.testing.assert_allclose(rec.sharp_unpolarized, stokes_from_set(rec.sharp_set).s0, atol=1 / QMAX)

    def test_augmentation_only_train(self, tiny_dataset):
        for rec in load_split(tiny_dataset, "test"):
            assert rec.meta["augment_rot90"] == 0 and rec.meta["augment_flip"] is False

    def test_augmented_records_match_unaugmented(self, tiny_cfg):
        # the augmented training record is exactly the relabelled transform of the plain one
        spec = RecordSpec("train", 0, 1)
        aug = make_record(tiny_cfg, spec)
        plain = make_record(load_dataset_config(overrides={**TINY, "augment": "false"}), spec)
        r, f = aug.meta["augment_rot90"], aug.meta["augment_flip"]
        for a, b in zip(aug.sharp_set.images(), augment_set(plain.sharp_set, r, f).images()):
            np.testing.assert_array_equal(a, b)

    def test_unwritable_target(self, tmp_path, tiny_cfg):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(IntegrityError):
            build_dataset(tiny_cfg, blocker / "sub")


class TestStorage:
    def test_roundtrip(self, tmp_path, tiny_cfg):
        rec = make_record(tiny_cfg, RecordSpec("test", 0, 0))
        path = write_scene(rec, tmp_path)
        back = read_scene(path)
        for k, v in rec.images().items():
            assert np.max(np.abs(back.images()[k] - v)) <= 1 / (2**16 - 1)
        assert back.meta == rec.meta
        again = read_scene(path)
        for k, v in back.images().items():
            np.testing.assert_array_equal(v, again.images()[k])

    def test_missing_angle_file(self, tmp_path, tiny_cfg):
        path = write_scene(make_record(tiny_cfg, RecordSpec("test", 0, 0)), tmp_path)
        (path / "sharp_i045.png").unlink()
        with pytest.raises(IntegrityError, match="sharp_i045.png"):
            read_scene(path)

    def test_corrupt_meta(self, tmp_path, tiny_cfg):
        path = write_scene(make_record(tiny_cfg, RecordSpec("test", 0, 0)), tmp_path)
        (path / "meta.txt").write_text("scene_id=\"x\"\nthis line is broken\n")
        with pytest.raises(IntegrityError, match="meta.txt"):
            read_scene(path)

    def test_manifest_missing_scene(self, tmp_path, tiny_cfg):
        cfg = load_dataset_config(overrides={"scenes_train": "1", "traj_per_scene_train": "1",
                                             "crop_train": "32", "latent_frames": "3"})
        build_dataset(cfg, tmp_path, splits=("train",))
        shutil.rmtree(tmp_path / "train" / "s0000_t00")
        with pytest.raises(IntegrityError, match="missing scene"):
            load_manifest(tmp_path)

    def test_manifest_duplicates(self, tmp_path):
        (tmp_path / "train" / "a").mkdir(parents=True)
        (tmp_path / "train" / "a" / "meta.txt").write_text("")
        (tmp_path / "manifest.txt").write_text("version=1\nroot_seed=0\nrecord=train/a\nrecord=train/a\n")
        with pytest.raises(IntegrityError, match="duplicate"):
            load_manifest(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(IntegrityError):
            load_manifest(tmp_path)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        PolarizedImageSet(*[np.zeros((2, 2))] * 3, np.zeros((2, 3)))
