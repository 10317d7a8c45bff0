import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volq.errors import FormatError
from volq.phantom import (DEFAULT_COUNTS, PRESETS, LabeledVolume, PhantomConfig, Volume, build_manifest,
                          downsample_xy, generate_dataset, generate_phantom, load_split, pad_z,
                          read_manifest, read_volume, volume_from_bytes, volume_roundtrip,
                          volume_to_bytes)

SMALL = PhantomConfig(out_dims=(16, 16, 8), native_xy_factor=2, native_z_range=(6, 8),
                      lesion_radius_range=(3.0, 4.0))


class TestGenerate:
    def test_normal_has_no_blob(self):
        cfg = PhantomConfig(noise_sigma=0.0)
        lv = generate_phantom(cfg, 0, "a")
        twin = generate_phantom(cfg, 0, "a")
        assert lv.volume.voxels.max() == twin.volume.voxels.max()
        assert lv.volume.voxels.max() < 0.5 + 1e-6  # background field peaks at base + 0.12

    def test_single_blob_is_bright(self):
        cfg = PhantomConfig(noise_sigma=0.0, lesion_count_range=(1, 1), lesion_radius_range=(3.0, 3.0),
                            lesion_contrast=0.5)
        tumor = generate_phantom(cfg, 1, "b").volume.voxels
        normal = generate_phantom(cfg, 0, "b").volume.voxels
        footprint = tumor != normal
        assert footprint.any()
        assert np.any(tumor[footprint] >= normal[footprint] + 0.4)

    def test_deterministic(self):
        a = generate_phantom(SMALL, 1, "x7")
        b = generate_phantom(SMALL, 1, "x7")
        assert a.volume.voxels.tobytes() == b.volume.voxels.tobytes()
        c = generate_phantom(SMALL, 1, "x8")
        assert a.volume.voxels.tobytes() != c.volume.voxels.tobytes()

    @given(st.text(min_size=1, max_size=8), st.integers(0, 1000))
    @settings(max_examples=20, deadline=None)
    def test_tumor_differs_from_normal_twin(self, ident, seed):
        cfg = PhantomConfig(out_dims=(16, 16, 8), native_z_range=(6, 8), lesion_radius_range=(3.0, 4.0),
                            rng_seed=seed)
        t, n = generate_phantom(cfg, 1, ident), generate_phantom(cfg, 0, ident)
        assert t.volume.in_unit_range() and n.volume.in_unit_range()
        assert np.any(t.volume.voxels != n.volume.voxels)

    def test_oversized_lesion_rejected(self):
        with pytest.raises(ValueError):
            generate_phantom(PhantomConfig(out_dims=(8, 8, 8), native_xy_factor=1,
                                           lesion_radius_range=(3.0, 5.0)), 1, "z")

    def test_separable_preset_contract(self):
        for cfg in PRESETS.values():
            assert cfg.lesion_contrast > cfg.noise_sigma


class TestPreprocess:
    def test_full_size_in_plane(self):
        v = downsample_xy(Volume(np.zeros((512, 512, 30))), 64)
        assert v.dims == (64, 64, 30)

    def test_constant(self):
        v = downsample_xy(Volume(np.full((8, 8, 3), 0.25)), 2)
        assert np.all(v.voxels == 0.25)

    def test_block_mean(self):
        vox = np.array([[0.0, 0.0], [1.0, 1.0]]).reshape(2, 2, 1)
        assert downsample_xy(Volume(vox), 1).voxels.item() == 0.5

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            downsample_xy(Volume(np.zeros((10, 10, 2))), 4)

    def test_pad_shortest_stack(self):
        rng = np.random.default_rng(0)
        v = Volume(rng.random((4, 4, 28)))
        p = pad_z(v, 36)
        assert p.dims == (4, 4, 36)
        assert not p.voxels[:, :, 28:].any()
        assert p.voxels[:, :, :28].tobytes() == v.voxels.tobytes()
        assert p.voxels.sum(dtype=np.float64) == v.voxels.sum(dtype=np.float64)

    def test_pad_noop_and_error(self):
        v = Volume(np.ones((2, 2, 36)))
        assert pad_z(v, 36).voxels.tobytes() == v.voxels.tobytes()
        with pytest.raises(ValueError):
            pad_z(v, 30)

    @given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 6), st.integers(0, 4))
    @settings(max_examples=30, deadline=None)
    def test_downsample_pad_commute(self, target, factor, nz, extra):
        rng = np.random.default_rng(target * 100 + nz)
        v = Volume(rng.random((target * factor, target * factor, nz)))
        a = pad_z(downsample_xy(v, target), nz + extra)
        b = downsample_xy(pad_z(v, nz + extra), target)
        assert a.voxels.tobytes() == b.voxels.tobytes()


class TestVolumeFormat:
    def test_roundtrip(self, tmp_path):
        lv = generate_phantom(SMALL, 1, "r")
        back = volume_roundtrip(tmp_path / "r.volb", lv.volume)
        assert back.dims == lv.volume.dims
        assert back.voxels.tobytes() == lv.volume.voxels.tobytes()

    def test_byte_layout(self):
        vox = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        raw = volume_to_bytes(Volume(vox))
        assert raw[:4] == b"VOLB"
        assert struct.unpack("<III", raw[4:16]) == (2, 2, 2)
        payload = np.frombuffer(raw[16:], "<f4")
        # x fastest, then y, then z
        assert payload[1] == vox[1, 0, 0] and payload[2] == vox[0, 1, 0] and payload[4] == vox[0, 0, 1]

    def test_bad_magic(self):
        raw = b"XXXX" + volume_to_bytes(Volume(np.zeros((1, 1, 1))))[4:]
        with pytest.raises(FormatError) as err:
            volume_from_bytes(raw)
        assert err.value.offset == 0

    def test_truncated(self):
        raw = b"VOLB" + struct.pack("<III", 2, 2, 2) + np.zeros(7, "<f4").tobytes()
        with pytest.raises(FormatError, match="truncated") as err:
            volume_from_bytes(raw)
        assert err.value.offset == len(raw)

    def test_dim_overflow(self):
        raw = b"VOLB" + struct.pack("<III", 2**16, 2**16, 2**16)
        with pytest.raises(FormatError):
            volume_from_bytes(raw)


class TestManifest:
    def _pool(self, n0, n1):
        v = Volume(np.zeros((1, 1, 1)))
        return [LabeledVolume(f"v{i:03d}", v, 0) for i in range(n0)] + \
               [LabeledVolume(f"w{i:03d}", v, 1) for i in range(n1)]

    def test_default_split(self):
        entries = build_manifest(self._pool(80, 71))
        train = [e for e in entries if e.split == "train"]
        test = [e for e in entries if e.split == "test"]
        assert len(train) == 90 and len(test) == 61
        assert sum(e.label == 0 for e in train) == 40 and sum(e.label == 1 for e in train) == 50
        assert sum(e.label == 0 for e in test) == 40 and sum(e.label == 1 for e in test) == 21

    def test_zero_counts(self):
        assert build_manifest(self._pool(3, 3), {"train": {0: 0, 1: 0}, "test": {0: 0, 1: 0}}) == []

    def test_shortfall(self):
        with pytest.raises(ValueError, match="label 1: need 71, have 70"):
            build_manifest(self._pool(80, 70))

    def test_generated_dataset(self, tmp_path):
        counts = {"train": {0: 3, 1: 4}, "test": {0: 2, 1: 1}}
        entries = generate_dataset(SMALL, tmp_path, counts)
        rows = read_manifest(tmp_path / "manifest.jsonl")
        assert [r.id for r in rows] == [e.id for e in entries]
        assert len({r.id for r in rows}) == len(rows) == 10
        for r in rows:
            v = read_volume(tmp_path / r.path)
            assert v.dims == SMALL.out_dims and v.in_unit_range()
        line = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])
        assert set(line) == {"id", "path", "label", "split"}
        tr = load_split(tmp_path / "manifest.jsonl", "train")
        assert tr.volumes.shape == (7, 16, 16, 8) and tr.labels.sum() == 4

    def test_default_counts(self):
        assert DEFAULT_COUNTS == {"train": {0: 40, 1: 50}, "test": {0: 40, 1: 21}}
