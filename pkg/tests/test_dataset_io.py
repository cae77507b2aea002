"""Binary tensor files, dataset directory round trips, checksums, features."""

import json

import numpy as np
import pytest
import torch

from localign.fileio import (
    F32_MAGIC,
    FileFormatError,
    atomic_write_json,
    atomic_write_text,
    read_f32,
    sha256_file,
    write_f32,
)
from localign.synthetic import (
    DatasetError,
    SyntheticWorldConfig,
    generate_dataset,
    load_external_features,
    read_dataset,
    write_dataset,
    write_external_features,
)


class TestTensorFiles:
    def test_round_trip_3d(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((2, 5, 7)).astype(np.float32)
        path = tmp_path / "t.f32"
        write_f32(path, arr)
        back = read_f32(path)
        assert back.shape == (2, 5, 7)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_round_trip_pads_lower_ranks(self, tmp_path):
        rng = np.random.default_rng(1)
        vec = rng.standard_normal(9).astype(np.float32)
        mat = rng.standard_normal((4, 3)).astype(np.float32)
        write_f32(tmp_path / "v.f32", vec)
        write_f32(tmp_path / "m.f32", mat)
        v = read_f32(tmp_path / "v.f32")
        m = read_f32(tmp_path / "m.f32")
        assert v.shape == (9, 1, 1)
        assert m.shape == (4, 3, 1)
        assert np.array_equal(v[:, 0, 0], vec)
        assert np.array_equal(m[:, :, 0], mat)

    def test_float64_input_is_stored_as_float32(self, tmp_path):
        arr = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float64)
        write_f32(tmp_path / "d.f32", arr)
        back = read_f32(tmp_path / "d.f32")
        assert back.dtype == np.float32
        assert np.array_equal(back[:, :, 0], arr.astype(np.float32))

    def test_rank_out_of_range_rejected(self, tmp_path):
        with pytest.raises(FileFormatError):
            write_f32(tmp_path / "x.f32", np.zeros((2, 2, 2, 2)))
        with pytest.raises(FileFormatError):
            write_f32(tmp_path / "x.f32", np.float32(3.0))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.f32"
        write_f32(path, np.zeros(3, dtype=np.float32))
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(FileFormatError, match="magic"):
            read_f32(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "short.f32"
        write_f32(path, np.zeros((2, 3), dtype=np.float32))
        data = path.read_bytes()
        path.write_bytes(data[:-4])
        with pytest.raises(FileFormatError, match="bytes"):
            read_f32(path)

    def test_truncated_header_rejected(self, tmp_path):
        path = tmp_path / "stub.f32"
        path.write_bytes(F32_MAGIC)
        with pytest.raises(FileFormatError, match="header"):
            read_f32(path)

    def test_writes_are_byte_deterministic(self, tmp_path):
        arr = np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 4)
        write_f32(tmp_path / "a.f32", arr)
        write_f32(tmp_path / "b.f32", arr)
        assert (tmp_path / "a.f32").read_bytes() == (tmp_path / "b.f32").read_bytes()

    def test_no_temp_files_left_behind(self, tmp_path):
        write_f32(tmp_path / "a.f32", np.zeros(2, dtype=np.float32))
        atomic_write_text(tmp_path / "a.txt", "hello")
        atomic_write_json(tmp_path / "a.json", {"k": 1})
        leftovers = [p.name for p in tmp_path.iterdir() if ".tmp-" in p.name]
        assert leftovers == []

    def test_json_writer_is_canonical(self, tmp_path):
        atomic_write_json(tmp_path / "a.json", {"b": 1, "a": [2, 3]})
        atomic_write_json(tmp_path / "b.json", {"a": [2, 3], "b": 1})
        a = (tmp_path / "a.json").read_bytes()
        assert a == (tmp_path / "b.json").read_bytes()
        assert a.endswith(b"\n")
        assert json.loads(a) == {"a": [2, 3], "b": 1}


def _small_world(**overrides):
    defaults = dict(grid=7, image_size=28, seed=11)
    defaults.update(overrides)
    return SyntheticWorldConfig(**defaults)


class TestDatasetRoundTrip:
    def test_field_exact_round_trip(self, tmp_path):
        cfg = _small_world()
        samples = generate_dataset(cfg, 12)
        write_dataset(samples, tmp_path / "ds", cfg)
        loaded = read_dataset(tmp_path / "ds")

        assert loaded.world == cfg
        assert loaded.sample_ids == [s.sample_id for s in samples]
        for orig, back in zip(samples, loaded.samples):
            assert back.sample_id == orig.sample_id
            assert torch.equal(back.image, orig.image)
            assert back.report.raw_text == orig.report.raw_text
            assert back.report.sentences == orig.report.sentences
            assert back.gt_boxes == orig.gt_boxes
            assert torch.equal(back.gt_alignment, orig.gt_alignment)

    def test_queries_written_for_samples_with_boxes(self, tmp_path):
        cfg = _small_world()
        samples = generate_dataset(cfg, 10)
        write_dataset(samples, tmp_path / "ds", cfg)
        loaded = read_dataset(tmp_path / "ds")
        for sample in loaded.samples:
            if sample.gt_boxes:
                query = loaded.queries[sample.sample_id]
                assert query in sample.report.sentences
                assert sample.gt_boxes[0].label in query.lower()
            else:
                assert sample.sample_id not in loaded.queries

    def test_write_is_byte_deterministic(self, tmp_path):
        cfg = _small_world()
        samples = generate_dataset(cfg, 6)
        write_dataset(samples, tmp_path / "a", cfg)
        write_dataset(samples, tmp_path / "b", cfg)
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b and files_a
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_checksum_catches_corruption(self, tmp_path):
        cfg = _small_world()
        samples = generate_dataset(cfg, 3)
        write_dataset(samples, tmp_path / "ds", cfg)
        victim = tmp_path / "ds" / "reports" / samples[1].sample_id
        victim = victim.with_suffix(".txt")
        victim.write_text(victim.read_text() + " tampered")
        with pytest.raises(DatasetError, match="checksum"):
            read_dataset(tmp_path / "ds")
        loaded = read_dataset(tmp_path / "ds", verify_checksums=False)
        assert "tampered" in loaded.samples[1].report.raw_text

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest"):
            read_dataset(tmp_path / "nowhere")

    def test_missing_sample_file_rejected(self, tmp_path):
        cfg = _small_world()
        samples = generate_dataset(cfg, 3)
        write_dataset(samples, tmp_path / "ds", cfg)
        (tmp_path / "ds" / "images" / f"{samples[0].sample_id}.f32").unlink()
        with pytest.raises(DatasetError, match="missing"):
            read_dataset(tmp_path / "ds")

    def test_manifest_count_mismatch_rejected(self, tmp_path):
        cfg = _small_world()
        samples = generate_dataset(cfg, 3)
        write_dataset(samples, tmp_path / "ds", cfg)
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        manifest["sample_count"] = 99
        (tmp_path / "ds" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DatasetError, match="sample_count"):
            read_dataset(tmp_path / "ds")

    def test_unknown_world_key_rejected(self, tmp_path):
        cfg = _small_world()
        samples = generate_dataset(cfg, 2)
        write_dataset(samples, tmp_path / "ds", cfg)
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        manifest["world"]["mystery_knob"] = 3
        (tmp_path / "ds" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DatasetError, match="mystery_knob"):
            read_dataset(tmp_path / "ds", verify_checksums=False)

    def test_manifest_checksums_cover_every_data_file(self, tmp_path):
        cfg = _small_world()
        samples = generate_dataset(cfg, 5)
        root = tmp_path / "ds"
        write_dataset(samples, root, cfg)
        manifest = json.loads((root / "manifest.json").read_text())
        on_disk = {
            str(p.relative_to(root)) for p in root.rglob("*") if p.is_file() and p.name != "manifest.json"
        }
        assert set(manifest["checksums"]) == on_disk
        for rel, digest in manifest["checksums"].items():
            assert sha256_file(root / rel) == digest

    def test_empty_dataset_rejected(self, tmp_path):
        cfg = _small_world()
        with pytest.raises(ValueError):
            write_dataset([], tmp_path / "ds", cfg)


class TestExternalFeatures:
    def _triples(self, n, dim_img=6, dim_txt=5, seed=0):
        rng = np.random.default_rng(seed)
        out = []
        for i in range(n):
            out.append(
                (
                    f"{i:04d}",
                    rng.standard_normal((9, dim_img)).astype(np.float32),
                    rng.standard_normal((int(rng.integers(1, 4)), dim_txt)).astype(np.float32),
                )
            )
        return out

    def test_round_trip(self, tmp_path):
        triples = self._triples(4)
        write_external_features(triples, tmp_path / "feat")
        pairs = load_external_features(tmp_path / "feat")
        assert [p.sample_id for p in pairs] == [t[0] for t in triples]
        for pair, (_, img, txt) in zip(pairs, triples):
            assert torch.equal(pair.image.vectors, torch.from_numpy(img))
            assert torch.equal(pair.text.vectors, torch.from_numpy(txt))
            assert pair.image.grid_shape == (3, 3)
            assert pair.text.grid_shape is None

    def test_dimension_mismatch_rejected(self, tmp_path):
        triples = self._triples(3)
        rng = np.random.default_rng(9)
        triples.append(("0003", rng.standard_normal((9, 7)).astype(np.float32), triples[0][2]))
        write_external_features(triples, tmp_path / "feat")
        with pytest.raises(DatasetError, match="dimension"):
            load_external_features(tmp_path / "feat")

    def test_missing_feature_file_rejected(self, tmp_path):
        triples = self._triples(2)
        write_external_features(triples, tmp_path / "feat")
        (tmp_path / "feat" / "features" / "0001.txt.f32").unlink()
        with pytest.raises(DatasetError, match="missing"):
            load_external_features(tmp_path / "feat")

    def test_non_square_position_count_has_no_grid(self, tmp_path):
        rng = np.random.default_rng(3)
        triples = [
            (
                "0000",
                rng.standard_normal((8, 6)).astype(np.float32),
                rng.standard_normal((2, 5)).astype(np.float32),
            )
        ]
        write_external_features(triples, tmp_path / "feat")
        pairs = load_external_features(tmp_path / "feat")
        assert pairs[0].image.grid_shape is None
