import json

import numpy as np
import pytest

from robustmat.config import DatasetConfig
from robustmat.dataio import (DatasetFormatError, Dataset, generate_dataset, noisy_copy, read_dataset,
                              write_dataset)


@pytest.fixture(scope="module")
def small(tiny_data_cfg):
    return generate_dataset(tiny_data_cfg)


def files(d):
    return (d / "patches.bin").read_bytes(), (d / "manifest.json").read_bytes()


def test_generation_is_deterministic(tiny_data_cfg, small, tmp_path):
    write_dataset(tmp_path / "a", small)
    write_dataset(tmp_path / "b", generate_dataset(tiny_data_cfg))
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_seed_changes_data(tiny_data_cfg, small):
    other = generate_dataset(tiny_data_cfg.model_copy(update={"seed": 1}))
    assert any(np.any(a.pixels != b.pixels) for a, b in zip(small.frames[0].patches, other.frames[0].patches))


def test_layout(tiny_data_cfg, small):
    assert len(small.frames) == tiny_data_cfg.n_scenes * tiny_data_cfg.n_views
    assert small.scenes("train") == [0, 1, 2, 3] and small.scenes("test") == [4, 5]
    for p in small.pairs:
        assert small.frame_scene[p.frame_a] == small.frame_scene[p.frame_b]
    labels = [p.label for p in small.split_pairs("train")]
    assert labels.count(1) == labels.count(0) == 4 * tiny_data_cfg.n_landmarks


def test_write_read_write_is_byte_identical(small, tmp_path):
    write_dataset(tmp_path / "a", small)
    back = read_dataset(tmp_path / "a")
    write_dataset(tmp_path / "b", back)
    assert files(tmp_path / "a") == files(tmp_path / "b")
    assert back.pairs == small.pairs
    np.testing.assert_array_equal(back.frames[3].patches[1].pixels, small.frames[3].patches[1].pixels)


def test_empty_pair_list_round_trips(small, tmp_path):
    ds = Dataset(small.frames[:1], [], small.frame_scene[:1], small.frame_split[:1], {})
    write_dataset(tmp_path, ds)
    assert read_dataset(tmp_path).pairs == []


def corrupt(tmp_path, small, name, edit):
    write_dataset(tmp_path, small)
    path = tmp_path / name
    path.write_bytes(edit(path.read_bytes()))
    with pytest.raises(DatasetFormatError) as info:
        read_dataset(tmp_path)
    return info.value


def test_bad_magic_names_offset_zero(small, tmp_path):
    err = corrupt(tmp_path, small, "patches.bin", lambda b: b"XMAT" + b[4:])
    assert err.offset == 0 and "magic" in str(err)


def test_bad_version(small, tmp_path):
    err = corrupt(tmp_path, small, "patches.bin", lambda b: b[:4] + b"\x07\x00" + b[6:])
    assert err.offset == 4


def test_truncated_file(small, tmp_path):
    err = corrupt(tmp_path, small, "patches.bin", lambda b: b[:-10])
    assert "truncated" in str(err) and err.offset > 0


def test_out_of_range_pixel(small, tmp_path):
    def edit(b):
        b = bytearray(b)
        b[6 + 18 : 6 + 22] = np.float32(7.0).tobytes()
        return bytes(b)
    assert corrupt(tmp_path, small, "patches.bin", edit).offset == 6


def test_manifest_faults(small, tmp_path):
    corrupt(tmp_path, small, "manifest.json", lambda b: b[:50])

    def retag(b, mutate):
        m = json.loads(b)
        mutate(m)
        return json.dumps(m).encode()

    corrupt(tmp_path, small, "manifest.json", lambda b: retag(b, lambda m: m["pairs"].append([0, 0, 99, 0, 1])))
    corrupt(tmp_path, small, "manifest.json", lambda b: retag(b, lambda m: m["pairs"][0].__setitem__(4, 2)))
    corrupt(tmp_path, small, "manifest.json", lambda b: retag(b, lambda m: m["frames"][0]["patches"][1].__setitem__("offset", 7)))
    corrupt(tmp_path, small, "manifest.json", lambda b: retag(b, lambda m: m["frames"][0].pop("scene")))
    err = corrupt(tmp_path, small, "manifest.json", lambda b: retag(b, lambda m: m.__setitem__("version", 5)))
    assert "version" in str(err)


def test_noisy_copy_is_seeded_and_keeps_labels(small):
    a, b = noisy_copy(small, 16.0, seed=3), noisy_copy(small, 16.0, seed=3)
    np.testing.assert_array_equal(a.frames[2].patches[0].pixels, b.frames[2].patches[0].pixels)
    assert a.pairs == small.pairs
    assert np.any(a.frames[2].patches[0].pixels != small.frames[2].patches[0].pixels)


def test_config_rejects_bad_split():
    with pytest.raises(ValueError):
        DatasetConfig(n_scenes=3, n_train_scenes=4)
