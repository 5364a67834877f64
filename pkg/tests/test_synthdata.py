import json

import numpy as np
import pytest

from diffcd.errors import ConfigError, LoadError
from diffcd.pgm import from_pixels, read_pgm, to_pixels, write_pgm
from diffcd.synthdata import SceneConfig, generate_pair, read_dataset, write_dataset

QUIET = dict(change_rate=0.0, misreg_max=0.0, illum_delta=0.0, noise_sigma=0.0)


def rasterize(obj, size):
    """Independent footprint oracle: explicit per-pixel centre test."""
    out = np.zeros((size, size), dtype=np.uint8)
    for y in range(size):
        for x in range(size):
            dy, dx = y - obj["cy"], x - obj["cx"]
            if obj["kind"] == "disk":
                hit = dy * dy + dx * dx <= obj["ry"] ** 2
            else:
                hit = abs(dy) <= obj["ry"] and abs(dx) <= obj["rx"]
            out[y, x] = hit
    return out


def test_quiet_generator_is_identity():
    for index in range(5):
        pair = generate_pair(SceneConfig(seed=3, **QUIET), index)
        assert np.array_equal(pair.img_a, pair.img_b)
        assert not pair.mask.any()


def test_pure_nuisance_pair():
    cfg = SceneConfig(seed=1, change_rate=0.0, misreg_max=2.0)
    for index in range(5):
        pair = generate_pair(cfg, index)
        assert not pair.mask.any()
        assert np.abs(pair.img_a - pair.img_b).mean() > 0


@pytest.mark.parametrize("kw", [dict(illum_delta=0.5), dict(noise_sigma=0.3), dict(misreg_max=3.0)])
def test_nuisances_never_enter_mask(kw):
    cfg = SceneConfig(seed=2, change_rate=0.0, **kw)
    assert not any(generate_pair(cfg, i).mask.any() for i in range(10))


def test_masks_identical_with_and_without_nuisance():
    noisy = SceneConfig(seed=5, misreg_max=2.0, illum_delta=0.3, noise_sigma=0.1)
    clean = SceneConfig(seed=5, misreg_max=0.0, illum_delta=0.0, noise_sigma=0.0)
    for i in range(10):
        assert np.array_equal(generate_pair(noisy, i).mask, generate_pair(clean, i).mask)


def test_deterministic():
    cfg = SceneConfig(seed=9)
    a, b = generate_pair(cfg, 4), generate_pair(cfg, 4)
    for x, y in [(a.img_a, b.img_a), (a.img_b, b.img_b), (a.mask, b.mask)]:
        assert np.array_equal(x, y)
    assert a.meta == b.meta
    assert not np.array_equal(a.img_a, generate_pair(cfg, 5).img_a)


def test_ranges_and_shapes():
    cfg = SceneConfig(size=16, seed=1, illum_delta=0.9, noise_sigma=0.5)
    for i in range(5):
        pair = generate_pair(cfg, i)
        assert pair.img_a.shape == pair.img_b.shape == (1, 16, 16)
        assert pair.mask.shape == (16, 16) and pair.mask.dtype == np.uint8
        assert pair.img_a.min() >= -1 and pair.img_b.max() <= 1


def test_single_add_mask_matches_rasterizer():
    found = 0
    for index in range(200):
        pair = generate_pair(SceneConfig(seed=11, n_objects=(1, 1), change_rate=1.0, **{
            k: v for k, v in QUIET.items() if k != "change_rate"}), index)
        objs = pair.meta["objects"]
        if len(objs) == 1 and objs[0]["change"] == "add":
            assert np.array_equal(pair.mask, rasterize(objs[0], 32))
            assert pair.mask.any()
            found += 1
    assert found >= 10


def test_move_mask_is_union():
    cfg = SceneConfig(seed=12, n_objects=(1, 1), change_rate=1.0)
    for index in range(100):
        pair = generate_pair(cfg, index)
        obj = pair.meta["objects"][0]
        if obj["change"] == "move":
            moved = dict(obj, cy=obj["moved_to"][0], cx=obj["moved_to"][1])
            assert np.array_equal(pair.mask, rasterize(obj, 32) | rasterize(moved, 32))
            return
    pytest.fail("no move drawn")


def test_meta_records_nuisances():
    cfg = SceneConfig(seed=1, misreg_max=1.5, illum_delta=0.2)
    meta = generate_pair(cfg, 0).meta
    assert abs(meta["illum_shift"]) <= 0.2
    assert all(abs(t) <= 1.5 for t in meta["translation"])


@pytest.mark.parametrize("kw", [dict(change_rate=1.5), dict(misreg_max=-1.0), dict(size=4),
                                dict(n_objects=(4, 2)), dict(channels=3)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        SceneConfig(**kw)


def test_config_dict_round_trip():
    cfg = SceneConfig(size=16, n_objects=(2, 3), misreg_max=2.0, seed=4)
    assert SceneConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        SceneConfig.from_dict({**cfg.to_dict(), "colour": 1})


def test_check_depth():
    SceneConfig(size=32).check_depth(2)
    with pytest.raises(ConfigError):
        SceneConfig(size=36).check_depth(3)


def test_write_and_read_dataset(tmp_path):
    cfg = SceneConfig(size=16, seed=3, misreg_max=1.0)
    manifest = write_dataset(cfg, 4, tmp_path)
    assert len(list(tmp_path.glob("*.pgm"))) == 12
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk["count"] == 4 and len(on_disk["samples"]) == 4
    assert SceneConfig.from_dict(on_disk["config"]) == cfg
    assert on_disk == json.loads(json.dumps(manifest))
    pairs = read_dataset(tmp_path)
    for i, pair in enumerate(pairs):
        ref = generate_pair(cfg, i)
        assert np.array_equal(pair.mask, ref.mask)
        assert np.abs(pair.img_a - ref.img_a).max() <= 1 / 255
        assert np.abs(pair.img_b - ref.img_b).max() <= 1 / 255


def test_mask_files_use_0_and_255(tmp_path):
    write_dataset(SceneConfig(size=16, seed=3), 2, tmp_path)
    pixels, maxval = read_pgm(tmp_path / "M_0.pgm")
    assert maxval == 255 and set(np.unique(pixels)) <= {0, 255}


def test_read_count_mismatch(tmp_path):
    write_dataset(SceneConfig(size=16), 3, tmp_path)
    (tmp_path / "A_2.pgm").unlink()
    with pytest.raises(LoadError):
        read_dataset(tmp_path)


def test_read_empty_dir(tmp_path):
    with pytest.raises(LoadError):
        read_dataset(tmp_path)


def test_read_corrupt_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(LoadError):
        read_dataset(tmp_path)


def test_pgm_round_trip(tmp_path):
    pixels = np.arange(20).reshape(4, 5) * 12
    write_pgm(tmp_path / "x.pgm", pixels)
    back, maxval = read_pgm(tmp_path / "x.pgm")
    assert maxval == 255 and np.array_equal(back, pixels)
    assert (tmp_path / "x.pgm").read_text().startswith("P2\n5 4\n255\n")


def test_pgm_reads_p5_and_comments(tmp_path):
    raw = b"P5\n# a comment\n3 2\n255\n" + bytes([0, 10, 20, 30, 40, 255])
    (tmp_path / "x.pgm").write_bytes(raw)
    back, _ = read_pgm(tmp_path / "x.pgm")
    assert back.tolist() == [[0, 10, 20], [30, 40, 255]]


@pytest.mark.parametrize("content", [b"P3\n1 1\n255\n0\n", b"P2\n2 2\n255\n1 2 3\n", b"P2\n1 1\n10\n11\n"])
def test_pgm_rejects_bad_files(tmp_path, content):
    (tmp_path / "x.pgm").write_bytes(content)
    with pytest.raises(LoadError):
        read_pgm(tmp_path / "x.pgm")


def test_pixel_quantization_bound():
    values = np.linspace(-1, 1, 1001)
    back = from_pixels(to_pixels(values))
    assert np.abs(back - values).max() <= 1 / 255
    assert to_pixels(np.array([-1.0, 1.0])).tolist() == [0, 255]
