import logging

import numpy as np
import pytest

from sadcnn.dataset import (ImageTriple, crop, ingest_corpus, load_patch_cache, make_batch,
                            make_triple, sample_patches, save_patch_cache, split_holdout)
from sadcnn.halftone import error_diffuse_fs, sobel_gradient
from sadcnn.imageio import write_image


def test_ingest_counts_and_dims(corpus_dir):
    triples = ingest_corpus(corpus_dir)
    assert len(triples) == 6
    for t in triples:
        assert t.gray.shape == t.gradient.shape == t.halftone.shape == (48, 48)


def test_ingest_recompute_oracle(corpus):
    for t in corpus:
        assert np.array_equal(error_diffuse_fs(t.gray), t.halftone)
        assert np.array_equal(sobel_gradient(t.gray), t.gradient)


def test_ingest_skips_small_and_unreadable(tmp_path, caplog):
    rng = np.random.default_rng(0)
    for i in range(3):
        write_image(tmp_path / f"ok{i}.pgm", rng.random((40, 36)))
    write_image(tmp_path / "tiny.pgm", rng.random((20, 40)))
    (tmp_path / "broken.pgm").write_bytes(b"P5\n4 4\n")
    (tmp_path / "notes.txt").write_text("ignored")
    with caplog.at_level(logging.WARNING):
        triples = ingest_corpus(tmp_path)
    assert [t.source_id for t in triples] == ["ok0.pgm", "ok1.pgm", "ok2.pgm"]
    assert "tiny.pgm" in caplog.text and "broken.pgm" in caplog.text


def test_ingest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        ingest_corpus(tmp_path / "nope")
    with pytest.raises(ValueError, match="no usable images"):
        ingest_corpus(tmp_path)


def test_sample_count_zero(corpus):
    assert sample_patches(corpus, 0, seed=1) == []


def test_sample_deterministic(corpus):
    a = sample_patches(corpus, 20, seed=3)
    b = sample_patches(corpus, 20, seed=3)
    assert [p.origin for p in a] == [p.origin for p in b]
    assert all(np.array_equal(x.halftone_patch, y.halftone_patch) for x, y in zip(a, b))
    assert [p.origin for p in sample_patches(corpus, 20, seed=4)] != [p.origin for p in a]


def test_corner_coverage():
    t = make_triple(np.random.default_rng(0).random((64, 64)), "one")
    patches = sample_patches([t], 10_000, seed=0)
    ys = {p.origin[1] for p in patches}
    xs = {p.origin[2] for p in patches}
    assert {0, 32} <= ys and {0, 32} <= xs
    assert max(ys) == 32 and max(xs) == 32


def test_patch_alignment_uses_full_image_maps(corpus):
    by_id = {t.source_id: t for t in corpus}
    for p in sample_patches(corpus, 30, seed=11):
        sid, y, x = p.origin
        full = by_id[sid]
        sl = (slice(y, y + 32), slice(x, x + 32))
        assert np.array_equal(p.gray_patch, full.gray[sl])
        assert np.array_equal(p.gradient_patch, sobel_gradient(full.gray)[sl])
        assert np.array_equal(p.halftone_patch, error_diffuse_fs(full.gray)[sl])


def test_crop_differs_from_halftoning_the_crop(corpus):
    t = corpus[0]
    p = crop(t, 8, 8)
    assert not np.array_equal(p.halftone_patch, error_diffuse_fs(p.gray_patch))


def test_sample_rejects_small_image():
    t = ImageTriple(np.zeros((20, 40)), np.zeros((20, 40)), np.zeros((20, 40)), "small")
    with pytest.raises(ValueError, match="small"):
        sample_patches([t], 1, seed=0)


def test_batch_layout(corpus):
    patches = sample_patches(corpus, 64, seed=2)
    b = make_batch(patches, batch_size=64)
    assert b.halftone.shape == b.gray.shape == b.gradient.shape == (64, 1, 32, 32)
    assert b.gray.dtype == np.float32
    b64 = make_batch(patches, dtype=np.float64)
    for i, p in enumerate(patches):
        assert np.array_equal(b64.gray[i, 0], p.gray_patch)
        assert np.array_equal(b64.halftone[i, 0], p.halftone_patch)


def test_batch_of_identical_patches(corpus):
    p = crop(corpus[1], 4, 9)
    b = make_batch([p] * 5)
    assert all(np.array_equal(b.gradient[0], b.gradient[i]) for i in range(5))


def test_batch_size_checked(corpus):
    with pytest.raises(ValueError):
        make_batch(sample_patches(corpus, 3, seed=0), batch_size=4)
    with pytest.raises(ValueError):
        make_batch([])


def test_holdout_split(corpus):
    train, hold = split_holdout(corpus, 0.34, seed=0)
    assert len(hold) == 2 and len(train) == 4
    assert {t.source_id for t in train}.isdisjoint(t.source_id for t in hold)
    assert split_holdout(corpus, 0.05)[1] == []


def test_patch_cache_round_trip(corpus, tmp_path):
    patches = sample_patches(corpus, 7, seed=5)
    save_patch_cache(patches, tmp_path / "pool.bin")
    back = load_patch_cache(tmp_path / "pool.bin")
    assert [p.origin for p in back] == [p.origin for p in patches]
    for a, b in zip(patches, back):
        assert np.array_equal(a.gray_patch, b.gray_patch)
        assert np.array_equal(a.gradient_patch, b.gradient_patch)
        assert np.array_equal(a.halftone_patch, b.halftone_patch)


def test_patch_cache_corruption(corpus, tmp_path):
    path = tmp_path / "pool.bin"
    save_patch_cache(sample_patches(corpus, 2, seed=5), path)
    data = bytearray(path.read_bytes())
    data[40] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="CRC"):
        load_patch_cache(path)
