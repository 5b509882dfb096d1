import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mrgan.data import (PROFILES, AugmentProfile, BatchSampler, FormatError, ImageCorpus, Transform,
                        apply_transform, augment, batches, decode_pgm, load_corpus, load_image, rescale,
                        sample_transform, save_corpus, save_image, synthetic_blobs)
from mrgan.metrics import diversity_delta

unit_images = arrays(np.float64, (5, 7), elements=st.floats(0, 1, allow_nan=False))


@settings(max_examples=20)
@given(unit_images)
def test_image_roundtrip_quantization(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("img") / "a.pgm"
    save_image(img, path)
    assert np.max(np.abs(load_image(path) - img)) <= 1 / 65535 + 1e-7


def test_constant_image_exact(tmp_path):
    for value in (0.0, 1.0):
        save_image(np.full((4, 4), value), tmp_path / "c.pgm")
        assert np.array_equal(load_image(tmp_path / "c.pgm"), np.full((4, 4), value, np.float32))


def test_truncated_and_malformed_files(tmp_path):
    save_image(np.zeros((4, 4)), tmp_path / "a.pgm")
    buf = (tmp_path / "a.pgm").read_bytes()
    with pytest.raises(FormatError, match="byte"):
        decode_pgm(buf[:-3])
    with pytest.raises(FormatError, match="byte 0"):
        decode_pgm(b"P2" + buf[2:])
    with pytest.raises(FormatError, match="byte"):
        decode_pgm(b"P5\n4 x\n255\n")


def test_eight_bit_with_comment():
    img, maxval = decode_pgm(b"P5\n# c\n2 1\n255\n\x00\xff")
    assert maxval == 255 and img.tolist() == [[0, 255]]


def test_rescale_examples():
    assert rescale(0, (0, 255), (-1, 1)) == -1
    assert rescale(255, (0, 255), (-1, 1)) == 1
    assert rescale(127.5, (0, 255), (-1, 1)) == 0
    with pytest.raises(ValueError):
        rescale(1, (2, 2), (0, 1))


@given(arrays(np.float64, 8, elements=st.floats(0, 255, allow_nan=False)))
def test_rescale_roundtrip(x):
    assert np.allclose(rescale(rescale(x, (0, 255), (-1, 1)), (-1, 1), (0, 255)), x, atol=1e-6)


def test_identity_profile_and_double_flip():
    rng = np.random.default_rng(0)
    img = rng.random((6, 6)).astype(np.float32)
    out, _ = augment(img, None, AugmentProfile(), rng)
    assert np.array_equal(out, img)
    flip = Transform(flip=True)
    assert np.array_equal(apply_transform(apply_transform(img, flip, 1, 0.0), flip, 1, 0.0), img)


def test_shift_bound():
    rng = np.random.default_rng(1)
    prof = AugmentProfile(shift_frac=0.10)
    dx = np.array([sample_transform(prof, (100, 100), rng).dx for _ in range(10 ** 4)])
    assert np.max(np.abs(dx)) <= 10 and np.max(np.abs(dx)) > 9.9


def test_profile_validation():
    for bad in (dict(rotation_deg=(10.0, 5.0)), dict(shift_frac=0.6), dict(zoom_frac=-0.1)):
        with pytest.raises(ValueError):
            AugmentProfile(**bad)


@settings(max_examples=25)
@given(st.integers(0, 2 ** 32 - 1))
def test_augment_preserves_shape_range_and_binarity(seed):
    corpus = synthetic_blobs(2, 16, rng=np.random.default_rng(seed))
    rng = np.random.default_rng(seed)
    img, mask = augment(corpus.images[0], corpus.masks[0], PROFILES["full"], rng)
    assert img.shape == mask.shape == (16, 16)
    assert img.min() >= -1 and img.max() <= 1
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_synthetic_modes_and_range():
    one = synthetic_blobs(200, 16, modes=1, rng=np.random.default_rng(2))
    two = synthetic_blobs(200, 16, modes=2, rng=np.random.default_rng(2))
    assert diversity_delta(one.flat() - one.flat().mean(0)) <= 4
    assert diversity_delta(two.flat() - two.flat().mean(0)) >= 2
    for c in (one, two):
        assert c.images.min() >= -1 and c.images.max() <= 1


def test_corpus_validation():
    with pytest.raises(ValueError):
        ImageCorpus(np.full((1, 2, 2), 3.0))
    with pytest.raises(ValueError):
        ImageCorpus(np.zeros((1, 2, 2)), masks=np.full((1, 2, 2), 0.5))


def test_corpus_roundtrip(tmp_path):
    corpus = synthetic_blobs(4, 8, rng=np.random.default_rng(3))
    save_corpus(corpus, tmp_path / "c")
    back = load_corpus(tmp_path / "c")
    assert np.max(np.abs(back.images - corpus.images)) <= 2 / 65535 + 1e-6
    assert np.array_equal(back.masks, corpus.masks)


def test_batches_examples():
    corpus = synthetic_blobs(30, 8, rng=np.random.default_rng(4))
    epoch = list(batches(corpus, 2, np.random.default_rng(5), steps_per_epoch=1000, profile=PROFILES["mild"]))
    assert len(epoch) == 1000 and epoch[0][0].shape == (2, 1, 8, 8)
    with pytest.raises(ValueError):
        list(batches(corpus, 31, np.random.default_rng(5)))


def test_batches_bitwise_reproducible():
    corpus = synthetic_blobs(10, 8, rng=np.random.default_rng(6))

    def stream():
        return b"".join(im.tobytes() + m.tobytes() for im, m in
                        batches(corpus, 3, np.random.default_rng(7), 20, PROFILES["full"]))

    assert stream() == stream()


def test_sampler_state_resumes():
    corpus = synthetic_blobs(10, 8, rng=np.random.default_rng(8))
    a = BatchSampler(corpus, 3, np.random.default_rng(9), 5)
    for _ in range(4):
        a.next_batch()
    b = BatchSampler(corpus, 3, np.random.default_rng(0), 5)
    b.load_state(a.state())
    b.rng = np.random.Generator(np.random.PCG64())
    b.rng.bit_generator.state = a.rng.bit_generator.state
    for _ in range(6):
        assert np.array_equal(a.next_batch()[0], b.next_batch()[0])
