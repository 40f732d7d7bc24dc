import numpy as np
import pytest

from eeoffload import classifier as dc
from eeoffload import data
from eeoffload.distortion import KINDS, Kind, apply_blur, apply_noise
from eeoffload.errors import CheckpointError, DatasetError


@pytest.fixture(scope="module")
def images():
    return data.load_dataset("shapes-v1", seed=7, classes=3, per_class=20).train


def dft_log_magnitude(gray):
    """Independent oracle: DFT by explicit matrix products, then log1p and centring."""
    h, w = gray.shape
    fy = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fx = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    mag = np.log1p(np.abs(fy @ gray @ fx.T))
    return np.roll(mag, (h // 2, w // 2), axis=(0, 1))


def high_band(spec):
    h, w = spec.shape
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot(yy - h // 2, xx - w // 2) / (h / 2)
    return spec[(r >= 0.6) & (r < 1.0)].mean()


def test_spectrum_matches_matrix_dft(images):
    img = images.images[0]
    want = dft_log_magnitude(img.astype(np.float64).mean(axis=2))
    want = (want - want.mean()) / want.std()
    np.testing.assert_allclose(dc.extract_spectrum(img), want, atol=1e-4)


def test_spectrum_shape_standardization_and_resize(images):
    s = dc.extract_spectrum(images.images[1])
    assert s.shape == (64, 64) and s.dtype == np.float32
    assert abs(float(s.mean())) < 1e-5 and float(s.std()) == pytest.approx(1.0, abs=1e-4)
    assert dc.extract_spectrum(images.images[1], 32).shape == (32, 32)
    assert dc.spectra(images.images[:3]).shape == (3, 1, 64, 64)


def test_constant_image_concentrates_at_dc():
    img = np.full((16, 16, 3), 90, np.uint8)
    mag = np.abs(np.fft.fft2(img.mean(axis=2)))
    assert mag[0, 0] > 0 and np.count_nonzero(mag > 1e-9) == 1
    s = dc.extract_spectrum(img, 16)
    assert np.argmax(s) == np.ravel_multi_index((8, 8), (16, 16))
    with pytest.raises(ValueError):
        dc.extract_spectrum(np.zeros((0, 4, 3), np.uint8))


def test_translation_invariance(images):
    img = images.images[2]
    a = dc.extract_spectrum(img)
    b = dc.extract_spectrum(np.roll(img, (5, -9), axis=(0, 1)))
    assert np.linalg.norm(a - b) / np.linalg.norm(a) < 1e-4


def test_high_band_energy_ordering(images):
    for img in images.images[:10]:
        pristine = dft_log_magnitude(img.astype(np.float64).mean(axis=2))
        blurred = dft_log_magnitude(apply_blur(img, 5).astype(np.float64).mean(axis=2))
        noisy = dft_log_magnitude(apply_noise(img, 40, 1).astype(np.float64).mean(axis=2))
        assert high_band(blurred) < high_band(pristine) < high_band(noisy)
        # the package's band helper agrees on raw spectra
        assert dc.radial_band_mean(blurred, 0.6, 1.0) == pytest.approx(high_band(blurred))


def test_distortion_labelled_balances_kinds(images):
    imgs, codes, specs = dc.distortion_labelled(images, seed=0, limit=10)
    assert len(imgs) == 30
    assert np.bincount(codes).tolist() == [10, 10, 10]
    assert [s.kind.code for s in specs] == codes.tolist()


@pytest.fixture(scope="module")
def small_clf(images):
    imgs, codes, _ = dc.distortion_labelled(images, seed=0)
    vimgs, vcodes, _ = dc.distortion_labelled(images.subset(np.arange(10)), seed=1)
    hyper = dc.ClassifierHyper(max_epochs=2, width=2, seed=3)
    return dc.train_classifier(imgs, codes, vimgs, vcodes, hyper, size=32), (imgs, codes, vimgs, vcodes, hyper)


def test_training_is_deterministic(small_clf):
    clf, (imgs, codes, vimgs, vcodes, hyper) = small_clf
    again = dc.train_classifier(imgs, codes, vimgs, vcodes, hyper, size=32)
    assert again.to_bytes() == clf.to_bytes()


def test_classify_returns_closed_set(small_clf, images):
    clf, _ = small_clf
    for img in images.images[:5]:
        assert dc.classify_distortion(clf, img) in KINDS
    codes = clf.predict_codes(list(images.images[:5]))
    assert codes.shape == (5,) and set(codes.tolist()) <= {0, 1, 2}
    assert clf.predict_codes([]).shape == (0,)


def test_training_errors(images):
    imgs, codes, _ = dc.distortion_labelled(images, seed=0, limit=20)
    keep = codes != Kind.NOISE.code
    with pytest.raises(DatasetError, match="noise"):
        dc.train_classifier([i for i, k in zip(imgs, keep) if k], codes[keep], imgs, codes)
    with pytest.raises(DatasetError):
        dc.train_classifier(imgs[:6], codes[:6], imgs, codes)


def test_checkpoint_round_trip(tmp_path, small_clf):
    clf, _ = small_clf
    buf = clf.save(tmp_path / "dc.eexp")
    back = dc.DistortionClassifier.load(tmp_path / "dc.eexp")
    assert back.to_bytes() == buf and back.size == 32


def test_checkpoint_rejects_wrong_format_and_order(small_clf):
    from eeoffload.nn import checkpoint

    clf, _ = small_clf
    header, tensors = checkpoint.decode(clf.to_bytes())
    with pytest.raises(CheckpointError):
        dc.DistortionClassifier.from_bytes(checkpoint.encode({**header, "format": "x"}, tensors))
    with pytest.raises(CheckpointError):
        dc.DistortionClassifier.from_bytes(checkpoint.encode({**header, "kinds": ["blur", "pristine", "noise"]}, tensors))
    with pytest.raises(CheckpointError):
        dc.DistortionClassifier.from_bytes(checkpoint.encode(header, tensors[:-1]))


def test_confusion_csv():
    m = dc.confusion_matrix([0, 0, 1, 2, 2], [0, 1, 1, 2, 0])
    assert m.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 1]]
    assert dc.confusion_csv(m).splitlines() == [
        "true\\pred,pristine,blur,noise", "pristine,1,1,0", "blur,0,1,0", "noise,1,0,1"]


def test_macs_formula():
    net = dc.build_network(64, 8)
    want = 64 * 64 * 8 * 9 + 32 * 32 * 16 * 8 * 9 + 16 * 16 * 16 * 3
    assert dc.DistortionClassifier(net).macs() == want
