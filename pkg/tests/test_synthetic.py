import numpy as np

from vesselseg.synthetic import make_synthetic_dataset, synthetic_sample


def test_shapes_and_ranges():
    rng = np.random.default_rng(0)
    sample, width_map = synthetic_sample(rng, size=256)
    assert sample.image.shape == (256, 256, 3)
    assert sample.label.shape == (256, 256)
    assert width_map.shape == (256, 256)
    assert sample.image.min() >= 0 and sample.image.max() <= 1
    assert set(np.unique(sample.label)) == {0, 1}
    assert np.array_equal(width_map > 0, sample.label > 0)


def test_width_population():
    samples, width_maps = make_synthetic_dataset(4, seed=1)
    widths = np.unique(np.concatenate([wm[wm > 0].ravel() for wm in width_maps]))
    assert widths.min() >= 1 and widths.max() <= 7
    tiny = sum(((wm > 0) & (wm <= 3)).sum() for wm in width_maps)
    assert tiny > 0


def test_structures_brighter_than_background():
    rng = np.random.default_rng(2)
    sample, _ = synthetic_sample(rng, size=256)
    gray = sample.image[..., 0]
    assert gray[sample.label > 0].mean() > gray[sample.label == 0].mean() + 0.1


def test_deterministic():
    a_samples, a_maps = make_synthetic_dataset(2, seed=3)
    b_samples, b_maps = make_synthetic_dataset(2, seed=3)
    for a, b in zip(a_samples, b_samples):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.label, b.label)
    for a, b in zip(a_maps, b_maps):
        assert np.array_equal(a, b)


def test_vessel_fraction_reasonable():
    samples, _ = make_synthetic_dataset(3, seed=4)
    for s in samples:
        frac = s.label.mean()
        assert 0.005 < frac < 0.4
