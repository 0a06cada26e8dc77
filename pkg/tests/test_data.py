import numpy as np
import pytest

from cfalab.data import (
    LabeledDataset,
    SyntheticSpec,
    default_spec,
    domain_colors,
    gen_pixel_toy,
    gen_structured_features,
    load_dataset,
    save_dataset,
    simplex_vertices,
    subsample_domain_labels,
)
from cfalab.errors import CurationError
from cfalab.linalg import make_rng, random_orthonormal
from cfalab.split import one_ood_cell_per_class


def _degenerate_spec(rotation):
    K, E, d1, d2 = 3, 2, 2, 1
    return SyntheticSpec(
        K=K, E=E, d1=d1, d2=d2, d=rotation.shape[0],
        class_means=np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]),
        class_covs=np.zeros((K, d1, d1)),
        domain_means=np.array([[2.0], [-2.0]]),
        domain_covs=np.zeros((E, d2, d2)),
        noise_scale=0.0,
        rotation=rotation,
    )


def test_degenerate_gaussians_hit_the_means():
    spec = _degenerate_spec(np.eye(5))
    ds = gen_structured_features(spec, np.ones((2, 3)), 4, make_rng(0))
    assert len(ds) == 2 * 3 * 4
    for x, k, e in zip(ds.inputs, ds.class_labels, ds.domain_labels):
        assert np.array_equal(x, np.concatenate([spec.class_means[k], spec.domain_means[e], [0.0, 0.0]]))


def test_inverse_rotation_recovers_blocks():
    r = random_orthonormal(5, make_rng(9))
    plain = gen_structured_features(_degenerate_spec(np.eye(5)), np.ones((2, 3)), 3, make_rng(0))
    rotated = gen_structured_features(_degenerate_spec(r), np.ones((2, 3)), 3, make_rng(0))
    assert np.allclose(rotated.inputs @ r, plain.inputs, atol=1e-12)


def test_one_dim_blocks_cluster():
    spec = default_spec(2, 2, d1=1, d2=1, d=4, rotate=False)
    ds = gen_structured_features(spec, np.ones((2, 2)), 50, make_rng(1))
    # coordinate 0 separates classes, coordinate 1 separates domains
    for col, labels in ((0, ds.class_labels), (1, ds.domain_labels)):
        side = ds.inputs[:, col] > 0
        assert np.array_equal(side, labels == labels[side][0])
        assert side.any() and not side.all()


def test_noise_block_covariance():
    spec = default_spec(3, 2, d1=2, d2=1, d=6, noise_scale=0.3, rng=make_rng(2))
    ds = gen_structured_features(spec, np.ones((2, 3)), 2000, make_rng(3))
    noise = (ds.inputs @ spec.rotation)[:, 3:]
    cov = np.cov(noise.T)
    assert np.allclose(cov, 0.09 * np.eye(3), atol=0.01)


def test_generation_is_pure():
    spec = default_spec(3, 2, rng=make_rng(2))
    a = gen_structured_features(spec, np.ones((2, 3)), 5, make_rng(7))
    b = gen_structured_features(spec, np.ones((2, 3)), 5, make_rng(7))
    assert np.array_equal(a.inputs, b.inputs)


def test_masked_cells_are_skipped():
    spec = default_spec(3, 2, rng=make_rng(2))
    mask = one_ood_cell_per_class(2, 3)
    ds = gen_structured_features(spec, mask, 5, make_rng(7))
    assert len(ds) == 5 * mask.id_cells.sum()
    assert mask.is_id(ds.domain_labels, ds.class_labels).all()


def test_uncovered_mask_rejected():
    spec = default_spec(2, 2, rng=make_rng(2))
    with pytest.raises(CurationError):
        gen_structured_features(spec, np.array([[1, 1], [0, 0]]), 5, make_rng(0))


def test_spec_rejects_bad_inputs():
    with pytest.raises(ValueError):
        _degenerate_spec(np.ones((5, 5)))
    with pytest.raises(ValueError):
        default_spec(3, 2, d1=2, d2=2, d=3, rotate=False)


def test_simplex_vertices():
    v = simplex_vertices(4, 3)
    assert np.allclose(np.linalg.norm(v, axis=1), 1)
    assert np.allclose(v.sum(axis=0), 0, atol=1e-12)
    gram = v @ v.T
    assert np.allclose(gram[~np.eye(4, dtype=bool)], -1 / 3)


def test_pixel_noise_free_cells_identical():
    ds = gen_pixel_toy(4, 3, 8, 3, np.ones((3, 4)), 0.0, make_rng(0))
    for e in range(3):
        for k in range(4):
            cell = ds.inputs[(ds.domain_labels == e) & (ds.class_labels == k)]
            assert np.array_equal(cell[0], cell[1])


@pytest.mark.parametrize("render", ["tint", "multiply"])
def test_pixel_class_and_domain_decodable(render):
    K, E, side = 4, 3, 8
    ds = gen_pixel_toy(K, E, side, 5, np.ones((E, K)), 0.0, make_rng(0), render=render)
    img = ds.inputs.reshape(len(ds), 3, side * side)
    # grayscale nearest-centroid oracle for the pattern
    gray = img.mean(axis=1)
    gray = gray - gray.mean(axis=1, keepdims=True)
    cents = np.stack([gray[ds.class_labels == k].mean(axis=0) for k in range(K)])
    pred = np.argmin(((gray[:, None] - cents[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.class_labels) == 1.0
    # channel-mean oracle for the hue
    chan = img.mean(axis=2)
    chan = chan - chan.mean(axis=1, keepdims=True)
    dcent = np.stack([chan[ds.domain_labels == e].mean(axis=0) for e in range(E)])
    dpred = np.argmin(((chan[:, None] - dcent[None]) ** 2).sum(-1), axis=1)
    assert np.mean(dpred == ds.domain_labels) == 1.0


def test_domain_colors_mean():
    c = domain_colors(3, 0.5)
    assert np.allclose(c.mean(axis=1), 0.5)
    assert np.all(c > 0)


def _flat_ds(n, E=2):
    return LabeledDataset(np.zeros((n, 1)), np.zeros(n), np.arange(n) % E, np.ones(n, bool), 1, E)


def test_subsample_domain_labels_counts():
    ds = _flat_ds(100)
    assert subsample_domain_labels(ds, 1.0, make_rng(0)).domain_label_present.all()
    assert not subsample_domain_labels(ds, 0.0, make_rng(0)).domain_label_present.any()
    half = subsample_domain_labels(ds, 0.5, make_rng(0))
    assert half.domain_label_present.sum() == 50
    assert set(half.domain_labels[half.domain_label_present]) == {0, 1}


@pytest.mark.parametrize("seed", range(20))
def test_subsample_keeps_every_domain(seed):
    ds = _flat_ds(30, E=3)
    out = subsample_domain_labels(ds, 0.1, make_rng(seed))
    assert out.domain_label_present.sum() == 3
    assert set(out.domain_labels[out.domain_label_present]) == {0, 1, 2}
    # input dataset untouched
    assert ds.domain_label_present.all()


def test_dataset_round_trip(tmp_path):
    ds = gen_pixel_toy(2, 2, 4, 3, np.ones((2, 2)), 0.3, make_rng(0))
    ds = subsample_domain_labels(ds, 0.5, make_rng(1))
    path = tmp_path / "d.cfd"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.inputs, ds.inputs)
    assert np.array_equal(back.class_labels, ds.class_labels)
    assert np.array_equal(back.domain_labels, ds.domain_labels)
    assert np.array_equal(back.domain_label_present, ds.domain_label_present)
    assert (back.K, back.E) == (2, 2)
    assert path.read_bytes()[:4] == b"CFD1"


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        load_dataset(p)
