import json

import numpy as np
import pytest
import scipy.sparse as sp

from deepkernel import dkt
from deepkernel.metrics import mse, psnr
from deepkernel.phantom import (
    NUCLEI,
    REGIONS,
    DomainError,
    Sinogram,
    angle_subsets,
    directory_digest,
    generate_phantom,
    load_case,
    load_manifest,
    make_dataset,
    mlem_reconstruct,
    osem,
    poisson_loglik,
    poisson_sample,
    projector,
    radon_adjoint,
    radon_forward,
    simulate_case,
)


# -- phantom ------------------------------------------------------------------------
def test_masks_disjoint_and_covering():
    case = generate_phantom(0, 64, 3)
    stack = np.sum([m.astype(int) for m in case.masks.values()], axis=0)
    np.testing.assert_array_equal(stack, 1)
    present = {name for name, m in case.masks.items() if m.any()}
    assert len(present) >= 5 and set(REGIONS) <= present


def test_same_seed_same_case():
    a, b = generate_phantom(5, 48, 2), generate_phantom(5, 48, 2)
    for f in ("labels", "activity", "t1", "t2"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert not np.array_equal(a.activity, generate_phantom(6, 48, 2).activity)


def test_nuclei_are_small():
    for seed in range(5):
        case = generate_phantom(seed, 64, 1)
        support = (case.labels > 0).sum()
        for name in NUCLEI:
            frac = case.masks[name].sum() / support
            assert 0 < frac <= 0.06


def test_contrasts_and_pet_only_gradient():
    case = generate_phantom(1, 64, 1)
    assert np.all(case.activity >= 0)
    gm = case.masks["gray_matter"][0] & (np.abs(np.gradient(case.labels[0].astype(float))[0]) == 0)
    # uptake varies inside a single tissue class far more than the MR contrasts do
    act_cv = case.activity[0][gm].std() / case.activity[0][gm].mean()
    t1_cv = case.t1[0][gm].std() / case.t1[0][gm].mean()
    assert act_cv > 2 * t1_cv
    # T1 and T2 order tissues differently
    wm, g = case.masks["white_matter"][0], case.masks["gray_matter"][0]
    assert case.t1[0][wm].mean() > case.t1[0][g].mean()
    assert case.t2[0][wm].mean() < case.t2[0][g].mean()


def test_small_phantom_rejected():
    with pytest.raises(ValueError):
        generate_phantom(0, 16)


# -- projector ------------------------------------------------------------------------
def test_angle_zero_column_sums():
    sino = radon_forward(np.array([[1.0, 2.0], [3.0, 4.0]]), n_angles=1, n_bins=2)
    np.testing.assert_allclose(sino.data[0], [4.0, 6.0], atol=1e-12)


def test_zero_and_negative_images():
    assert np.all(radon_forward(np.zeros((8, 8)), 6, 13).data == 0)
    with pytest.raises(DomainError):
        radon_forward(-np.ones((4, 4)), 4, 7)


def test_projector_adjoint_identity():
    rng = np.random.default_rng(0)
    for h, w, na, nb in ((16, 16, 12, 25), (20, 12, 9, 31), (64, 64, 60, 95)):
        x = rng.uniform(size=(h, w))
        y = rng.uniform(size=(na, nb))
        lhs = np.sum(radon_forward(x, na, nb).data * y)
        rhs = np.sum(x * radon_adjoint(Sinogram(y, (h, w))))
        assert abs(lhs - rhs) <= 1e-5 * abs(lhs)


def test_projector_preserves_mass_per_angle():
    a = projector(32, 32, 10, 47)
    x = np.zeros(32 * 32)
    x[16 * 32 + 16] = 1.0
    per_angle = (a @ x).reshape(10, 47).sum(axis=1)
    # exact along the axes; unit-step bilinear sampling is within a few percent elsewhere
    np.testing.assert_allclose(per_angle[[0, 5]], 1.0, atol=1e-12)
    np.testing.assert_allclose(per_angle, 1.0, atol=0.03)


# -- Poisson thinning ---------------------------------------------------------------------
def test_poisson_examples():
    zero = Sinogram(np.zeros((3, 5)), (4, 4))
    assert np.all(poisson_sample(zero, 20, 1).data == 0)
    with pytest.raises(DomainError):
        poisson_sample(zero, 0.5, 1)
    sino = Sinogram(np.full((100, 100), 40.0), (4, 4))
    draws = poisson_sample(sino, 20, 7).data
    assert np.all(draws == np.round(draws))
    se = np.sqrt(2.0 / draws.size)
    assert abs(draws.mean() - 2.0) < 5 * se
    assert poisson_sample(sino, 20, 7).data.tobytes() == draws.tobytes()


# -- EM reconstruction ------------------------------------------------------------------
def test_em_closed_forms():
    np.testing.assert_allclose(osem(sp.csr_matrix([[1.0]]), [5.0], 1), [5.0])
    np.testing.assert_allclose(osem(sp.csr_matrix([[1.0, 1.0]]), [4.0], 1), [2.0, 2.0])


def test_loglik_monotone_on_noiseless_data():
    case = generate_phantom(2, 32, 1)
    a = projector(32, 32, 30, 47)
    y = a @ case.activity[0].ravel() * 50
    history = []
    osem(a, y, 21, history=history)
    ll = [poisson_loglik(a, y, x) for x in history]
    assert all(b >= a_ - 1e-9 * abs(a_) for a_, b in zip(ll, ll[1:]))
    assert all(np.all(x >= 0) for x in history)


def test_osem_non_negative_and_zero_sensitivity_warning():
    a = sp.csr_matrix(np.array([[1.0, 0.0, 2.0], [0.5, 0.0, 1.0]]))
    with pytest.warns(RuntimeWarning, match="zero sensitivity"):
        x = osem(a, [3.0, 1.0], 5)
    assert x[1] == 0 and np.all(x >= 0)


def test_subsets_must_divide_angles():
    with pytest.raises(ValueError):
        angle_subsets(10, 5, 3)
    rows = angle_subsets(6, 2, 3)
    assert [list(r) for r in rows] == [[0, 1, 6, 7], [2, 3, 8, 9], [4, 5, 10, 11]]


def test_reconstruction_scaled_by_drf():
    img = generate_phantom(3, 32, 1).activity[0] * 100
    expected = radon_forward(img, 30, 47)
    counts = Sinogram(expected.data / 10, expected.image_shape, 10)
    rec = mlem_reconstruct(counts, 10, 3)
    assert rec.sum() == pytest.approx(mlem_reconstruct(expected, 10, 3).sum(), rel=1e-6)


def test_noise_increases_with_drf():
    errs = {20: [], 200: []}
    for seed in range(3):
        case = simulate_case(generate_phantom(seed, 32, 1), [20, 200], seed, n_angles=30, n_bins=47)
        for d in errs:
            errs[d].append(mse(case.low_dose[d], case.std))
    assert np.mean(errs[200]) > np.mean(errs[20])


# -- dataset ------------------------------------------------------------------------------
def test_dataset_layout(tiny_dataset):
    manifest = load_manifest(tiny_dataset)
    assert manifest["drfs"] == [20, 1000]
    assert len(manifest["cases"]) == 6
    for entry in manifest["cases"]:
        names = sorted(p.name for p in (tiny_dataset / entry["dir"]).iterdir())
        assert names == sorted(f"{n}.dkt1" for n in ("masks", "activity", "t1", "t2", "std", "ld_x20", "ld_x1000"))
    tests = sorted(i for f in manifest["folds"] for i in f["test"])
    assert tests == list(range(6))
    assert manifest["projector"]["n_angles"] == 60


def test_dataset_regeneration_is_byte_identical(tiny_dataset, tmp_path):
    make_dataset(6, [20, 1000], 3, tmp_path, size=32, depth=4, n_folds=3)
    assert directory_digest(tmp_path) == directory_digest(tiny_dataset)


def test_high_drf_is_noisier_on_every_case(tiny_dataset):
    manifest = load_manifest(tiny_dataset)
    for entry in manifest["cases"]:
        case = load_case(tiny_dataset, entry, [20, 1000])
        assert psnr(case.low_dose[1000], case.std) < psnr(case.low_dose[20], case.std)


def test_dkt_round_trip(tmp_path):
    for arr in (np.arange(6, dtype=np.float32).reshape(2, 3), np.random.default_rng(0).normal(size=(2, 1, 3))):
        dkt.save(tmp_path / "a.dkt1", arr)
        back = dkt.load(tmp_path / "a.dkt1")
        assert back.dtype == arr.dtype and back.tobytes() == arr.tobytes()
    raw = dkt.to_bytes(np.ones(2, np.float32))
    assert raw[:4] == b"DKT1" and raw[4] == 0
    assert int.from_bytes(raw[5:9], "little") == 1 and int.from_bytes(raw[9:13], "little") == 2
    with pytest.raises(dkt.DKTFormatError):
        dkt.from_bytes(b"NOPE" + raw[4:])
