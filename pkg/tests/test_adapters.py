import numpy as np
import pytest

from lorax.adapters import (AdapterBundle, DenseLoraXAdapter, LoraAdapter, LoraXAdapter, export_up_down, init_lorax,
                            materialize_delta, merge_into_base, validate_adapter)
from lorax.errors import BasisMismatch, ClampNotice, ShapeError
from lorax.numerics import svd, truncated_svd
from lorax.tensor_store import read_bundle, write_bundle


def test_init_zero(rng):
    base = truncated_svd(rng.standard_normal((6, 4)), 4)
    ad = init_lorax(base, 2, "m")
    np.testing.assert_array_equal(ad.delta_sigma, [0, 0])
    assert ad.n_params == 2
    assert np.all(materialize_delta(ad, base) == 0)


def test_init_clamp(rng):
    base = svd(rng.standard_normal((64, 64)))
    with pytest.warns(ClampNotice):
        ad = init_lorax(base, 320)
    assert ad.rank == 64


def test_single_direction(rng):
    base = svd(rng.standard_normal((5, 4)))
    ad = LoraXAdapter("m", np.array([1.0, 0, 0, 0]), base.basis_id)
    np.testing.assert_allclose(materialize_delta(ad, base), np.outer(base.u[:, 0], base.v[:, 0]), atol=1e-15)


def test_identity_base_eigenvalues():
    base = svd(np.eye(3))
    ad = LoraXAdapter("m", np.array([0.5, -0.25, 0.0]), base.basis_id)
    dw = materialize_delta(ad, base)
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(dw).real), [-0.25, 0.0, 0.5], atol=1e-14)


def test_dense_materializes_projection(rng):
    w = rng.standard_normal((8, 6))
    f = truncated_svd(w, 3)
    dw = f.u @ rng.standard_normal((3, 3)) @ f.v.T
    ad = DenseLoraXAdapter("m", f.u.T @ dw @ f.v, f.basis_id)
    np.testing.assert_allclose(materialize_delta(ad, f), f.u @ f.u.T @ dw @ f.v @ f.v.T, atol=1e-12)
    np.testing.assert_allclose(materialize_delta(ad, f), dw, atol=1e-12)


def test_basis_mismatch(rng):
    a = svd(rng.standard_normal((4, 4)))
    b = svd(rng.standard_normal((4, 4)))
    with pytest.raises(BasisMismatch):
        materialize_delta(LoraXAdapter("m", np.ones(2), a.basis_id), b)
    with pytest.raises(BasisMismatch):
        materialize_delta(LoraXAdapter("m", np.ones(5), a.basis_id), a)


def test_merge(rng):
    w = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(merge_into_base(w, np.zeros_like(w)), w)
    np.testing.assert_array_equal(merge_into_base(np.zeros_like(w), w), w)
    np.testing.assert_array_equal(merge_into_base(w, -w), np.zeros_like(w))
    with pytest.raises(ShapeError):
        merge_into_base(w, w.T)


def test_export_up_down(rng):
    f = svd(rng.standard_normal((7, 5)))
    up, down = export_up_down(init_lorax(f, 3), f)
    np.testing.assert_array_equal(up, f.u[:, :3])
    assert np.all(down == 0)
    up, down = export_up_down(LoraXAdapter("m", np.array([2.0]), f.basis_id), f)
    np.testing.assert_array_equal(up[:, 0], f.u[:, 0])
    np.testing.assert_allclose(down[0], 2 * f.v[:, 0])
    for _ in range(20):
        ad = LoraXAdapter("m", rng.standard_normal(5), f.basis_id)
        up, down = export_up_down(ad, f)
        dw = materialize_delta(ad, f)
        assert np.linalg.norm(up @ down - dw) <= 1e-12 * max(1, np.linalg.norm(dw))


def test_validate():
    assert validate_adapter(LoraXAdapter("m", np.array([-1.0, -3.0])), [5, 3]).valid
    rep = validate_adapter(LoraXAdapter("m", np.array([-6.0, 0.0])), [5, 3])
    assert rep.violations == [1]
    assert validate_adapter(LoraXAdapter("m", np.zeros(4)), [1, 1, 0, 0]).valid


def test_subspace_membership(rng):
    for _ in range(50):
        f = truncated_svd(rng.standard_normal((10, 7)), rng.integers(1, 8))
        dw = materialize_delta(LoraXAdapter("m", rng.standard_normal(f.k), f.basis_id), f)
        proj = f.u @ f.u.T @ dw @ f.v @ f.v.T
        assert np.linalg.norm(proj - dw) <= 1e-10 * max(1, np.linalg.norm(dw))


def test_lora_shape_error():
    with pytest.raises(ShapeError):
        LoraAdapter("m", np.zeros((4, 2)), np.zeros((3, 5)))


def test_bundle_file_round_trip(tmp_path, rng):
    ads = AdapterBundle({
        "db.0.attentions.0.tb.0.to_q": LoraXAdapter("db.0.attentions.0.tb.0.to_q", rng.standard_normal(4)),
        "db.0.attentions.0.tb.0.to_k": DenseLoraXAdapter("db.0.attentions.0.tb.0.to_k", rng.standard_normal((3, 3))),
        "db.0.attentions.0.tb.0.to_v": LoraAdapter("db.0.attentions.0.tb.0.to_v", rng.standard_normal((6, 2)),
                                                   rng.standard_normal((2, 5))),
    }, base_model_hash="abc123")
    p = tmp_path / "ad.safetensors"
    write_bundle(ads.to_tensor_bundle(), p)
    back = AdapterBundle.from_tensor_bundle(read_bundle(p))
    assert back.base_model_hash == "abc123"
    assert set(back.modules) == set(ads.modules)
    for k, ad in ads.modules.items():
        got = back.modules[k]
        assert type(got) is type(ad)
        if isinstance(ad, LoraXAdapter):
            np.testing.assert_allclose(got.delta_sigma, ad.delta_sigma, rtol=1e-7)
        elif isinstance(ad, DenseLoraXAdapter):
            np.testing.assert_allclose(got.delta_sigma_dense, ad.delta_sigma_dense, rtol=1e-7)
        else:
            np.testing.assert_allclose(got.delta(), ad.delta(), rtol=1e-6, atol=1e-6)


def test_lorax_bundle_size_is_r_per_module():
    ads = AdapterBundle({f"m{i}": LoraXAdapter(f"m{i}", np.zeros(320)) for i in range(4)})
    tb = ads.to_tensor_bundle("F16")
    assert sum(e.data.size for e in tb.values()) == 4 * 320
