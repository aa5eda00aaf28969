"""Concept scoring, refinement, prototypes, prediction: oracles and laws."""

import numpy as np
import pytest

from conceptmix import autodiff as ad
from conceptmix.concepts import (ConceptBank, ConceptRefiner,
                                 activation_scores, class_prototypes,
                                 concept_features, predict, similarity,
                                 smooth_activations)
from conceptmix.verify import finite_difference, relative_error

F64 = np.float64


def make_refiner(rng, c):
    return ConceptRefiner(rng, c, dtype=F64)


# -- activation scores ---------------------------------------------------------


def test_identical_vectors_score_one():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(4, 6))
    f = np.stack([p[2], p[0]])[None]  # (1, 2, 6)
    a = activation_scores(ad.Tensor(f), ad.Tensor(p)).data
    assert np.allclose(a[0, 0, 2], 1.0)
    assert np.allclose(a[0, 1, 0], 1.0)


def test_antipodal_vectors_score_minus_one():
    rng = np.random.default_rng(1)
    p = rng.normal(size=(3, 5))
    f = -p[1][None, None]
    a = activation_scores(ad.Tensor(f), ad.Tensor(p)).data
    assert np.allclose(a[0, 0, 1], -1.0)


def test_scores_match_cosine_loop_oracle():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(2, 3, 4))
    p = rng.normal(size=(5, 4))
    a = activation_scores(ad.Tensor(f), ad.Tensor(p)).data
    for n in range(2):
        for r in range(3):
            for c in range(5):
                want = (f[n, r] @ p[c]) / (np.linalg.norm(f[n, r]) * np.linalg.norm(p[c]))
                assert abs(a[n, r, c] - want) < 1e-12


def test_scores_bounded_many_trials():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(100, 10, 8)) * rng.uniform(0.1, 10, size=(100, 1, 1))
    p = rng.normal(size=(12, 8))
    a = activation_scores(ad.Tensor(f), ad.Tensor(p)).data
    assert np.all(a <= 1.0 + 1e-9) and np.all(a >= -1.0 - 1e-9)


def test_literal_mode_divides_by_squared_norms():
    rng = np.random.default_rng(4)
    f = rng.normal(size=(1, 2, 3))
    p = rng.normal(size=(2, 3))
    a = activation_scores(ad.Tensor(f), ad.Tensor(p), mode="literal-squared-norm").data
    for r in range(2):
        for c in range(2):
            nf, nc = np.linalg.norm(f[0, r]), np.linalg.norm(p[c])
            want = (f[0, r] @ p[c]) / (nf * nf * nc * nc)
            assert abs(a[0, r, c] - want) < 1e-12
    with pytest.raises(ValueError, match="unknown activation mode"):
        activation_scores(ad.Tensor(f), ad.Tensor(p), mode="nope")


# -- smoothing ----------------------------------------------------------------------


def test_smoothing_constant_row_uniform():
    a = ad.Tensor(np.full((2, 3, 5), 0.4))
    s = smooth_activations(a, tau=0.7).data
    assert np.allclose(s, 0.2)


def test_smoothing_low_temperature_sharpens():
    row = np.array([[[0.5, 0.6, 0.2]]])
    s = smooth_activations(ad.Tensor(row), tau=0.01).data
    assert s[0, 0, 1] > 1.0 - 1e-3


def test_smoothing_matches_softmax_oracle():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(7,))
    got = smooth_activations(ad.Tensor(a[None, None]), tau=1.0).data[0, 0]
    e = np.exp(a - a.max())
    assert np.allclose(got, e / e.sum(), atol=1e-12)


def test_smoothing_rows_sum_to_one():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(50, 9, 6))
    s = smooth_activations(ad.Tensor(a), tau=0.1).data
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-6)


def test_smoothing_rejects_bad_tau():
    with pytest.raises(ValueError, match="tau"):
        smooth_activations(ad.Tensor(np.zeros((1, 1, 2))), tau=0.0)


# -- concept features -------------------------------------------------------------------


def test_identity_kernels_reduce_to_spatial_max():
    rng = np.random.default_rng(7)
    refiner = make_refiner(rng, c=4)
    refiner.point_scale.data[...] = 1.0
    refiner.point_bias.data[...] = 0.0
    refiner.spatial_kernel.data[...] = 0.0
    refiner.spatial_bias.data[...] = 0.0
    at = rng.uniform(0, 1, size=(3, 6, 4))
    h = concept_features(ad.Tensor(at), (2, 3), refiner, use_norm=False).data
    assert np.allclose(h, at.max(axis=1), atol=1e-12)


def test_constant_input_normalizes_to_zero():
    rng = np.random.default_rng(8)
    refiner = make_refiner(rng, c=5)
    refiner.spatial_kernel.data[...] = 0.0
    at = np.full((2, 4, 5), 0.2)
    h = concept_features(ad.Tensor(at), (2, 2), refiner, use_norm=True).data
    # constant across concepts at every site -> LN maps to offset (zeros)
    assert np.allclose(h, 0.0, atol=1e-6)


def test_concept_features_match_loop_oracle():
    rng = np.random.default_rng(9)
    for trial in range(10):
        c, gh, gw = 3, 2, 3
        refiner = make_refiner(rng, c)
        refiner.point_scale.data[...] = rng.normal(size=c)
        refiner.point_bias.data[...] = rng.normal(size=c)
        refiner.spatial_kernel.data[...] = rng.normal(size=(c, 3, 3))
        refiner.spatial_bias.data[...] = rng.normal(size=c)
        at = rng.uniform(0, 1, size=(2, gh * gw, c))
        got = concept_features(ad.Tensor(at), (gh, gw), refiner, use_norm=True).data

        planes = at.reshape(2, gh, gw, c)
        w1 = refiner.point_scale.data
        b1 = refiner.point_bias.data
        w3 = refiner.spatial_kernel.data
        b3 = refiner.spatial_bias.data
        want = np.empty((2, c))
        for n in range(2):
            mixed = np.zeros((gh, gw, c))
            for y in range(gh):
                for x in range(gw):
                    for ch in range(c):
                        acc = w1[ch] * planes[n, y, x, ch] + b1[ch] + b3[ch]
                        for dy in range(3):
                            for dx in range(3):
                                yy, xx = y + dy - 1, x + dx - 1
                                if 0 <= yy < gh and 0 <= xx < gw:
                                    acc += w3[ch, dy, dx] * planes[n, yy, xx, ch]
                        mixed[y, x, ch] = acc
            mu = mixed.mean(axis=-1, keepdims=True)
            var = ((mixed - mu) ** 2).mean(axis=-1, keepdims=True)
            normed = (mixed - mu) / np.sqrt(var + 1e-6)
            normed = normed * refiner.norm.gain.data + refiner.norm.offset.data
            want[n] = normed.reshape(gh * gw, c).max(axis=0)
        assert np.max(np.abs(got - want)) < 1e-9


def test_bad_grid_rejected():
    rng = np.random.default_rng(10)
    refiner = make_refiner(rng, 2)
    with pytest.raises(ValueError, match="does not factor"):
        concept_features(ad.Tensor(np.zeros((1, 5, 2))), (2, 3), refiner)


# -- prototypes / similarity / prediction ---------------------------------------------------


def test_prototypes_single_shot_is_identity():
    rng = np.random.default_rng(11)
    h = rng.normal(size=(4, 1, 6))
    cp = class_prototypes(ad.Tensor(h)).data
    assert np.allclose(cp, h[:, 0])


def test_prototypes_mean_example():
    h = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    cp = class_prototypes(ad.Tensor(h)).data
    assert np.allclose(cp, [[0.5, 0.5]])


def test_prototypes_match_mean_oracle_and_permutation_invariant():
    rng = np.random.default_rng(12)
    h = rng.normal(size=(3, 5, 7))
    cp = class_prototypes(ad.Tensor(h)).data
    assert np.allclose(cp, h.mean(axis=1), atol=1e-12)
    perm = h[:, rng.permutation(5)]
    assert np.allclose(class_prototypes(ad.Tensor(perm)).data, cp, atol=1e-12)


def test_similarity_self_and_orthogonal():
    cp = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    hq = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    m = similarity(ad.Tensor(hq), ad.Tensor(cp)).data
    assert np.allclose(m[0], [0.0, 1.0])
    assert np.allclose(m[1], [0.0, 0.0])


def test_similarity_matches_cosine_loop():
    rng = np.random.default_rng(13)
    hq = rng.normal(size=(6, 5))
    cp = rng.normal(size=(3, 5))
    m = similarity(ad.Tensor(hq), ad.Tensor(cp)).data
    for q in range(6):
        for n in range(3):
            want = hq[q] @ cp[n] / (np.linalg.norm(hq[q]) * np.linalg.norm(cp[n]))
            assert abs(m[q, n] - want) < 1e-12


def test_predict_argmax_and_tie_rule():
    m = np.array([[0.9, 0.1, 0.0], [0.3, 0.3, 0.1], [0.0, 0.2, 0.8]])
    assert np.array_equal(predict(m), [0, 0, 2])
    with pytest.raises(ValueError, match="non-finite"):
        predict(np.array([[np.nan, 0.0]]))


def test_predict_invariant_to_positive_query_rescaling():
    rng = np.random.default_rng(14)
    hq = rng.normal(size=(8, 6))
    cp = rng.normal(size=(4, 6))
    base = predict(similarity(ad.Tensor(hq), ad.Tensor(cp)).data)
    scaled = hq.copy()
    scaled[3] *= 5.0
    again = predict(similarity(ad.Tensor(scaled), ad.Tensor(cp)).data)
    assert np.array_equal(base, again)


# -- concept bank ----------------------------------------------------------------------------


def test_bank_reinitializes_degenerate_rows():
    rng = np.random.default_rng(15)
    bank = ConceptBank(rng, 5, 8, dtype=F64)
    bank.matrix.data[2] = 0.0
    bank.matrix.data[4] = 1e-10
    fixed = bank.reinit_degenerate_rows()
    assert fixed == 2
    norms = np.linalg.norm(bank.matrix.data, axis=1)
    assert np.all(norms > 1e-8)
    assert bank.reinit_degenerate_rows() == 0


# -- gradient check ---------------------------------------------------------------------------


def test_concept_chain_gradients_match_finite_differences():
    rng = np.random.default_rng(16)
    for attempt in range(10):
        c, gh, gw = 4, 2, 2
        bank = ConceptBank(rng, c, 5, dtype=F64)
        refiner = make_refiner(rng, c)
        refiner.spatial_kernel.data[...] = 0.3 * rng.normal(size=(c, 3, 3))
        feats = rng.normal(size=(2, gh * gw, 5))
        proj = ad.Tensor(rng.normal(size=(2, c)))

        def loss_value():
            a = activation_scores(ad.Tensor(feats), bank.matrix)
            at = smooth_activations(a, tau=0.5)
            h = concept_features(at, (gh, gw), refiner, use_norm=True)
            return (h * proj).sum()

        # keep the maxpool argmax stable: resample when the top-two pooled
        # candidates are closer than 1e-6
        with ad.no_grad():
            a = activation_scores(ad.Tensor(feats), bank.matrix)
            at = smooth_activations(a, tau=0.5)
            planes = at.data.reshape(2, gh, gw, c)
            from conceptmix.kernels import dwconv3x3_forward
            mixed = (planes * refiner.point_scale.data + refiner.point_bias.data
                     + dwconv3x3_forward(planes, refiner.spatial_kernel.data,
                                         refiner.spatial_bias.data))
            mu = mixed.mean(axis=-1, keepdims=True)
            var = ((mixed - mu) ** 2).mean(axis=-1, keepdims=True)
            normed = (mixed - mu) / np.sqrt(var + 1e-6)
            normed = normed * refiner.norm.gain.data + refiner.norm.offset.data
            site = np.sort(normed.reshape(2, gh * gw, c), axis=1)
        if np.min(site[:, -1, :] - site[:, -2, :]) < 1e-6:
            continue

        params = dict(bank.named_params())
        params.update({f"refiner.{k}": v for k, v in refiner.named_params().items()})
        loss = loss_value()
        loss.backward()
        analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                    for k, t in params.items()}
        numeric = finite_difference(lambda: float(loss_value().data),
                                    {k: t.data for k, t in params.items()})
        for name in params:
            err = relative_error(analytic[name], numeric[name])
            assert err < 1e-4, f"{name}: rel err {err:.2e}"
        return
    pytest.fail("could not find a tie-free sample in 10 attempts")
