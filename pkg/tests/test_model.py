"""Composition tests for the full few-shot model."""

import numpy as np
import pytest

from conceptmix import autodiff as ad
from conceptmix.backbone import PRECOMPUTED_KIND, TOY_VIT, BackboneConfig
from conceptmix.losses import PER_PATCH_MEAN, POOLED_PER_IMAGE
from conceptmix.model import EpisodeOutput, FewShotConceptModel, ModelConfig


def tiny_config(**kw) -> ModelConfig:
    bb = BackboneConfig(kind=kw.pop("kind", TOY_VIT), depth=3, width=8,
                        patch_grid=(2, 2), tap_points=(0, 1, 2))
    defaults = dict(backbone=bb, num_experts=2, num_concepts=6, rank=2,
                    alpha=4.0, adapter_dropout=0.0, tau=0.5, attention_dim=4)
    defaults.update(kw)
    return ModelConfig(**defaults)


def episode_arrays(rng, n=3, k=2, q=2, r=4, d=5):
    return (rng.normal(size=(n, k, r, d)), rng.normal(size=(n, q, r, d)))


def test_config_validation():
    with pytest.raises(ValueError, match="tau"):
        tiny_config(tau=0.0)
    with pytest.raises(ValueError, match="concepts"):
        tiny_config(num_concepts=1)


def test_parameter_families_present():
    m = FewShotConceptModel(tiny_config(), seed=0, input_dim=5)
    names = set(m.named_params())
    assert "concepts.matrix" in names
    assert any(n.startswith("refiner.") for n in names)
    assert any(n.startswith("aggregator.") for n in names)
    assert any(n.startswith("adapters.block0.query.bank.") for n in names)
    assert any(".guide." in n for n in names)
    for t in m.named_params().values():
        assert t.requires_grad


def test_toggles_prune_parameter_families():
    no_guide = FewShotConceptModel(tiny_config(use_guidance=False), 0, 5)
    assert not any(".guide." in n for n in no_guide.named_params())
    no_mfa = FewShotConceptModel(tiny_config(use_mfa=False), 0, 5)
    assert not any(n.startswith("aggregator.") for n in no_mfa.named_params())


def test_toggles_do_not_shift_other_initializations():
    base = FewShotConceptModel(tiny_config(), seed=9, input_dim=5)
    lean = FewShotConceptModel(tiny_config(use_guidance=False, use_mfa=False),
                               seed=9, input_dim=5)
    a, b = base.named_params(), lean.named_params()
    for name in b:
        assert np.array_equal(a[name].data, b[name].data), name


def test_same_seed_identical_state():
    a = FewShotConceptModel(tiny_config(), seed=4, input_dim=5)
    b = FewShotConceptModel(tiny_config(), seed=4, input_dim=5)
    sa, sb = a.state_arrays(), b.state_arrays()
    assert sa.keys() == sb.keys()
    for k in sa:
        assert np.array_equal(sa[k], sb[k]), k


def test_episode_forward_shapes_and_labels():
    m = FewShotConceptModel(tiny_config(), seed=1, input_dim=5)
    s, q = episode_arrays(np.random.default_rng(0))
    out = m.episode_forward(s, q)
    assert out.similarity.shape == (6, 3)
    assert out.prototypes.shape == (3, 6)
    assert out.fused_query.shape == (6, 6)
    assert out.smoothed_support.shape == (6, 4, 6)
    assert np.array_equal(out.query_labels, [0, 0, 1, 1, 2, 2])
    assert out.predictions().shape == (6,)
    assert 0.0 <= out.accuracy() <= 1.0
    assert np.all(np.isfinite(out.similarity.data))
    assert np.all(out.similarity.data <= 1.0 + 1e-12)


def test_forward_deterministic_in_eval_mode():
    m = FewShotConceptModel(tiny_config(), seed=1, input_dim=5)
    s, q = episode_arrays(np.random.default_rng(1))
    a = m.episode_forward(s, q).similarity.data
    b = m.episode_forward(s, q).similarity.data
    assert np.array_equal(a, b)


def test_cd_vector_modes():
    m = FewShotConceptModel(tiny_config(), seed=2, input_dim=5)
    s, q = episode_arrays(np.random.default_rng(2))
    pooled = m.episode_forward(s, q, cd_input=POOLED_PER_IMAGE)
    assert pooled.cd_vectors.shape == (12, 6)
    per_patch = m.episode_forward(s, q, cd_input=PER_PATCH_MEAN)
    # means of patch-level concept distributions still sum to one
    sums = per_patch.cd_vectors.data.sum(axis=-1)
    assert np.max(np.abs(sums - 1.0)) < 1e-6
    with pytest.raises(ValueError, match="cd_input"):
        m.episode_forward(s, q, cd_input="raw")


def test_zeroed_aggregation_reduces_to_concept_only_predictions():
    s, q = episode_arrays(np.random.default_rng(3))
    full = FewShotConceptModel(tiny_config(), seed=5, input_dim=5)
    full.aggregator.zero_projection()
    lean = FewShotConceptModel(tiny_config(use_mfa=False), seed=5, input_dim=5)
    a = full.episode_forward(s, q)
    b = lean.episode_forward(s, q)
    assert np.max(np.abs(a.similarity.data - b.similarity.data)) == 0.0
    assert np.array_equal(a.predictions(), b.predictions())


def test_guidance_changes_forward_but_not_shared_parameters():
    s, q = episode_arrays(np.random.default_rng(4))
    guided = FewShotConceptModel(tiny_config(), seed=6, input_dim=5)
    plain = FewShotConceptModel(tiny_config(use_guidance=False), seed=6,
                                input_dim=5)
    for name, t in plain.named_params().items():
        assert np.array_equal(guided.named_params()[name].data, t.data), name
    # fresh up-projections are zero, which hides routing: give the experts
    # distinct nonzero updates so the refined gates become observable
    for m in (guided, plain):
        for j, adapter in enumerate(m.adapters.values()):
            for i, u in enumerate(adapter.bank.up):
                u.data[:] = 0.05 * (i + 1) * (j + 1)
    a = guided.episode_forward(s, q).similarity.data
    b = plain.episode_forward(s, q).similarity.data
    assert not np.array_equal(a, b)


def test_gradients_reach_every_trainable_family():
    m = FewShotConceptModel(tiny_config(), seed=7, input_dim=5,
                            dtype=np.float64)
    # nonzero up-projections so expert updates contribute
    for adapter in m.adapters.values():
        for u in adapter.bank.up:
            u.data[:] = np.random.default_rng(0).normal(size=u.shape) * 0.1
    s, q = episode_arrays(np.random.default_rng(5), n=2, k=1, q=1)
    out = m.episode_forward(s, q)
    loss = ad.tsum(out.similarity * out.similarity) + ad.tsum(out.cd_vectors)
    loss.backward()
    for name, t in m.named_params().items():
        assert t.grad is not None, name


def test_state_roundtrip_restores_forward_bitwise():
    m = FewShotConceptModel(tiny_config(), seed=8, input_dim=5)
    s, q = episode_arrays(np.random.default_rng(6))
    before = m.episode_forward(s, q).similarity.data.copy()
    saved = {k: v.copy() for k, v in m.state_arrays().items()}
    for t in m.named_params().values():
        t.data += 0.25
    assert not np.array_equal(m.episode_forward(s, q).similarity.data, before)
    m.load_state(saved)
    assert np.array_equal(m.episode_forward(s, q).similarity.data, before)


def test_load_state_validates_names_and_shapes():
    m = FewShotConceptModel(tiny_config(), seed=8, input_dim=5)
    saved = m.state_arrays()
    clipped = dict(saved)
    del clipped["trainable.concepts.matrix"]
    with pytest.raises(ValueError, match="missing"):
        m.load_state(clipped)
    wrong = dict(saved)
    wrong["trainable.concepts.matrix"] = np.zeros((2, 2), dtype=np.float32)
    with pytest.raises(ValueError, match="shape"):
        m.load_state(wrong)


def test_dropout_only_acts_in_training_mode():
    m = FewShotConceptModel(tiny_config(adapter_dropout=0.5), seed=3,
                            input_dim=5)
    for adapter in m.adapters.values():
        for u in adapter.bank.up:
            u.data[:] = 0.1
    s, q = episode_arrays(np.random.default_rng(7))
    eval_a = m.episode_forward(s, q).similarity.data
    eval_b = m.episode_forward(s, q).similarity.data
    assert np.array_equal(eval_a, eval_b)
    t1 = m.episode_forward(s, q, training=True,
                           rng=np.random.default_rng(11)).similarity.data
    t2 = m.episode_forward(s, q, training=True,
                           rng=np.random.default_rng(11)).similarity.data
    t3 = m.episode_forward(s, q, training=True,
                           rng=np.random.default_rng(12)).similarity.data
    assert np.array_equal(t1, t2)
    assert not np.array_equal(t1, t3)


def test_precomputed_taps_branch():
    cfg = ModelConfig(backbone=BackboneConfig(kind=PRECOMPUTED_KIND,
                                              patch_grid=(2, 2), width=8),
                      num_experts=2, num_concepts=6, rank=2, tau=0.5)
    m = FewShotConceptModel(cfg, seed=0, input_dim=8)
    assert m.backbone is None and m.adapters == {}
    rng = np.random.default_rng(8)
    taps = lambda lead: {k: rng.normal(size=lead + (4, 8))
                         for k in ("low", "mid", "high", "out")}
    out = m.episode_forward(taps((2, 2)), taps((2, 3)))
    assert out.similarity.shape == (6, 2)
    with pytest.raises(ValueError, match="tap dictionaries"):
        m.episode_forward(np.zeros((2, 2, 4, 8)), np.zeros((2, 3, 4, 8)))


def test_routing_trace_collection():
    m = FewShotConceptModel(tiny_config(), seed=1, input_dim=5)
    s, q = episode_arrays(np.random.default_rng(9))
    trace = []
    m.episode_forward(s, q, trace=trace)
    # one record per adapted site: 3 blocks x (query, value)
    assert len(trace) == 6
    for rec in trace:
        assert rec.gates.shape[-1] == 2
        assert rec.fallback_positions == 0
