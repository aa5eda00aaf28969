"""Explanation-bundle construction and rendering."""

import json

import numpy as np
import pytest
from PIL import Image

from conceptmix.episodes import SYNTHETIC, SyntheticSpec, load_dataset, sample_episode
from conceptmix.explain import (
    ExplanationBundle,
    explain_episode,
    explanation_bundle,
    minmax_heatmap,
    render,
    top_concepts,
)
from conceptmix.model import FewShotConceptModel
from conceptmix.trainer import TrainConfig, episode_tensors, model_config_for


def make_setup(seed=0):
    spec = SyntheticSpec(num_classes=6, samples_per_class=8, patch_grid=(2, 2),
                         feature_dim=8, class_margin=3.0, noise_sigma=0.4,
                         seed=seed)
    index = load_dataset(spec, SYNTHETIC)
    cfg = TrainConfig(epochs=2, episodes_per_epoch=1, warmup_epochs=1, n_way=3,
                      k_shot=2, q_queries=2, rank=2, num_experts=2,
                      num_concepts=7, backbone_depth=3, backbone_width=8,
                      seed=seed)
    model = FewShotConceptModel(model_config_for(cfg, index), cfg.seed,
                                index.input_dim)
    return index, model


# ------------------------------------------------------------ top concepts


def test_top_concepts_orders_distinct_entries():
    v = np.array([0.1, 0.9, 0.5, 0.7, 0.3])
    assert top_concepts(v, 3).tolist() == [1, 3, 2]
    assert top_concepts(v, 5).tolist() == [1, 3, 2, 4, 0]


def test_top_concepts_tie_prefers_lower_index():
    v = np.array([0.5, 0.9, 0.9, 0.1])
    assert top_concepts(v, 2).tolist() == [1, 2]
    assert top_concepts(np.zeros(4), 4).tolist() == [0, 1, 2, 3]


def test_top_concepts_full_ranking_is_permutation():
    v = np.random.default_rng(0).normal(size=17)
    ids = top_concepts(v, 17)
    assert sorted(ids.tolist()) == list(range(17))


def test_top_concepts_bounds():
    with pytest.raises(ValueError):
        top_concepts(np.zeros(4), 5)
    with pytest.raises(ValueError):
        top_concepts(np.zeros(4), 0)


def test_presentation_id_list_shape():
    # five-slot ranked id list with ids from a 312-vector
    v = np.zeros(312)
    for rank, cid in enumerate((65, 281, 46, 198, 98)):
        v[cid] = 5.0 - rank
    index, model = make_setup()
    sample = np.random.default_rng(1).normal(size=(4, 8)).astype(np.float32)
    bundle = explanation_bundle(model, sample, sample, k=5)
    assert len(bundle.concept_ids()) == 5
    assert top_concepts(v, 5).tolist() == [65, 281, 46, 198, 98]


# ---------------------------------------------------------------- heatmaps


def test_heatmap_normalization():
    m = minmax_heatmap(np.array([1.0, 2.0, 3.0, 5.0]), (2, 2))
    assert m.shape == (2, 2)
    assert m.min() == 0.0 and m.max() == 1.0
    assert m[0, 1] == pytest.approx(0.25)


def test_constant_heatmap_renders_flat():
    m = minmax_heatmap(np.full(4, 0.7), (2, 2))
    assert np.array_equal(m, np.zeros((2, 2)))


# ----------------------------------------------------------------- bundles


def test_self_comparison_bundle():
    index, model = make_setup()
    sample = np.random.default_rng(2).normal(size=(4, 8)).astype(np.float32)
    bundle = explanation_bundle(model, sample, sample, k=4,
                                query_id="a", support_id="a")
    assert abs(bundle.similarity_score - 1.0) < 1e-6
    for e in bundle.top_concepts:
        assert np.array_equal(e.query_heatmap, e.support_heatmap)
    contribs = [e.contribution for e in bundle.top_concepts]
    assert contribs == sorted(contribs, reverse=True)


def test_single_concept_bundle_reports_max_entry():
    index, model = make_setup()
    rng = np.random.default_rng(3)
    sample = rng.normal(size=(4, 8)).astype(np.float32)
    bundle = explanation_bundle(model, sample, sample, k=1)
    full = explanation_bundle(model, sample, sample, k=7)
    assert bundle.top_concepts[0].contribution == full.top_concepts[0].contribution
    assert bundle.concept_ids() == full.concept_ids()[:1]


def test_concept_overlap_orders_similarity():
    # a near-duplicate of the support must outscore a far sample
    index, model = make_setup()
    rng = np.random.default_rng(4)
    support = index.source.sample_features(0, 0)
    near = support + rng.normal(size=support.shape).astype(np.float32) * 0.01
    far = index.source.sample_features(3, 0)
    s_near = explanation_bundle(model, near, support, k=3).similarity_score
    s_far = explanation_bundle(model, far, support, k=3).similarity_score
    assert s_near > s_far


def test_bundle_validation():
    from conceptmix.explain import ConceptExplanation
    ok = ConceptExplanation(0, 1.0, np.zeros((2, 2)), np.zeros((2, 2)))
    low = ConceptExplanation(1, 2.0, np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError, match="sorted"):
        ExplanationBundle("q", "s", None, 0.5, (ok, low))
    bad_map = ConceptExplanation(0, 1.0, np.full((2, 2), 1.5), np.zeros((2, 2)))
    with pytest.raises(ValueError, match="0, 1"):
        ExplanationBundle("q", "s", None, 0.5, (bad_map,))


def test_episode_explanation_consistency():
    index, model = make_setup()
    episode = sample_episode(index, 3, 2, 2, seed=13)
    bundle = explain_episode(model, index, episode, query_position=1, k=3)
    support_x, query_x = episode_tensors(index, episode)
    out = model.episode_forward(support_x, query_x)
    pred = int(out.predictions()[1])
    assert bundle.predicted_class == episode.class_labels[pred]
    assert bundle.similarity_score == float(out.similarity.data[1, pred])
    # ids point at real dataset items of the right classes
    assert bundle.support_id.startswith(bundle.predicted_class)
    assert index.items[int(episode.query.reshape(-1)[1])].sample_id == bundle.query_id
    with pytest.raises(ValueError, match="query_position"):
        explain_episode(model, index, episode, query_position=6, k=3)


# --------------------------------------------------------------- rendering


def test_render_file_counts_and_determinism(tmp_path):
    index, model = make_setup()
    sample = np.random.default_rng(5).normal(size=(4, 8)).astype(np.float32)
    other = np.random.default_rng(6).normal(size=(4, 8)).astype(np.float32)
    bundle = explanation_bundle(model, sample, other, k=5,
                                query_id="class_00/0001", support_id="s")
    out_dir = tmp_path / "nested" / "bundles"  # created on demand
    paths = render(bundle, out_dir)
    assert len(paths) == 11  # 1 bundle + 5 query + 5 support rasters
    assert all(p.exists() for p in paths)
    first = {p: p.read_bytes() for p in paths}
    again = render(bundle, out_dir)
    assert again == paths
    for p in paths:
        assert p.read_bytes() == first[p]


def test_rendered_artifacts_roundtrip(tmp_path):
    index, model = make_setup()
    sample = np.random.default_rng(7).normal(size=(4, 8)).astype(np.float32)
    bundle = explanation_bundle(model, sample, sample, k=2, query_id="q7")
    paths = render(bundle, tmp_path)
    payload = json.loads(paths[0].read_text())
    assert payload["query_id"] == "q7"
    assert payload["similarity_score"] == bundle.similarity_score
    assert len(payload["top_concepts"]) == 2
    entry = bundle.top_concepts[0]
    img = np.asarray(Image.open(paths[1]))
    assert img.shape == (2, 2)
    assert np.array_equal(img, np.round(entry.query_heatmap * 255).astype(np.uint8))
    got = np.array(payload["top_concepts"][0]["query_heatmap"])
    assert np.array_equal(got, entry.query_heatmap)


def test_filenames_encode_query_and_concept(tmp_path):
    index, model = make_setup()
    sample = np.random.default_rng(8).normal(size=(4, 8)).astype(np.float32)
    bundle = explanation_bundle(model, sample, sample, k=1,
                                query_id="class_02/0003")
    paths = render(bundle, tmp_path)
    cid = bundle.top_concepts[0].concept_id
    names = [p.name for p in paths]
    assert f"class_02-0003.concept{cid:04d}.query.png" in names
    assert f"class_02-0003.concept{cid:04d}.support.png" in names
    assert "class_02-0003.bundle.json" in names
