"""Weight-change ratios, corruption curves, and embedding metrics."""

import numpy as np
import pytest

from nextscale.analysis import (
    CorruptionCurve,
    curve_rows,
    div_metric,
    embed_for_eval,
    eval_report_rows,
    evaluate_personalization,
    make_embedder,
    mean_corruption_curve,
    pres_metric,
    scale_corruption_curve,
    subject_fidelity,
    weight_diff_ratio,
    weight_report_rows,
)
from nextscale.errors import ContractError
from nextscale.model import VarConfig, VarModel
from nextscale.personalize import FinetuneConfig, finetune, subject_set_from_corpus
from nextscale.tokenizer import detokenize_image, tokenize_image


class _Stub:
    """Duck-typed two-model surface for hand-oracle ratio checks."""

    class _P:
        def __init__(self, v):
            self.data = np.asarray(v, dtype=np.float64)

    def __init__(self, params: dict, roles: dict):
        self.params = {n: self._P(v) for n, v in params.items()}
        self.roles = roles

    def param_names(self):
        return sorted(self.params)


# ---------------------------------------------------------------------------
# weight-change ratios
# ---------------------------------------------------------------------------


def test_identical_models_report_zero_everywhere(prompt_vocab):
    model = VarModel.initialize(VarConfig(), prompt_vocab, seed=3)
    report = weight_diff_ratio(model, model.copy())
    assert all(v == 0.0 for _, _, v in report.per_group)
    assert all(v == 0.0 for _, v in report.per_role)
    assert report.eps == 1e-8


def test_two_element_hand_oracle():
    orig = _Stub({"head.w": [1.0, -2.0]}, {"head.w": "HEAD"})
    tuned = _Stub({"head.w": [1.1, -2.0]}, {"head.w": "HEAD"})
    got = weight_diff_ratio(orig, tuned, eps=1e-8).group_ratio("global", "HEAD")
    want = (abs(1.0 - 1.1) / (1.0 + 1e-8) + 0.0) / 2.0
    assert got == want
    assert abs(got - 0.05) < 1e-8


def test_ratio_contract_errors():
    a = _Stub({"x": [1.0, 2.0]}, {"x": "FFN"})
    b = _Stub({"x": [1.0, 2.0, 3.0]}, {"x": "FFN"})
    with pytest.raises(ContractError):
        weight_diff_ratio(a, b)
    c = _Stub({"y": [1.0, 2.0]}, {"y": "FFN"})
    with pytest.raises(ContractError):
        weight_diff_ratio(a, c)


def test_selective_finetune_shows_up_only_in_tuned_roles(
    pretrained_prior, trained_tokenizer, corpus
):
    model, _ = pretrained_prior
    weights, _ = trained_tokenizer
    subjects = subject_set_from_corpus(corpus)
    tuned, reference, _ = finetune(
        model, subjects, weights, FinetuneConfig(steps=8, seed=61)
    )
    report = weight_diff_ratio(reference, tuned)
    for role in ("SA", "NORM", "EMB", "HEAD"):
        assert report.role_ratio(role) == 0.0
    for role in ("CA", "FFN", "TEXT"):
        assert report.role_ratio(role) > 0.0
    for block, role, value in report.per_group:
        assert value >= 0.0
        if role == "SA":
            assert value == 0.0


def test_weight_report_rows_cover_groups_and_roles(prompt_vocab):
    model = VarModel.initialize(VarConfig(), prompt_vocab, seed=3)
    report = weight_diff_ratio(model, model.copy())
    rows = weight_report_rows(report)
    assert {"block", "role", "ratio"} == set(rows[0])
    blocks = {r["block"] for r in rows}
    assert {"block0", "block3", "global", "all"} <= blocks


# ---------------------------------------------------------------------------
# corruption curves
# ---------------------------------------------------------------------------


def test_curve_endpoints_are_exact_recomputations(trained_tokenizer, corpus_images):
    weights, _ = trained_tokenizer
    img = corpus_images[0]
    curve = scale_corruption_curve(weights, img, noise_seed=5)
    clean = detokenize_image(tokenize_image(img, weights), weights)
    assert curve.mse[-1] == float(np.mean((clean - img) ** 2))
    noise = np.random.default_rng(5).random(img.shape)
    noisy = detokenize_image(tokenize_image(noise, weights), weights)
    assert curve.mse[0] == float(np.mean((noisy - img) ** 2))
    assert curve.mse[0] >= curve.mse[-1]
    assert curve.boundaries == tuple(range(len(weights.cfg.schedule.extents) + 1))


def test_mean_curve_is_monotone_within_tolerance(trained_tokenizer, corpus_images):
    weights, _ = trained_tokenizer
    curve = mean_corruption_curve(weights, corpus_images[:20], noise_seed=11)
    mse = np.array(curve.mse)
    assert mse[0] > mse[-1]
    rises = np.diff(mse)[np.diff(mse) > 0]
    assert len(rises) <= 1
    if len(rises):
        assert rises.max() < 0.05 * (mse.max() - mse.min())


def test_curve_type_invariants_and_rows():
    with pytest.raises(ContractError):
        CorruptionCurve(boundaries=(0, 1), mse=(0.5,), noise_seed=0)
    with pytest.raises(ContractError):
        CorruptionCurve(boundaries=(0,), mse=(-0.1,), noise_seed=0)
    curve = CorruptionCurve(boundaries=(0, 1), mse=(0.5, 0.25), noise_seed=9)
    assert curve_rows(curve) == [{"k": 0, "mse": 0.5}, {"k": 1, "mse": 0.25}]
    with pytest.raises(ContractError):
        mean_corruption_curve(None, [], noise_seed=0)


# ---------------------------------------------------------------------------
# embedder
# ---------------------------------------------------------------------------


def test_embedding_is_a_unit_vector(trained_tokenizer, corpus_images):
    weights, _ = trained_tokenizer
    v = embed_for_eval(corpus_images[0], weights)
    assert abs(float(np.linalg.norm(v)) - 1.0) < 1e-12
    assert np.array_equal(v, embed_for_eval(corpus_images[0], weights))


def test_same_class_images_embed_closer_than_cross_class(trained_tokenizer, corpus):
    weights, _ = trained_tokenizer
    embed = make_embedder(weights)
    by_class: dict[str, list[np.ndarray]] = {}
    for ex in corpus.examples:
        by_class.setdefault(ex.class_name, []).append(embed(ex.image))
    same, cross = [], []
    names = sorted(by_class)
    for i, a in enumerate(names):
        ea = np.stack(by_class[a])
        gram = ea @ ea.T
        iu = np.triu_indices(len(ea), k=1)
        same.extend(gram[iu].tolist())
        for b in names[i + 1 :]:
            eb = np.stack(by_class[b])
            cross.extend((ea @ eb.T).reshape(-1).tolist())
    assert np.mean(same) > np.mean(cross)


# ---------------------------------------------------------------------------
# metric definitions
# ---------------------------------------------------------------------------


def _fixed_embedder(table: dict):
    return lambda image: table[id(image)]


def test_pres_is_one_on_identical_sets(trained_tokenizer, corpus_images):
    weights, _ = trained_tokenizer
    img = corpus_images[0]
    value = pres_metric([img, img], [img], make_embedder(weights))
    assert abs(value - 1.0) < 1e-12


def test_pres_is_zero_on_orthogonal_embeddings():
    a, b = object(), object()
    table = {id(a): np.array([1.0, 0.0]), id(b): np.array([0.0, 1.0])}
    assert pres_metric([a], [b], _fixed_embedder(table)) == 0.0
    with pytest.raises(ContractError):
        pres_metric([], [b], _fixed_embedder(table))


def test_div_definition_and_contracts(trained_tokenizer, corpus_images):
    weights, _ = trained_tokenizer
    img = corpus_images[0]
    assert div_metric([img, img], make_embedder(weights)) < 1e-12
    a, b = object(), object()
    table = {
        id(a): np.array([1.0, 0.0]),
        id(b): np.array([0.5, np.sqrt(3.0) / 2.0]),
    }
    assert div_metric([a, b], _fixed_embedder(table)) == 0.5
    with pytest.raises(ContractError):
        div_metric([img], make_embedder(weights))


def test_fidelity_definition_and_contracts(trained_tokenizer, corpus_images):
    weights, _ = trained_tokenizer
    refs = list(corpus_images[:3])
    embed = make_embedder(weights)
    assert abs(subject_fidelity(refs, refs, embed) - 1.0) < 0.02
    value = subject_fidelity(corpus_images[:4], corpus_images[4:8], embed)
    assert -1.0 <= value <= 1.0
    with pytest.raises(ContractError):
        subject_fidelity([], refs, embed)


def test_metrics_are_permutation_invariant(trained_tokenizer, corpus_images):
    weights, _ = trained_tokenizer
    embed = make_embedder(weights)
    a = list(corpus_images[:4])
    b = list(corpus_images[4:7])
    assert np.isclose(
        pres_metric(a, b, embed), pres_metric(a[::-1], b[::-1], embed), atol=1e-12
    )
    assert np.isclose(div_metric(a, embed), div_metric(a[::-1], embed), atol=1e-12)
    assert np.isclose(
        subject_fidelity(a, b, embed),
        subject_fidelity(a[::-1], b[::-1], embed),
        atol=1e-12,
    )


# ---------------------------------------------------------------------------
# whole-model evaluation
# ---------------------------------------------------------------------------


def test_evaluate_personalization_report(pretrained_prior, trained_tokenizer, corpus):
    model, _ = pretrained_prior
    weights, _ = trained_tokenizer
    subjects = subject_set_from_corpus(corpus)
    report = evaluate_personalization(
        model, subjects, weights, n_subject_samples=4, n_class_samples=4, seed=71
    )
    assert -1.0 <= report.subject_fidelity <= 1.0
    assert -1.0 <= report.pres <= 1.0
    assert report.div >= 0.0
    assert report.per_prompt[0][0] == subjects.c_sub
    rows = eval_report_rows(report, subject="circle")
    assert [r["metric"] for r in rows[:3]] == ["fidelity", "pres", "div"]
    assert all({"metric", "value", "subject", "prompt"} == set(r) for r in rows)
    with pytest.raises(ContractError):
        evaluate_personalization(
            model, subjects, weights, n_subject_samples=1, n_class_samples=4
        )
