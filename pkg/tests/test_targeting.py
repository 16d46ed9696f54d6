"""Query canonicalization, cohort retrieval, calibration, prompt tuning."""

import numpy as np
import pytest

import oracles
from cohortkit import fusion, nn, targeting
from cohortkit.errors import (
    CalibrationError, ConfigError, InputError, ParameterError,
)
from cohortkit.nn.tensor import Tensor
from cohortkit.synthworld import WorldConfig, generate_world
from test_fusion import micro_model


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldConfig(users=150), seed=31)


@pytest.fixture(scope="module")
def model(world):
    return micro_model(world, seed=6)


@pytest.fixture(scope="module")
def index(world, model):
    matrix, id_map = fusion.embed_all_users(world.users, model)
    return targeting.UserIndex(matrix, id_map["user_ids"])


class TestCanonicalizeQuery:
    def test_worked_example(self):
        out, flags = targeting.canonicalize_query("people who will buy gold bars over 10k")
        assert out == ("The user purchased gold bars, etc., amounting to more than "
                       "$10,000 with successful payment.")
        assert flags == ["rewritten"]

    def test_already_canonical_unchanged(self):
        text = "The user searched for used car, etc."
        out, flags = targeting.canonicalize_query(text)
        assert out == text
        assert flags == []

    def test_idempotent(self):
        first, _ = targeting.canonicalize_query("users who will buy gold")
        second, flags = targeting.canonicalize_query(first)
        assert first == second and flags == []

    def test_deterministic(self):
        a = targeting.canonicalize_query("users who will search for used car")
        b = targeting.canonicalize_query("users who will search for used car")
        assert a == b

    def test_unmatched_passthrough(self):
        out, flags = targeting.canonicalize_query("Cloudy With Meatballs")
        assert out == "cloudy with meatballs"
        assert flags == ["non_canonical"]

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            targeting.canonicalize_query("   ")


class TestZeroShot:
    def test_k_equals_n_returns_everyone_sorted(self, world, index, model):
        cohort = targeting.zero_shot_target("users who will buy gold", index, model,
                                            mode="top_k", k=len(index))
        assert len(cohort.entries) == len(world.users)
        scores = [s for _, s in cohort.entries]
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_k_clamped_with_flag(self, index, model):
        cohort = targeting.zero_shot_target("users who will buy gold", index, model,
                                            mode="top_k", k=len(index) + 50)
        assert len(cohort.entries) == len(index)
        assert "k_clamped" in cohort.flags

    def test_tau_boundaries(self, index, model):
        with pytest.raises(ParameterError):
            targeting.zero_shot_target("users who will buy gold", index, model,
                                       mode="threshold", tau=1.0 + 1e-6)
        cohort = targeting.zero_shot_target("users who will buy gold", index, model,
                                            mode="threshold", tau=1.0)
        assert len(cohort.entries) in (0, 1)      # exact matches only, typically none

    def test_topk_threshold_agreement(self, index, model):
        tau = 0.1
        by_tau = targeting.zero_shot_target("users who will buy gold", index, model,
                                            mode="threshold", tau=tau)
        k = len(by_tau.entries)
        if k == 0:
            pytest.skip("threshold produced an empty cohort at this init")
        by_k = targeting.zero_shot_target("users who will buy gold", index, model,
                                          mode="top_k", k=k)
        assert set(by_k.user_ids) == set(by_tau.user_ids)

    def test_tie_break_ascending_id(self, model):
        matrix = np.tile(np.array([[1.0, 0.0]], dtype=np.float32), (5, 1))
        index = targeting.UserIndex(matrix, [9, 3, 7, 1, 5])
        order, scores = index.ranked(np.array([1.0, 0.0], dtype=np.float32))
        assert [int(index.user_ids[i]) for i in order] == [1, 3, 5, 7, 9]

    def test_scale_invariant_id_order(self, world, model, index):
        cohort = targeting.zero_shot_target("users who will buy gold", index, model,
                                            mode="top_k", k=40)
        scaled = targeting.UserIndex(index.matrix * 7.5, index.user_ids)
        cohort2 = targeting.zero_shot_target("users who will buy gold", scaled, model,
                                             mode="top_k", k=40)
        assert cohort.user_ids == cohort2.user_ids

    def test_deterministic_cohort(self, index, model):
        a = targeting.zero_shot_target("users who will buy gold", index, model,
                                       mode="top_k", k=25)
        b = targeting.zero_shot_target("users who will buy gold", index, model,
                                       mode="top_k", k=25)
        assert a.to_json() == b.to_json()


class TestCohortInvariants:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(ConfigError):
            targeting.Cohort(entries=[(1, 0.9), (1, 0.8)], demand="d", canonical="c",
                             mode={})

    def test_increasing_scores_rejected(self):
        with pytest.raises(ConfigError):
            targeting.Cohort(entries=[(1, 0.5), (2, 0.9)], demand="d", canonical="c",
                             mode={})


class TestCalibrateThreshold:
    def test_perfect_separation_picks_highest(self):
        scores = np.array([0.9, 0.8, 0.2, 0.1])
        labels = np.array([1, 1, 0, 0])
        tau, f1 = targeting.max_f1_threshold(scores, labels)
        assert f1 == 1.0
        assert tau == 0.8                  # highest observed score with F1 = 1

    def test_independent_labels_near_base_rate_f1(self):
        rng = np.random.default_rng(3)
        scores = rng.standard_normal(500)
        labels = (rng.random(500) < 0.3).astype(int)
        tau, f1 = targeting.max_f1_threshold(scores, labels)
        p = labels.mean()
        all_positive_f1 = 2 * p / (1 + p)
        assert f1 >= all_positive_f1 - 1e-9       # all-positive cut is in the search set
        assert f1 <= all_positive_f1 + 0.08

    def test_tau_is_observed_score(self):
        rng = np.random.default_rng(5)
        scores = rng.standard_normal(60)
        labels = rng.integers(0, 2, 60)
        labels[0], labels[1] = 0, 1
        tau, _ = targeting.max_f1_threshold(scores, labels)
        assert tau in set(scores.tolist())

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n = 40
            scores = np.round(rng.standard_normal(n), 2)
            labels = rng.integers(0, 2, n)
            labels[0], labels[1] = 0, 1
            tau, f1 = targeting.max_f1_threshold(scores, labels)
            best = -1.0
            best_tau = None
            for t in sorted(set(scores.tolist()), reverse=True):
                pred = scores >= t
                tp = int(np.sum(pred & (labels == 1)))
                fp = int(np.sum(pred & (labels == 0)))
                fn = int(np.sum(~pred & (labels == 1)))
                cand = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
                if cand > best:
                    best, best_tau = cand, t
            assert f1 == pytest.approx(best, abs=1e-12)
            assert tau == pytest.approx(best_tau, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(CalibrationError):
            targeting.max_f1_threshold(np.array([0.4, 0.6]), np.array([1, 1]))


class TestPromptSession:
    def test_init_deterministic(self, model):
        a = targeting.init_prompt("users who will buy gold", model, p=4, seed=9)
        b = targeting.init_prompt("users who will buy gold", model, p=4, seed=9)
        assert np.array_equal(a.prompt.data, b.prompt.data)

    def test_prompt_rows_are_token_embeddings(self, model):
        session = targeting.init_prompt("users who will buy gold", model, p=2, seed=1)
        from cohortkit import textenc
        ids = textenc.tokenize(session.canonical, model.desc_config)[:2]
        for row, tok in zip(session.prompt.data, ids):
            assert np.array_equal(row, model.desc_params.embed.data[tok])

    def test_zero_length_rejected(self, model):
        with pytest.raises(ConfigError):
            targeting.init_prompt("users who will buy gold", model, p=0)

    def test_overlapping_seeds_rejected(self, model):
        session = targeting.init_prompt("users who will buy gold", model, p=2)
        session.positives = [1, 2, 3]
        session.negatives = [3, 4]
        with pytest.raises(ConfigError):
            session.validate_seeds()


class TestTripletLoss:
    def _vec(self, sq_dist):
        v = np.zeros(4)
        v[0] = np.sqrt(sq_dist)
        return v

    def test_equidistant_gives_margin(self):
        e_q = Tensor(np.zeros(4))
        seeds = Tensor(np.stack([self._vec(0.3)] * 2))
        loss = targeting.triplet_loss(e_q, seeds, seeds, alpha=0.2)
        assert loss.item() == pytest.approx(0.2 * 4, rel=1e-6)   # 2x2 pairs, each alpha

    def test_inactive_hinge(self):
        e_q = Tensor(np.zeros(4))
        pos = Tensor(self._vec(0.1)[None, :])
        neg = Tensor(self._vec(0.5)[None, :])
        assert targeting.triplet_loss(e_q, pos, neg, alpha=0.2).item() == pytest.approx(0.0)

    def test_active_hinge_arithmetic(self):
        e_q = Tensor(np.zeros(4))
        pos = Tensor(self._vec(0.5)[None, :])
        neg = Tensor(self._vec(0.1)[None, :])
        assert targeting.triplet_loss(e_q, pos, neg, alpha=0.2).item() == \
            pytest.approx(0.6, rel=1e-6)

    def test_non_negative_property(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            e_q = Tensor(rng.standard_normal(5))
            pos = Tensor(rng.standard_normal((3, 5)))
            neg = Tensor(rng.standard_normal((2, 5)))
            assert targeting.triplet_loss(e_q, pos, neg, 0.2).item() >= 0.0

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            e_q = rng.standard_normal(4)
            pos = rng.standard_normal((2, 4))
            neg = rng.standard_normal((3, 4))
            ours = targeting.triplet_loss(Tensor(e_q), Tensor(pos), Tensor(neg),
                                          0.2).item()
            ref = oracles.triplet_loss_oracle(e_q.tolist(), pos.tolist(), neg.tolist(),
                                              0.2)
            assert ours == pytest.approx(ref, abs=1e-6)


class TestPromptTune:
    def test_towers_frozen_and_session_tuned(self, world, index, model):
        session = targeting.init_prompt("users who will buy gold", model, p=3, seed=2)
        session.positives = [int(i) for i in index.user_ids[:3]]
        session.negatives = [int(i) for i in index.user_ids[3:6]]
        digest_before = model.desc_tower_digest()
        fused_before = nn.params_digest(model.fusion_params)
        tuned = targeting.prompt_tune(session, index, model, steps=10, lr=0.05)
        assert tuned.tuned
        assert len(tuned.trace) == 10
        assert model.desc_tower_digest() == digest_before
        assert nn.params_digest(model.fusion_params) == fused_before

    def test_empty_seeds_rejected(self, index, model):
        session = targeting.init_prompt("users who will buy gold", model, p=2, seed=3)
        with pytest.raises(ConfigError):
            targeting.prompt_tune(session, index, model, steps=2)

    def test_loss_decreases(self, world, index, model):
        session = targeting.init_prompt("users who will buy gold", model, p=3, seed=4)
        gold = [u.user_id for u in world.users if u.labels["gold-buyers"] == 1][:4]
        rest = [u.user_id for u in world.users if u.labels["gold-buyers"] == 0][:4]
        session.positives, session.negatives = gold, rest
        tuned = targeting.prompt_tune(session, index, model, steps=60, lr=0.05)
        assert tuned.trace[-1]["loss"] <= tuned.trace[0]["loss"]


class TestFewShot:
    def test_untuned_falls_back_with_flag(self, index, model):
        session = targeting.init_prompt("users who will buy gold", model, p=2, seed=5)
        cohort = targeting.few_shot_target(session, index, model, mode="top_k", k=10)
        assert "untuned_session_fallback" in cohort.flags

    def test_deterministic_cohort(self, world, index, model):
        session = targeting.init_prompt("users who will buy gold", model, p=2, seed=6)
        session.positives = [int(i) for i in index.user_ids[:2]]
        session.negatives = [int(i) for i in index.user_ids[2:4]]
        targeting.prompt_tune(session, index, model, steps=5)
        a = targeting.few_shot_target(session, index, model, mode="top_k", k=15)
        b = targeting.few_shot_target(session, index, model, mode="top_k", k=15)
        assert a.to_json() == b.to_json()
