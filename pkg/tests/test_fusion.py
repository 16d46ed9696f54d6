"""Cross-attention fusion, alignment loss, and embedding export."""

import numpy as np
import pytest

import oracles
from cohortkit import fusion, nn, seqenc, tabenc, textenc
from cohortkit.errors import ConfigError, DimensionError
from cohortkit.nn import tensor as T
from cohortkit.synthworld import WorldConfig, generate_world

D = 16


def micro_model(world, seed=0):
    """Untrained aligned bundle with micro dimensions for contract tests."""
    rng = np.random.default_rng(seed)
    seq_cfg = seqenc.SeqConfig(dim=D, ff_hidden=24, vocab_bits=8)
    tab_cfg = tabenc.TabConfig(dim=D, depth=1, heads=2, ff_hidden=24)
    text_cfg = textenc.TextConfig(dim=D, depth=1, heads=2, ff_hidden=24, vocab_bits=8)
    fus_cfg = fusion.FusionConfig(dim=D, layers=5, heads=2, ff_hidden=24, steps=8,
                                  batch_size=8, eval_interval=4, recall_k=5)
    rows = [u.tabular for u in world.users]
    schema = tabenc.fit_schema(world.config.categorical, world.config.continuous, rows)
    return fusion.AlignedModel(
        seq_params=seqenc.init_seq_params(seq_cfg, rng), seq_config=seq_cfg,
        tab_params=tabenc.init_tab_params(schema, tab_cfg, rng), tab_schema=schema,
        tab_config=tab_cfg,
        text_params=textenc.init_text_params(text_cfg, rng), text_config=text_cfg,
        desc_params=textenc.init_text_params(text_cfg, rng), desc_config=text_cfg,
        fusion_params=fusion.init_fusion_params(fus_cfg, rng), fusion_config=fus_cfg,
        context_windows=world.config.context_windows,
    )


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldConfig(users=120), seed=29)


@pytest.fixture()
def model(world):
    return micro_model(world)


class TestFuse:
    def test_output_shape(self, model):
        rng = np.random.default_rng(1)
        out = fusion.fuse(nn.Tensor(rng.standard_normal(D).astype(np.float32)),
                          nn.Tensor(rng.standard_normal(D).astype(np.float32)),
                          nn.Tensor(rng.standard_normal(D).astype(np.float32)),
                          model.fusion_params, model.fusion_config.heads)
        assert out.shape == (D,)
        batched = fusion.fuse(nn.Tensor(rng.standard_normal((5, D)).astype(np.float32)),
                              nn.Tensor(rng.standard_normal((5, D)).astype(np.float32)),
                              nn.Tensor(rng.standard_normal((5, D)).astype(np.float32)),
                              model.fusion_params, model.fusion_config.heads)
        assert batched.shape == (5, D)

    def test_identical_inputs_uniform_weights(self):
        cfg = fusion.FusionConfig(dim=4, layers=2, heads=1, ff_hidden=8)
        params = fusion.init_fusion_params(cfg, np.random.default_rng(3))
        eye = lambda: nn.Tensor(np.eye(4, dtype=np.float32), requires_grad=True)
        for layer in params.layers:
            layer.attn = nn.AttentionParams(eye(), eye(), eye(), eye())
        v = nn.Tensor(np.array([0.5, -1.0, 2.0, 0.1], dtype=np.float32))
        _, weights = fusion.fuse(v, v, v, params, heads=1, return_weights=True)
        for w in weights:
            np.testing.assert_allclose(w, 1.0 / 3.0, atol=1e-6)

    def test_dimension_mismatch(self, model):
        with pytest.raises(DimensionError):
            fusion.fuse(nn.Tensor(np.zeros(D, dtype=np.float32)),
                        nn.Tensor(np.zeros(D + 1, dtype=np.float32)),
                        nn.Tensor(np.zeros(D, dtype=np.float32)),
                        model.fusion_params, model.fusion_config.heads)

    def test_gradients_through_five_layers(self):
        cfg = fusion.FusionConfig(dim=6, layers=5, heads=2, ff_hidden=8)
        params = fusion.init_fusion_params(cfg, np.random.default_rng(7), dtype=np.float64)
        rng = np.random.default_rng(9)
        inputs = [nn.Tensor(rng.standard_normal(6)) for _ in range(3)]

        def loss(a, b, c):
            return T.tsum(T.tanh(fusion.fuse(a, b, c, params, cfg.heads)))

        assert nn.grad_check(loss, inputs) < 1e-4


class TestClipLoss:
    def test_uniform_similarities_log_b(self):
        b, d = 5, 8
        e = nn.Tensor(np.ones((b, d)))
        loss = fusion.clip_loss(e, e, nn.Tensor(np.log(0.07)))
        assert loss.item() == pytest.approx(np.log(b), rel=1e-9)

    def test_orthonormal_saturated(self):
        b = 4
        eye = np.eye(b)
        loss = fusion.clip_loss(nn.Tensor(eye), nn.Tensor(eye),
                                nn.Tensor(np.log(1e-3)))
        assert loss.item() < 1e-6

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            b = int(rng.integers(2, 6))
            d = int(rng.integers(3, 7))
            temp = float(rng.uniform(0.05, 1.0))
            ef = rng.standard_normal((b, d))
            eq = rng.standard_normal((b, d))
            for symmetric in (True, False):
                ours = fusion.clip_loss(nn.Tensor(ef), nn.Tensor(eq),
                                        nn.Tensor(np.log(temp)),
                                        symmetric=symmetric).item()
                ref = oracles.clip_loss_oracle(ef.tolist(), eq.tolist(), temp,
                                               symmetric=symmetric)
                assert ours == pytest.approx(ref, abs=1e-6)

    def test_batch_of_one_rejected(self):
        with pytest.raises(ConfigError):
            fusion.clip_loss(nn.Tensor(np.ones((1, 4))), nn.Tensor(np.ones((1, 4))),
                             nn.Tensor(0.0))

    def test_invariant_under_common_permutation(self):
        rng = np.random.default_rng(17)
        ef = rng.standard_normal((6, 5))
        eq = rng.standard_normal((6, 5))
        base = fusion.clip_loss(nn.Tensor(ef), nn.Tensor(eq), nn.Tensor(0.0)).item()
        perm = rng.permutation(6)
        permuted = fusion.clip_loss(nn.Tensor(ef[perm]), nn.Tensor(eq[perm]),
                                    nn.Tensor(0.0)).item()
        assert base == pytest.approx(permuted, abs=1e-6)


class TestTrainAlignment:
    def test_initial_loss_near_log_b(self, world, model):
        # Random init starts near the uniform-similarity value ln B. The
        # sharp 0.07 temperature amplifies the O(1/sqrt(d)) cosine spread of
        # random low-dim embeddings, so "near" at this scale is ln B plus a
        # spread term, not a 10% band (see decisions ledger).
        cfg = model.fusion_config
        train = world.users[:64]
        _, trace, _ = fusion.train_alignment(train, world.users[64:80], model, cfg,
                                             seed=3)
        log_b = np.log(cfg.batch_size)
        assert log_b - 0.2 <= trace[0]["loss"] <= log_b + 1.5

    def test_loss_guard_and_probe_rows(self, world, model):
        cfg = model.fusion_config
        _, trace, probes = fusion.train_alignment(world.users[:64], world.users[64:96],
                                                  model, cfg, seed=5)
        bound = np.log(cfg.batch_size) + 5
        assert all(r["loss"] <= bound for r in trace)
        assert probes and all(0.0 <= p["recall_at_k"] <= 1.0 for p in probes)
        # temperature stays clamped
        temp = float(np.exp(model.fusion_params.log_temp.data))
        assert 1e-3 <= temp <= 10.0

    def test_deterministic_checkpoint(self, world, tmp_path):
        def run():
            m = micro_model(world, seed=4)
            cfg = m.fusion_config
            fusion.train_alignment(world.users[:32], [], m, cfg, seed=11)
            return m

        m1, m2 = run(), run()
        f1, f2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        m1.save(f1)
        m2.save(f2)
        assert f1.read_bytes() == f2.read_bytes()


class TestEmbedAllUsers:
    def test_unit_rows_and_order(self, world, model):
        matrix, id_map = fusion.embed_all_users(world.users, model)
        assert matrix.shape == (len(world.users), D)
        norms = np.linalg.norm(matrix, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)
        assert id_map["user_ids"] == sorted(u.user_id for u in world.users)

    def test_rerun_byte_identical(self, world, model, tmp_path):
        m1, _ = fusion.embed_all_users(world.users, model)
        m2, _ = fusion.embed_all_users(world.users, model)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        fusion.save_embeddings(p1, m1)
        fusion.save_embeddings(p2, m2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_row_matches_individual_fuse(self, world, model):
        matrix, id_map = fusion.embed_all_users(world.users, model)
        user = world.users[7]
        row = matrix[id_map["user_ids"].index(user.user_id)]
        e_v, e_tab, e_r, _ = fusion.modality_embeddings([user], model)
        single = fusion.fuse_users(e_v, e_tab, e_r, model)[0]
        single = single / np.linalg.norm(single)
        np.testing.assert_allclose(row, single, atol=1e-5)

    def test_embeddings_file_round_trip(self, world, model, tmp_path):
        matrix, _ = fusion.embed_all_users(world.users[:20], model)
        path = tmp_path / "emb.bin"
        fusion.save_embeddings(path, matrix)
        loaded = fusion.load_embeddings(path)
        assert np.array_equal(loaded, matrix.astype(np.float32))


class TestAlignedCheckpoint:
    def test_save_load_round_trip(self, world, model, tmp_path):
        path = tmp_path / "aligned.ckpt"
        model.save(path)
        loaded = fusion.AlignedModel.load(path)
        text = "The user purchased gold, etc. with successful payment."
        a = model.encode_description(text)
        b = loaded.encode_description(text)
        np.testing.assert_array_equal(a.data, b.data)
        u = world.users[0]
        ev1, et1, er1, _ = fusion.modality_embeddings([u], model)
        ev2, et2, er2, _ = fusion.modality_embeddings([u], loaded)
        np.testing.assert_array_equal(ev1, ev2)
        np.testing.assert_array_equal(et1, et2)
        np.testing.assert_array_equal(er1, er2)
