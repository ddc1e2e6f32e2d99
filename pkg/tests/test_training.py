"""Stage driver, optimizer, and checkpoint tests."""

import math

import numpy as np
import pytest

from finemoe.corpus import CorpusSpec, generate_copy_corpus, generate_toy_corpus
from finemoe.decoder import DecoderConfig, MoEDecoder, TokenSequence, desk_preset
from finemoe.moe import MoEConfig, read_trace
from finemoe.tensor import (
    NumericalError,
    Tensor,
    backward,
    reset_graph,
)
from finemoe.training import (
    AdamOptimizer,
    CheckpointError,
    MissingDataError,
    StageConfig,
    checkpoint_load,
    checkpoint_save,
    default_stages,
    learning_rate,
    read_checkpoint_header,
    structural_hash,
    total_loss,
    train_stage,
    validate_stage_sequence,
)
from finemoe.vision import VisionConfig, VisionEncoder


def tiny_decoder_config(context=64, rope=1e5):
    return DecoderConfig(
        hidden_dim=16, n_layers=2, n_heads=2, head_dim=8, vocab_size=258,
        context_length=context, rope_base=rope,
        moe=MoEConfig(hidden_dim=16, n_routed=4, n_shared=1, top_k=2,
                      expert_ffn_dim=8, group_size=2))


def fast_vision_config():
    return VisionConfig(output_dim=16, patch_size=70, vit_dim=12,
                        vit_layers=1, vit_heads=2, vit_ffn_dim=16,
                        resampler_ffn_dim=16, n_queries_base=4,
                        n_queries_high_extra=4, max_grid=70)


def language_stage(budget=10_000, **kw):
    defaults = dict(tag="language-pretrain", context_length=64,
                    rope_base=1e5, token_budget=budget,
                    mixture={"language": 1.0})
    defaults.update(kw)
    return StageConfig(**defaults)


class TestStageConfig:
    def test_valid(self):
        s = language_stage()
        assert s.required_tags() == {"language"}

    def test_bad_tag(self):
        with pytest.raises(ValueError):
            language_stage(tag="warmup")

    def test_bad_context(self):
        with pytest.raises(ValueError):
            language_stage(context_length=1)

    def test_bad_rope(self):
        with pytest.raises(ValueError):
            language_stage(rope_base=0.0)

    def test_negative_budget(self):
        with pytest.raises(ValueError):
            language_stage(budget=-1)

    def test_empty_mixture(self):
        with pytest.raises(ValueError):
            language_stage(mixture={})

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            language_stage(mixture={"language": -0.5, "caption": 1.5})

    def test_bad_decay(self):
        with pytest.raises(ValueError):
            language_stage(decay="linear")

    def test_zero_weight_not_required(self):
        s = language_stage(mixture={"language": 1.0, "caption": 0.0})
        assert s.required_tags() == {"language"}


class TestDefaultStages:
    def test_order_and_count(self):
        stages = default_stages()
        assert [s.tag for s in stages] == ["language-pretrain",
                                           "multimodal-pretrain",
                                           "long-context", "post-train"]
        validate_stage_sequence(stages)

    def test_long_context_reconfiguration(self):
        stages = default_stages()
        long = stages[2]
        assert long.rope_base == 5e6
        assert long.context_length > stages[1].context_length

    def test_budgets_descend(self):
        budgets = [s.token_budget for s in default_stages()]
        assert budgets == sorted(budgets, reverse=True)
        assert budgets[0] == 1_000_000

    def test_post_train_anneals(self):
        post = default_stages()[3]
        assert post.decay == "cosine"


class TestValidateStageSequence:
    def test_out_of_order(self):
        stages = default_stages()
        with pytest.raises(ValueError):
            validate_stage_sequence([stages[1], stages[0]])

    def test_duplicate_stage(self):
        stages = default_stages()
        with pytest.raises(ValueError):
            validate_stage_sequence([stages[0], stages[0]])

    def test_long_context_wrong_base(self):
        bad = StageConfig(tag="long-context", context_length=512,
                          rope_base=1e5, token_budget=100,
                          mixture={"language": 1.0})
        with pytest.raises(ValueError):
            validate_stage_sequence([bad])

    def test_long_context_must_widen(self):
        stages = [
            language_stage(context_length=512),
            StageConfig(tag="long-context", context_length=512,
                        rope_base=5e6, token_budget=100,
                        mixture={"language": 1.0}),
        ]
        with pytest.raises(ValueError):
            validate_stage_sequence(stages)

    def test_context_never_shrinks(self):
        stages = [
            language_stage(context_length=256),
            StageConfig(tag="multimodal-pretrain", context_length=128,
                        rope_base=1e5, token_budget=100,
                        mixture={"language": 1.0}),
        ]
        with pytest.raises(ValueError):
            validate_stage_sequence(stages)

    def test_subset_in_order_valid(self):
        stages = default_stages()
        validate_stage_sequence([stages[0], stages[2]])


class TestLearningRate:
    def test_warmup_linear(self):
        s = language_stage(peak_lr=1.0, warmup_steps=10)
        assert learning_rate(s, 0, 100) == pytest.approx(0.1)
        assert learning_rate(s, 4, 100) == pytest.approx(0.5)
        assert learning_rate(s, 9, 100) == pytest.approx(1.0)

    def test_constant_after_warmup(self):
        s = language_stage(peak_lr=0.3, warmup_steps=5)
        for step in (5, 50, 500):
            assert learning_rate(s, step, 100) == pytest.approx(0.3)

    def test_cosine_anneals_to_floor(self):
        s = language_stage(peak_lr=1.0, warmup_steps=0, decay="cosine",
                           lr_floor=1e-4)
        assert learning_rate(s, 0, 100) == pytest.approx(1.0)
        mid = learning_rate(s, 50, 100)
        assert mid == pytest.approx((1.0 + 1e-4) / 2.0, rel=1e-6)
        assert learning_rate(s, 100, 100) == pytest.approx(1e-4)
        assert learning_rate(s, 10_000, 100) == pytest.approx(1e-4)


class TestTotalLoss:
    def test_zero_coefficients(self):
        s = language_stage(balance_coefficient=0.0, z_coefficient=0.0)
        reset_graph()
        out = total_loss(Tensor(2.5), Tensor(3.0), Tensor(4.0), s)
        assert out.item() == pytest.approx(2.5)

    def test_documented_arithmetic(self):
        s = language_stage(balance_coefficient=0.01, z_coefficient=0.001)
        reset_graph()
        out = total_loss(Tensor(2.0), Tensor(1.0), Tensor(17.2959), s)
        assert out.item() == pytest.approx(2.0273, abs=1e-4)

    def test_uniform_balance_contributes_alpha(self):
        s = language_stage(balance_coefficient=0.01, z_coefficient=0.0)
        reset_graph()
        lm = Tensor(1.234)
        with_balance = total_loss(lm, Tensor(1.0), Tensor(0.0), s)
        assert with_balance.item() - lm.item() == pytest.approx(0.01)

    def test_non_finite_rejected(self):
        s = language_stage()
        reset_graph()
        with pytest.raises(NumericalError):
            total_loss(Tensor(float("nan")), Tensor(1.0), Tensor(0.0), s)
        with pytest.raises(NumericalError):
            total_loss(Tensor(1.0), Tensor(float("inf")), Tensor(0.0), s)

    def test_gradients_carry_coefficients(self):
        s = language_stage(balance_coefficient=0.25, z_coefficient=0.125)
        reset_graph()
        lm = Tensor(1.0, requires_grad=True)
        balance = Tensor(2.0, requires_grad=True)
        z = Tensor(3.0, requires_grad=True)
        backward(total_loss(lm, balance, z, s))
        assert lm.grad == pytest.approx(1.0)
        assert balance.grad == pytest.approx(0.25)
        assert z.grad == pytest.approx(0.125)


class TestAdamOptimizer:
    def test_moments_mirror_shapes(self):
        model = MoEDecoder(tiny_decoder_config(), seed=0)
        opt = AdamOptimizer(model.parameters())
        for name, p in model.parameters().items():
            assert opt.m[name].shape == p.data.shape
            assert opt.v[name].shape == p.data.shape

    def test_zero_gradient_leaves_parameters(self):
        reset_graph()
        p = Tensor(np.ones((3, 2)), requires_grad=True)
        opt = AdamOptimizer({"p": p})
        before = p.data.copy()
        opt.step(0.1)                         # grad is None
        assert np.array_equal(p.data, before)
        p.grad = np.zeros((3, 2))
        opt.step(0.1)
        assert np.array_equal(p.data, before)

    def test_first_step_is_signed_unit_update(self):
        reset_graph()
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        opt = AdamOptimizer({"p": p})
        p.grad = np.array([0.5, -4.0, 0.001])
        before = p.data.copy()
        opt.step(0.01)
        # bias-corrected first step reduces to lr * g / (|g| + eps)
        expected = before - 0.01 * np.sign([0.5, -4.0, 0.001])
        np.testing.assert_allclose(p.data, expected, atol=1e-4)

    def test_minimizes_quadratic(self):
        reset_graph()
        p = Tensor(np.array([5.0]), requires_grad=True)
        opt = AdamOptimizer({"p": p})
        for _ in range(500):
            p.grad = 2.0 * p.data             # d/dx of x^2
            opt.step(0.05)
        assert abs(p.data[0]) < 0.1


def probe_logits(model, token_ids=(1, 5, 9, 200)):
    reset_graph()
    logits, _ = model(TokenSequence.text(list(token_ids)))
    return logits.data.copy()


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path):
        config = tiny_decoder_config()
        model = MoEDecoder(config, seed=3)
        path = tmp_path / "model.ckpt"
        checkpoint_save(model, None, path, stage_tag="language-pretrain",
                        step=17)
        loaded, vision, opt, header = checkpoint_load(path, config)
        assert vision is None and opt is None
        assert header["stage"] == "language-pretrain"
        assert header["step"] == 17
        np.testing.assert_array_equal(probe_logits(model),
                                      probe_logits(loaded))

    def test_optimizer_state_round_trip(self, tmp_path):
        config = tiny_decoder_config()
        model = MoEDecoder(config, seed=1)
        opt = AdamOptimizer(model.parameters())
        rng = np.random.default_rng(0)
        for p in opt.parameters.values():
            p.grad = rng.normal(size=p.data.shape)
        opt.step(1e-3)
        path = tmp_path / "with_opt.ckpt"
        checkpoint_save(model, opt, path, step=1)
        _, _, restored, _ = checkpoint_load(path, config, with_optimizer=True)
        assert restored.step_count == 1
        for name in opt.parameters:
            np.testing.assert_array_equal(restored.m[name], opt.m[name])
            np.testing.assert_array_equal(restored.v[name], opt.v[name])

    def test_truncated_file_integrity_error(self, tmp_path):
        config = tiny_decoder_config()
        model = MoEDecoder(config, seed=0)
        path = tmp_path / "model.ckpt"
        checkpoint_save(model, None, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 64])
        with pytest.raises(CheckpointError):
            checkpoint_load(path, config)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"HELLO WORLD")
        with pytest.raises(CheckpointError):
            read_checkpoint_header(path)

    def test_structural_mismatch_refused(self, tmp_path):
        config = tiny_decoder_config()
        model = MoEDecoder(config, seed=0)
        path = tmp_path / "model.ckpt"
        checkpoint_save(model, None, path)
        other = DecoderConfig(
            hidden_dim=32, n_layers=2, n_heads=2, head_dim=16, vocab_size=258,
            context_length=64, rope_base=1e5,
            moe=MoEConfig(hidden_dim=32, n_routed=4, n_shared=1, top_k=2,
                          expert_ffn_dim=8, group_size=2))
        with pytest.raises(CheckpointError):
            checkpoint_load(path, other)

    def test_context_and_rope_excluded_from_hash(self):
        a = tiny_decoder_config(context=64, rope=1e5)
        b = tiny_decoder_config(context=512, rope=5e6)
        assert structural_hash(a) == structural_hash(b)
        wider = DecoderConfig(
            hidden_dim=16, n_layers=3, n_heads=2, head_dim=8, vocab_size=258,
            context_length=64, rope_base=1e5, moe=a.moe)
        assert structural_hash(a) != structural_hash(wider)

    def test_stage2_checkpoint_into_stage3_config(self, tmp_path):
        saved_config = tiny_decoder_config(context=64, rope=1e5)
        model = MoEDecoder(saved_config, seed=5)
        path = tmp_path / "stage2.ckpt"
        checkpoint_save(model, None, path, stage_tag="multimodal-pretrain",
                        step=40)
        stage3_config = saved_config.with_context(512, 5e6)
        loaded, _, _, header = checkpoint_load(path, stage3_config)
        assert header["stage"] == "multimodal-pretrain"
        assert loaded.config.rope_base == 5e6
        assert loaded.config.context_length == 512
        for name, p in model.parameters().items():
            np.testing.assert_array_equal(loaded.parameters()[name].data,
                                          p.data)

    def test_vision_parameters_included(self, tmp_path):
        config = tiny_decoder_config()
        vcfg = fast_vision_config()
        model = MoEDecoder(config, seed=0)
        vision = VisionEncoder(vcfg, seed=1)
        path = tmp_path / "mm.ckpt"
        checkpoint_save(model, None, path, vision=vision)
        loaded, loaded_vision, _, _ = checkpoint_load(path, config, vcfg)
        for name, p in vision.parameters().items():
            np.testing.assert_array_equal(
                loaded_vision.parameters()[name].data, p.data)
        with pytest.raises(CheckpointError):
            checkpoint_load(path, config)      # vision config omitted


class TestTrainStage:
    def test_zero_budget_no_steps(self, tmp_path):
        model = MoEDecoder(tiny_decoder_config(), seed=0)
        before = {k: p.data.copy() for k, p in model.parameters().items()}
        report = train_stage(model, language_stage(budget=0),
                             generate_copy_corpus(seed=0), seed=0,
                             out_dir=tmp_path)
        assert report.n_steps == 0 and report.tokens_consumed == 0
        for name, p in model.parameters().items():
            np.testing.assert_array_equal(p.data, before[name])
        loaded, _, _, header = checkpoint_load(report.checkpoint_path,
                                               model.config)
        assert header["step"] == 0
        for name, p in model.parameters().items():
            np.testing.assert_array_equal(loaded.parameters()[name].data,
                                          before[name])

    def test_deterministic_loss_curves(self):
        curves = []
        for _ in range(2):
            model = MoEDecoder(tiny_decoder_config(), seed=4)
            report = train_stage(model, language_stage(),
                                 generate_copy_corpus(seed=2), seed=9,
                                 max_steps=8)
            curves.append(report.loss_curve)
        assert curves[0] == curves[1]
        assert len(curves[0]) == 8

    def test_loss_decreases_on_copy_task(self):
        model = MoEDecoder(tiny_decoder_config(), seed=0)
        report = train_stage(model, language_stage(budget=100_000),
                             generate_copy_corpus(seed=0), seed=0,
                             max_steps=60)
        assert np.mean(report.lm_curve[-5:]) < np.mean(report.lm_curve[:5])

    def test_missing_source_tag(self):
        model = MoEDecoder(tiny_decoder_config(), seed=0)
        stage = language_stage(mixture={"caption": 1.0})
        with pytest.raises(MissingDataError):
            train_stage(model, stage, generate_copy_corpus(seed=0), seed=0)

    def test_images_without_vision_encoder(self):
        corpus = generate_toy_corpus(CorpusSpec(seed=0))
        model = MoEDecoder(tiny_decoder_config(), seed=0)
        stage = language_stage(mixture={"caption": 1.0})
        with pytest.raises(MissingDataError):
            train_stage(model, stage, corpus, seed=0)

    def test_model_reconfigured_before_steps(self):
        model = MoEDecoder(tiny_decoder_config(context=64, rope=1e5), seed=0)
        stage = language_stage(budget=0, context_length=128, rope_base=5e5)
        train_stage(model, stage, generate_copy_corpus(seed=0), seed=0)
        assert model.config.context_length == 128
        assert model.config.rope_base == 5e5

    def test_trace_emitted_and_replayable(self, tmp_path):
        model = MoEDecoder(tiny_decoder_config(), seed=0)
        report = train_stage(model, language_stage(),
                             generate_copy_corpus(seed=1), seed=1,
                             out_dir=tmp_path, max_steps=4)
        records = read_trace(report.trace_path)
        layers = model.config.n_layers
        assert len(records) == 4 * layers
        assert {r.layer_index for r in records} == set(range(layers))
        for r in records:
            assert r.top_k == model.config.moe.top_k

    def test_divergence_guard_restores_last_good(self, tmp_path):
        # normalization layers keep moderate blowups finite in float64,
        # so the guard fires only on a true overflow: push parameters to
        # ~1e200 and the gated feed-forward product overflows to inf
        model = MoEDecoder(tiny_decoder_config(), seed=0)
        stage = language_stage(peak_lr=1e200, warmup_steps=0)
        report = train_stage(model, stage, generate_copy_corpus(seed=0),
                             seed=0, out_dir=tmp_path, max_steps=50)
        assert report.diverged
        assert report.n_steps < 50
        # restored parameters stay finite and the checkpoint loads
        for p in model.parameters().values():
            assert np.isfinite(p.data).all()
        loaded, _, _, _ = checkpoint_load(report.checkpoint_path,
                                          model.config)
        for name, p in model.parameters().items():
            np.testing.assert_array_equal(loaded.parameters()[name].data,
                                          p.data)

    def test_multimodal_stage_trains_vision(self, tmp_path):
        corpus = generate_toy_corpus(CorpusSpec(
            seed=0, n_caption_docs=2, n_interleaved_docs=0, n_document_qa=0,
            n_video_qa=0, language_docs_per_cluster=1, n_clusters=1,
            min_image_side=16, max_image_side=24))
        config = tiny_decoder_config(context=128)
        model = MoEDecoder(config, seed=0)
        vision = VisionEncoder(fast_vision_config(), seed=0)
        stage = StageConfig(tag="multimodal-pretrain", context_length=128,
                            rope_base=1e5, token_budget=10_000,
                            mixture={"caption": 1.0})
        before = {k: p.data.copy() for k, p in vision.parameters().items()}
        report = train_stage(model, stage, corpus, seed=0, vision=vision,
                             max_steps=3, out_dir=tmp_path)
        assert report.n_steps == 3
        changed = any(not np.array_equal(p.data, before[k])
                      for k, p in vision.parameters().items())
        assert changed, "vision parameters never updated"
        records = read_trace(report.trace_path)
        assert any((r.modality == 1).any() for r in records)

    def test_frozen_vision_unchanged(self):
        corpus = generate_toy_corpus(CorpusSpec(
            seed=0, n_caption_docs=2, n_interleaved_docs=0, n_document_qa=0,
            n_video_qa=0, language_docs_per_cluster=1, n_clusters=1,
            min_image_side=16, max_image_side=24))
        model = MoEDecoder(tiny_decoder_config(context=128), seed=0)
        vision = VisionEncoder(fast_vision_config(), seed=0)
        stage = StageConfig(tag="multimodal-pretrain", context_length=128,
                            rope_base=1e5, token_budget=10_000,
                            mixture={"caption": 1.0})
        before = {k: p.data.copy() for k, p in vision.parameters().items()}
        train_stage(model, stage, corpus, seed=0, vision=vision,
                    train_vision=False, max_steps=3)
        for k, p in vision.parameters().items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_stage_handoff_bitwise(self, tmp_path):
        config = tiny_decoder_config()
        model = MoEDecoder(config, seed=0)
        report = train_stage(model, language_stage(), generate_copy_corpus(0),
                             seed=0, out_dir=tmp_path, max_steps=5)
        loaded, _, _, _ = checkpoint_load(report.checkpoint_path,
                                          model.config)
        np.testing.assert_array_equal(probe_logits(model),
                                      probe_logits(loaded))

    def test_report_serializes(self, tmp_path):
        model = MoEDecoder(tiny_decoder_config(), seed=0)
        report = train_stage(model, language_stage(),
                             generate_copy_corpus(seed=0), seed=0,
                             max_steps=2, out_dir=tmp_path)
        text = report.to_json()
        assert '"stage": "language-pretrain"' in text
        assert (tmp_path / "language-pretrain.report.json").exists()
