import json
import math

import numpy as np
import pytest

from lowbit.data import encode_bytes, eval_windows, load_corpus, sample_batch, synthetic_corpus
from lowbit.errors import DivergenceError, InputError
from lowbit.kurtosis import KurtosisConfig
from lowbit.model import INPUT_SITES, OUTPUT_SITES, ModelConfig, TransformerLM
from lowbit.serialize import load_checkpoint, save_checkpoint
from lowbit.train import (
    AdamW,
    TrainConfig,
    eval_perplexity,
    lr_at,
    resume_state_from_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def corpus():
    return encode_bytes(synthetic_corpus(200_000, seed=0))


def small_cfg(**kw):
    base = dict(n_layers=2, d_model=32, n_heads=4, seq_len=64, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def small_tcfg(**kw):
    base = dict(steps=40, batch_tokens=128, lr=1e-3, warmup_steps=5,
                log_interval=10, dump_interval=20, probe_tokens=64)
    base.update(kw)
    return TrainConfig(**base)


class TestData:
    def test_synthetic_corpus_deterministic(self):
        assert synthetic_corpus(5000, seed=1) == synthetic_corpus(5000, seed=1)
        assert synthetic_corpus(5000, seed=1) != synthetic_corpus(5000, seed=2)

    def test_eval_windows_partition_stream(self, corpus):
        x, y = eval_windows(corpus[:1001], 100)
        assert x.shape == (10, 100)
        np.testing.assert_array_equal(x[0, 1:], y[0, :-1])

    def test_sample_batch_shapes(self, corpus):
        rng = np.random.default_rng(0)
        x, y = sample_batch(corpus, rng, 3, 50)
        assert x.shape == y.shape == (3, 50)
        np.testing.assert_array_equal(x[:, 1:], y[:, :-1])

    def test_empty_corpus_rejected(self, tmp_path):
        p = tmp_path / "empty.txt"
        p.write_bytes(b"")
        with pytest.raises(InputError):
            load_corpus(p)


class TestSchedule:
    def test_warmup_then_cosine(self):
        tcfg = TrainConfig(steps=100, lr=1.0, warmup_steps=10, min_lr_frac=0.1)
        assert lr_at(1, tcfg) == pytest.approx(0.1)
        assert lr_at(10, tcfg) == pytest.approx(1.0)
        assert lr_at(100, tcfg) == pytest.approx(0.1, abs=1e-6)
        assert lr_at(55, tcfg) < 1.0


class TestTraining:
    def test_loss_beats_uniform_on_100kb(self):
        # 2-layer d=64 model, 200 steps on 100KB of text
        tokens = encode_bytes(synthetic_corpus(100_000, seed=3))
        cfg = ModelConfig(n_layers=2, d_model=64, n_heads=4, seq_len=128, seed=0)
        model = TransformerLM(cfg)
        tcfg = TrainConfig(steps=200, batch_tokens=256, lr=1e-3, warmup_steps=10,
                           log_interval=50, dump_interval=100, probe_tokens=128)
        metrics, _ = train(model, tcfg, tokens)
        assert metrics[-1]["ce_loss"] < math.log(256)
        assert metrics[-1]["eval_ppl"] < 256

    def test_same_seed_bit_identical_metrics(self, corpus):
        def run():
            model = TransformerLM(small_cfg(qat_sites=INPUT_SITES))
            metrics, _ = train(model, small_tcfg(), corpus)
            return json.dumps(metrics, sort_keys=True)

        assert run() == run()

    def test_kurt_loss_positive_at_step_one(self, corpus):
        cfg = small_cfg(kurtosis=KurtosisConfig(lam=1e-5,
                                                sites=frozenset(OUTPUT_SITES)))
        model = TransformerLM(cfg)
        metrics, _ = train(model, small_tcfg(steps=10, log_interval=1), corpus)
        assert metrics[0]["step"] == 1
        assert metrics[0]["kurt_loss"] > 0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_diagnostic(self, corpus, tmp_path):
        model = TransformerLM(small_cfg())
        # a hostile learning rate reliably blows the loss up
        tcfg = small_tcfg(steps=200, lr=2e3, warmup_steps=1)
        with pytest.raises(DivergenceError):
            train(model, tcfg, corpus, run_dir=tmp_path)
        assert (tmp_path / "checkpoints" / "diverged" / "manifest.json").exists()

    def test_clip_values_move_during_qat(self, corpus):
        model = TransformerLM(small_cfg(qat_sites=INPUT_SITES))
        before = {k: (c.clip_lo, c.clip_hi) for k, c in model.clips.items()}
        train(model, small_tcfg(), corpus)
        moved = [k for k, c in model.clips.items()
                 if (c.clip_lo, c.clip_hi) != before[k]]
        assert moved

    def test_residual_stream_tagging(self, corpus):
        from lowbit.train import probe_site_stats

        model = TransformerLM(small_cfg())
        probe = corpus[:129].reshape(1, -1)[:, :64]
        records = probe_site_stats(model, probe, step=1)
        flags = {r["site"]: r["residual_stream"] for r in records
                 if r["kind"] == "input"}
        assert flags == {"qkv_in": True, "mlp_in": True,
                         "attn_proj_in": False, "mlp_proj_in": False}

    def test_final_eval_ppl_matches_direct_eval(self, corpus):
        model = TransformerLM(small_cfg())
        eval_tokens = corpus[-4000:]
        metrics, _ = train(model, small_tcfg(steps=20), corpus[:50_000],
                           eval_tokens=eval_tokens)
        assert metrics[-1]["eval_ppl"] == eval_perplexity(model, eval_tokens)

    def test_run_dir_outputs(self, corpus, tmp_path):
        model = TransformerLM(small_cfg())
        metrics, ckpt = train(model, small_tcfg(), corpus, run_dir=tmp_path)
        assert (tmp_path / "metrics.ndjson").exists()
        lines = (tmp_path / "metrics.ndjson").read_text().splitlines()
        assert [json.loads(l)["step"] for l in lines] == [m["step"] for m in metrics]
        dumps = list((tmp_path / "dumps").glob("*.actd"))
        assert dumps
        assert (ckpt / "manifest.json").exists()


class TestCheckpointing:
    def test_round_trip_bit_exact(self, corpus, tmp_path):
        model = TransformerLM(small_cfg(qat_sites=INPUT_SITES))
        train(model, small_tcfg(steps=15), corpus)
        save_checkpoint(tmp_path / "ck", model, step=15)
        loaded, step, _, _ = load_checkpoint(tmp_path / "ck")
        assert step == 15
        for name, t in model.params.items():
            np.testing.assert_array_equal(t.data, loaded.params[name].data)
        for key, clip in model.clips.items():
            assert loaded.clips[key].clip_lo == clip.clip_lo
            assert loaded.clips[key].clip_hi == clip.clip_hi

    def test_eval_ppl_reproduced_after_round_trip(self, corpus, tmp_path):
        model = TransformerLM(small_cfg())
        train(model, small_tcfg(steps=15), corpus)
        ppl = eval_perplexity(model, corpus[-5000:])
        save_checkpoint(tmp_path / "ck", model)
        loaded, _, _, _ = load_checkpoint(tmp_path / "ck")
        assert eval_perplexity(loaded, corpus[-5000:]) == ppl

    def test_resume_reproduces_uninterrupted_run_for_100_steps(self, corpus, tmp_path):
        # checkpoint at step 50, then 110 resumed steps must match the
        # uninterrupted run bit for bit
        tcfg = small_tcfg(steps=160, checkpoint_interval=50, log_interval=10)

        model_a = TransformerLM(small_cfg(qat_sites=INPUT_SITES, seed=5))
        metrics_a, _ = train(model_a, tcfg, corpus, run_dir=tmp_path / "one")

        model_b = TransformerLM(small_cfg(qat_sites=INPUT_SITES, seed=5))
        train(model_b, small_tcfg(steps=160, checkpoint_interval=50),
              corpus, run_dir=tmp_path / "two")
        resumed, state = resume_state_from_checkpoint(
            tmp_path / "two" / "checkpoints" / "step000050")
        assert state["step"] == 50
        metrics_b, _ = train(resumed, tcfg, corpus, resume=state)

        tail_a = [m for m in metrics_a if m["step"] > 50]
        tail_b = [m for m in metrics_b if m["step"] > 50]
        assert json.dumps(tail_a, sort_keys=True) == json.dumps(tail_b, sort_keys=True)
        for name, t in model_a.params.items():
            np.testing.assert_array_equal(t.data, resumed.params[name].data)


class TestEvalPerplexity:
    def test_uniform_logits_give_vocab_perplexity(self, corpus):
        model = TransformerLM(small_cfg())
        # zero the readout so logits are exactly uniform
        model.params["head.w"].data[:] = 0
        model.params["head.b"].data[:] = 0
        ppl = eval_perplexity(model, corpus[:10_000])
        assert ppl == pytest.approx(256.0, abs=0.1)

    def test_deterministic(self, corpus):
        model = TransformerLM(small_cfg())
        a = eval_perplexity(model, corpus[:5000])
        b = eval_perplexity(model, corpus[:5000])
        assert a == b

    def test_short_corpus_rejected(self):
        model = TransformerLM(small_cfg())
        with pytest.raises(InputError):
            eval_perplexity(model, np.arange(10))
