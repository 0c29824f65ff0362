"""One-seed validation of the QAT-family criteria at the acceptance recipe."""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from lowbit.data import encode_bytes, synthetic_corpus
from lowbit.kurtosis import KurtosisConfig
from lowbit.model import INPUT_SITES, OUTPUT_SITES, ModelConfig, TransformerLM
from lowbit.ptq import PTQPlan, apply_ptq
from lowbit.train import TrainConfig, eval_perplexity, train

SEED = int(sys.argv[1]) if len(sys.argv) > 1 else 0
STEPS = int(sys.argv[2]) if len(sys.argv) > 2 else 8000
LR = float(sys.argv[3]) if len(sys.argv) > 3 else 4e-3
LAM = float(sys.argv[4]) if len(sys.argv) > 4 else 3e-7

corpus = encode_bytes(synthetic_corpus(2_600_000, seed=1000))
train_tokens, eval_tokens = corpus[:2_500_000], corpus[2_500_000:]


def cfg(kind):
    qat = INPUT_SITES if kind in ("qat", "qat_kurt") else ()
    lam = LAM if kind == "qat_kurt" else 0.0
    return ModelConfig(n_layers=2, d_model=64, n_heads=8, seq_len=256, seed=SEED,
                       qat_sites=qat,
                       kurtosis=KurtosisConfig(lam=lam, sites=frozenset(OUTPUT_SITES)
                                               if lam else frozenset()))


tcfg = TrainConfig(steps=STEPS, batch_tokens=512, lr=LR, warmup_steps=60,
                   weight_decay=0.1, beta2=0.999, decay_embeddings=False,
                   log_interval=STEPS // 10, dump_interval=STEPS // 10,
                   probe_tokens=512)

models = {}
for kind in ("qat", "qat_kurt"):
    t0 = time.time()
    m = TransformerLM(cfg(kind))
    metrics, _ = train(m, tcfg, train_tokens, eval_tokens=eval_tokens)
    print(f"[{kind}] wall {time.time()-t0:.0f}s "
          f"ce {metrics[-1]['ce_loss']:.4f} kurt {metrics[-1]['kurt_loss']:.4f} "
          f"eval_ppl {metrics[-1]['eval_ppl']:.4f}", flush=True)
    clips = metrics[-1]["clips"]
    sample = {k: (round(v['clip_lo'], 2), round(v['clip_hi'], 2))
              for k, v in list(clips.items())[:4]}
    print(f"  clips: {sample}")
    models[kind] = (m, metrics)


def ppl(model, plan):
    conv, _ = apply_ptq(model, plan, calib_tokens_stream=train_tokens)
    return eval_perplexity(conv, eval_tokens)


for kind in ("qat", "qat_kurt"):
    m, metrics = models[kind]
    native = ppl(m, PTQPlan(16, "none", 4))
    w4 = ppl(m, PTQPlan(4, "rtn", 4))
    kout = float(np.mean([r["mean_kurtosis"] for r in metrics[-1]["site_stats"]
                          if r["kind"] == "output"]))
    print(f"{kind}: W16A4 {native:.4f}  W4A4rtn {w4:.4f}  deg {w4/native:.4f}  "
          f"out-kurt {kout:.1f}")
