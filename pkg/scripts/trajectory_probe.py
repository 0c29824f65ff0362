"""Track max channel ratio (mean_abs / grand mean_abs) per site across a
long baseline run, to find when/whether 6x outlier channels emerge."""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from lowbit.data import encode_bytes, synthetic_corpus
from lowbit.model import ModelConfig, TransformerLM
from lowbit.ptq import PTQPlan, apply_ptq
from lowbit.train import TrainConfig, eval_perplexity, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 6000
batch = int(sys.argv[2]) if len(sys.argv) > 2 else 256
lr = float(sys.argv[3]) if len(sys.argv) > 3 else 2e-3
beta2 = float(sys.argv[4]) if len(sys.argv) > 4 else 0.95

corpus = encode_bytes(synthetic_corpus(1_580_000, seed=1000))
train_tokens, eval_tokens = corpus[:1_500_000], corpus[1_500_000:]

cfg = ModelConfig(n_layers=2, d_model=64, n_heads=4, seq_len=128, seed=0)
tcfg = TrainConfig(steps=steps, batch_tokens=batch, lr=lr, warmup_steps=40,
                   weight_decay=0.01, beta2=beta2,
                   log_interval=steps // 12, dump_interval=steps // 12,
                   probe_tokens=512)
model = TransformerLM(cfg)
t0 = time.time()
metrics, _ = train(model, tcfg, train_tokens, eval_tokens=eval_tokens)
print(f"wall {time.time()-t0:.0f}s eval_ppl {metrics[-1]['eval_ppl']:.4f}")

probe = eval_tokens[: 4 * 128].reshape(4, 128)
# trajectory from the metrics' probe stats is not stored per step; recompute
# from the model only at the end, and report per-metric outlier fraction
for m in metrics:
    if m.get("outlier_fraction") is not None:
        print(f"step {m['step']:5d} ce {m['ce_loss']:.4f} "
              f"outlier_frac {m['outlier_fraction']:.4f}")

_, aux = model.forward(probe)
for (layer, site), arr in sorted(aux["taps"].items()):
    mean_abs = np.abs(arr).mean(axis=0)
    top = np.sort(mean_abs / mean_abs.mean())[-3:]
    print(f"{site:13s} l{layer}: top ratios {np.round(top, 2)}")

p16 = eval_perplexity(apply_ptq(model, PTQPlan(16, "none", 16))[0], eval_tokens)
p4 = eval_perplexity(apply_ptq(model, PTQPlan(16, "none", 4))[0], eval_tokens)
print(f"W16A16 {p16:.4f}  A4rtn {p4:.4f}  ratio {p4/p16:.3f}")
