"""Train baseline variants and report how close input-site channels get to
the 6x outlier threshold, plus the A4-RTN degradation (criterion 6b size)."""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from lowbit.data import encode_bytes, synthetic_corpus
from lowbit.model import ModelConfig, TransformerLM
from lowbit.ptq import PTQPlan, apply_ptq
from lowbit.train import TrainConfig, eval_perplexity, train

label = sys.argv[1]
lr = float(sys.argv[2])
wd = float(sys.argv[3])
steps = int(sys.argv[4])
corpus_seed = int(sys.argv[5]) if len(sys.argv) > 5 else 1000

corpus = encode_bytes(synthetic_corpus(1_580_000, seed=corpus_seed))
train_tokens, eval_tokens = corpus[:1_500_000], corpus[1_500_000:]

cfg = ModelConfig(n_layers=2, d_model=64, n_heads=4, seq_len=128, seed=0)
tcfg = TrainConfig(steps=steps, batch_tokens=512, lr=lr, warmup_steps=40,
                   weight_decay=wd, log_interval=200, probe_tokens=256)
model = TransformerLM(cfg)
t0 = time.time()
metrics, _ = train(model, tcfg, train_tokens, eval_tokens=eval_tokens)
wall = time.time() - t0

stats = metrics[-1]["site_stats"]
ratios = {}
for r in stats:
    if r["kind"] != "input":
        continue
    ratios[f"{r['site']}/l{r['layer']}"] = round(
        r["mean_abs_max"] / max(1e-12, r["mean_abs_max"] / 1), 2)

# recompute actual max/grand ratio from fresh probe
from lowbit.train import probe_site_stats
from lowbit.outliers import ChannelStats, accumulate

probe = eval_tokens[: 2 * 128].reshape(2, 128)
_, aux = model.forward(probe)
print(f"[{label}] wall {wall:.0f}s eval_ppl {metrics[-1]['eval_ppl']:.4f} "
      f"ce {metrics[-1]['ce_loss']:.4f}")
for (layer, site), arr in sorted(aux["taps"].items()):
    mean_abs = np.abs(arr).mean(axis=0)
    print(f"  {site:13s} l{layer}: maxratio {mean_abs.max()/mean_abs.mean():5.2f} "
          f"frac>6x {(mean_abs > 6*mean_abs.mean()).mean():.3f}")

for i in range(cfg.n_layers):
    for ln in ("ln1", "ln2"):
        g = model.params[f"l{i}.{ln}.g"].data
        b = model.params[f"l{i}.{ln}.b"].data
        print(f"  l{i}.{ln}: |g| max/mean {np.abs(g).max()/np.abs(g).mean():.2f} "
              f"|b| max {np.abs(b).max():.2f} mean {np.abs(b).mean():.2f}")

p16 = eval_perplexity(apply_ptq(model, PTQPlan(16, "none", 16))[0], eval_tokens)
p4 = eval_perplexity(apply_ptq(model, PTQPlan(16, "none", 4))[0], eval_tokens)
print(f"  W16A16 {p16:.4f}  A4rtn {p4:.4f}  ratio {p4/p16:.3f} (6b needs >=3)")
