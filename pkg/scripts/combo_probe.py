"""Parameterized probe for the residual-outlier training recipe."""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from lowbit.data import encode_bytes, synthetic_corpus
from lowbit.model import ModelConfig, TransformerLM
from lowbit.ptq import PTQPlan, apply_ptq
from lowbit.train import TrainConfig, eval_perplexity, train

import argparse

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=4000)
ap.add_argument("--batch", type=int, default=512)
ap.add_argument("--lr", type=float, default=3e-3)
ap.add_argument("--wd", type=float, default=0.1)
ap.add_argument("--beta2", type=float, default=0.999)
ap.add_argument("--seq", type=int, default=128)
ap.add_argument("--heads", type=int, default=8)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--decay-emb", action="store_true")
args = ap.parse_args()

corpus = encode_bytes(synthetic_corpus(2_600_000, seed=1000))
train_tokens, eval_tokens = corpus[:2_500_000], corpus[2_500_000:]
cfg = ModelConfig(n_layers=2, d_model=64, n_heads=args.heads, seq_len=args.seq,
                  seed=args.seed)
tcfg = TrainConfig(steps=args.steps, batch_tokens=args.batch, lr=args.lr,
                   warmup_steps=60, weight_decay=args.wd, beta2=args.beta2,
                   decay_embeddings=args.decay_emb,
                   log_interval=max(1, args.steps // 10),
                   dump_interval=max(1, args.steps // 10), probe_tokens=512)
model = TransformerLM(cfg)
t0 = time.time()
metrics, _ = train(model, tcfg, train_tokens, eval_tokens=eval_tokens)
print(f"wall {time.time()-t0:.0f}s eval_ppl {metrics[-1]['eval_ppl']:.4f}")
for m in metrics:
    if m.get("outlier_fraction") is not None:
        print(f"  step {m['step']:5d} ce {m['ce_loss']:.4f} "
              f"outlier_frac {m['outlier_fraction']:.4f}")

n_probe = max(2, 512 // args.seq)
probe = eval_tokens[: n_probe * args.seq].reshape(n_probe, args.seq)
_, aux = model.forward(probe)
for (layer, site), arr in sorted(aux["taps"].items()):
    mean_abs = np.abs(arr).mean(axis=0)
    top = np.sort(mean_abs / mean_abs.mean())[-3:]
    frac = float((mean_abs > 6 * mean_abs.mean()).mean())
    print(f"{site:13s} l{layer}: top {np.round(top, 2)} frac {frac:.4f}")
p16 = eval_perplexity(apply_ptq(model, PTQPlan(16, "none", 16))[0], eval_tokens)
p4 = eval_perplexity(apply_ptq(model, PTQPlan(16, "none", 4))[0], eval_tokens)
print(f"W16A16 {p16:.4f}  A4rtn {p4:.4f}  ratio {p4/p16:.3f}")
