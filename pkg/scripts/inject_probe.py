"""Causal check: amplify one LN-gain channel of a trained baseline and
measure how much per-token A4 RTN eval degrades. Tells us whether outlier
presence alone is sufficient for the catastrophic-degradation criterion."""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from lowbit.data import encode_bytes, synthetic_corpus
from lowbit.ptq import PTQPlan, apply_ptq
from lowbit.serialize import load_checkpoint
from lowbit.train import eval_perplexity

ckpt = sys.argv[1]
corpus = encode_bytes(synthetic_corpus(1_580_000, seed=1000))
eval_tokens = corpus[1_500_000:]

model, _, _, _ = load_checkpoint(ckpt)
p16 = eval_perplexity(apply_ptq(model, PTQPlan(16, "none", 16))[0], eval_tokens)
p4 = eval_perplexity(apply_ptq(model, PTQPlan(16, "none", 4))[0], eval_tokens)
print(f"as trained: W16A16 {p16:.4f} A4 {p4:.4f} ratio {p4/p16:.3f}")

for gain_mult in (4.0, 8.0, 16.0):
    m2, _, _, _ = load_checkpoint(ckpt)
    for i in (0, 1):
        g = m2.params[f"l{i}.ln1.g"].data
        j = int(np.argmax(np.abs(g)))
        g[j] *= gain_mult
        # compensate downstream so float behavior is (near) unchanged:
        # scale the corresponding input rows of W_qkv down
        m2.params[f"l{i}.wqkv"].data[j, :] /= gain_mult
    q16 = eval_perplexity(apply_ptq(m2, PTQPlan(16, "none", 16))[0], eval_tokens)
    q4 = eval_perplexity(apply_ptq(m2, PTQPlan(16, "none", 4))[0], eval_tokens)
    print(f"gain x{gain_mult}: W16A16 {q16:.4f} A4 {q4:.4f} ratio {q4/q16:.3f}")
