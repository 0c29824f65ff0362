"""Train on the retrieval corpus and measure the loss split between
retrieval-critical bytes (queried values) and everything else, under full
precision and under per-token A4 RTN."""

import re
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from lowbit import tensor as T
from lowbit.data import encode_bytes, synthetic_corpus, eval_windows
from lowbit.model import ModelConfig, TransformerLM
from lowbit.ptq import PTQPlan, apply_ptq
from lowbit.train import TrainConfig, eval_perplexity, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 4000
batch = int(sys.argv[2]) if len(sys.argv) > 2 else 256
lr = float(sys.argv[3]) if len(sys.argv) > 3 else 2e-3
seed = int(sys.argv[4]) if len(sys.argv) > 4 else 0

corpus = encode_bytes(synthetic_corpus(1_580_000, seed=1000))
train_tokens, eval_tokens = corpus[:1_500_000], corpus[1_500_000:]

cfg = ModelConfig(n_layers=2, d_model=64, n_heads=4, seq_len=128, seed=seed)
tcfg = TrainConfig(steps=steps, batch_tokens=batch, lr=lr, warmup_steps=40,
                   weight_decay=0.01, log_interval=max(1, steps // 10),
                   dump_interval=max(1, steps // 10), probe_tokens=512)
model = TransformerLM(cfg)
t0 = time.time()
metrics, _ = train(model, tcfg, train_tokens, eval_tokens=eval_tokens)
print(f"wall {time.time()-t0:.0f}s eval_ppl {metrics[-1]['eval_ppl']:.4f}")
for m in metrics:
    print(f"  step {m['step']:5d} ce {m['ce_loss']:.4f}")


def retrieval_mask(tokens: np.ndarray) -> np.ndarray:
    """True at target positions that are inside a queried value span."""
    text = bytes(tokens.tolist()).decode("latin1")
    mask = np.zeros(tokens.size, dtype=bool)
    for m in re.finditer(r"\? [0-9]=([a-z]+)", text):
        mask[m.start(1):m.end(1)] = True
    return mask


def split_loss(model, tokens):
    x, y = eval_windows(tokens, model.cfg.seq_len)
    mask_full = retrieval_mask(tokens)
    nll_r, n_r, nll_o, n_o = 0.0, 0, 0.0, 0
    for i in range(0, x.shape[0], 8):
        xb, yb = x[i:i + 8], y[i:i + 8]
        logits, _ = model.forward(xb)
        z = logits.data.astype(np.float64)
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
        flat_y = yb.reshape(-1)
        nll = lse - z[np.arange(flat_y.size), flat_y]
        # target position j of window w corresponds to corpus index w*L + j + 1
        base = np.arange(i, i + xb.shape[0])[:, None] * model.cfg.seq_len
        pos = (base + np.arange(model.cfg.seq_len)[None, :] + 1).reshape(-1)
        m = mask_full[pos]
        nll_r += nll[m].sum(); n_r += int(m.sum())
        nll_o += nll[~m].sum(); n_o += int((~m).sum())
    return nll_r / max(n_r, 1), nll_o / max(n_o, 1), n_r


for label, plan in (("W16A16", PTQPlan(16, "none", 16)),
                    ("A4rtn", PTQPlan(16, "none", 4))):
    conv, _ = apply_ptq(model, plan)
    ce_r, ce_o, n_r = split_loss(conv, eval_tokens)
    ppl = eval_perplexity(conv, eval_tokens)
    print(f"{label}: ppl {ppl:.4f} retrieval-ce {ce_r:.4f} other-ce {ce_o:.4f} "
          f"(retrieval bytes: {n_r})")

stats = metrics[-1]["site_stats"]
for r in stats:
    if r["kind"] == "input":
        print(f"  {r['site']:13s} l{r['layer']}: frac {r['outlier_fraction']:.4f}")
