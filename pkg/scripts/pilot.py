"""One-seed pilot of the end-to-end acceptance criteria, printing each
measurement the acceptance suite will gate on."""

import json
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
STEPS = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
LAM = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-5
OUT = Path(sys.argv[4]) if len(sys.argv) > 4 else Path("/tmp/pilot")

corpus = encode_bytes(synthetic_corpus(1_580_000, seed=1000))
train_tokens, eval_tokens = corpus[:1_500_000], corpus[1_500_000:]

def model_cfg(kind):
    qat = INPUT_SITES if kind in ("qat", "qat_kurt") else ()
    lam = LAM if kind == "qat_kurt" else 0.0
    return ModelConfig(n_layers=2, d_model=64, n_heads=4, seq_len=128, seed=SEED,
                       qat_sites=qat,
                       kurtosis=KurtosisConfig(lam=lam, sites=frozenset(OUTPUT_SITES) if lam else frozenset()))

tcfg = TrainConfig(steps=STEPS, batch_tokens=512, lr=1e-3, warmup_steps=40,
                   log_interval=50, probe_tokens=256)

results = {}
models = {}
for kind in ("baseline", "qat", "qat_kurt"):
    t0 = time.time()
    m = TransformerLM(model_cfg(kind))
    run_dir = OUT / f"{kind}_s{SEED}"
    metrics, _ = train(m, tcfg, train_tokens, eval_tokens=eval_tokens, run_dir=run_dir)
    wall = time.time() - t0
    models[kind] = (m, metrics, run_dir)
    final = metrics[-1]
    print(f"[{kind}] {wall:.0f}s  final loss {final['loss']:.4f} ce {final['ce_loss']:.4f} "
          f"kurt {final['kurt_loss']:.4f} eval_ppl {final['eval_ppl']:.4f}", flush=True)

def ppl(model, plan, calib=None):
    conv, _ = apply_ptq(model, plan, calib_tokens_stream=calib)
    return eval_perplexity(conv, eval_tokens)

base, qat, qkurt = models["baseline"][0], models["qat"][0], models["qat_kurt"][0]

p_base_1616 = ppl(base, PTQPlan(16, "none", 16))
p_base_16a4 = ppl(base, PTQPlan(16, "none", 4))     # per-token RTN fallback
p_qat_16a4 = ppl(qat, PTQPlan(16, "none", 4))       # native (clips)
p_qk_16a4 = ppl(qkurt, PTQPlan(16, "none", 4))
p_qat_w4a4 = ppl(qat, PTQPlan(4, "rtn", 4))
p_qk_w4a4 = ppl(qkurt, PTQPlan(4, "rtn", 4))

print(f"baseline W16A16 = {p_base_1616:.4f}")
print(f"baseline A4(RTN) = {p_base_16a4:.4f}  ratio {p_base_16a4/p_base_1616:.3f} (6b needs >= 3)")
print(f"qat W16A4 native = {p_qat_16a4:.4f}  ratio vs baseline {p_qat_16a4/p_base_1616:.4f} (6a needs <= 1.15)")
print(f"qat+kurt W16A4 native = {p_qk_16a4:.4f} ratio {p_qk_16a4/p_base_1616:.4f}")
deg_qat = p_qat_w4a4 / p_qat_16a4
deg_qk = p_qk_w4a4 / p_qk_16a4
print(f"qat W4A4-RTN = {p_qat_w4a4:.4f}  degradation {deg_qat:.4f}")
print(f"qat+kurt W4A4-RTN = {p_qk_w4a4:.4f} degradation {deg_qk:.4f} (6c needs qk <= qat)")

# 6d: mean output kurtosis from final-step site stats
def out_kurt(kind):
    stats = models[kind][1][-1]["site_stats"]
    return float(np.mean([r["mean_kurtosis"] for r in stats if r["kind"] == "output"]))

k_qat, k_qk = out_kurt("qat"), out_kurt("qat_kurt")
print(f"output kurtosis: qat {k_qat:.2f} vs qat+kurt {k_qk:.2f} (6d needs qk < qat)")

# 7: outlier fractions on baseline at final step + early emergence
stats = models["baseline"][1][-1]["site_stats"]
res = [r for r in stats if r["kind"] == "input" and r["residual_stream"]]
mlp_proj = [r for r in stats if r["site"] == "mlp_proj_in"]
res_mean = float(np.mean([r["outlier_fraction"] for r in res]))
mp_mean = float(np.mean([r["outlier_fraction"] for r in mlp_proj]))
print(f"outliers: residual sites {res_mean:.4f} vs mlp_proj_in {mp_mean:.4f} (7 needs res >= mp)")
early_cut = max(1, STEPS // 5)
early = [m for m in models["baseline"][1] if m["step"] <= early_cut and m["outlier_fraction"] is not None]
early_max = max((m["outlier_fraction"] for m in early), default=0.0)
print(f"early outlier fraction by step {early_cut}: {early_max:.4f} (7 needs > 0)")

per_site = {r['site']: r['outlier_fraction'] for r in stats if r['kind']=='input'}
print("per-site final outlier fractions:", json.dumps(per_site))
