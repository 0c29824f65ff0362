"""Training loop, optimizer, perplexity evaluation, and metrics/dump output.

Weights train with AdamW (decay on matrices only); learned clip values train
with plain SGD at the scheduled learning rate, no momentum and no weight
decay.  The schedule is a linear warmup into a cosine decay down to
``min_lr_frac`` of the peak rate.

Every run is reproducible: batches come from one seeded generator whose
state is checkpointed, so save / load / continue is bit-identical to an
uninterrupted run.  A fixed probe batch is re-run at a regular cadence and
its activations written as dump files for the outlier analysis; the mean
outlier fraction over the four block input sites is reported alongside the
losses in newline-delimited JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import eval_windows, sample_batch
from .errors import DivergenceError, InputError
from .fakequant import clip_optimizer_step
from .model import INPUT_SITES, OUTPUT_SITES, SITE_DISPLAY, TransformerLM
from .outliers import ChannelStats, accumulate, outlier_channels, write_dump
from .serialize import load_checkpoint, save_checkpoint


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_tokens: int = 512
    lr: float = 3e-4
    warmup_steps: int = 20
    min_lr_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    adam_eps: float = 1e-8
    log_interval: int = 10
    dump_interval: int = 0     # 0 -> max(1, steps // 50)
    probe_tokens: int = 256
    checkpoint_interval: int = 0   # 0 -> final checkpoint only
    decay_embeddings: bool = True  # include embedding tables in weight decay

    def resolved_dump_interval(self) -> int:
        return self.dump_interval or max(1, self.steps // 50)


class AdamW:
    """AdamW with decoupled weight decay applied to 2-D parameters only."""

    def __init__(self, params: dict[str, "T.Tensor"], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def _decays(self, name: str, p: "T.Tensor") -> bool:
        if p.data.ndim != 2:
            return False
        if not self.cfg.decay_embeddings and name in ("tok_emb", "pos_emb"):
            return False
        return True

    def step(self, params: dict[str, "T.Tensor"], lr: float):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            if c.weight_decay and self._decays(name, p):
                update = update + c.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}

    def load_state(self, state: dict):
        self.m = {k: np.asarray(a) for k, a in state["m"].items()}
        self.v = {k: np.asarray(a) for k, a in state["v"].items()}
        self.t = state.get("t", 0)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to min_lr_frac of the peak."""
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    floor = cfg.lr * cfg.min_lr_frac
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * progress))


def _zero_grads(model: TransformerLM):
    for p in model.params.values():
        p.grad = None
    for c in model.clips.values():
        c.zero_grads()


def _probe_batch(eval_tokens: np.ndarray, seq_len: int, probe_tokens: int) -> np.ndarray:
    n_seqs = max(1, probe_tokens // seq_len)
    need = n_seqs * seq_len + 1
    if eval_tokens.size < need:
        n_seqs = max(1, (eval_tokens.size - 1) // seq_len)
        need = n_seqs * seq_len + 1
        if eval_tokens.size < need:
            raise InputError("held-out split too small for a probe batch")
    return eval_tokens[: n_seqs * seq_len].reshape(n_seqs, seq_len)


def probe_site_stats(model: TransformerLM, probe: np.ndarray,
                     step: int, dump_dir: Path | None = None,
                     model_id: str = "") -> list[dict]:
    """Run the probe batch, optionally write dumps, and summarize each
    input and output site's channel statistics."""
    _, aux = model.forward(probe)
    records = []
    site_arrays: list[tuple[int, str, np.ndarray]] = []
    for (layer, site), arr in sorted(aux["taps"].items()):
        site_arrays.append((layer, site, arr))
    for key, out in sorted(aux["site_outputs"].items()):
        layer = int(key.split(".")[0][1:])
        site = key.split(".", 1)[1]
        site_arrays.append((layer, site, out.data))

    for layer, site, arr in site_arrays:
        stats = ChannelStats(site=SITE_DISPLAY[site], layer=layer,
                             width=arr.shape[1])
        accumulate(stats, arr)
        idx, fraction = outlier_channels(stats)
        records.append({
            "layer": layer, "site": site, "display": SITE_DISPLAY[site],
            "kind": "input" if site in INPUT_SITES else "output",
            "residual_stream": site in ("qkv_in", "mlp_in"),
            "outlier_fraction": float(fraction),
            "mean_kurtosis": float(stats.kurtosis.mean()),
            "mean_abs_max": float(stats.mean_abs.max()),
        })
        if dump_dir is not None:
            path = dump_dir / f"step{step:06d}_l{layer}_{site}.actd"
            write_dump(path, arr, SITE_DISPLAY[site], layer, step, model_id)
    return records


def train(model: TransformerLM, tcfg: TrainConfig, train_tokens: np.ndarray,
          eval_tokens: np.ndarray | None = None, run_dir=None,
          resume: dict | None = None):
    """Train in place; returns (metrics, final_checkpoint_dir_or_None).

    ``eval_tokens`` doubles as the probe source and the final perplexity
    split; when omitted the last tenth of the corpus is held out for it.
    With ``run_dir`` set, metrics stream to metrics.ndjson, dumps to dumps/,
    and checkpoints to checkpoints/final (checkpoints/diverged on abort).
    """
    cfg = model.cfg
    if eval_tokens is None:
        split = max(cfg.seq_len + 1, int(train_tokens.size * 0.9))
        if split >= train_tokens.size:
            raise InputError("corpus too small to hold out an eval split")
        train_tokens, eval_tokens = train_tokens[:split], train_tokens[split:]
    n_seqs = max(1, tcfg.batch_tokens // cfg.seq_len)
    probe = _probe_batch(eval_tokens, cfg.seq_len, tcfg.probe_tokens)
    dump_interval = tcfg.resolved_dump_interval()

    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_fh = None
    dump_dir = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        dump_dir = run_dir / "dumps"
        dump_dir.mkdir(exist_ok=True)
        mode = "a" if resume else "w"
        metrics_fh = open(run_dir / "metrics.ndjson", mode)

    optimizer = AdamW(model.params, tcfg)
    if resume:
        optimizer.load_state(resume["optimizer"])
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = resume["rng_state"]
        start_step = resume["step"] + 1
    else:
        rng = np.random.default_rng(np.random.SeedSequence([0xDA7A, cfg.seed]))
        start_step = 1

    metrics: list[dict] = []

    def emit(record):
        metrics.append(record)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_fh.flush()

    try:
        for step in range(start_step, tcfg.steps + 1):
            lr = lr_at(step, tcfg)
            x, y = sample_batch(train_tokens, rng, n_seqs, cfg.seq_len)
            _zero_grads(model)
            total, ce, kurt, _ = model.loss(x, y)
            loss_val = total.item()
            if not math.isfinite(loss_val):
                if run_dir is not None:
                    save_checkpoint(run_dir / "checkpoints" / "diverged", model,
                                    step=step, optimizer_state=optimizer.state(),
                                    rng_state=rng.bit_generator.state)
                raise DivergenceError(
                    f"training loss became non-finite at step {step}"
                )
            total.backward()
            optimizer.step(model.params, lr)
            for clip in model.clips.values():
                clip_optimizer_step(clip, lr)

            # outlier_fraction is only reported at steps where the probe ran,
            # so a resumed run emits byte-identical metrics
            site_stats = None
            outlier_fraction = None
            if step == 1 or step % dump_interval == 0 or step == tcfg.steps:
                site_stats = probe_site_stats(
                    model, probe, step, dump_dir, model_id=f"seed{cfg.seed}")
                input_fracs = [r["outlier_fraction"] for r in site_stats
                               if r["kind"] == "input"]
                outlier_fraction = float(np.mean(input_fracs))

            if step % tcfg.log_interval == 0 or step == tcfg.steps or step == 1:
                record = {
                    "step": step,
                    "lr": lr,
                    "loss": loss_val,
                    "ce_loss": ce.item(),
                    "kurt_loss": kurt.item(),
                    "ppl": math.exp(min(ce.item(), 30.0)),
                    "clips": {k: {"clip_lo": c.clip_lo, "clip_hi": c.clip_hi}
                              for k, c in sorted(model.clips.items())},
                    "outlier_fraction": outlier_fraction,
                }
                if step == tcfg.steps:
                    record["eval_ppl"] = eval_perplexity(model, eval_tokens)
                    record["site_stats"] = site_stats
                emit(record)

            if (run_dir is not None and tcfg.checkpoint_interval
                    and step % tcfg.checkpoint_interval == 0
                    and step != tcfg.steps):
                save_checkpoint(run_dir / "checkpoints" / f"step{step:06d}",
                                model, step=step,
                                optimizer_state=optimizer.state(),
                                rng_state=rng.bit_generator.state)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    ckpt_dir = None
    if run_dir is not None:
        ckpt_dir = save_checkpoint(run_dir / "checkpoints" / "final", model,
                                   step=tcfg.steps,
                                   optimizer_state=optimizer.state(),
                                   rng_state=rng.bit_generator.state)
    return metrics, ckpt_dir


def resume_state_from_checkpoint(ckpt_dir) -> tuple[TransformerLM, dict]:
    """Load a checkpoint written mid-run for bit-exact continuation."""
    model, step, optimizer_state, rng_state = load_checkpoint(ckpt_dir)
    if optimizer_state is None or rng_state is None:
        raise InputError("checkpoint lacks optimizer/RNG state; cannot resume")
    adam_t = step  # one optimizer step per training step
    return model, {"step": step,
                   "optimizer": {"m": optimizer_state["m"],
                                 "v": optimizer_state["v"], "t": adam_t},
                   "rng_state": rng_state}


def eval_perplexity(model: TransformerLM, tokens: np.ndarray,
                    batch_seqs: int = 8) -> float:
    """exp(mean NLL) over non-overlapping windows of the model's seq_len."""
    tokens = np.asarray(tokens)
    if tokens.size < model.cfg.seq_len + 1:
        raise InputError("evaluation corpus shorter than one window")
    x, y = eval_windows(tokens, model.cfg.seq_len)
    total_nll = 0.0
    total_rows = 0
    for i in range(0, x.shape[0], batch_seqs):
        xb, yb = x[i:i + batch_seqs], y[i:i + batch_seqs]
        logits, _ = model.forward(xb)
        ce = T.cross_entropy(logits, yb.reshape(-1))
        rows = xb.shape[0] * xb.shape[1]
        total_nll += ce.item() * rows
        total_rows += rows
    return math.exp(total_nll / total_rows)
