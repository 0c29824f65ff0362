"""Pre-LayerNorm transformer language model with QAT hooks.

Block structure (input X, layer l):

    Y1 = LN(X)          ->  Q,K,V = fq(Y1) W_qkv          (site qkv_in)
    Y2 = attn(Q, K, V)  ->  A     = fq(Y2) W_o            (site attn_proj_in)
    Z  = X + A
    Y3 = LN(Z)          ->  H     = fq(Y3) W_1            (site mlp_in)
    Y4 = gelu(H)        ->  M     = fq(Y4) W_2            (site mlp_proj_in)
    X' = Z + M

fq is the learned-clip fake quantizer when the site is QAT-enabled, the
identity otherwise.  The MLP reads Y3 (the value the second LayerNorm just
produced); ``paper_mlp_wiring`` switches to feeding Y2 instead for A/B runs.
Attention scores are scaled by 1/sqrt(d_head) unless ``attn_scale`` is off.

Each linear's pre-residual output is exposed for kurtosis regularization,
and both the four block input activations and the four outputs are tapped
for channel statistics.  Sites whose input is read from the residual stream
(qkv_in, mlp_in) are flagged for the outlier analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .data import VOCAB_SIZE
from .errors import ConfigError, InputError
from .fakequant import ClipParam, fakequant
from .kurtosis import KurtosisConfig, kurtosis_loss
from .quant import minmax_calibrate, quantize, dequantize

INPUT_SITES = ("qkv_in", "attn_proj_in", "mlp_in", "mlp_proj_in")
OUTPUT_SITES = ("qkv_out", "attn_proj_out", "mlp_fc_out", "mlp_proj_out")
RESIDUAL_STREAM_SITES = frozenset({"qkv_in", "mlp_in"})

SITE_DISPLAY = {
    "qkv_in": "QKV Input",
    "attn_proj_in": "Attn Proj Input",
    "mlp_in": "MLP Input",
    "mlp_proj_in": "MLP Proj Input",
    "qkv_out": "QKV Output",
    "attn_proj_out": "Attn Proj Output",
    "mlp_fc_out": "MLP FC Output",
    "mlp_proj_out": "MLP Proj Output",
}

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = VOCAB_SIZE
    seq_len: int = 128
    qat_sites: tuple[str, ...] = ()
    qat_bits: int = 4
    clip_init: float = 4.0
    qat_align_zero: bool = True
    sign_in_range: float = -1.0
    kurtosis: KurtosisConfig = field(default_factory=KurtosisConfig)
    attn_scale: bool = True
    paper_mlp_wiring: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        for site in self.qat_sites:
            if site not in INPUT_SITES:
                raise ConfigError(f"unknown QAT site {site!r}")
        for site in self.kurtosis.sites:
            if site not in OUTPUT_SITES:
                raise ConfigError(f"unknown kurtosis site {site!r}")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["qat_sites"] = list(self.qat_sites)
        d["kurtosis"] = {"lam": self.kurtosis.lam,
                         "epsilon": self.kurtosis.epsilon,
                         "sites": sorted(self.kurtosis.sites)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        kur = d.pop("kurtosis", {})
        return cls(kurtosis=KurtosisConfig(lam=kur.get("lam", 0.0),
                                           epsilon=kur.get("epsilon", 1e-6),
                                           sites=frozenset(kur.get("sites", ()))),
                   qat_sites=tuple(d.pop("qat_sites", ())),
                   **d)


def _rtn_rows(x: "T.Tensor", bits: int) -> "T.Tensor":
    """Per-token (row) min-max quantize/dequantize, used as the activation
    path when evaluating models without learned clips at low bits.  Gradient
    is straight-through; this node only appears in evaluation graphs."""
    spec = minmax_calibrate(x.data.astype(np.float64), bits, "row")
    out = dequantize(quantize(x.data.astype(np.float64), spec))

    def bwd(g):
        return (g,)

    return T._make(out, (x,), bwd)


class TransformerLM:
    """Desk-scale byte-level pre-LN transformer."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, T.Tensor] = {}
        self.clips: dict[str, ClipParam] = {}
        # activation-path override for converted models:
        #   "train": follow qat_sites (identity for baselines)
        #   "none":  no activation quantization
        #   "clips": learned clips at every site that has one
        #   "rtn":   per-token min-max at act_bits on all four sites
        self.act_mode = "train"
        self.act_bits = cfg.qat_bits
        self._init_params()

    # -- parameters ---------------------------------------------------------

    def _init_params(self):
        cfg = self.cfg
        rng = np.random.default_rng(np.random.SeedSequence([0xC0DE, cfg.seed]))
        std = 0.02
        res_std = std / math.sqrt(2 * cfg.n_layers)

        def normal(shape, s):
            return T.parameter(rng.normal(0.0, s, shape))

        self.params["tok_emb"] = normal((cfg.vocab_size, cfg.d_model), std)
        self.params["pos_emb"] = normal((cfg.seq_len, cfg.d_model), std)
        for i in range(cfg.n_layers):
            p = f"l{i}."
            self.params[p + "ln1.g"] = T.parameter(np.ones(cfg.d_model))
            self.params[p + "ln1.b"] = T.parameter(np.zeros(cfg.d_model))
            self.params[p + "wqkv"] = normal((cfg.d_model, 3 * cfg.d_model), std)
            self.params[p + "bqkv"] = T.parameter(np.zeros(3 * cfg.d_model))
            self.params[p + "wo"] = normal((cfg.d_model, cfg.d_model), res_std)
            self.params[p + "bo"] = T.parameter(np.zeros(cfg.d_model))
            self.params[p + "ln2.g"] = T.parameter(np.ones(cfg.d_model))
            self.params[p + "ln2.b"] = T.parameter(np.zeros(cfg.d_model))
            self.params[p + "w1"] = normal((cfg.d_model, cfg.d_ff), std)
            self.params[p + "b1"] = T.parameter(np.zeros(cfg.d_ff))
            self.params[p + "w2"] = normal((cfg.d_ff, cfg.d_model), res_std)
            self.params[p + "b2"] = T.parameter(np.zeros(cfg.d_model))
        self.params["lnf.g"] = T.parameter(np.ones(cfg.d_model))
        self.params["lnf.b"] = T.parameter(np.zeros(cfg.d_model))
        self.params["head.w"] = normal((cfg.d_model, cfg.vocab_size), std)
        self.params["head.b"] = T.parameter(np.zeros(cfg.vocab_size))

        for i in range(cfg.n_layers):
            for site in cfg.qat_sites:
                self.clips[f"l{i}.{site}"] = ClipParam(
                    -cfg.clip_init, cfg.clip_init, bits=cfg.qat_bits,
                    align_zero=cfg.qat_align_zero,
                    sign_in_range=cfg.sign_in_range,
                )

    def weight_names(self) -> list[str]:
        """Names of the linear weight matrices, in forward order."""
        names = []
        for i in range(self.cfg.n_layers):
            names += [f"l{i}.wqkv", f"l{i}.wo", f"l{i}.w1", f"l{i}.w2"]
        names.append("head.w")
        return names

    # -- forward ------------------------------------------------------------

    def _site_input(self, y: "T.Tensor", layer: int, site: str) -> "T.Tensor":
        key = f"l{layer}.{site}"
        if self.act_mode == "train":
            if site in self.cfg.qat_sites:
                return fakequant(y, self.clips[key])
            return y
        if self.act_mode == "none":
            return y
        if self.act_mode == "clips":
            clip = self.clips.get(key)
            if clip is None:
                raise ConfigError(f"no learned clips for site {key}")
            return fakequant(y, clip)
        if self.act_mode == "rtn":
            return _rtn_rows(y, self.act_bits)
        raise ConfigError(f"unknown activation mode {self.act_mode!r}")

    def _attention(self, q: "T.Tensor", k: "T.Tensor", v: "T.Tensor",
                   n_seqs: int, seq_len: int) -> "T.Tensor":
        cfg = self.cfg
        att_scale = 1.0 / math.sqrt(cfg.d_head) if cfg.attn_scale else 1.0
        return T.causal_attention(q, k, v, n_seqs, cfg.n_heads, att_scale)

    def _block(self, x: "T.Tensor", layer: int, n_seqs: int, seq_len: int,
               taps: dict, site_outputs: dict, linear_inputs: dict) -> "T.Tensor":
        cfg = self.cfg
        p = f"l{layer}."
        d = cfg.d_model

        y1 = T.layernorm(x, self.params[p + "ln1.g"], self.params[p + "ln1.b"], LN_EPS)
        taps[(layer, "qkv_in")] = y1.data
        y1q = self._site_input(y1, layer, "qkv_in")
        linear_inputs[p + "wqkv"] = y1q.data
        qkv = T.add(T.matmul(y1q, self.params[p + "wqkv"]), self.params[p + "bqkv"])
        site_outputs[f"l{layer}.qkv_out"] = qkv

        q = T.slice_cols(qkv, 0, d)
        k = T.slice_cols(qkv, d, 2 * d)
        v = T.slice_cols(qkv, 2 * d, 3 * d)
        y2 = self._attention(q, k, v, n_seqs, seq_len)
        taps[(layer, "attn_proj_in")] = y2.data
        y2q = self._site_input(y2, layer, "attn_proj_in")
        linear_inputs[p + "wo"] = y2q.data
        attn_out = T.add(T.matmul(y2q, self.params[p + "wo"]), self.params[p + "bo"])
        site_outputs[f"l{layer}.attn_proj_out"] = attn_out

        z = T.add(x, attn_out)
        y3 = T.layernorm(z, self.params[p + "ln2.g"], self.params[p + "ln2.b"], LN_EPS)
        taps[(layer, "mlp_in")] = y3.data
        mlp_src = y2 if cfg.paper_mlp_wiring else y3
        y3q = self._site_input(mlp_src, layer, "mlp_in")
        linear_inputs[p + "w1"] = y3q.data
        h = T.add(T.matmul(y3q, self.params[p + "w1"]), self.params[p + "b1"])
        site_outputs[f"l{layer}.mlp_fc_out"] = h

        y4 = T.gelu(h)
        taps[(layer, "mlp_proj_in")] = y4.data
        y4q = self._site_input(y4, layer, "mlp_proj_in")
        linear_inputs[p + "w2"] = y4q.data
        mlp_out = T.add(T.matmul(y4q, self.params[p + "w2"]), self.params[p + "b2"])
        site_outputs[f"l{layer}.mlp_proj_out"] = mlp_out

        return T.add(z, mlp_out)

    def forward(self, tokens: np.ndarray):
        """Run the model on a (n_seqs, seq_len) batch of token ids.

        Returns (logits, aux) where logits has one row per token and aux
        carries the activation taps, kurtosis site outputs and the actual
        linear-layer inputs (for PTQ calibration).
        """
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        n_seqs, seq_len = tokens.shape
        if seq_len > self.cfg.seq_len:
            raise InputError(f"sequence length {seq_len} exceeds model maximum "
                             f"{self.cfg.seq_len}")
        flat = tokens.reshape(-1)
        pos = np.tile(np.arange(seq_len), n_seqs)
        x = T.add(T.embedding(self.params["tok_emb"], flat),
                  T.embedding(self.params["pos_emb"], pos))

        taps: dict = {}
        site_outputs: dict = {}
        linear_inputs: dict = {}
        for layer in range(self.cfg.n_layers):
            x = self._block(x, layer, n_seqs, seq_len,
                            taps, site_outputs, linear_inputs)
        xf = T.layernorm(x, self.params["lnf.g"], self.params["lnf.b"], LN_EPS)
        linear_inputs["head.w"] = xf.data
        logits = T.add(T.matmul(xf, self.params["head.w"]), self.params["head.b"])
        aux = {"taps": taps, "site_outputs": site_outputs,
               "linear_inputs": linear_inputs}
        return logits, aux

    def loss(self, tokens: np.ndarray, targets: np.ndarray):
        """Cross entropy plus the configured kurtosis penalty.

        Returns (total, ce, kurt, aux); the kurtosis term is the regularizer
        strength times the summed per-token kurtosis over enabled sites.
        """
        logits, aux = self.forward(tokens)
        ce = T.cross_entropy(logits, np.asarray(targets).reshape(-1))
        kcfg = self.cfg.kurtosis
        expanded = KurtosisConfig(
            lam=kcfg.lam, epsilon=kcfg.epsilon,
            sites=frozenset(f"l{i}.{s}" for i in range(self.cfg.n_layers)
                            for s in kcfg.sites),
        )
        kurt = kurtosis_loss(aux["site_outputs"], expanded)
        total = T.add(ce, kurt) if kcfg.lam > 0 else ce
        return total, ce, kurt, aux
