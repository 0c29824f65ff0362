"""Post-training weight quantization and whole-model conversion.

Two weight quantizers, both on per-output-channel min-max grids:

  RTN   round-to-nearest against each column's own grid; data-free.
  GPTQ  calibrated: builds H = 2 X^T X (damped by a fraction of its mean
        diagonal), walks the weight rows in input-channel order, quantizes
        each against the fixed per-column grids, and spreads the row's
        rounding error over the not-yet-quantized rows using the upper
        Cholesky factor of H^{-1}.  Minimizes ||X (W - W_hat)||_F greedily,
        so it can only improve on RTN under the calibration distribution.

``apply_ptq`` converts a trained model to one W{3,4,16}A{4,16} grid cell:
weights are replaced by their dequantized values (codes kept for the
quantized checkpoint), and the activation path at the four block input
sites becomes either the frozen learned clips (QAT models) or dynamic
per-token min-max RTN (models without clips).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import eval_windows
from .errors import ConfigError, InputError, NumericalError
from .intgemm import PackedIntMatrix, intmm, pack, unpack
from .model import ModelConfig, TransformerLM
from .quant import QuantizedTensor, dequantize, minmax_calibrate, quantize
from .serialize import BlobReader, BlobWriter, MANIFEST_NAME, BLOB_NAME

PTQ_FORMAT = "lowbit-ptq-checkpoint"
PTQ_VERSION = 1

WEIGHT_METHODS = ("none", "rtn", "gptq")


@dataclass(frozen=True)
class PTQPlan:
    """One cell of the weight/activation evaluation grid."""

    weight_bits: int = 16
    weight_method: str = "none"
    act_bits: int = 16
    calib_tokens: int = 4096
    damping: float = 0.01
    act_method: str = "auto"   # auto | clips | rtn | none

    def __post_init__(self):
        if self.weight_bits not in (3, 4, 16):
            raise ConfigError(f"weight_bits must be 3, 4 or 16, got {self.weight_bits}")
        if self.weight_method not in WEIGHT_METHODS:
            raise ConfigError(f"weight_method must be one of {WEIGHT_METHODS}")
        if (self.weight_method == "none") != (self.weight_bits == 16):
            raise ConfigError("weight_method 'none' if and only if weight_bits == 16")
        if self.act_bits not in (4, 16):
            raise ConfigError(f"act_bits must be 4 or 16, got {self.act_bits}")
        if self.weight_method == "gptq":
            if self.calib_tokens <= 0:
                raise ConfigError("gptq requires calib_tokens > 0")
            if self.damping <= 0:
                raise ConfigError("gptq requires damping > 0")
        if self.act_method not in ("auto", "clips", "rtn", "none"):
            raise ConfigError(f"unknown act_method {self.act_method!r}")

    def label(self) -> str:
        if self.weight_method == "none":
            w = "W16"
        else:
            w = f"W{self.weight_bits}-{self.weight_method}"
        return f"{w}-A{self.act_bits}"

    def to_dict(self) -> dict:
        return {"weight_bits": self.weight_bits, "weight_method": self.weight_method,
                "act_bits": self.act_bits, "calib_tokens": self.calib_tokens,
                "damping": self.damping, "act_method": self.act_method}


@dataclass
class QuantizedLayer:
    """Packed weight codes with per-output-channel affine parameters."""

    name: str
    packed: PackedIntMatrix
    scales: np.ndarray
    zero_points: np.ndarray
    shape: tuple[int, int]
    bits: int
    method: str

    def to_quantized_tensor(self) -> QuantizedTensor:
        return QuantizedTensor(unpack(self.packed), self.bits,
                               self.scales, self.zero_points, axis=1)

    def dequantize(self) -> np.ndarray:
        w = dequantize(self.to_quantized_tensor())
        if w.shape != tuple(self.shape):
            raise InputError("packed shape disagrees with recorded shape")
        return w


def rtn_quantize_weights(w: np.ndarray, bits: int, name: str = "") -> QuantizedLayer:
    """Per-output-channel (column) min-max round-to-nearest quantization."""
    if bits not in (3, 4):
        raise ConfigError(f"weight quantization supports 3 or 4 bits, got {bits}")
    w = np.asarray(w, dtype=np.float64)
    spec = minmax_calibrate(w, bits, "column")
    q = quantize(w, spec)
    return QuantizedLayer(name, pack(q.codes, bits), np.asarray(q.scales),
                          q.zero_points, w.shape, bits, "rtn")


def _gptq_pass(w: np.ndarray, h: np.ndarray, spec, bits: int,
               order: np.ndarray, name: str, damping: float) -> np.ndarray:
    """One sequential error-feedback pass in the given row order; returns
    integer codes in the original row order."""
    d_in, d_out = w.shape
    inverse_order = np.argsort(order, kind="stable")
    h = h[np.ix_(order, order)]
    try:
        # upper Cholesky factor U of H^{-1} (U^T U = H^{-1})
        h_inv = np.linalg.inv(np.linalg.cholesky(h))
        h_inv = h_inv.T @ h_inv
        u = np.linalg.cholesky(h_inv).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"calibration Hessian for {name or 'layer'} is not positive "
            f"definite even after damping ({damping})"
        ) from exc

    scales = np.asarray(spec.scale, dtype=np.float64)
    zeros = spec.zero_point.astype(np.float64)
    lo, hi = spec.clip_lo, spec.clip_hi
    n_levels = (1 << bits) - 1

    work = w[order, :].copy()
    codes_perm = np.zeros((d_in, d_out), dtype=np.int32)
    for i in range(d_in):
        row = work[i, :]
        q_row = np.clip(np.rint(scales * np.clip(row, lo, hi) + zeros),
                        0, n_levels)
        codes_perm[i, :] = q_row.astype(np.int32)
        deq = (q_row - zeros) / scales
        err = (row - deq) / u[i, i]
        if i + 1 < d_in:
            work[i + 1:, :] -= np.outer(u[i, i + 1:], err)
    return codes_perm[inverse_order, :]


def gptq_quantize_weights(w: np.ndarray, bits: int, calib_inputs: np.ndarray,
                          damping: float = 0.01, name: str = "") -> QuantizedLayer:
    """GPTQ-style calibrated quantization of one d_in x d_out weight matrix.

    ``calib_inputs`` is the (tokens x d_in) activation matrix this layer saw
    on calibration data.  Each row is quantized against the fixed
    per-output-channel grid with its rounding error spread over the
    not-yet-quantized rows through the upper Cholesky factor of H^{-1},
    H = 2 X^T X damped by ``damping`` times its mean diagonal.

    The error-feedback pass is greedy, so it runs in both activation order
    (descending Hessian diagonal) and natural order, the plain data-free
    rounding is kept as a third candidate, and the result is whichever
    minimizes the calibration proxy loss ||X (W - W_hat)||_F.  That makes
    the quantizer never worse than round-to-nearest under its own objective.
    """
    if bits not in (3, 4):
        raise ConfigError(f"weight quantization supports 3 or 4 bits, got {bits}")
    if damping <= 0:
        raise ConfigError("damping must be > 0")
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(calib_inputs, dtype=np.float64)
    d_in, d_out = w.shape
    if x.ndim != 2 or x.shape[1] != d_in:
        raise InputError(f"calibration inputs must be (tokens, {d_in})")

    h = 2.0 * (x.T @ x)
    h += damping * float(np.mean(np.diag(h))) * np.eye(d_in)
    spec = minmax_calibrate(w, bits, "column")
    scales = np.asarray(spec.scale, dtype=np.float64)
    zeros_f = spec.zero_point.astype(np.float64)

    act_order = np.argsort(-np.diag(h), kind="stable")
    natural = np.arange(d_in)
    rtn_codes = quantize(w, spec).codes
    candidates = [
        _gptq_pass(w, h, spec, bits, act_order, name, damping),
        _gptq_pass(w, h, spec, bits, natural, name, damping),
        rtn_codes,
    ]

    def proxy(codes):
        w_hat = (codes.astype(np.float64) - zeros_f) / scales
        return float(np.linalg.norm(x @ (w - w_hat)))

    codes = min(candidates, key=proxy)
    return QuantizedLayer(name, pack(codes, bits), scales,
                          spec.zero_point, w.shape, bits, "gptq")


def calibration_batch(tokens: np.ndarray, seq_len: int, calib_tokens: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    x, _ = eval_windows(tokens, seq_len)
    n_seqs = max(1, min(x.shape[0], calib_tokens // seq_len))
    return x[:n_seqs]


def collect_linear_inputs(model: TransformerLM, calib: np.ndarray,
                          batch_seqs: int = 8) -> dict[str, np.ndarray]:
    """Actual (post activation-quantization) inputs of every linear layer."""
    collected: dict[str, list[np.ndarray]] = {}
    for i in range(0, calib.shape[0], batch_seqs):
        _, aux = model.forward(calib[i:i + batch_seqs])
        for name, arr in aux["linear_inputs"].items():
            collected.setdefault(name, []).append(np.asarray(arr))
    return {name: np.concatenate(parts, axis=0) for name, parts in collected.items()}


def _resolve_act_mode(model: TransformerLM, plan: PTQPlan) -> str:
    if plan.act_bits == 16 or plan.act_method == "none":
        return "none"
    if plan.act_method == "clips" or (plan.act_method == "auto" and model.clips):
        if not model.clips:
            raise ConfigError(
                "plan requests learned-clip activation quantization but the "
                "model has no clips and no RTN fallback was allowed"
            )
        return "clips"
    return "rtn"


def apply_ptq(model: TransformerLM, plan: PTQPlan,
              calib_tokens_stream: np.ndarray | None = None):
    """Convert a trained model per ``plan``.

    Returns (converted_model, quantized_layers).  The input model is left
    untouched; the converted model holds dequantized weights plus the
    activation path the plan selects.
    """
    converted = TransformerLM(model.cfg)
    for name, t in model.params.items():
        converted.params[name].data = t.data.copy()
    converted.clips = {
        k: replace(c, grad_lo=0.0, grad_hi=0.0) for k, c in model.clips.items()
    }

    qlayers: dict[str, QuantizedLayer] = {}
    if plan.weight_method != "none":
        if plan.weight_method == "gptq":
            if calib_tokens_stream is None:
                raise ConfigError("gptq conversion requires calibration tokens")
            capture = TransformerLM(model.cfg)
            for name, t in model.params.items():
                capture.params[name].data = t.data.copy()
            capture.clips = converted.clips
            capture.act_mode = _resolve_act_mode(model, plan)
            capture.act_bits = plan.act_bits
            calib = calibration_batch(calib_tokens_stream, model.cfg.seq_len,
                                      plan.calib_tokens)
            linear_inputs = collect_linear_inputs(capture, calib)
        for name in model.weight_names():
            w = model.params[name].data
            if plan.weight_method == "rtn":
                qlayer = rtn_quantize_weights(w, plan.weight_bits, name)
            else:
                qlayer = gptq_quantize_weights(w, plan.weight_bits,
                                               linear_inputs[name],
                                               plan.damping, name)
            qlayers[name] = qlayer
            converted.params[name].data = qlayer.dequantize().astype(
                converted.params[name].data.dtype)

    converted.act_mode = _resolve_act_mode(model, plan)
    converted.act_bits = plan.act_bits
    converted.ptq_plan = plan
    return converted, qlayers


# ---------------------------------------------------------------------------
# quantized checkpoint format
# ---------------------------------------------------------------------------

def save_quantized_checkpoint(ckpt_dir, model: TransformerLM, plan: PTQPlan,
                              qlayers: dict[str, QuantizedLayer]) -> Path:
    """Manifest + blob: packed weight codes for quantized layers, raw float32
    tensors for everything else, plus the activation-path description."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    blob = BlobWriter()
    layers = []
    for name, q in qlayers.items():
        blob.add(f"codes.{name}", q.packed.data)
        layers.append({
            "name": name,
            "shape": list(q.shape),
            "bits": q.bits,
            "method": q.method,
            "scales": [float(s) for s in np.atleast_1d(q.scales)],
            "zero_points": [int(z) for z in np.atleast_1d(q.zero_points)],
        })
    for name, t in model.params.items():
        if name not in qlayers:
            blob.add(f"raw.{name}", t.data)
    manifest = {
        "format": PTQ_FORMAT,
        "ptq_version": PTQ_VERSION,
        "model_config": model.cfg.to_dict(),
        "plan": plan.to_dict(),
        "act_mode": model.act_mode,
        "act_bits": model.act_bits,
        "clips": {k: {"clip_lo": c.clip_lo, "clip_hi": c.clip_hi, "bits": c.bits,
                      "align_zero": c.align_zero, "bounded_input": c.bounded_input,
                      "sign_in_range": c.sign_in_range}
                  for k, c in model.clips.items()},
        "layers": layers,
        "tensors": blob.index,
    }
    blob.write(ckpt_dir / BLOB_NAME)
    tmp = ckpt_dir / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, ckpt_dir / MANIFEST_NAME)
    return ckpt_dir


def load_quantized_checkpoint(ckpt_dir) -> tuple[TransformerLM, PTQPlan]:
    from .fakequant import ClipParam

    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / MANIFEST_NAME).read_text())
    if manifest.get("format") != PTQ_FORMAT:
        raise InputError(f"not a quantized checkpoint: {ckpt_dir}")
    reader = BlobReader(ckpt_dir / BLOB_NAME, manifest["tensors"])
    model = TransformerLM(ModelConfig.from_dict(manifest["model_config"]))
    for entry in manifest["layers"]:
        name = entry["name"]
        rows, cols = entry["shape"]
        packed = PackedIntMatrix(reader.get(f"codes.{name}"), entry["bits"],
                                 rows, cols)
        qlayer = QuantizedLayer(name, packed, np.array(entry["scales"]),
                                np.array(entry["zero_points"], dtype=np.int64),
                                (rows, cols), entry["bits"], entry["method"])
        model.params[name].data = qlayer.dequantize().astype(
            model.params[name].data.dtype)
    for name, t in model.params.items():
        key = f"raw.{name}"
        if key in reader.entries:
            t.data = reader.get(key).astype(t.data.dtype, copy=False)
    model.clips = {k: ClipParam(**d) for k, d in manifest["clips"].items()}
    model.act_mode = manifest["act_mode"]
    model.act_bits = manifest["act_bits"]
    plan = PTQPlan(**manifest["plan"])
    model.ptq_plan = plan
    return model, plan


def quantized_linear_int(x: np.ndarray, qlayer: QuantizedLayer,
                         act_bits: int = 4) -> np.ndarray:
    """Reference integer-GEMM path for one linear layer: per-token (row)
    quantized activations times the layer's packed per-column codes."""
    x = np.asarray(x, dtype=np.float64)
    qx = quantize(x, minmax_calibrate(x, act_bits, "row"))
    return intmm(qx, qlayer.to_quantized_tensor())
