"""Modality-partitioned quantization pipeline and evaluation metrics.

Vision encoder layers are quantized first, from vision calibration only;
cross-modal layers follow, group by group in the fixed order attn_qkv ->
attn_out -> mlp_gate_up -> mlp_down. All four groups of a layer consume
the identical calibration input tensor (captured from the original,
unquantized forward pass), and vision quantization never reads any
cross-modal calibration state.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationSet, hessian_from_samples
from .errors import InvariantError
from .model import GROUP_ORDER, SyntheticModel
from .packfmt import (
    PackedLinear,
    estimate_packed_size,
    pack_linear,
    packed_from_tensors,
    packed_tensors,
)
from .quantcore import QuantConfig, gptq_quantize, proxy_loss, rtn_quantize
from .tensorio import load_container, write_container

REPORT_SCHEMA_VERSION = 1


@dataclass
class QuantizedCheckpoint:
    layers: dict[str, PackedLinear]
    report: dict


def _hash_samples(samples: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.ascontiguousarray(s, dtype=np.float32).tobytes())
    return h.hexdigest()


def quantize_model(
    model: SyntheticModel,
    calib_v: CalibrationSet,
    calib_m: CalibrationSet,
    cfg: QuantConfig,
    method: str = "gptq",
) -> QuantizedCheckpoint:
    if method not in ("gptq", "rtn"):
        raise InvariantError(f"unknown method {method!r}")
    d_v, d_m = model.embed_dims
    if model.vision_layers and calib_v.feature_dim != d_v:
        raise InvariantError(
            f"vision calibration dim {calib_v.feature_dim} != D_V {d_v}"
        )
    if model.crossmodal_layers and calib_m.feature_dim != d_m:
        raise InvariantError(
            f"cross-modal calibration dim {calib_m.feature_dim} != D_M {d_m}"
        )

    layers: dict[str, PackedLinear] = {}
    entries = []
    order = 0

    def quantize_one(name, weight, hessian, module, layer_idx, group, calib_hash):
        nonlocal order
        if method == "gptq":
            q = gptq_quantize(weight, hessian, cfg)
        else:
            q = rtn_quantize(weight, cfg)
        layers[name] = pack_linear(q)
        entries.append({
            "name": name,
            "module": module,
            "layer_index": layer_idx,
            "group": group,
            "order_index": order,
            "in_features": int(weight.shape[0]),
            "out_features": int(weight.shape[1]),
            "proxy_loss": proxy_loss(weight, q, hessian),
            "calib_sha256": calib_hash,
            "bytes": estimate_packed_size(
                weight.shape[0], weight.shape[1], cfg.bits, cfg.groupsize
            ),
        })
        order += 1

    # Vision phase: each layer's Hessian comes from the vision calibration
    # propagated through the preceding original-weight layers.
    samples = [s.copy() for s in calib_v.samples] if model.vision_layers else []
    for i, name in enumerate(model.vision_layers):
        w = model.weights[name]
        hessian = hessian_from_samples(samples, w.shape[0], cfg.damp_ratio)
        quantize_one(name, w, hessian, "vision", i, None, _hash_samples(samples))
        samples = [(s @ w).astype(np.float32) for s in samples]

    # Cross-modal phase: one shared calibration input (and Hessian, since
    # every member shares the layer's input-feature space) per layer.
    samples = [s.copy() for s in calib_m.samples] if model.crossmodal_layers else []
    for layer in model.crossmodal_layers:
        calib_hash = _hash_samples(samples)
        hessian = hessian_from_samples(samples, d_m, cfg.damp_ratio)
        for group in layer.groups:
            for name in group.members:
                quantize_one(
                    name, model.weights[name], hessian,
                    "crossmodal", layer.index, group.group_kind, calib_hash,
                )
        samples = [model.forward_crossmodal_layer(layer, s) for s in samples]

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "method": method,
        "bits": cfg.bits,
        "groupsize": cfg.groupsize,
        "damp_ratio": cfg.damp_ratio,
        "hessian_sharing": "one Hessian per cross-modal layer, shared by all "
                           "four groups (single input-feature space)",
        "processing_order": [e["name"] for e in entries],
        "layers": entries,
        "misc_params": model.misc_params,
    }
    return QuantizedCheckpoint(layers, report)


def circular_eval_accuracy(records: list[dict]) -> float:
    """Fraction of questions answered correctly in every circular pass."""
    if not records:
        raise InvariantError("no evaluation records")
    hits = 0
    for rec in records:
        passes = rec["passes"]
        if not passes:
            raise InvariantError(
                f"question {rec.get('question_id')!r} has no passes"
            )
        hits += all(p == a for p, a in passes)
    return hits / len(records)


def size_report(ckpt: QuantizedCheckpoint, f16_baseline: bool = True) -> dict:
    """Per-layer and total storage, with the ratio against an all-f16 model."""
    if not ckpt.layers:
        raise InvariantError("empty checkpoint")
    per_layer = {e["name"]: e["bytes"] for e in ckpt.report["layers"]}
    quant_total = sum(b["total"] for b in per_layer.values())
    weight_f16 = sum(
        e["in_features"] * e["out_features"] * 2 for e in ckpt.report["layers"]
    )
    misc = int(ckpt.report.get("misc_params", 0))
    misc_bytes = misc * 2  # unquantized parameters stay f16
    total = quant_total + misc_bytes
    baseline = weight_f16 + misc_bytes if f16_baseline else total
    return {
        "per_layer": per_layer,
        "quantized_bytes": quant_total,
        "misc_bytes": misc_bytes,
        "total": total,
        "baseline_f16": baseline,
        "ratio": total / baseline,
        "quantized_ratio": quant_total / weight_f16,
    }


def size_report_model(model: SyntheticModel, bits: int, groupsize: int) -> dict:
    """Analytic size report for a model without quantizing it."""
    names = list(model.vision_layers) + [
        m for layer in model.crossmodal_layers for g in layer.groups for m in g.members
    ]
    if not names:
        raise InvariantError("model has no weight matrices")
    per_layer = {}
    quant_total = 0
    weight_f16 = 0
    for name in names:
        w = model.weights[name]
        sizes = estimate_packed_size(w.shape[0], w.shape[1], bits, groupsize)
        per_layer[name] = sizes
        quant_total += sizes["total"]
        weight_f16 += w.shape[0] * w.shape[1] * 2
    misc_bytes = model.misc_params * 2
    total = quant_total + misc_bytes
    baseline = weight_f16 + misc_bytes
    return {
        "per_layer": per_layer,
        "quantized_bytes": quant_total,
        "misc_bytes": misc_bytes,
        "total": total,
        "baseline_f16": baseline,
        "ratio": total / baseline,
        "quantized_ratio": quant_total / weight_f16,
    }


def save_checkpoint(ckpt: QuantizedCheckpoint, path) -> None:
    tensors = {}
    for name, layer in ckpt.layers.items():
        tensors.update(packed_tensors(layer, name))
    attrs = {
        "schema": "quantized-checkpoint/1",
        "bits": ckpt.report["bits"],
        "groupsize": ckpt.report["groupsize"],
        "layers": {
            e["name"]: {
                "in_features": e["in_features"],
                "out_features": e["out_features"],
            }
            for e in ckpt.report["layers"]
        },
        "report": ckpt.report,
    }
    write_container(path, tensors, attrs)


def load_checkpoint(path) -> QuantizedCheckpoint:
    tensors, attrs = load_container(path)
    if attrs.get("schema") != "quantized-checkpoint/1":
        raise InvariantError(f"{path}: not a quantized-checkpoint container")
    bits = int(attrs["bits"])
    layers = {
        name: packed_from_tensors(
            tensors, name, bits, meta["in_features"], meta["out_features"]
        )
        for name, meta in attrs["layers"].items()
    }
    return QuantizedCheckpoint(layers, attrs["report"])
