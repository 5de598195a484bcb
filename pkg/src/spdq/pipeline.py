"""Staged quantization pipeline over the two-tower toy model.

The staged arm follows quantize-hardest-first:

  1. vision PTQ: per-layer clip search plus adaptive rounding on an
     image-only calibration batch, then the vision weights are replaced by
     their dequantized values and frozen;
  2. projector warmup: only the projector trains, on a small data fraction,
     against the frozen full-precision teacher;
  3. language QAT: projector and language head train jointly, language
     weights passing through the fake quantizer each forward step.

The joint arm is the ablation: both towers fake-quantize and train from step
zero with the same loss and the combined step budget. Both arms share the
pretrained teacher, the distillation loss with a gamma estimated over the
first training batches and then frozen, and the same packing path, so a run
at one seed differs between arms only in staging.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import AdamW, Tensor
from .calibration import AdaRoundConfig, adaround_block, search_asymmetric_clip
from .container import serialize_container
from .data import Dataset, TaskConfig, generate_dataset
from .distill import (DistillConfig, cross_entropy, distill_loss, estimate_gamma,
                      total_loss)
from .model import ModelConfig, ToyVLM
from .quant import (ClipRange, PackedTensor, QuantSpec, average_bitwidth,
                    dequantize_tensor, fake_quantize, quantize_tensor)

__all__ = [
    "PipelineResult",
    "StagePlan",
    "TrainReport",
    "container_entries",
    "evaluate",
    "gradient_means",
    "model_from_container",
    "pretrain",
    "rtn_quantize",
    "run_pipeline",
]

MODULES = ("vision", "projector", "language", "embedding")


@dataclass(frozen=True)
class StagePlan:
    """Stage budgets and optimizer settings.

    ``mode`` selects the staged arm or the joint ablation; the joint arm
    trains for ``projector_steps + language_steps`` so both arms consume the
    same number of updates.
    """

    mode: str = "staged"
    pretrain_steps: int = 1500
    projector_steps: int = 500
    language_steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    pretrain_lr: float = 1e-3
    projector_data_fraction: float = 0.1
    log_every: int = 10

    def __post_init__(self):
        if self.mode not in ("staged", "joint"):
            raise ValueError(f"mode must be 'staged' or 'joint', got {self.mode!r}")
        for name in ("pretrain_steps", "projector_steps", "language_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.projector_data_fraction <= 1.0:
            raise ValueError("projector_data_fraction must be in (0, 1]")
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


class TrainReport:
    """Per-step JSON-lines records plus per-stage and final summaries."""

    def __init__(self):
        self.steps: list[dict] = []
        self.stages: list[dict] = []
        self.summary: dict = {}

    def log_step(self, **record) -> None:
        self.steps.append(record)

    def log_stage(self, **record) -> None:
        self.stages.append(record)

    def stage_names(self) -> list[str]:
        return [s["stage"] for s in self.stages]

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.jsonl"), "w") as f:
            for record in self.steps:
                f.write(json.dumps(record) + "\n")
        with open(os.path.join(out_dir, "summary.json"), "w") as f:
            json.dump({"stages": self.stages, **self.summary}, f, indent=2)
            f.write("\n")


@dataclass
class PipelineResult:
    teacher: ToyVLM
    student: ToyVLM
    rtn_model: ToyVLM
    fp_accuracy: float
    rtn_accuracy: float
    quant_accuracy: float
    gamma: float | None
    report: TrainReport
    container: bytes
    rtn_container: bytes
    packed: dict[str, PackedTensor] = field(default_factory=dict)


def evaluate(model: ToyVLM, ds: Dataset, batch_size: int = 512) -> float:
    """Top-1 accuracy over a dataset, computed without recording gradients."""
    hits = 0
    with autodiff.no_grad():
        for start in range(0, ds.n, batch_size):
            sl = slice(start, start + batch_size)
            logits = model.forward(ds.images[sl], ds.tokens[sl])
            hits += int((np.argmax(logits.data, axis=1) == ds.labels[sl]).sum())
    return hits / ds.n


def gradient_means(model: ToyVLM) -> dict[str, float]:
    """Mean absolute gradient per module; modules without gradients report 0."""
    out = {}
    for module in MODULES:
        total = 0.0
        count = 0
        for _, p in model.module_params(module):
            if p.grad is not None:
                total += float(np.abs(p.grad).sum())
                count += p.grad.size
        out[module] = total / count if count else 0.0
    return out


def _batch_stream(rng: np.random.Generator, indices: np.ndarray, batch_size: int):
    n = len(indices)
    if n < batch_size:
        raise ValueError(f"{n} samples cannot fill batches of {batch_size}")
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield indices[perm[i:i + batch_size]]


def pretrain(model: ToyVLM, train: Dataset, plan: StagePlan,
             rng: np.random.Generator, report: TrainReport) -> None:
    """Plain cross-entropy training of the full-precision model."""
    model.set_trainable(set(MODULES))
    opt = AdamW(model.named_params(), plan.pretrain_lr)
    stream = _batch_stream(rng, np.arange(train.n), plan.batch_size)
    t0 = time.perf_counter()
    for step in range(plan.pretrain_steps):
        idx = next(stream)
        logits = model.forward(train.images[idx], train.tokens[idx])
        loss = cross_entropy(logits, train.labels[idx])
        autodiff.backward(loss)
        if step % plan.log_every == 0 or step == plan.pretrain_steps - 1:
            report.log_step(stage="pretrain", step=step, ce=float(loss.data))
        opt.step()
    report.log_stage(stage="pretrain", steps=plan.pretrain_steps,
                     seconds=time.perf_counter() - t0)


def _calibration_batch(train: Dataset, n_samples: int, rng: np.random.Generator):
    idx = rng.choice(train.n, size=min(n_samples, train.n), replace=False)
    return train.images[idx], train.tokens[idx]


def calibrate_vision(student: ToyVLM, images: np.ndarray, spec: QuantSpec,
                     grid_steps: int, ada_cfg: AdaRoundConfig,
                     packed: dict[str, PackedTensor]) -> list[dict]:
    """Stage 1: clip search + adaptive rounding per vision layer, then freeze.

    Inputs are captured from the model before any weight is replaced, so
    every block calibrates against full-precision activations.
    """
    names = student.quant_layers("vision")
    caps = student.capture(names, images, None)
    stats = []
    for name in names:
        layer = student.layers[name]
        w = layer.weight.data
        clip, objective = search_asymmetric_clip(w, caps[name], spec, grid_steps)
        rounding = adaround_block(w, caps[name], spec, clip, ada_cfg)
        pt = quantize_tensor(w, spec, clip, rounding_mask=rounding.mask,
                             name=f"{name}.weight")
        layer.weight.data = dequantize_tensor(pt)
        packed[f"{name}.weight"] = pt
        stats.append({
            "layer": name,
            "clip": [clip.alpha, clip.beta],
            "clip_objective": objective,
            "adaround_mse": rounding.mse,
            "nearest_mse": rounding.nearest_mse,
        })
    return stats


def _search_clips(student: ToyVLM, names: list[str], spec: QuantSpec,
                  images: np.ndarray, tokens: np.ndarray | None,
                  grid_steps: int) -> dict[str, ClipRange]:
    caps = student.capture(names, images, tokens)
    return {name: search_asymmetric_clip(student.layers[name].weight.data,
                                         caps[name], spec, grid_steps)[0]
            for name in names}


def _train_stage(student: ToyVLM, teacher: ToyVLM, train: Dataset, plan: StagePlan,
                 dcfg: DistillConfig, stage: str, steps: int, stream,
                 trainable: set[str], fq_layers: dict[str, tuple[QuantSpec, ClipRange | None]],
                 gamma: float | None, report: TrainReport) -> float | None:
    """One distillation-QAT stage; returns the (possibly estimated) gamma."""
    t0 = time.perf_counter()
    if steps <= 0:
        report.log_stage(stage=stage, steps=0, seconds=0.0)
        return gamma

    if gamma is None:
        gamma = dcfg.gamma
    head: list[np.ndarray] = []
    if gamma is None:
        # Estimate over the exact batches the first steps will train on.
        head = [next(stream) for _ in range(min(dcfg.gamma_estimation_steps, steps))]
        batches = [((train.images[i], train.tokens[i]), train.labels[i]) for i in head]
        gamma = estimate_gamma(lambda im, tok: teacher.forward(im, tok), batches)

    student.set_trainable(trainable)
    opt = AdamW(student.module_params(trainable), plan.lr)
    for step in range(steps):
        idx = head[step] if step < len(head) else next(stream)
        overrides = {name: fake_quantize(student.layers[name].weight, spec, clip)
                     for name, (spec, clip) in fq_layers.items()}
        with autodiff.no_grad():
            t_logits = teacher.forward(train.images[idx], train.tokens[idx])
        s_logits = student.forward(train.images[idx], train.tokens[idx],
                                   weight_overrides=overrides)
        d_term = distill_loss(s_logits, t_logits, gamma, dcfg.smoothing_eps)
        c_term = cross_entropy(s_logits, train.labels[idx])
        loss = total_loss(d_term, c_term, dcfg)
        autodiff.backward(loss)
        if step % plan.log_every == 0 or step == steps - 1:
            report.log_step(stage=stage, step=step, total=float(loss.data),
                            distill=float(d_term.data), ce=float(c_term.data),
                            gamma=gamma, lr=plan.lr, grads=gradient_means(student))
        opt.step()
    report.log_stage(stage=stage, steps=steps, seconds=time.perf_counter() - t0)
    return gamma


def _finalize_layers(student: ToyVLM, names: list[str], spec: QuantSpec,
                     clips: dict[str, ClipRange | None],
                     packed: dict[str, PackedTensor]) -> None:
    """Replace trained float weights by their packed-and-decoded values."""
    for name in names:
        layer = student.layers[name]
        pt = quantize_tensor(layer.weight.data, spec, clips.get(name),
                             name=f"{name}.weight")
        layer.weight.data = dequantize_tensor(pt)
        packed[f"{name}.weight"] = pt


def rtn_quantize(model: ToyVLM, vision_spec: QuantSpec | None,
                 language_spec: QuantSpec | None):
    """Round-to-nearest baseline: no clipping, no adaptation, no training."""
    out = model.clone()
    packed: dict[str, PackedTensor] = {}
    for module, spec in (("vision", vision_spec), ("language", language_spec)):
        if spec is None:
            continue
        for name in out.quant_layers(module):
            layer = out.layers[name]
            pt = quantize_tensor(layer.weight.data, spec, name=f"{name}.weight")
            layer.weight.data = dequantize_tensor(pt)
            packed[f"{name}.weight"] = pt
    return out, packed


def container_entries(model: ToyVLM,
                      packed: dict[str, PackedTensor]) -> dict:
    """Tensor map for serialization: packed weights where available, raw rest."""
    entries: dict = {}
    for name, layer in model.layers.items():
        wname = f"{name}.weight"
        entries[wname] = packed.get(wname, layer.weight.data)
        entries[f"{name}.bias"] = layer.bias.data
    entries["token_embedding"] = model.token_embedding.data
    return entries


def model_from_container(entries: dict) -> ToyVLM:
    """Rebuild a model purely from container tensors (no run config needed)."""
    def dense(name):
        value = entries[name]
        return dequantize_tensor(value) if isinstance(value, PackedTensor) else value

    missing = [n for n in
               [f"{ln}.weight" for ln in ToyVLM.LAYER_NAMES]
               + [f"{ln}.bias" for ln in ToyVLM.LAYER_NAMES]
               + ["token_embedding"] if n not in entries]
    if missing:
        raise ValueError(f"container is missing tensors: {missing}")
    v1 = dense("vision.fc1.weight")
    v2 = dense("vision.fc2.weight")
    pr = dense("projector.fc.weight")
    l1 = dense("language.fc1.weight")
    l2 = dense("language.fc2.weight")
    emb = entries["token_embedding"]
    cfg = ModelConfig(
        image_pixels=v1.shape[1], vision_hidden=v1.shape[0], embed_dim=v2.shape[0],
        lm_dim=pr.shape[0], token_dim=l1.shape[1] - pr.shape[0],
        lm_hidden=l1.shape[0], n_tokens=emb.shape[0], n_classes=l2.shape[0])
    model = ToyVLM(cfg)
    for name in ToyVLM.LAYER_NAMES:
        model.layers[name].weight.data = dense(f"{name}.weight").copy()
        model.layers[name].bias.data = np.asarray(entries[f"{name}.bias"],
                                                  dtype=np.float32).copy()
    model.token_embedding.data = np.asarray(emb, dtype=np.float32).copy()
    model.set_trainable(set())
    return model


def run_pipeline(cfg) -> PipelineResult:
    """Pretrain the teacher, run the configured arm, pack, and evaluate.

    ``cfg`` is a RunConfig (see spdq.config). All randomness derives from
    cfg.seed, so identical configs produce bit-identical containers.
    """
    from .config import validate_config
    validate_config(cfg)
    plan = cfg.stages
    report = TrainReport()
    train, evalset = generate_dataset(cfg.task, cfg.seed)

    teacher = ToyVLM(cfg.model, np.random.default_rng([cfg.seed, 1]))
    pretrain(teacher, train, plan, np.random.default_rng([cfg.seed, 2]), report)
    fp_accuracy = evaluate(teacher, evalset)
    teacher.set_trainable(set())

    rtn_model, rtn_packed = rtn_quantize(teacher, cfg.vision_spec, cfg.language_spec)
    rtn_accuracy = evaluate(rtn_model, evalset)
    rtn_blob = serialize_container(container_entries(rtn_model, rtn_packed))

    student = teacher.clone()
    packed: dict[str, PackedTensor] = {}
    calib_images, calib_tokens = _calibration_batch(
        train, cfg.calibration_samples, np.random.default_rng([cfg.seed, 5]))
    gamma: float | None = None

    if plan.mode == "staged":
        if cfg.vision_spec is not None:
            t0 = time.perf_counter()
            stats = calibrate_vision(student, calib_images, cfg.vision_spec,
                                     cfg.clip_grid_steps, cfg.adaround, packed)
            report.log_stage(stage="vision_ptq", steps=0,
                             seconds=time.perf_counter() - t0,
                             eval_accuracy=evaluate(student, evalset), layers=stats)

        subset = np.random.default_rng([cfg.seed, 6]).choice(
            train.n, size=max(int(round(plan.projector_data_fraction * train.n)),
                              plan.batch_size), replace=False)
        gamma = _train_stage(
            student, teacher, train, plan, cfg.distill, "projector",
            plan.projector_steps, _batch_stream(np.random.default_rng([cfg.seed, 3]),
                                                subset, plan.batch_size),
            {"projector"}, {}, gamma, report)
        report.stages[-1]["eval_accuracy"] = evaluate(student, evalset)

        lang_clips: dict[str, ClipRange | None] = {}
        fq: dict[str, tuple[QuantSpec, ClipRange | None]] = {}
        lang_names = student.quant_layers("language")
        if cfg.language_spec is not None:
            lang_clips = dict(_search_clips(student, lang_names, cfg.language_spec,
                                            calib_images, calib_tokens,
                                            cfg.clip_grid_steps))
            fq = {n: (cfg.language_spec, lang_clips[n]) for n in lang_names}
        gamma = _train_stage(
            student, teacher, train, plan, cfg.distill, "language",
            plan.language_steps, _batch_stream(np.random.default_rng([cfg.seed, 4]),
                                               np.arange(train.n), plan.batch_size),
            {"projector", "language"}, fq, gamma, report)
        if cfg.language_spec is not None:
            _finalize_layers(student, lang_names, cfg.language_spec, lang_clips, packed)
        report.stages[-1]["eval_accuracy"] = evaluate(student, evalset)
    else:
        clips: dict[str, ClipRange | None] = {}
        fq = {}
        quant_names: list[str] = []
        for module, spec in (("vision", cfg.vision_spec), ("language", cfg.language_spec)):
            if spec is None:
                continue
            names = student.quant_layers(module)
            quant_names += names
            found = _search_clips(student, names, spec, calib_images, calib_tokens,
                                  cfg.clip_grid_steps)
            clips.update(found)
            fq.update({n: (spec, found[n]) for n in names})
        gamma = _train_stage(
            student, teacher, train, plan, cfg.distill, "joint",
            plan.projector_steps + plan.language_steps,
            _batch_stream(np.random.default_rng([cfg.seed, 7]),
                          np.arange(train.n), plan.batch_size),
            {"vision", "projector", "language"}, fq, gamma, report)
        for module, spec in (("vision", cfg.vision_spec), ("language", cfg.language_spec)):
            if spec is None:
                continue
            names = student.quant_layers(module)
            _finalize_layers(student, names, spec, clips, packed)
        report.stages[-1]["eval_accuracy"] = evaluate(student, evalset)

    quant_accuracy = evaluate(student, evalset)
    blob = serialize_container(container_entries(student, packed))
    report.summary = {
        "mode": plan.mode,
        "seed": cfg.seed,
        "gamma": gamma,
        "fp_accuracy": fp_accuracy,
        "rtn_accuracy": rtn_accuracy,
        "quant_accuracy": quant_accuracy,
        "vision_bits_per_weight":
            average_bitwidth(cfg.vision_spec) if cfg.vision_spec else 32.0,
        "language_bits_per_weight":
            average_bitwidth(cfg.language_spec) if cfg.language_spec else 32.0,
        "container_bytes": len(blob),
        "rtn_container_bytes": len(rtn_blob),
    }
    return PipelineResult(
        teacher=teacher, student=student, rtn_model=rtn_model,
        fp_accuracy=fp_accuracy, rtn_accuracy=rtn_accuracy,
        quant_accuracy=quant_accuracy, gamma=gamma, report=report,
        container=blob, rtn_container=rtn_blob, packed=packed)
