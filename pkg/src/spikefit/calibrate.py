"""Two-stage conversion pipeline: map a staircase-activated model onto
integrate-and-fire layers, then calibrate thresholds and initial potentials,
first per layer (closed-form scaling) and then per neuron (gradient descent
through the unrolled simulation with weights frozen)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .ann import (AnnModel, Embedding, Linear, Qcfs, Relu, Gelu, Residual,
                  ann_forward, accuracy as ann_accuracy, dataset_loss,
                  replace_activations, stage1_finetune, TrainConfig)
from .autodiff import SurrogateSpec
from .diagnostics import ErrorReport, decompose_errors, layer_mse_report
from .snn import (IfLayer, SnnNetwork, SpikeRecord, _split_stack, firing_rate,
                  simulate, theoretical_spike_count)
from .tensor import Array, Rng


class CalibrationError(RuntimeError):
    """Neuron-wise calibration hit a non-finite loss or broke a contract."""


@dataclass
class CalibConfig:
    """Stage-2 knobs.

    ``rho`` is the number of unrolled calibration steps (defaults to the
    inference horizon); ``denominator`` picks whether rates divide the
    rho-step spike sum by rho or by the full horizon.
    """

    timesteps: int = 8
    rho: int | None = None
    alpha: object = 0.6          # scalar, per-layer list, or "auto"
    beta: object = 0.1           # scalar or per-layer list
    lambda_align: float = 1.0
    lambda_logits: float = 1.0
    temperature: float = 1.0
    lr: float = 0.02
    steps: int = 80
    batch_size: int = 128
    seed: int = 0
    denominator: str = "rho"
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError(f"timesteps must be >= 1, got {self.timesteps}")
        if self.rho is None:
            self.rho = self.timesteps
        if not 1 <= self.rho <= self.timesteps:
            raise ValueError(f"need 1 <= rho <= timesteps, got rho={self.rho}, T={self.timesteps}")
        if self.denominator not in ("rho", "T"):
            raise ValueError(f"denominator must be 'rho' or 'T', got {self.denominator!r}")
        if self.lambda_align < 0 or self.lambda_logits < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_align == 0 and self.lambda_logits == 0:
            raise ValueError("loss weights must not both be zero")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.alpha != "auto":
            for a in np.atleast_1d(np.asarray(self.alpha, dtype=np.float64)):
                if not 0 < a <= 1:
                    raise ValueError(f"alpha must lie in (0, 1], got {a}")


# -- stage-1 to stage-2 handoff -------------------------------------------------

def convert(model: AnnModel, timesteps: int) -> SnnNetwork:
    """Map a staircase model onto an IF stack.

    Weights are copied bit-exactly; each staircase ceiling becomes that
    layer's per-neuron threshold and the initial potential starts at half
    the threshold (the half-step shift of the staircase). Calibration will
    overwrite both.
    """
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    layers: list = []
    encoder = None
    pending_width: int | None = None
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Embedding):
            if i != 0:
                raise ValueError(f"layer {i}: embedding is only convertible as the input encoder")
            encoder = Embedding(layer.table.copy())
        elif isinstance(layer, Linear):
            layers.append(Linear(layer.w.copy(), layer.b.copy()))
            pending_width = layer.w.shape[1]
        elif isinstance(layer, Qcfs):
            if pending_width is None:
                raise ValueError(f"layer {i}: staircase without a preceding linear layer")
            theta = np.full(pending_width, np.float32(layer.ceiling), dtype=np.float32)
            layers.append(IfLayer(threshold=theta, v_init=theta / 2))
            pending_width = None
        elif isinstance(layer, (Relu, Gelu)):
            raise ValueError(
                f"layer {i}: model still has a {type(layer).__name__} activation; "
                "replace activations and fine-tune (stage 1) before converting")
        elif isinstance(layer, Residual):
            raise ValueError(f"layer {i}: residual blocks are not convertible to an IF stack")
        else:
            raise TypeError(f"layer {i}: unknown layer type {type(layer).__name__}")
    return SnnNetwork(layers, timesteps, input_encoder=encoder)


def _per_layer(value, n: int, name: str) -> list[float]:
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.size == 1:
        return [float(arr[0])] * n
    if arr.size != n:
        raise ValueError(f"{name} needs 1 or {n} entries, got {arr.size}")
    return [float(v) for v in arr]


def lwc(net: SnnNetwork, alpha, beta) -> SnnNetwork:
    """Layer-wise calibration: scale thresholds by alpha, then set the
    initial potential to beta times the scaled threshold."""
    if_layers = net.if_layers()
    alphas = _per_layer(alpha, len(if_layers), "alpha")
    betas = _per_layer(beta, len(if_layers), "beta")
    for a in alphas:
        if not 0 < a <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {a}")
    out = net.clone()
    for layer, a, b in zip(out.if_layers(), alphas, betas):
        layer.threshold = (np.float32(a) * layer.threshold).astype(np.float32)
        layer.v_init = (np.float32(b) * layer.threshold).astype(np.float32)
        layer.v = None
    return out


def select_alpha(taus, timesteps: int, margin: float | None = None) -> float:
    """Heuristic threshold scale from the spread of theoretical spike counts:
    clip(p99(tau)/T + margin, 0.5, 1.0), margin defaulting to 1/T."""
    taus = np.asarray(taus)
    if taus.size == 0:
        raise ValueError("select_alpha needs at least one spike-count sample")
    if margin is None:
        margin = 1.0 / timesteps
    p99 = float(np.percentile(taus, 99))
    return float(np.clip(p99 / timesteps + margin, 0.5, 1.0))


def resolve_alpha(cfg: CalibConfig, ann: AnnModel, probe_x: Array) -> list[float]:
    """Per-layer alpha: the configured value, or the data heuristic when 'auto'."""
    n = len(ann.qcfs_layers())
    if cfg.alpha != "auto":
        return _per_layer(cfg.alpha, n, "alpha")
    result = ann_forward(ann, probe_x, record=True)
    alphas = []
    for trace in result.traces:
        taus = theoretical_spike_count(trace.post, trace.ceiling, cfg.timesteps)
        alphas.append(select_alpha(taus, cfg.timesteps))
    return alphas


# -- calibration losses ---------------------------------------------------------

def activation_align_loss(acts: Array, spikes: Array, threshold: Array,
                          rho: int, timesteps: int, denominator: str = "rho",
                          layer: int | None = None) -> float:
    """Mean squared error between analog activations and the rho-step rate."""
    if not 1 <= rho <= timesteps:
        raise ValueError(f"need 1 <= rho <= {timesteps}, got {rho}")
    if denominator not in ("rho", "T"):
        raise ValueError(f"denominator must be 'rho' or 'T', got {denominator!r}")
    denom = rho if denominator == "rho" else timesteps
    rate = np.asarray(threshold, dtype=np.float64) * \
        np.asarray(spikes, dtype=np.float64)[:rho].sum(axis=0) / denom
    acts = np.asarray(acts, dtype=np.float64)
    if acts.shape != rate.shape:
        where = f" at layer {layer}" if layer is not None else ""
        raise ValueError(f"activation/rate shape mismatch{where}: {acts.shape} vs {rate.shape}")
    return float(np.mean((acts - rate) ** 2))


def logits_loss(ann_logits: Array, snn_rates: Array, temperature: float) -> float:
    """Soft-target cross entropy between the two output distributions,
    averaged over the batch."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    a = np.atleast_2d(np.asarray(ann_logits, dtype=np.float64))
    r = np.atleast_2d(np.asarray(snn_rates, dtype=np.float64))
    if a.shape != r.shape:
        raise ValueError(f"logit shape mismatch: {a.shape} vs {r.shape}")
    if a.shape[1] == 0:
        raise ValueError("logits loss needs at least one class")

    def log_softmax(z):
        z = z / temperature
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    q = np.exp(log_softmax(a))
    return float(-np.mean(np.sum(q * log_softmax(r), axis=1)))


# -- neuron-wise calibration ------------------------------------------------------

def _teacher_pass(ann: AnnModel, bx: Array):
    res = ann_forward(ann, bx, record=True)
    return [t.post.astype(np.float32) for t in res.traces], res.output.astype(np.float32)


def _unroll_chain(snn: SnnNetwork, theta_vars, v0_vars, drive: Array,
                  cfg: CalibConfig, detach_carry: bool):
    """Unroll rho steps and return the per-layer rate Vars.

    With ``detach_carry`` the spikes feeding the next layer are passed as
    plain values, so each layer's rate depends only on its own threshold and
    initial potential (the within-layer membrane recurrence stays on the
    tape). Without it the full chain is differentiable.
    """
    pairs, tail = _split_stack(snn)
    batch = drive.shape[0]
    denom = float(cfg.rho if cfg.denominator == "rho" else cfg.timesteps)
    first_current = drive @ pairs[0][0].w + pairs[0][0].b

    vs = [ad.add(v0_vars[j], np.zeros((batch, p[1].width), dtype=np.float32))
          for j, p in enumerate(pairs)]
    sums: list = [None] * len(pairs)
    for _ in range(cfg.rho):
        carry = None
        for j, (linear, _) in enumerate(pairs):
            if j == 0:
                cur = first_current
            elif isinstance(carry, ad.Var):
                cur = ad.add(ad.matmul(carry, linear.w), linear.b)
            else:
                cur = carry @ linear.w + linear.b
            v = ad.add(vs[j], cur)
            s = ad.spike(v, theta_vars[j], cfg.surrogate)
            vs[j] = ad.sub(v, ad.mul(s, theta_vars[j]))
            sums[j] = s if sums[j] is None else ad.add(sums[j], s)
            carry = ad.mul(s, theta_vars[j])
            if detach_carry:
                carry = carry.value
    rates = [ad.mul(ad.mul(sums[j], theta_vars[j]), 1.0 / denom) for j in range(len(pairs))]
    return rates, tail


def _nwc_step(snn: SnnNetwork, params: dict, drive: Array, teacher_acts,
              teacher_logits, cfg: CalibConfig):
    """One calibration step: losses and gradients for every threshold and
    initial potential.

    Each layer's parameters receive the gradient of that layer's own
    alignment loss (carries between layers are detached there), while the
    logits loss backpropagates through the whole chain; the two parts are
    combined with their loss weights.
    """
    n_layers = sum(1 for l in snn.layers if isinstance(l, IfLayer))
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    tape = ad.Tape()
    thetas = [tape.leaf(params[f"if{j}.threshold"]) for j in range(n_layers)]
    v0s = [tape.leaf(params[f"if{j}.v_init"]) for j in range(n_layers)]
    rates, _ = _unroll_chain(snn, thetas, v0s, drive, cfg, detach_carry=True)
    align = None
    for j, rate in enumerate(rates):
        term = ad.mse(rate, teacher_acts[j])
        align = term if align is None else ad.add(align, term)
    l_align = float(align.value)
    if cfg.lambda_align > 0:
        gmap = ad.backward(tape, align)
        for j in range(n_layers):
            grads[f"if{j}.threshold"] += cfg.lambda_align * gmap.wrt(thetas[j])
            grads[f"if{j}.v_init"] += cfg.lambda_align * gmap.wrt(v0s[j])

    tape2 = ad.Tape()
    thetas2 = [tape2.leaf(params[f"if{j}.threshold"]) for j in range(n_layers)]
    v0s2 = [tape2.leaf(params[f"if{j}.v_init"]) for j in range(n_layers)]
    rates2, tail = _unroll_chain(snn, thetas2, v0s2, drive, cfg, detach_carry=False)
    out = rates2[-1]
    if tail is not None:
        out = ad.add(ad.matmul(out, tail.w), tail.b)
    kd = ad.kd_cross_entropy(teacher_logits, out, cfg.temperature)
    l_kd = float(kd.value)
    if cfg.lambda_logits > 0:
        gmap = ad.backward(tape2, kd)
        for j in range(n_layers):
            grads[f"if{j}.threshold"] += cfg.lambda_logits * gmap.wrt(thetas2[j])
            grads[f"if{j}.v_init"] += cfg.lambda_logits * gmap.wrt(v0s2[j])

    losses = {
        "L_al": l_align,
        "L_logits": l_kd,
        "L_all": cfg.lambda_align * l_align + cfg.lambda_logits * l_kd,
    }
    return losses, grads


def nwc_calibrate(snn: SnnNetwork, ann: AnnModel, data, cfg: CalibConfig,
                  rng: Rng | None = None) -> tuple[SnnNetwork, list[dict]]:
    """Neuron-wise calibration: train per-neuron thresholds and initial
    potentials by backprop through the unrolled simulation.

    Synaptic weights are frozen; the function asserts their hash is
    untouched. Returns the calibrated network and one log record per
    optimizer step.
    """
    from .checkpoint import weight_hash  # local import avoids a module cycle

    if rng is None:
        rng = Rng(cfg.seed).split("nwc")
    snn = snn.clone()
    pairs, _ = _split_stack(snn)
    if len(pairs) != len(ann.qcfs_layers()):
        raise ValueError(
            f"teacher has {len(ann.qcfs_layers())} staircase layers but the network has "
            f"{len(pairs)} IF layers")
    hash_before = weight_hash(snn)

    params = {}
    for j, (_, iflayer) in enumerate(pairs):
        params[f"if{j}.threshold"] = iflayer.threshold.copy()
        params[f"if{j}.v_init"] = iflayer.v_init.copy()
    state = None
    n = len(data.x)
    log: list[dict] = []

    for step in range(cfg.steps):
        if cfg.batch_size >= n:
            bx = data.x  # whole set fits one batch: keep it fixed across steps
        else:
            bx = data.x[rng.integers(0, n, (cfg.batch_size,))]
        teacher_acts, teacher_logits = _teacher_pass(ann, bx)
        drive = bx.astype(np.float32) if snn.input_encoder is None else None
        if drive is None:
            from .ann import _apply_embedding
            drive = _apply_embedding(bx, snn.input_encoder, "encoder")

        losses, gdict = _nwc_step(snn, params, drive, teacher_acts, teacher_logits, cfg)
        l_all = losses["L_all"]
        if not np.isfinite(l_all):
            raise CalibrationError(f"non-finite calibration loss at step {step}")
        params, state = ad.adam_step(params, gdict, state, cfg.lr)
        for j in range(len(pairs)):
            # thresholds must stay positive for the surrogate to be defined
            params[f"if{j}.threshold"] = np.maximum(params[f"if{j}.threshold"], np.float32(1e-4))
        log.append({
            "step": step,
            "L_al": losses["L_al"],
            "L_logits": losses["L_logits"],
            "L_all": l_all,
            "mean_theta": float(np.mean([params[f"if{j}.threshold"].mean()
                                         for j in range(len(pairs))])),
            "mean_v0": float(np.mean([params[f"if{j}.v_init"].mean()
                                      for j in range(len(pairs))])),
        })

    for j, (_, iflayer) in enumerate(pairs):
        iflayer.threshold = params[f"if{j}.threshold"]
        iflayer.v_init = params[f"if{j}.v_init"]
        iflayer.v = None
    if weight_hash(snn) != hash_before:
        raise CalibrationError("synaptic weights changed during neuron-wise calibration")
    return snn, log


# -- evaluation -------------------------------------------------------------------

def eval_losses(snn: SnnNetwork, ann: AnnModel, x: Array, cfg: CalibConfig,
                rho: int | None = None) -> dict:
    """Both calibration losses on a fixed batch, computed from a plain
    simulation at the inference horizon (rho defaults to T)."""
    rho = cfg.timesteps if rho is None else rho
    teacher_acts, teacher_logits = _teacher_pass(ann, x)
    drive = x
    rec = simulate(snn, drive if snn.input_encoder is None else x, cfg.timesteps)
    pairs, tail = _split_stack(snn)
    align = 0.0
    rate = None
    for j in range(len(pairs)):
        rate = firing_rate(rec, j, rho=rho, denominator=cfg.denominator)
        align += activation_align_loss(teacher_acts[j], rec.spikes[j], rec.thresholds[j],
                                       rho, cfg.timesteps, cfg.denominator, layer=j)
    out = rate if tail is None else rate @ tail.w + tail.b
    kd = logits_loss(teacher_logits, out, cfg.temperature)
    return {
        "L_al": float(align),
        "L_logits": float(kd),
        "L_all": float(cfg.lambda_align * align + cfg.lambda_logits * kd),
    }


def snn_predict(snn: SnnNetwork, x: Array, timesteps: int | None = None,
                batch_size: int = 512) -> Array:
    outs = []
    for lo in range(0, len(x), batch_size):
        outs.append(simulate(snn, x[lo:lo + batch_size], timesteps).output)
    return np.concatenate(outs, axis=0)


def evaluate_snn(snn: SnnNetwork, data, timesteps: int | None = None) -> dict:
    out = snn_predict(snn, data.x, timesteps)
    if data.task == "regress":
        return {"mse": float(np.mean((out.astype(np.float64) - data.y) ** 2))}
    return {"accuracy": float((out.argmax(axis=1) == data.y).mean())}


# -- full pipeline ------------------------------------------------------------------

ABLATION_VARIANTS = ("none", "lwc", "nwc", "both")


@dataclass
class PipelineConfig:
    levels: int
    stage1: TrainConfig
    calib: CalibConfig
    ablate: str = "both"  # one of ABLATION_VARIANTS or "grid"
    seed: int = 0


@dataclass
class PipelineResult:
    ann: AnnModel
    snn: SnnNetwork
    error_report: ErrorReport
    metrics: dict
    variants: dict[str, SnnNetwork]
    calibration_log: list[dict]


def apply_stage2(snn_base: SnnNetwork, ann: AnnModel, splits, cfg: CalibConfig,
                 variant: str, rng: Rng) -> tuple[SnnNetwork, list[dict]]:
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    net = snn_base.clone()
    if variant in ("lwc", "both"):
        probe = splits.train.x[:512]
        alphas = resolve_alpha(cfg, ann, probe)
        net = lwc(net, alphas, cfg.beta)
    log: list[dict] = []
    if variant in ("nwc", "both"):
        net, log = nwc_calibrate(net, ann, splits.calib, cfg, rng.split(f"nwc-{variant}"))
    return net, log


def run_pipeline(ann0: AnnModel, splits, pcfg: PipelineConfig,
                 out_dir: str | None = None) -> PipelineResult:
    """Stage 1 (replace activations, fine-tune, convert) then stage 2
    (layer-wise and neuron-wise calibration), with per-variant metrics.

    ``ann0`` plays the role of the pretrained starting model. When
    ``out_dir`` is given, checkpoints and the calibration log are written
    beneath it.
    """
    from . import checkpoint as ckpt
    from .diagnostics import decompose_errors

    rng = Rng(pcfg.seed)
    cfg = pcfg.calib
    metrics: dict = {"seed": pcfg.seed, "levels": pcfg.levels,
                     "timesteps": cfg.timesteps, "rho": cfg.rho}

    init_batch = splits.train.x[:min(512, len(splits.train.x))]
    qcfs_model = replace_activations(ann0, pcfg.levels, init_batch)
    ann1, history = stage1_finetune(qcfs_model, splits.train, pcfg.stage1,
                                    rng.split("stage1"), val_data=splits.test)
    metrics["stage1"] = {"history": history}
    if splits.test.task != "regress":
        metrics["stage1"]["test_accuracy"] = ann_accuracy(ann1, splits.test)
        metrics["ann_baseline_test_accuracy"] = ann_accuracy(ann0, splits.test)
    else:
        metrics["stage1"]["test_mse"] = dataset_loss(ann1, splits.test)

    snn_base = convert(ann1, cfg.timesteps)
    if out_dir is not None:
        ckpt.save_checkpoint(ann1, f"{out_dir}/ann")
        ckpt.save_checkpoint(snn_base, f"{out_dir}/snn")

    variants = list(ABLATION_VARIANTS) if pcfg.ablate == "grid" else [pcfg.ablate]
    eval_batch = splits.test.x[:min(256, len(splits.test.x))]
    teacher_acts, _ = _teacher_pass(ann1, eval_batch)

    results: dict[str, SnnNetwork] = {}
    metrics["variants"] = {}
    final_log: list[dict] = []
    for variant in variants:
        net, log = apply_stage2(snn_base, ann1, splits, cfg, variant, rng)
        results[variant] = net
        if log:
            final_log = log
        rec = simulate(net, eval_batch if net.input_encoder is None else eval_batch,
                       cfg.timesteps)
        rates = [firing_rate(rec, j) for j in range(rec.n_layers)]
        row = evaluate_snn(net, splits.test, cfg.timesteps)
        row.update(eval_losses(net, ann1, eval_batch, cfg))
        row["layer_mse"] = [float(np.mean((a.astype(np.float64) - r.astype(np.float64)) ** 2))
                            for a, r in zip(teacher_acts, rates)]
        row["mean_rate"] = [float(s.mean()) for s in rec.spikes]
        metrics["variants"][variant] = row

    final_variant = variants[-1]
    final = results[final_variant]
    rec = simulate(final, eval_batch, cfg.timesteps)
    traces = ann_forward(ann1, eval_batch, record=True).traces
    report = decompose_errors(traces, rec, final)
    metrics["final_variant"] = final_variant

    if out_dir is not None:
        ckpt.save_checkpoint(final, f"{out_dir}/snn_calibrated")
        import json
        import os
        os.makedirs(f"{out_dir}/reports", exist_ok=True)
        with open(f"{out_dir}/reports/calibration.jsonl", "w") as f:
            for row in final_log:
                f.write(json.dumps(row, sort_keys=True) + "\n")

    return PipelineResult(ann1, final, report, metrics, results, final_log)
