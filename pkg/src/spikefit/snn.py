"""Time-stepped integrate-and-fire simulation with reset-by-subtraction,
per-neuron thresholds and initial potentials, spike recording, and rate math.

The analog input is injected as a constant current at every step; ties
(potential exactly at threshold) fire. Membrane potentials may go negative.
"""

from __future__ import annotations

import copy
import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .ann import Embedding, Linear, _apply_embedding
from .tensor import Array


class SimulationError(RuntimeError):
    """Simulation produced a non-finite membrane potential."""


class IfLayer:
    """Integrate-and-fire population: v += current; fire and subtract where
    v >= threshold."""

    def __init__(self, threshold: Array, v_init: Array):
        threshold = np.asarray(threshold, dtype=np.float32)
        v_init = np.asarray(v_init, dtype=np.float32)
        if threshold.ndim != 1 or v_init.shape != threshold.shape:
            raise ValueError(
                f"threshold/v_init must be matching vectors, got {threshold.shape} and {v_init.shape}")
        if not np.all(threshold > 0):
            raise ValueError("threshold must be positive elementwise")
        self.threshold = threshold
        self.v_init = v_init
        self.v: Array | None = None

    @property
    def width(self) -> int:
        return self.threshold.shape[0]

    def reset(self, batch: int) -> None:
        self.v = np.broadcast_to(self.v_init, (batch, self.width)).astype(np.float32)


def if_step(layer: IfLayer, input_current: Array, step: int | None = None) -> Array:
    """Advance one timestep; returns the 0/1 spike array.

    Reset is by subtraction: a firing neuron's potential drops by exactly
    its threshold. A potential exactly at threshold fires.
    """
    cur = np.asarray(input_current, dtype=np.float32)
    if cur.ndim == 1:
        cur = cur[None, :]
    if cur.shape[-1] != layer.width:
        raise ValueError(f"input current width {cur.shape[-1]} != layer width {layer.width}")
    if layer.v is None or layer.v.shape[0] != cur.shape[0]:
        layer.reset(cur.shape[0])
    v = layer.v + cur
    if not np.all(np.isfinite(v)):
        neuron = int(np.argwhere(~np.isfinite(v))[0][-1])
        where = f" at step {step}" if step is not None else ""
        raise SimulationError(f"non-finite membrane potential for neuron {neuron}{where}")
    spikes = (v >= layer.threshold).astype(np.float32)
    layer.v = v - spikes * layer.threshold
    return spikes


class SnnNetwork:
    """Alternating linear/IF stack mirroring the analog model it came from.

    ``input_encoder`` (an embedding, when present) runs once on the raw
    input; its output is the analog drive injected at every step.
    """

    def __init__(self, layers: list, timesteps: int, input_encoder: Embedding | None = None):
        if timesteps < 1:
            raise ValueError(f"simulation horizon must be >= 1, got {timesteps}")
        self.layers = list(layers)
        self.timesteps = int(timesteps)
        self.input_encoder = input_encoder

    def if_layers(self) -> list[IfLayer]:
        return [l for l in self.layers if isinstance(l, IfLayer)]

    def linear_layers(self) -> list[Linear]:
        return [l for l in self.layers if isinstance(l, Linear)]

    def clone(self) -> "SnnNetwork":
        net = SnnNetwork(copy.deepcopy(self.layers), self.timesteps,
                         copy.deepcopy(self.input_encoder))
        for l in net.layers:
            if isinstance(l, IfLayer):
                l.v = None
        return net


@dataclass
class SpikeRecord:
    """Per-layer spike trains plus enough state to audit the run."""

    spikes: list[Array]            # per IF layer: (T, batch, width), entries 0/1
    thresholds: list[Array]        # per IF layer: (width,)
    v_start: list[Array]           # (batch, width)
    v_end: list[Array]             # (batch, width)
    output: Array                  # decoded prediction (batch, out_dim)
    timesteps: int
    input_tag: str = "constant-current"
    currents: list[Array] | None = None    # (T, batch, width) when recorded
    potentials: list[Array] | None = None  # post-step traces when recorded
    meta: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.spikes)

    @property
    def n_samples(self) -> int:
        return self.spikes[0].shape[1] if self.spikes else 0

    def counts(self, layer: int) -> Array:
        """Spike count per (sample, neuron) over the full horizon."""
        return self.spikes[layer].sum(axis=0)


def _split_stack(net: SnnNetwork):
    """Group layers into (linear, if) pairs plus an optional trailing linear."""
    pairs: list[tuple[Linear, IfLayer]] = []
    tail: Linear | None = None
    i = 0
    layers = net.layers
    while i < len(layers):
        layer = layers[i]
        if not isinstance(layer, Linear):
            raise ValueError(f"layer {i}: expected a linear layer, got {type(layer).__name__}")
        if i + 1 < len(layers):
            nxt = layers[i + 1]
            if not isinstance(nxt, IfLayer):
                raise ValueError(f"layer {i + 1}: expected an IF layer, got {type(nxt).__name__}")
            pairs.append((layer, nxt))
            i += 2
        else:
            tail = layer
            i += 1
    return pairs, tail


def simulate(net: SnnNetwork, analog_input: Array, timesteps: int | None = None,
             record_currents: bool = False, record_potentials: bool = False) -> SpikeRecord:
    """Run the network for ``timesteps`` steps on a batch of analog inputs.

    The first linear layer sees the same analog input at every step; deeper
    linears see threshold-weighted spikes. The decoded output is the firing
    rate of the last IF layer pushed through the trailing linear, if any.
    """
    T = net.timesteps if timesteps is None else int(timesteps)
    if T < 1:
        raise ValueError(f"simulation horizon must be >= 1, got {timesteps}")
    x = np.asarray(analog_input)
    if x.ndim == 1:
        x = x[None, :]
    if net.input_encoder is not None:
        x = _apply_embedding(x, net.input_encoder, "encoder")
    x = x.astype(np.float32, copy=False)
    batch = x.shape[0]

    pairs, tail = _split_stack(net)
    for _, iflayer in pairs:
        iflayer.reset(batch)

    # the first linear's current is the same at every step
    first_current = x @ pairs[0][0].w + pairs[0][0].b if pairs else None

    spikes_rec = [np.zeros((T, batch, p[1].width), dtype=np.float32) for p in pairs]
    currents_rec = ([np.zeros((T, batch, p[1].width), dtype=np.float32) for p in pairs]
                    if record_currents else None)
    potentials_rec = ([np.zeros((T, batch, p[1].width), dtype=np.float32) for p in pairs]
                      if record_potentials else None)
    v_start = [p[1].v.copy() for p in pairs]

    for t in range(T):
        carry = None
        for j, (linear, iflayer) in enumerate(pairs):
            cur = first_current if j == 0 else carry @ linear.w + linear.b
            s = if_step(iflayer, cur, step=t)
            spikes_rec[j][t] = s
            if currents_rec is not None:
                currents_rec[j][t] = cur
            if potentials_rec is not None:
                potentials_rec[j][t] = iflayer.v
            carry = s * iflayer.threshold

    v_end = [p[1].v.copy() for p in pairs]
    if pairs:
        last_rate = pairs[-1][1].threshold * spikes_rec[-1].sum(axis=0) / np.float32(T)
        output = last_rate @ tail.w + tail.b if tail is not None else last_rate
    else:
        output = x @ tail.w + tail.b if tail is not None else x

    return SpikeRecord(
        spikes=spikes_rec,
        thresholds=[p[1].threshold.copy() for p in pairs],
        v_start=v_start,
        v_end=v_end,
        output=output,
        timesteps=T,
        currents=currents_rec,
        potentials=potentials_rec,
    )


def firing_rate(record: SpikeRecord, layer: int, rho: int | None = None,
                denominator: str = "rho") -> Array:
    """Threshold-weighted rate: theta * sum of the first rho spike frames,
    divided by rho (default) or by the full horizon T."""
    T = record.timesteps
    rho = T if rho is None else int(rho)
    if not 1 <= rho <= T:
        raise ValueError(f"rho out of range: need 1 <= rho <= {T}, got {rho}")
    if denominator not in ("rho", "T"):
        raise ValueError(f"denominator must be 'rho' or 'T', got {denominator!r}")
    denom = np.float32(rho if denominator == "rho" else T)
    return record.thresholds[layer] * record.spikes[layer][:rho].sum(axis=0) / denom


def theoretical_spike_count(a: Array, ceiling, timesteps: int) -> Array:
    """Spikes needed to represent activation a in `timesteps` steps: a*T/ceiling."""
    a = np.asarray(a)
    dt = a.dtype if a.dtype.kind == "f" else np.dtype(np.float64)
    ceiling = np.asarray(ceiling, dtype=dt)
    if not np.all(ceiling > 0):
        raise ValueError("activation ceiling must be positive")
    return a.astype(dt) * dt.type(timesteps) / ceiling


def psi_max(taus, exclude_top_fraction: float = 0.01) -> Array:
    """Per-neuron max of theoretical spike counts after globally discarding
    the largest `exclude_top_fraction` of values."""
    taus = np.atleast_2d(np.asarray(taus, dtype=np.float64))
    if taus.shape[0] < 1 or taus.size == 0:
        raise ValueError("psi_max needs at least one sample")
    if not 0.0 <= exclude_top_fraction < 0.5:
        raise ValueError(f"exclude_top_fraction must be in [0, 0.5), got {exclude_top_fraction}")
    k = int(exclude_top_fraction * taus.size)
    if k == 0:
        return taus.max(axis=0)
    cutoff = np.sort(taus, axis=None)[taus.size - k - 1]
    masked = np.where(taus <= cutoff, taus, -np.inf)
    psi = masked.max(axis=0)
    return np.where(np.isneginf(psi), cutoff, psi)


def export_spike_csv(record: SpikeRecord, out_dir: str, sample: int = 0) -> list[str]:
    """One CSV per layer (`t,neuron,spike`) plus a summary JSON."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for j, s in enumerate(record.spikes):
        path = os.path.join(out_dir, f"spikes_layer{j}.csv")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "neuron", "spike"])
            for t in range(record.timesteps):
                for neuron in range(s.shape[2]):
                    w.writerow([t, neuron, int(s[t, sample, neuron])])
        paths.append(path)
    summary = {
        "timesteps": record.timesteps,
        "n_samples": record.n_samples,
        "input_tag": record.input_tag,
        "per_layer_counts": [float(s.sum()) for s in record.spikes],
        "per_layer_mean_rates": [float(s.mean()) for s in record.spikes],
    }
    spath = os.path.join(out_dir, "spike_summary.json")
    with open(spath, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    paths.append(spath)
    return paths
