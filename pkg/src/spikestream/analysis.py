"""Gradient-flow probes: how gradient amplitude moves through deep stacks.

The stack probes run identity-initialized block chains (zero body, so every
block is a pass-through) in two canonical states:

* silent: zero input, every residual neuron one unit below threshold, so
  each spiking shortcut multiplies the backward signal by sigma'(-1);
* saturated: all-ones input, every residual neuron exactly at threshold,
  so each shortcut multiplies by sigma'(0) = alpha/2, which grows the
  signal when alpha > 2.

The accumulation stream is a chain of adds whatever the state, so its
backward transmission is exactly one at every depth.  ``probe_rows``
flattens a probe into CSV-ready records, one per block.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .blocks import DualStreamState, ForwardContext, ProbeLog
from .network import Network, NetworkConfig, StageSpec, build
from .neuron import SurrogateConfig, surrogate_grad
from .numerics import GradTape, Tensor, add, backward, sum_all

__all__ = [
    "VARIANTS",
    "REGIMES",
    "ProbeResult",
    "silent_decay_factor",
    "threshold_growth_factor",
    "identity_stack",
    "stack_probe",
    "network_probe",
    "probe_rows",
    "write_probe_csv",
    "PROBE_FIELDS",
]

VARIANTS = ("and", "iand", "or", "xor", "sn_residual", "add")

# regime -> (surrogate slope, input state)
REGIMES = {"vanish": (2.0, "silent"), "explode": (3.0, "saturated")}

PROBE_FIELDS = ["block_index", "grad_amplitude", "variant", "regime", "with_aap", "seed"]


def silent_decay_factor(alpha: float = 2.0) -> float:
    """Per-block backward factor of a spiking shortcut one unit below threshold."""
    return float(surrogate_grad(np.float32(-1.0), alpha))


def threshold_growth_factor(alpha: float) -> float:
    """Per-block backward factor of a spiking shortcut exactly at threshold."""
    return float(surrogate_grad(np.float32(0.0), alpha))


@dataclass
class ProbeResult:
    """Mean absolute gradient per recorded tensor, shallow to deep."""

    block_names: list[str]
    o_grads: list[float]
    s_grads: list[float]
    a_grads: list[float] | None
    input_o_grad: float
    input_a_grad: float | None


def _mean_abs(g: np.ndarray) -> float:
    return float(np.abs(g).mean())


def identity_stack(
    depth: int,
    variant: str,
    alpha: float = 2.0,
    channels: int = 2,
    hw: int = 3,
    seed: int = 0,
) -> list:
    """Identity-initialized blocks of one variant, without stem or heads."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    block_kind = variant if variant in ("sn_residual", "add") else "logical"
    cfg = NetworkConfig(
        in_channels=channels,
        in_hw=(hw, hw),
        t_steps=1,
        num_classes=2,
        block_kind=block_kind,
        g=variant if block_kind == "logical" else None,
        stem_channels=channels,
        stages=(StageSpec(blocks=depth, channels=channels),),
        surrogate=SurrogateConfig(alpha=alpha),
    )
    return build(cfg, seed).blocks


def stack_probe(
    depth: int,
    variant: str,
    alpha: float = 2.0,
    state: str = "silent",
    loss_mode: str = "o",
    channels: int = 2,
    hw: int = 3,
    seed: int = 0,
) -> ProbeResult:
    """Backpropagate through an identity stack and read per-block amplitudes.

    ``loss_mode`` picks the stream the (sum-of-outputs) loss reads: "o" for
    the spike stream, "a" for the accumulation stream, "dual" for their sum,
    which is what dual-stream training optimizes.
    """
    if state not in ("silent", "saturated"):
        raise ValueError(f"state must be 'silent' or 'saturated', got {state!r}")
    if loss_mode not in ("o", "a", "dual"):
        raise ValueError(f"loss_mode must be 'o', 'a', or 'dual', got {loss_mode!r}")
    blocks = identity_stack(depth, variant, alpha, channels, hw, seed)
    fill = 0.0 if state == "silent" else 1.0
    x = Tensor(np.full((1, channels, hw, hw), fill, dtype=np.float32))
    a0 = x.copy() if loss_mode in ("a", "dual") else None
    tape = GradTape()
    probes = ProbeLog()
    ctx = ForwardContext(t_steps=1, tape=tape, training=False, probes=probes)
    streams = DualStreamState(o=x, a=a0)
    for b in blocks:
        streams = b.forward(streams, ctx)
    if loss_mode == "o":
        loss = sum_all(streams.o, tape)
    elif loss_mode == "a":
        loss = sum_all(streams.a, tape)
    else:
        loss = add(sum_all(streams.o, tape), sum_all(streams.a, tape), tape)
    grads = backward(tape, Tensor(1.0), output=loss)

    names = [name for name, _ in probes.series("s")]
    result = ProbeResult(
        block_names=names,
        o_grads=[_mean_abs(grads[t]) for _, t in probes.series("o")],
        s_grads=[_mean_abs(grads[t]) for _, t in probes.series("s")],
        a_grads=(
            [_mean_abs(grads[t]) for _, t in probes.series("a")] if a0 is not None else None
        ),
        input_o_grad=_mean_abs(grads[x]),
        input_a_grad=_mean_abs(grads[a0]) if a0 is not None else None,
    )
    return result


def network_probe(net: Network, x, with_aap: bool = True) -> ProbeResult:
    """Per-block gradient amplitudes of a whole network's classifier loss.

    The loss is the sum of the spike-head logits, plus the accumulation-head
    logits when ``with_aap`` is set, mirroring which loss terms training
    would apply.  Batch norms run in inference mode so the probe reflects
    the network as deployed.
    """
    tape = GradTape()
    probes = ProbeLog()
    out = net.forward(x, mode="dsnn", tape=tape, training=False, probes=probes)
    loss = sum_all(out.logits_s, tape)
    if with_aap:
        loss = add(loss, sum_all(out.logits_a, tape), tape)
    grads = backward(tape, Tensor(1.0), output=loss)

    o_series = [(n, t) for n, t in probes.series("o") if n != "input"]
    input_t = next(t for n, t in probes.series("o") if n == "input")
    s_series = probes.series("s")
    a_series = probes.series("a")
    return ProbeResult(
        block_names=[n for n, _ in s_series],
        o_grads=[_mean_abs(grads[t]) for _, t in o_series],
        s_grads=[_mean_abs(grads[t]) for _, t in s_series],
        a_grads=[_mean_abs(grads[t]) for _, t in a_series] if a_series else None,
        input_o_grad=_mean_abs(grads[input_t]),
        input_a_grad=None,
    )


def probe_rows(
    depth: int,
    variant: str,
    regime: str,
    with_aap: bool,
    seed: int = 0,
    channels: int = 2,
    hw: int = 3,
) -> list[dict]:
    """One CSV-ready record per probed point: index 0 is the stack input."""
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {tuple(REGIMES)}, got {regime!r}")
    alpha, state = REGIMES[regime]
    probe = stack_probe(
        depth,
        variant,
        alpha=alpha,
        state=state,
        loss_mode="dual" if with_aap else "o",
        channels=channels,
        hw=hw,
        seed=seed,
    )
    rows = [
        {
            "block_index": 0,
            "grad_amplitude": probe.input_o_grad,
            "variant": variant,
            "regime": regime,
            "with_aap": with_aap,
            "seed": seed,
        }
    ]
    for i, amp in enumerate(probe.s_grads, start=1):
        rows.append(
            {
                "block_index": i,
                "grad_amplitude": amp,
                "variant": variant,
                "regime": regime,
                "with_aap": with_aap,
                "seed": seed,
            }
        )
    return rows


def write_probe_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PROBE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
