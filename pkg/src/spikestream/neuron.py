"""Spiking neuron dynamics: charge, threshold fire, hard reset.

The forward path is exact binary spiking with the Heaviside convention
Theta(0) = 1.  The backward path substitutes the smoothed-step derivative

    sigma'(u) = alpha / (2 * (1 + (pi/2 * alpha * u)^2))

at the threshold and differentiates everything else, including the hard
reset V = H*(1-S) + v_reset*S, literally.  An optional ``detach_reset``
drops the reset's S-path term for ablations; the default keeps it.

Two granularities are provided: per-step ops (:func:`charge`, :func:`fire`,
:func:`reset`, :func:`sn_step`) threading a :class:`NeuronState`, and
:func:`sn_seq`, a fused rollout over a time-flattened ``(T*N, ...)`` batch
that records a single tape node whose vjp replays the recurrence in reverse.
The two are equivalent; the fused form exists because networks step neurons
T times per layer and per-step tape records are the dominant overhead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import GradTape, ShapeError, Tensor, add

__all__ = [
    "SurrogateConfig",
    "NeuronConfig",
    "NeuronState",
    "surrogate_value",
    "surrogate_grad",
    "charge",
    "fire",
    "reset",
    "sn_step",
    "sn_seq",
]

_f32 = np.float32


@dataclass(frozen=True)
class SurrogateConfig:
    """Sharpness of the smoothed step used for threshold gradients."""

    alpha: float = 2.0

    def __post_init__(self) -> None:
        if not self.alpha > 0.0:
            raise ValueError(f"surrogate alpha must be > 0, got {self.alpha}")


@dataclass(frozen=True)
class NeuronConfig:
    """Membrane dynamics selector.

    kind "if" integrates H = V + X; kind "lif" leaks toward the reset level
    with H = V + (X - (V - v_reset)) / tau.  Firing compares H against
    v_threshold (equality fires) and the hard reset returns the membrane to
    v_reset.
    """

    kind: str = "if"
    v_threshold: float = 1.0
    v_reset: float = 0.0
    tau: float = 2.0
    detach_reset: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("if", "lif"):
            raise ValueError(f"neuron kind must be 'if' or 'lif', got {self.kind!r}")
        if not self.v_threshold > 0.0:
            raise ValueError(f"v_threshold must be > 0, got {self.v_threshold}")
        if self.kind == "lif" and not self.tau > 1.0:
            raise ValueError(f"lif tau must be > 1, got {self.tau}")


class NeuronState:
    """Membrane potential carried between time steps of one layer."""

    __slots__ = ("v",)

    def __init__(self, v: Tensor) -> None:
        self.v = v

    @classmethod
    def initial(cls, shape, cfg: NeuronConfig) -> "NeuronState":
        return cls(Tensor.full(shape, cfg.v_reset))


def surrogate_value(u: np.ndarray, alpha: float) -> np.ndarray:
    """The smoothed step sigma(u) = arctan(pi/2 * alpha * u)/pi + 1/2."""
    z = _f32(np.pi / 2.0) * _f32(alpha) * np.asarray(u, dtype=_f32)
    return (np.arctan(z) / _f32(np.pi) + _f32(0.5)).astype(_f32)


def surrogate_grad(u: np.ndarray, alpha: float) -> np.ndarray:
    """Exact derivative of :func:`surrogate_value` at u."""
    z = _f32(np.pi / 2.0) * _f32(alpha) * np.asarray(u, dtype=_f32)
    return (_f32(alpha) / (_f32(2.0) * (_f32(1.0) + z * z))).astype(_f32)


def charge(state: NeuronState, x_t: Tensor, cfg: NeuronConfig, tape: GradTape | None = None) -> Tensor:
    """One integration step producing the pre-spike membrane H."""
    if x_t.shape != state.v.shape:
        raise ShapeError(f"charge: input shape {x_t.shape} != state shape {state.v.shape}")
    if cfg.kind == "if":
        return add(state.v, x_t, tape)
    inv_tau = _f32(1.0 / cfg.tau)
    keep = _f32(1.0) - inv_tau
    v = state.v
    out = Tensor(keep * v.data + inv_tau * x_t.data + inv_tau * _f32(cfg.v_reset))
    if tape is not None:
        tape.record(out, lambda g: [(v, keep * g), (x_t, inv_tau * g)])
    return out


def fire(h: Tensor, cfg: NeuronConfig, sg: SurrogateConfig, tape: GradTape | None = None) -> Tensor:
    """Threshold the membrane into a binary spike map; Theta(0) = 1.

    The recorded gradient is sigma'(H - v_threshold): exact chain rule
    everywhere except the step itself, where the surrogate substitutes.
    """
    u = h.data - _f32(cfg.v_threshold)
    out = Tensor((u >= 0).astype(_f32))
    if tape is not None:
        alpha = sg.alpha
        tape.record(out, lambda g: [(h, g * surrogate_grad(u, alpha))])
    return out


def reset(h: Tensor, s: Tensor, cfg: NeuronConfig, tape: GradTape | None = None) -> Tensor:
    """Hard reset V = H * (1 - S) + v_reset * S.

    Differentiated as written: dV/dH = (1 - S) and dV/dS = (v_reset - H),
    the S-path dropped only under cfg.detach_reset.
    """
    if h.shape != s.shape:
        raise ShapeError(f"reset: membrane shape {h.shape} != spike shape {s.shape}")
    vr = _f32(cfg.v_reset)
    one = _f32(1.0)
    out = Tensor(h.data * (one - s.data) + vr * s.data)
    if tape is not None:
        hd, sd = h.data, s.data
        if cfg.detach_reset:
            tape.record(out, lambda g: [(h, g * (one - sd))])
        else:
            tape.record(out, lambda g: [(h, g * (one - sd)), (s, g * (vr - hd))])
    return out


def sn_step(state: NeuronState, x_t: Tensor, cfg: NeuronConfig, sg: SurrogateConfig, tape: GradTape | None = None) -> Tensor:
    """Charge, fire, reset; state.v is rebound to the post-reset membrane."""
    h = charge(state, x_t, cfg, tape)
    s = fire(h, cfg, sg, tape)
    state.v = reset(h, s, cfg, tape)
    return s


def sn_seq(x: Tensor, t_steps: int, cfg: NeuronConfig, sg: SurrogateConfig, tape: GradTape | None = None) -> Tensor:
    """Roll a neuron over a time-flattened batch in one tape node.

    ``x`` holds T groups of N rows stacked along the leading axis; group t is
    the drive at step t.  The membrane starts at v_reset for every element
    and is never shared across calls.  Equivalent to looping
    :func:`sn_step`, with the reverse recurrence

        gh_t = (gs_t + gv_{t+1} * (v_reset - H_t)) * sigma'(u_t)
               + gv_{t+1} * (1 - S_t)

    (the (v_reset - H_t) term dropped under detach_reset), then gx_t = gh_t
    and gv_t = gh_t for IF, or gx_t = gh_t / tau and gv_t = gh_t * (1 - 1/tau)
    for LIF.
    """
    if t_steps < 1:
        raise ShapeError(f"sn_seq: t_steps must be >= 1, got {t_steps}")
    if x.shape[0] % t_steps:
        raise ShapeError(f"sn_seq: leading dim {x.shape[0]} not divisible by T={t_steps}")
    d = x.data.reshape(t_steps, -1)
    vth = _f32(cfg.v_threshold)
    vr = _f32(cfg.v_reset)
    one = _f32(1.0)
    is_lif = cfg.kind == "lif"
    inv_tau = _f32(1.0 / cfg.tau)
    keep = one - inv_tau

    us = np.empty_like(d)
    ss = np.empty_like(d)
    v = np.full(d.shape[1], vr, dtype=_f32)
    for t in range(t_steps):
        if is_lif:
            h = keep * v + inv_tau * d[t] + inv_tau * vr
        else:
            h = v + d[t]
        u = h - vth
        s = (u >= 0).astype(_f32)
        v = h * (one - s) + vr * s
        us[t] = u
        ss[t] = s
    out = Tensor(ss.reshape(x.shape))

    if tape is not None:
        alpha = sg.alpha
        detach = cfg.detach_reset

        def vjp(g):
            g2 = g.reshape(t_steps, -1)
            gx = np.empty_like(g2)
            gv = np.zeros(g2.shape[1], dtype=_f32)
            for t in range(t_steps - 1, -1, -1):
                su = surrogate_grad(us[t], alpha)
                s_t = ss[t]
                if detach:
                    gh = g2[t] * su + gv * (one - s_t)
                else:
                    h_t = us[t] + vth
                    gh = (g2[t] + gv * (vr - h_t)) * su + gv * (one - s_t)
                if is_lif:
                    gx[t] = gh * inv_tau
                    gv = gh * keep
                else:
                    gx[t] = gh
                    gv = gh
            return [(x, gx.reshape(x.shape))]

        tape.record(out, vjp)
    return out
