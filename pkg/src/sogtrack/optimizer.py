"""Windowed first-order pose refinement."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .geometry import fix_quaternion_trajectory
from .objective import BLOCKS, TERMS, ObjectiveDiverged, ParamBlocks, WindowProblem

log = logging.getLogger(__name__)

DEFAULT_LR = {
    "obj_log_s": 1e-3,
    "hand_log_s": 1e-3,
    "hand_shape": 1e-4,  # kept for completeness; articulated shape is not optimized
    "obj_t": 2e-3,
    "hand_t": 1e-3,
    "obj_q": 2e-3,
    "hand_q": 1e-4,
}


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = 8
    stride: int = 1
    iterations: int = 100

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if not 1 <= self.stride <= self.window_size:
            raise ValueError("stride must lie in [1, window_size]")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass
class OptimState:
    """AdamW moments per parameter block."""

    lr: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LR))
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def step(state: OptimState, params: ParamBlocks, grads: Dict[str, np.ndarray],
         lr_table: Optional[Dict[str, float]] = None) -> ParamBlocks:
    """One bias-corrected AdamW update; quaternions are renormalized afterwards."""
    lr_table = state.lr if lr_table is None else lr_table
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    cur = params.as_dict()
    out = {}
    for k, p in cur.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        if state.m[k].shape != p.shape:
            raise ValueError(f"optimizer state for {k} has shape {state.m[k].shape}, parameter {p.shape}")
        state.m[k] = state.beta1 * state.m[k] + (1 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1 - state.beta2) * g * g
        lr = lr_table.get(k, 0.0)
        p = p - lr * state.weight_decay * p
        out[k] = p - lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + state.eps)
    for k in ("obj_q", "hand_q"):
        out[k] = out[k] / np.linalg.norm(out[k], axis=1, keepdims=True)
    return ParamBlocks.from_dict(out)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def gradient(objective: Callable[[Dict[str, torch.Tensor]], torch.Tensor], params: ParamBlocks,
             fallback_fd: bool = True, h: float = 1e-4) -> Dict[str, np.ndarray]:
    """Gradient of a torch-expressible objective; central differences if autograd is unavailable."""
    p = params.tensors(requires_grad=True)
    try:
        val = objective(p)
        if not torch.is_tensor(val) or not val.requires_grad:
            raise TypeError("objective is not differentiable")
    except (TypeError, RuntimeError):
        if not fallback_fd:
            raise
        return finite_difference_gradient(lambda d: float(objective(d)), params, h)
    if not torch.isfinite(val):
        raise ObjectiveDiverged("objective diverged")
    val.backward()
    return {k: v.grad.numpy().copy() if v.grad is not None else np.zeros(v.shape) for k, v in p.items()}


def finite_difference_gradient(fn: Callable[[Dict[str, torch.Tensor]], float], params: ParamBlocks,
                               h: float = 1e-4) -> Dict[str, np.ndarray]:
    """Central differences, one coordinate at a time (log-scale coordinates for scales)."""
    base = params.as_dict()
    out = {}
    with torch.no_grad():
        f0 = fn({k: torch.tensor(v, dtype=torch.float64) for k, v in base.items()})
        if not np.isfinite(f0):
            raise ObjectiveDiverged("objective diverged")
        for k, v in base.items():
            g = np.zeros(v.size)
            for i in range(v.size):
                x = v.ravel().copy()
                d = dict(base)
                x[i] += h
                d[k] = x.reshape(v.shape)
                fp = fn({kk: torch.tensor(vv, dtype=torch.float64) for kk, vv in d.items()})
                x[i] -= 2 * h
                d[k] = x.reshape(v.shape)
                fm = fn({kk: torch.tensor(vv, dtype=torch.float64) for kk, vv in d.items()})
                g[i] = (fp - fm) / (2 * h)
            out[k] = g.reshape(v.shape)
    return out


# ---------------------------------------------------------------------------
# window and sliding optimization
# ---------------------------------------------------------------------------

@dataclass
class WindowResult:
    params: ParamBlocks
    trace: List[float]
    term_trace: List[Dict[str, float]]
    improved: bool
    stats: Dict[str, float] = field(default_factory=dict)


def optimize_window(problem: WindowProblem, init: ParamBlocks, config: WindowConfig = WindowConfig(),
                    state: Optional[OptimState] = None, freeze: tuple = ()) -> WindowResult:
    """Run ``config.iterations`` AdamW steps with the active set refreshed every iteration.

    The trace holds the objective before each step plus the final value.
    ``improved`` is False when the final objective exceeds the initial one.
    Blocks named in ``freeze`` keep their values.
    """
    state = OptimState() if state is None else state
    lr = {k: (0.0 if k in freeze else v) for k, v in state.lr.items()}
    params = init.copy()
    trace, term_trace = [], []
    act = None
    for it in range(config.iterations):
        val, grads, terms, act = problem.value_and_grad(params)
        trace.append(val)
        term_trace.append(terms)
        new = step(state, params, grads, lr)
        if not new.is_finite():
            raise ObjectiveDiverged("objective diverged")
        params = new
    act = problem.active_set(params)
    with torch.no_grad():
        total, terms = problem.total(params.tensors(), act)
    final = float(total)
    if not np.isfinite(final):
        raise ObjectiveDiverged("objective diverged")
    trace.append(final)
    term_trace.append({k: float(v) for k, v in terms.items()})
    improved = final <= trace[0] or config.iterations == 0
    if not improved:
        log.warning("window objective rose from %.6g to %.6g", trace[0], final)
    return WindowResult(params, trace, term_trace, improved, dict(act.stats))


def window_starts(n_frames: int, config: WindowConfig) -> List[int]:
    if n_frames <= config.window_size:
        return [0]
    starts = list(range(0, n_frames - config.window_size + 1, config.stride))
    if starts[-1] + config.window_size < n_frames:
        starts.append(n_frames - config.window_size)
    return starts


def slide_windows(params: ParamBlocks, make_problem: Callable[[int, int], WindowProblem],
                  config: WindowConfig = WindowConfig(), state_factory: Callable[[], OptimState] = OptimState,
                  freeze: tuple = (), callback=None, fail_soft: bool = False):
    """Optimize consecutive windows; the latest window to touch a frame wins.

    Global scales carry over between windows. Each window starts a fresh
    optimizer state. Returns the refined parameters and the per-window results.
    With ``fail_soft`` a window that raises keeps its incoming parameters and
    is recorded as ``(s, e, exception)``; otherwise the error propagates.
    """
    n = len(params)
    cur = params.copy()
    results = []
    for w_idx, s in enumerate(window_starts(n, config)):
        e = min(n, s + config.window_size)
        sub = ParamBlocks(cur.obj_q[s:e], cur.obj_t[s:e], cur.obj_log_s,
                          cur.hand_q[s:e], cur.hand_t[s:e], cur.hand_log_s)
        try:
            res = optimize_window(make_problem(s, e), sub, config, state_factory(), freeze)
        except Exception as exc:
            if not fail_soft:
                raise
            log.error("window %d-%d failed: %s", s, e, exc)
            results.append((s, e, exc))
            if callback is not None:
                callback(w_idx, s, e, exc)
            continue
        cur.obj_q[s:e] = res.params.obj_q
        cur.obj_t[s:e] = res.params.obj_t
        cur.hand_q[s:e] = res.params.hand_q
        cur.hand_t[s:e] = res.params.hand_t
        cur.obj_log_s = res.params.obj_log_s
        cur.hand_log_s = res.params.hand_log_s
        results.append((s, e, res))
        if callback is not None:
            callback(w_idx, s, e, res)
    cur.obj_q = fix_quaternion_trajectory(cur.obj_q)
    cur.hand_q = fix_quaternion_trajectory(cur.hand_q)
    return cur, results


def temporal_guidance(v, x_t, x_prev, lambda_temp: float = 0.2) -> np.ndarray:
    """Pull a latent velocity toward the previous frame's latent: v - lambda * (x_t - x_prev)."""
    v = np.asarray(v, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    if not (v.shape == x_t.shape == x_prev.shape):
        raise ValueError(f"latent shapes differ: {v.shape}, {x_t.shape}, {x_prev.shape}")
    return v - lambda_temp * (x_t - x_prev)


__all__ = [
    "BLOCKS", "TERMS", "DEFAULT_LR", "OptimState", "WindowConfig", "WindowResult", "finite_difference_gradient",
    "gradient", "optimize_window", "slide_windows", "step", "temporal_guidance", "window_starts",
]
