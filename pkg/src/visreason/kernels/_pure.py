"""Numpy reference implementations of the hot kernels.

These are the semantics of record: the compiled extension in _native.pyx
must produce bit-identical outputs (same float expressions, same RNG
consumption order), and the test suite asserts parity whenever the
extension is importable.
"""

from __future__ import annotations

import numpy as np


def alpha_blend(dst: np.ndarray, src: np.ndarray, alpha: float) -> np.ndarray:
    """Blend src over dst (same shape, uint8) with round-half-up."""
    d = dst.astype(np.float64)
    s = src.astype(np.float64)
    out = np.floor(d * (1.0 - alpha) + s * alpha + 0.5)
    return out.astype(np.uint8)


def zoom_nearest(src: np.ndarray, out_h: int, out_w: int, factor: float) -> np.ndarray:
    """Nearest-neighbor upscale: out[y, x] = src[floor(y/factor), floor(x/factor)]."""
    ys = np.minimum((np.arange(out_h) / factor).astype(np.intp), src.shape[0] - 1)
    xs = np.minimum((np.arange(out_w) / factor).astype(np.intp), src.shape[1] - 1)
    return np.ascontiguousarray(src[ys[:, None], xs[None, :]])


def _pick(cum_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # index of the first cumulative entry > u, clipped to the last symbol
    idx = (cum_rows <= u[:, None]).sum(axis=1)
    return np.minimum(idx, cum_rows.shape[1] - 1)


def simulate_chain(
    plan_cum: np.ndarray,
    act_cum: np.ndarray,
    plan_ratio: np.ndarray,
    act_ratio: np.ndarray,
    next_state: np.ndarray,
    start: int,
    eps: float,
    cap: int,
    uniforms: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Run stopping-rule episodes over a finite planning/action chain.

    Episode i at step h consumes uniforms[i, h, 0] to sample the planning
    symbol from plan_cum[state] and uniforms[i, h, 1] to sample the action
    symbol from act_cum[planning]; it stops once the absolute step log
    ratio falls below eps. Returns (steps, stopped) where steps[i] is the
    number of steps taken (== cap when the cap forced the exit) and
    stopped[i] is 1 iff the stop rule fired.
    """
    n = uniforms.shape[0]
    state = np.full(n, start, dtype=np.intp)
    steps = np.zeros(n, dtype=np.int32)
    stopped = np.zeros(n, dtype=np.uint8)
    alive = np.arange(n, dtype=np.intp)
    for h in range(cap):
        if alive.size == 0:
            break
        s = state[alive]
        t = _pick(plan_cum[s], uniforms[alive, h, 0])
        a = _pick(act_cum[t], uniforms[alive, h, 1])
        ratio = plan_ratio[s, t] + act_ratio[t, a]
        steps[alive] = h + 1
        stop_now = np.abs(ratio) < eps
        stopped[alive[stop_now]] = 1
        cont = ~stop_now
        state[alive[cont]] = next_state[s[cont], t[cont], a[cont]]
        alive = alive[cont]
    return steps, stopped
