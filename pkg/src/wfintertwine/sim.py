"""Monte Carlo engines for the birth chain, the coupled process and the
reflected Wright-Fisher diffusion.

All path kernels are numba functions that draw from a numpy ``Generator``
passed in by the caller, so a path is a deterministic function of its stream.
Ensembles split paths into fixed-size blocks; block ``b`` of a run with
master seed ``s`` draws from ``SeedSequence(s, spawn_key=(b,))`` and a path is
identified by ``(s, b, offset)``.  Blocks may run on threads (the kernels
release the GIL) and are merged in block order, so results do not depend on
scheduling.

The coupled X-component is integrated by Euler-Maruyama with a local step

    dt = min(dt_base, x^2 / (zero_factor y^2), (1 - x) / (one_factor (y + 1)))

so the drift ``4 (y/x - (y+1) x)`` cannot carry a step across either boundary.
Birth levels at or above ``level_cap`` are not resolved: the remaining time to
explosion is drawn from a gamma law with the exact mean and variance of the
remaining exponential sum, and X is held fixed over that last stretch.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .poly import INF, NumericFailure

__all__ = [
    "SubstepRule",
    "SimConfig",
    "BirthRecord",
    "TrajectoryRecord",
    "Ensemble",
    "block_rng",
    "tail_moments",
    "simulate_birth",
    "simulate_coupled",
    "simulate_wf",
    "birth_ensemble",
    "coupled_ensemble",
    "coupled_blocks",
    "wf_ensemble",
    "AveragingReport",
    "check_averaging",
    "DriftSignReport",
    "drift_sign_check",
    "drift_sign_from_samples",
    "averaging_statistics",
    "ensemble_summary",
    "write_trajectories_csv",
    "write_absorption_csv",
]

_ONE_MINUS = float(np.nextafter(1.0, 0.0))
_LN2 = math.log(2.0)
_OK, _NONFINITE = 0, 1


@dataclass(frozen=True)
class SubstepRule:
    """Parameters of the local step size."""

    zero_factor: float = 64.0
    one_factor: float = 32.0
    dt_floor: float = 1e-14

    def __post_init__(self):
        if not (self.zero_factor > 0 and self.one_factor > 0 and self.dt_floor > 0):
            raise ValueError("substep factors and dt_floor must be > 0")


@dataclass(frozen=True)
class SimConfig:
    """Run parameters shared by the simulators."""

    dt_base: float = 1e-4
    boundary_eps: float = 1e-4
    substep_rule: SubstepRule = field(default_factory=SubstepRule)
    t_max: float = 20.0
    n_paths: int = 10_000
    master_seed: int = 0
    level_cap: int = 256
    block_size: int = 256

    def __post_init__(self):
        if not 0 < self.dt_base < math.inf:
            raise ValueError("dt_base must be finite and > 0")
        if not 0 < self.boundary_eps < 1e-2:
            raise ValueError("boundary_eps must lie in (0, 1e-2)")
        if not self.t_max > 0:
            raise ValueError("t_max must be > 0")
        if self.n_paths < 1 or self.block_size < 1 or self.level_cap < 1:
            raise ValueError("n_paths, block_size and level_cap must be positive")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if isinstance(d.get("substep_rule"), dict):
            d["substep_rule"] = SubstepRule(**d["substep_rule"])
        return cls(**d)


def block_rng(master_seed: int, block: int) -> np.random.Generator:
    """Independent stream for block ``block`` of a run."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(block,))))


# ---------------------------------------------------------------- tail moments


@njit(cache=True)
def _psi_minus_log(z):
    # digamma(z) - log(z), by upward recurrence and the asymptotic series
    acc = 0.0
    w = z
    while w < 15.0:
        acc -= 1.0 / w
        w += 1.0
    acc += math.log(w / z)
    w2 = 1.0 / (w * w)
    s = w2 * (1.0 / 12 - w2 * (1.0 / 120 - w2 * (1.0 / 252 - w2 * (1.0 / 240 - w2 / 132))))
    return acc - 0.5 / w - s


@njit(cache=True)
def _trigamma(z):
    acc = 0.0
    w = z
    while w < 15.0:
        acc += 1.0 / (w * w)
        w += 1.0
    w2 = 1.0 / (w * w)
    s = 1.0 / w + 0.5 * w2 + w2 / w * (1.0 / 6 - w2 * (1.0 / 30 - w2 * (1.0 / 42 - w2 * (1.0 / 30 - w2 * 5.0 / 66))))
    return acc + s


@njit(cache=True)
def _tail_mean(y):
    if y == 0:
        return _LN2
    a = y + 0.5
    return 0.5 * (math.log1p(0.5 / a) + _psi_minus_log(a + 0.5) - _psi_minus_log(a))


@njit(cache=True)
def _tail_var(y):
    if y >= 1000:
        # Euler-Maclaurin, avoids the cancellation of the trigamma form
        a = 2.0 * y + 1.0
        return 1.0 / (6.0 * a**3) + 1.0 / (4.0 * a**4)
    v = 0.25 * (_trigamma(y + 0.5) + _trigamma(y + 1.0)) - 2.0 * _tail_mean(y)
    return max(v, 0.0)


def tail_moments(y: int) -> tuple[float, float]:
    """Mean and variance of the time to explosion from level ``y``."""
    if y < 0:
        raise ValueError("y must be >= 0")
    return float(_tail_mean(float(y))), float(_tail_var(float(y)))


@njit(cache=True)
def _rate(y):
    return (2.0 * y + 1.0) * (2.0 * y + 2.0)


@njit(cache=True)
def _gamma_tail(rng, y):
    m = _tail_mean(y)
    v = _tail_var(y)
    if v <= 0.0:
        return m
    return rng.gamma(m * m / v, v / m)


@njit(cache=True)
def _draw_start(rng, x0):
    # geometric law K(x0, .), same draws as kernels.sample_K
    if x0 <= 0.0:
        return 0.0
    if x0 >= 1.0:
        return np.inf
    u = 1.0 - rng.random()
    return min(math.floor(math.log(u) / (2.0 * math.log(x0))), 2.0**62)


@njit(cache=True)
def _birth_clock(rng, y0, cap, jumps):
    """Fill ``jumps`` with jump times out of levels y0..cap-1; return (count, explosion)."""
    t = 0.0
    n = 0
    y = y0
    while y < cap:
        t += rng.standard_exponential() / _rate(y)
        jumps[n] = t
        n += 1
        y += 1
    return n, t + _gamma_tail(rng, max(y0, float(cap)))


@njit(nogil=True, cache=True)
def _birth_block(rng, y_fixed, x_mix, cap, out_start, out_expl):
    jumps = np.empty(cap)
    for i in range(out_expl.size):
        y0 = _draw_start(rng, x_mix) if x_mix >= 0.0 else y_fixed
        out_start[i] = y0
        if y0 == np.inf:
            out_expl[i] = 0.0
        else:
            n, e = _birth_clock(rng, y0, cap, jumps)
            out_expl[i] = e


# ---------------------------------------------------------------- path kernels


@njit(cache=True)
def _coupled_path(rng, x0, times, t_max, dt_base, zf, of, dt_floor, cap, out_x, out_y, jumps):
    """One coupled path sampled at ``times``; returns (y0, n_jumps, explosion, status, t_end)."""
    m = times.size
    y0 = _draw_start(rng, x0)
    if y0 == np.inf:
        out_x[:] = 1.0
        out_y[:] = np.inf
        return y0, 0, 0.0, _OK, 0.0
    n_jumps, explosion = _birth_clock(rng, y0, cap, jumps)
    x = x0
    y = y0
    t = 0.0
    k = 0
    t_end = min(t_max, explosion)
    for j in range(m):
        target = min(times[j], t_end)
        while t < target:
            if y >= cap:
                # unresolved levels: X held until explosion
                t = target
                break
            seg_end = target
            jumping = False
            if k < n_jumps and jumps[k] <= target:
                seg_end = jumps[k]
                jumping = True
            while t < seg_end:
                h = dt_base
                if y >= 1.0 and x > 0.0:
                    h = min(h, x * x / (zf * y * y))
                h = min(h, (1.0 - x) / (of * (y + 1.0)))
                h = max(h, dt_floor)
                last = t + h >= seg_end
                if last:
                    h = seg_end - t
                if x == 0.0 and y >= 1.0:
                    # entrance from 0: deterministic displacement of x^2
                    x = math.sqrt((8.0 * y + 2.0) * h)
                else:
                    drift = -4.0 * x if y == 0.0 else 4.0 * (y / x - (y + 1.0) * x)
                    x = x + drift * h + math.sqrt(2.0 * (1.0 - x * x) * h) * rng.standard_normal()
                    x = abs(x)
                    if x >= 1.0:
                        x = 2.0 - x
                    x = min(max(x, 0.0), _ONE_MINUS)
                if not math.isfinite(x):
                    out_x[j:] = np.nan
                    out_y[j:] = y
                    return y0, n_jumps, explosion, _NONFINITE, t
                t = seg_end if last else t + h
            if jumping:
                y += 1.0
                k += 1
        if times[j] >= explosion:
            out_x[j] = 1.0
            out_y[j] = np.inf
        elif times[j] > t_max:
            out_x[j] = np.nan
            out_y[j] = np.nan
        else:
            out_x[j] = x
            out_y[j] = min(y, float(cap))
    return y0, n_jumps, explosion, _OK, t


@njit(nogil=True, cache=True)
def _coupled_block(rng, x0, times, t_max, dt_base, zf, of, dt_floor, cap, out_x, out_y, out_start, out_expl, out_status):
    jumps = np.empty(cap)
    for i in range(out_expl.size):
        y0, n, e, s, _ = _coupled_path(rng, x0, times, t_max, dt_base, zf, of, dt_floor, cap, out_x[i], out_y[i], jumps)
        out_start[i] = y0
        out_expl[i] = e
        out_status[i] = s


@njit(cache=True)
def _wf_path(rng, x0, times, t_max, dt_base, of, dt_floor, eps, out_x):
    """One reflected WF path; returns (absorption time or inf, status)."""
    x = x0
    t = 0.0
    absorbed = x >= 1.0 - eps
    m = times.size
    j = 0
    while j < m and times[j] <= 0.0:
        out_x[j] = 1.0 if absorbed else x
        j += 1
    if absorbed:
        out_x[j:] = 1.0
        return 0.0, _OK
    while t < t_max:
        h = max(min(dt_base, (1.0 - x) / of), dt_floor)
        # land exactly on the next sample time
        stop = t_max if j >= m else min(times[j], t_max)
        if t + h >= stop:
            h = stop - t
        x = x + math.sqrt(2.0 * (1.0 - x * x) * h) * rng.standard_normal()
        x = abs(x)
        if x >= 1.0:
            x = 2.0 - x
        x = min(max(x, 0.0), 1.0)
        t = stop if t + h >= stop else t + h
        if not math.isfinite(x):
            out_x[j:] = np.nan
            return t, _NONFINITE
        if x >= 1.0 - eps:
            out_x[j:] = 1.0
            return t, _OK
        while j < m and times[j] <= t:
            out_x[j] = x
            j += 1
    out_x[j:] = np.nan
    return np.inf, _OK


@njit(nogil=True, cache=True)
def _wf_block(rng, x0, times, t_max, dt_base, of, dt_floor, eps, out_x, out_abs, out_status):
    for i in range(out_abs.size):
        a, s = _wf_path(rng, x0, times, t_max, dt_base, of, dt_floor, eps, out_x[i])
        out_abs[i] = a
        out_status[i] = s


# ---------------------------------------------------------------- records


@dataclass
class BirthRecord:
    """Jump times out of levels ``y_start..y_start+len-1`` and the explosion time."""

    y_start: float
    jump_times: np.ndarray
    explosion_time: float
    stream_id: tuple | None = None


@dataclass
class TrajectoryRecord:
    """A sampled path.

    ``x`` holds X at ``times``.  For coupled runs ``y_start`` and
    ``jump_times`` describe Y exactly up to ``level_cap``; for standalone
    diffusion runs they are empty and ``absorption_time`` is set.
    """

    times: np.ndarray
    x: np.ndarray
    jump_times: np.ndarray
    y_start: float = 0.0
    explosion_time: float | None = None
    absorption_time: float | None = None
    stream_id: tuple | None = None
    level_cap: int | None = None

    def y_at(self, t) -> np.ndarray:
        """Y at times ``t`` (``inf`` from the explosion on)."""
        t = np.asarray(t, dtype=float)
        y = self.y_start + np.searchsorted(self.jump_times, t, side="right").astype(float)
        if self.explosion_time is not None:
            y = np.where(t >= self.explosion_time, INF, y)
        return y

    @property
    def y(self) -> np.ndarray:
        return self.y_at(self.times)

    def check_invariants(self) -> list[str]:
        """Violated path invariants, empty when the record is valid."""
        bad = []
        x = self.x[np.isfinite(self.x)]
        if np.any((x < 0) | (x > 1)):
            bad.append("X outside [0, 1]")
        if np.any(np.diff(self.jump_times) <= 0):
            bad.append("jump times not strictly increasing")
        if self.explosion_time is not None:
            if self.jump_times.size and self.jump_times[-1] > self.explosion_time:
                bad.append("jump after explosion")
            before = self.times < self.explosion_time
            if np.any(self.x[before] >= 1.0):
                bad.append("X reached 1 before explosion")
            after = (self.times >= self.explosion_time) & np.isfinite(self.x)
            if np.any(self.x[after] != 1.0):
                bad.append("X not pinned to 1 after explosion")
        if self.absorption_time is not None and np.isfinite(self.absorption_time):
            after = self.times >= self.absorption_time
            if np.any(self.x[after] != 1.0):
                bad.append("X not pinned to 1 after absorption")
        return bad


def _default_times(config: SimConfig) -> np.ndarray:
    step = max(config.dt_base, config.t_max / 1000)
    return np.arange(0.0, config.t_max + 0.5 * step, step)


def _sample_times(times, config: SimConfig) -> np.ndarray:
    if times is None:
        return _default_times(config)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if times.ndim != 1 or np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("sample times must be a nondecreasing sequence of nonnegative values")
    return times


def _check_x0(x0: float) -> float:
    x0 = float(x0)
    if not 0.0 <= x0 <= 1.0:
        raise ValueError(f"x0 must lie in [0, 1], got {x0}")
    return x0


def simulate_birth(y_start: int, rng_stream: np.random.Generator, level_cap: int = 256) -> BirthRecord:
    """Pure birth path from ``y_start``: exact exponential holding times up to
    ``level_cap`` and a moment-matched gamma draw for the rest."""
    if y_start < 0:
        raise ValueError("y_start must be >= 0")
    jumps = np.empty(max(level_cap, 1))
    n, e = _birth_clock(rng_stream, float(y_start), level_cap, jumps)
    return BirthRecord(float(y_start), jumps[:n].copy(), float(e))


def simulate_coupled(
    x0: float,
    config: SimConfig,
    rng_stream: np.random.Generator,
    sample_times=None,
    stream_id: tuple | None = None,
) -> TrajectoryRecord:
    """One path of the coupled process started from ``K(x0, .)``."""
    x0 = _check_x0(x0)
    times = _sample_times(sample_times, config)
    r = config.substep_rule
    out_x = np.empty(times.size)
    out_y = np.empty(times.size)
    jumps = np.empty(config.level_cap)
    y0, n, e, status, t_fail = _coupled_path(
        rng_stream, x0, times, config.t_max, config.dt_base,
        r.zero_factor, r.one_factor, r.dt_floor, config.level_cap, out_x, out_y, jumps,
    )
    if status != _OK:
        raise NumericFailure(f"non-finite state at t={t_fail:.6g} (x0={x0}, stream {stream_id})")
    return TrajectoryRecord(
        times=times,
        x=out_x,
        jump_times=jumps[:n].copy(),
        y_start=float(y0),
        explosion_time=float(e),
        absorption_time=float(e),
        stream_id=stream_id,
        level_cap=config.level_cap,
    )


def simulate_wf(
    x0: float,
    config: SimConfig,
    rng_stream: np.random.Generator,
    sample_times=None,
    stream_id: tuple | None = None,
) -> TrajectoryRecord:
    """One path of the reflected Wright-Fisher diffusion, absorbed at ``1 - boundary_eps``."""
    x0 = _check_x0(x0)
    times = _sample_times(sample_times, config)
    r = config.substep_rule
    out_x = np.empty(times.size)
    a, status = _wf_path(
        rng_stream, x0, times, config.t_max, config.dt_base, r.one_factor, r.dt_floor, config.boundary_eps, out_x
    )
    if status != _OK:
        raise NumericFailure(f"non-finite state at t={a:.6g} (x0={x0}, stream {stream_id})")
    return TrajectoryRecord(
        times=times, x=out_x, jump_times=np.empty(0), absorption_time=float(a), stream_id=stream_id
    )


# ---------------------------------------------------------------- ensembles


@dataclass
class Ensemble:
    """Ensemble output; row ``i`` is path ``i`` of the run."""

    kind: str
    config: SimConfig
    x0: float | None
    times: np.ndarray
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    y_start: np.ndarray | None = None
    event_time: np.ndarray | None = None
    failed: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.event_time.size

    def stream_id(self, i: int) -> tuple:
        b, off = divmod(i, self.config.block_size)
        return (self.config.master_seed, b, off)

    def check_invariants(self) -> int:
        """Number of paths violating a sampled-path invariant."""
        if self.x is None:
            return 0
        x = np.where(np.isnan(self.x), 0.5, self.x)
        bad = np.any((x < 0) | (x > 1), axis=1)
        if self.y is not None:
            y = np.where(np.isfinite(self.y), self.y, np.finfo(float).max)
            bad |= np.any(np.diff(y, axis=1) < 0, axis=1)
            before = self.times[None, :] < self.event_time[:, None]
            bad |= np.any(before & (self.x >= 1.0), axis=1)
            bad |= np.any(~before & (self.x != 1.0) & np.isfinite(self.x), axis=1)
            mismatch = (np.isinf(self.y) != ~before) & ~np.isnan(self.y)
            bad |= np.any(mismatch, axis=1)
        return int(bad.sum())


def _blocks(config: SimConfig, n_paths: int):
    n_blocks = -(-n_paths // config.block_size)
    for b in range(n_blocks):
        yield b, min(config.block_size, n_paths - b * config.block_size)


def _map_blocks(fn, config: SimConfig, n_paths: int, workers: int):
    items = list(_blocks(config, n_paths))
    if workers <= 1:
        for b, m in items:
            yield fn(b, m)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # map yields in submission order
        yield from pool.map(lambda bm: fn(*bm), items)


def birth_ensemble(config: SimConfig, y_start: int = 0, x_mix: float | None = None, workers: int = 1) -> Ensemble:
    """Explosion times of ``config.n_paths`` birth paths.

    Paths start at ``y_start``, or at a draw from ``K(x_mix, .)`` when
    ``x_mix`` is given; the latter is the law of the absorption time from
    ``x_mix``.
    """
    if y_start < 0:
        raise ValueError("y_start must be >= 0")
    mix = -1.0 if x_mix is None else _check_x0(x_mix)

    def run(b, m):
        starts = np.empty(m)
        expl = np.empty(m)
        _birth_block(block_rng(config.master_seed, b), float(y_start), mix, config.level_cap, starts, expl)
        return starts, expl

    parts = list(_map_blocks(run, config, config.n_paths, workers))
    return Ensemble(
        kind="birth",
        config=config,
        x0=x_mix,
        times=np.empty(0),
        y_start=np.concatenate([p[0] for p in parts]),
        event_time=np.concatenate([p[1] for p in parts]),
        failed=np.zeros(config.n_paths, dtype=bool),
    )


def coupled_blocks(x0: float, config: SimConfig, sample_times, n_paths: int | None = None, workers: int = 1):
    """Yield ``(x, y, y_start, explosion, failed)`` block by block, in order."""
    x0 = _check_x0(x0)
    times = _sample_times(sample_times, config)
    r = config.substep_rule
    n_paths = config.n_paths if n_paths is None else n_paths

    def run(b, m):
        x = np.empty((m, times.size))
        y = np.empty((m, times.size))
        starts = np.empty(m)
        expl = np.empty(m)
        status = np.empty(m, dtype=np.int64)
        _coupled_block(
            block_rng(config.master_seed, b), x0, times, config.t_max, config.dt_base,
            r.zero_factor, r.one_factor, r.dt_floor, config.level_cap, x, y, starts, expl, status,
        )
        return x, y, starts, expl, status != _OK

    yield from _map_blocks(run, config, n_paths, workers)


def coupled_ensemble(x0: float, config: SimConfig, sample_times, workers: int = 1) -> Ensemble:
    """``config.n_paths`` coupled paths sampled at ``sample_times``."""
    times = _sample_times(sample_times, config)
    parts = list(coupled_blocks(x0, config, times, workers=workers))
    return Ensemble(
        kind="coupled",
        config=config,
        x0=float(x0),
        times=times,
        x=np.concatenate([p[0] for p in parts]),
        y=np.concatenate([p[1] for p in parts]),
        y_start=np.concatenate([p[2] for p in parts]),
        event_time=np.concatenate([p[3] for p in parts]),
        failed=np.concatenate([p[4] for p in parts]),
    )


def wf_ensemble(x0: float, config: SimConfig, sample_times=(), workers: int = 1) -> Ensemble:
    """``config.n_paths`` reflected WF paths; ``event_time`` is the absorption time."""
    x0 = _check_x0(x0)
    times = _sample_times(sample_times, config)
    r = config.substep_rule

    def run(b, m):
        x = np.empty((m, times.size))
        a = np.empty(m)
        status = np.empty(m, dtype=np.int64)
        _wf_block(
            block_rng(config.master_seed, b), x0, times, config.t_max, config.dt_base,
            r.one_factor, r.dt_floor, config.boundary_eps, x, a, status,
        )
        return x, a, status != _OK

    parts = list(_map_blocks(run, config, config.n_paths, workers))
    return Ensemble(
        kind="wf",
        config=config,
        x0=x0,
        times=times,
        x=np.concatenate([p[0] for p in parts]),
        event_time=np.concatenate([p[1] for p in parts]),
        failed=np.concatenate([p[2] for p in parts]),
    )


# ---------------------------------------------------------------- averaging


def _K_row(x: np.ndarray, n_levels: int) -> np.ndarray:
    """``K(x, y)`` for ``y < n_levels`` plus the mass ``x^(2 n_levels)`` of the rest."""
    u = x * x
    powers = u[:, None] ** np.arange(n_levels + 1)[None, :]
    out = np.empty((x.size, n_levels + 1))
    out[:, :n_levels] = (1.0 - u)[:, None] * powers[:, :n_levels]
    out[:, n_levels] = powers[:, n_levels]
    return out


@dataclass
class AveragingReport:
    """Per-time comparison of ``Y_t`` with the ``K(X_t, .)`` average."""

    times: np.ndarray
    x0: float
    n_paths: int
    n_levels: int
    total_variation: np.ndarray
    p0_empirical: np.ndarray
    p0_exact: np.ndarray
    p0_se: np.ndarray
    cross_max_z: np.ndarray
    tv_tol: float = 0.02

    @property
    def p0_z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (self.p0_empirical - self.p0_exact) / self.p0_se
        return np.where(self.p0_se > 0, z, np.where(self.p0_empirical == self.p0_exact, 0.0, np.inf))

    @property
    def passed(self) -> bool:
        return bool(np.all(self.total_variation <= self.tv_tol) and np.all(np.abs(self.p0_z) <= 3.0))

    def to_json(self) -> dict:
        return {
            "times": self.times.tolist(),
            "x0": self.x0,
            "n_paths": self.n_paths,
            "n_levels": self.n_levels,
            "total_variation": self.total_variation.tolist(),
            "p0_empirical": self.p0_empirical.tolist(),
            "p0_exact": self.p0_exact.tolist(),
            "p0_se": self.p0_se.tolist(),
            "p0_z": self.p0_z.tolist(),
            "cross_moment_max_abs_z": self.cross_max_z.tolist(),
            "tv_tol": self.tv_tol,
            "passed": self.passed,
        }


def averaging_statistics(x: np.ndarray, y: np.ndarray, t_list, x0: float, n_levels: int = 30, tv_tol: float = 0.02):
    """Averaging statistics from sampled ``(X_t, Y_t)`` columns (one per time)."""
    t_list = np.asarray(t_list, dtype=float)
    n = x.shape[0]
    tv, p0, p0e, p0se, cz = [], [], [], [], []
    for j, t in enumerate(t_list):
        xs, ys = x[:, j], y[:, j]
        k = _K_row(xs, n_levels)
        hit = np.zeros_like(k)
        finite = np.isfinite(ys) & (ys < n_levels)
        hit[np.flatnonzero(finite), ys[finite].astype(int)] = 1.0
        hit[~finite, n_levels] = 1.0
        tv.append(0.5 * np.abs(hit.mean(axis=0) - k.mean(axis=0)).sum())
        exact = (1.0 - x0 * x0) * math.exp(-2.0 * t)
        p = hit[:, 0].mean()
        p0.append(p)
        p0e.append(exact)
        p0se.append(math.sqrt(max(exact * (1.0 - exact), 0.0) / n))
        zs = []
        # z-scores of levels with few expected visits are not approximately normal
        common = k.mean(axis=0) * n >= 20
        for g in (np.ones_like(xs), xs, xs * xs):
            d = g[:, None] * (hit - k)
            se = d.std(axis=0, ddof=1) / math.sqrt(n)
            m = d.mean(axis=0)
            ok = (se > 0) & common
            zs.append(np.max(np.abs(m[ok] / se[ok])) if ok.any() else 0.0)
        cz.append(max(zs))
    return AveragingReport(
        times=t_list,
        x0=float(x0),
        n_paths=n,
        n_levels=n_levels,
        total_variation=np.array(tv),
        p0_empirical=np.array(p0),
        p0_exact=np.array(p0e),
        p0_se=np.array(p0se),
        cross_max_z=np.array(cz),
        tv_tol=tv_tol,
    )


def check_averaging(
    t_list,
    x0: float,
    n_paths: int = 100_000,
    config: SimConfig | None = None,
    n_levels: int = 30,
    tv_tol: float = 0.02,
    workers: int = 1,
) -> AveragingReport:
    """Compare the law of ``Y_t`` with the ensemble mean of ``K(X_t, .)``.

    Levels ``0..n_levels-1`` are compared one by one and the rest (including
    ``inf``) as a single bucket.  Cross-moments ``E[g(X_t) (1{Y_t=y} - K(X_t, y))]``
    for ``g = 1, x, x^2`` are reported as their largest absolute z-score over
    buckets with at least 20 expected visits, and
    ``P(Y_t = 0)`` is compared with ``(1 - x0^2) e^{-2t}``.
    """
    t_list = np.atleast_1d(np.asarray(t_list, dtype=float))
    if t_list.size == 0:
        raise ValueError("t_list must be nonempty")
    if n_paths < 10_000:
        raise ValueError("n_paths must be >= 1e4")
    config = SimConfig() if config is None else config
    config = SimConfig.from_dict({**config.to_dict(), "n_paths": n_paths})
    order = np.argsort(t_list, kind="stable")
    ens = coupled_ensemble(x0, config, t_list[order], workers=workers)
    if ens.failed.any():
        raise NumericFailure(f"{int(ens.failed.sum())} paths hit a non-finite state")
    inv = np.argsort(order)
    return averaging_statistics(ens.x[:, inv], ens.y[:, inv], t_list, x0, n_levels, tv_tol)


# ---------------------------------------------------------------- drift sign


@dataclass
class DriftSignReport:
    """Mean one-interval increments of X at fixed level, per side of ``x_y``.

    ``z`` is signed so that positive values point towards ``x_y``.
    """

    levels: tuple
    margin: float
    h: float
    sides: list
    bins: list
    z_threshold: float = 3.0

    @property
    def passed(self) -> bool:
        if any(b["z"] <= -self.z_threshold for b in self.bins):
            return False
        for y in self.levels:
            rows = [s for s in self.sides if s["y"] == y and s["count"] > 0]
            if not rows or any(s["z"] < self.z_threshold for s in rows):
                return False
        return True

    def to_json(self) -> dict:
        return {
            "levels": list(self.levels),
            "margin": self.margin,
            "h": self.h,
            "z_threshold": self.z_threshold,
            "sides": self.sides,
            "bins": self.bins,
            "passed": self.passed,
        }


class _DriftAccumulator:
    def __init__(self, levels, edges):
        self.levels = tuple(levels)
        self.edges = edges
        shape = (len(self.levels), edges.size - 1)
        self.n = np.zeros(shape)
        self.s = np.zeros(shape)
        self.s2 = np.zeros(shape)

    def add(self, x: np.ndarray, y: np.ndarray):
        x0, x1 = x[:, :-1], x[:, 1:]
        y0, y1 = y[:, :-1], y[:, 1:]
        keep = (y0 == y1) & np.isfinite(x0) & np.isfinite(x1) & (x1 < 1.0)
        for i, lvl in enumerate(self.levels):
            sel = keep & (y0 == lvl)
            xs = x0[sel]
            dx = (x1 - x0)[sel]
            idx = np.clip(np.searchsorted(self.edges, xs, side="right") - 1, 0, self.edges.size - 2)
            self.n[i] += np.bincount(idx, minlength=self.edges.size - 1)
            self.s[i] += np.bincount(idx, weights=dx, minlength=self.edges.size - 1)
            self.s2[i] += np.bincount(idx, weights=dx * dx, minlength=self.edges.size - 1)


def _mean_z(n, s, s2, sign):
    if n < 2:
        return {"count": int(n), "mean": float("nan"), "se": float("nan"), "z": float("nan")}
    mean = s / n
    var = max(s2 / n - mean * mean, 0.0) * n / (n - 1)
    se = math.sqrt(var / n)
    z = sign * mean / se if se > 0 else (math.inf if sign * mean > 0 else -math.inf)
    return {"count": int(n), "mean": mean, "se": se, "z": z}


def drift_sign_check(
    levels=(0, 1, 2, 3),
    x0_list=(0.0, 0.5, 0.9),
    n_paths: int = 20_000,
    h: float = 1e-3,
    t_end: float = 0.5,
    margin: float = 0.1,
    bin_width: float = 0.05,
    min_bin_count: int = 200,
    config: SimConfig | None = None,
    workers: int = 1,
) -> DriftSignReport:
    """Sign of the mean increment of X over ``h`` given ``Y = y`` on both
    sides of ``x_y = sqrt(y / (y + 1))``.

    Increments are pooled over ``x <= x_y - margin`` and ``x >= x_y + margin``
    and also binned by ``bin_width``; bins with fewer than ``min_bin_count``
    increments are not reported.  Paths are started from each ``x0`` in
    ``x0_list`` to populate all regions.
    """
    config = SimConfig() if config is None else config
    times = np.arange(0.0, t_end + 0.5 * h, h)
    edges = np.linspace(0.0, 1.0, int(round(1.0 / bin_width)) + 1)
    acc = _DriftAccumulator(levels, edges)
    for i, x0 in enumerate(x0_list):
        cfg = SimConfig.from_dict({**config.to_dict(), "master_seed": (config.master_seed + i) % 2**64})
        for x, y, _, _, failed in coupled_blocks(x0, cfg, times, n_paths=n_paths, workers=workers):
            acc.add(x[~failed], y[~failed])
    return _drift_report(acc, margin, h, min_bin_count)


def drift_sign_from_samples(
    x: np.ndarray,
    y: np.ndarray,
    h: float,
    levels=(0, 1, 2, 3),
    margin: float = 0.1,
    bin_width: float = 0.05,
    min_bin_count: int = 200,
) -> DriftSignReport:
    """Drift-sign statistics from sampled paths on a grid of spacing ``h``."""
    edges = np.linspace(0.0, 1.0, int(round(1.0 / bin_width)) + 1)
    acc = _DriftAccumulator(levels, edges)
    acc.add(np.asarray(x, float), np.asarray(y, float))
    return _drift_report(acc, margin, h, min_bin_count)


def _drift_report(acc: _DriftAccumulator, margin: float, h: float, min_bin_count: int) -> DriftSignReport:
    edges = acc.edges
    centres = 0.5 * (edges[:-1] + edges[1:])
    sides, bins = [], []
    for i, y in enumerate(acc.levels):
        xe = math.sqrt(y / (y + 1.0))
        below = edges[1:] <= xe - margin + 1e-12
        above = edges[:-1] >= xe + margin - 1e-12
        for name, mask, sign in (("below", below, 1.0), ("above", above, -1.0)):
            if not mask.any():
                continue
            row = _mean_z(acc.n[i, mask].sum(), acc.s[i, mask].sum(), acc.s2[i, mask].sum(), sign)
            sides.append({"y": int(y), "x_eq": xe, "side": name, **row})
            for j in np.flatnonzero(mask):
                if acc.n[i, j] >= min_bin_count:
                    b = _mean_z(acc.n[i, j], acc.s[i, j], acc.s2[i, j], sign)
                    bins.append({"y": int(y), "x": float(centres[j]), **b})
    return DriftSignReport(levels=tuple(int(v) for v in acc.levels), margin=margin, h=h, sides=sides, bins=bins)


# ---------------------------------------------------------------- output


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    if math.isnan(v):
        return "nan"
    return repr(float(v))


def write_trajectories_csv(path, ens: Ensemble) -> Path:
    """Columns ``path_id,t,x,y``; ``y`` is empty for WF runs."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "t", "x", "y"])
        for i in range(ens.x.shape[0]):
            for j, t in enumerate(ens.times):
                y = "" if ens.y is None else _fmt(ens.y[i, j])
                w.writerow([i, _fmt(t), _fmt(ens.x[i, j]), y])
    return path


def write_absorption_csv(path, times: np.ndarray) -> Path:
    """Columns ``path_id,time``."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "time"])
        for i, t in enumerate(np.asarray(times, dtype=float)):
            w.writerow([i, _fmt(t)])
    return path


def ensemble_summary(ens: Ensemble) -> dict:
    """Moments and a histogram of the event times, plus moments of X^2."""
    ev = ens.event_time[np.isfinite(ens.event_time)]
    out = {
        "kind": ens.kind,
        "x0": ens.x0,
        "n_paths": int(ens.n_paths),
        "failed_paths": int(ens.failed.sum()),
        "config": ens.config.to_dict(),
        "event_time": {
            "finite": int(ev.size),
            "mean": float(ev.mean()) if ev.size else None,
            "var": float(ev.var(ddof=1)) if ev.size > 1 else None,
            "se": float(ev.std(ddof=1) / math.sqrt(ev.size)) if ev.size > 1 else None,
        },
    }
    if ev.size:
        counts, edges = np.histogram(ev, bins=50)
        out["event_time"]["histogram"] = {"edges": edges.tolist(), "counts": counts.tolist()}
    if ens.x is not None and ens.times.size:
        x2 = ens.x**2
        ok = np.isfinite(x2)
        out["x2_moments"] = [
            {
                "t": float(t),
                "mean": float(x2[ok[:, j], j].mean()),
                "se": float(x2[ok[:, j], j].std(ddof=1) / math.sqrt(max(ok[:, j].sum(), 1))),
            }
            for j, t in enumerate(ens.times)
            if ok[:, j].sum() > 1
        ]
    return out


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
    return path
