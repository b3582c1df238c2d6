"""Scaling-law analysis.

Average evaluation return as a function of training steps is fitted with
a logistic curve per model (training loss is deliberately not used as the
selection signal). A compute envelope picks the best model at each FLOP
budget, and power laws for parameters and tokens versus compute are
fitted on the envelope by ordinary least squares in log-log space.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit
from scipy.special import expit


def logistic(steps, a, k, n0, b):
    """a / (1 + exp(-k (n - n0))) + b, evaluated stably."""
    return a * expit(k * (np.asarray(steps, dtype=np.float64) - n0)) + b


@dataclass
class ReturnProfile:
    """Logistic fit of average return against training steps for one model."""

    a: float
    k: float
    n0: float
    b: float
    flops_per_step: float
    model_params: float
    tokens_per_step: float = 0.0
    name: str = ""
    degenerate: bool = False

    def predict(self, steps):
        return logistic(steps, self.a, self.k, self.n0, self.b)

    def predict_at_flops(self, flops):
        return self.predict(np.asarray(flops, dtype=np.float64) / self.flops_per_step)


def fit_return_profile(points, flops_per_step: float = 1.0,
                       model_params: float = 1.0, tokens_per_step: float = 0.0,
                       name: str = "") -> ReturnProfile:
    """Nonlinear least squares for the logistic return profile.

    Uses damped least squares with the documented deterministic
    initialization: a = max - min, b = min, n0 = median step,
    k = 4 / step range. Constant data is flagged degenerate and fitted as
    a flat curve.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 4:
        raise ValueError("need at least 4 (step, avg_return) points")
    steps, returns = pts[:, 0], pts[:, 1]
    spread = float(returns.max() - returns.min())
    step_range = float(steps.max() - steps.min())
    if step_range <= 0:
        raise ValueError("steps must not all coincide")
    common = dict(flops_per_step=flops_per_step, model_params=model_params,
                  tokens_per_step=tokens_per_step, name=name)
    if spread == 0.0:
        return ReturnProfile(a=0.0, k=4.0 / step_range, n0=float(np.median(steps)),
                             b=float(returns.mean()), degenerate=True, **common)
    p0 = [spread, 4.0 / step_range, float(np.median(steps)), float(returns.min())]
    popt, _ = curve_fit(logistic, steps, returns, p0=p0, method="lm", maxfev=20_000)
    return ReturnProfile(a=float(popt[0]), k=float(popt[1]), n0=float(popt[2]),
                         b=float(popt[3]), **common)


@dataclass(frozen=True)
class EnvelopePoint:
    flops: float
    best_return: float
    model_name: str
    model_params: float
    tokens: float
    steps: float


def envelope(profiles: list[ReturnProfile], flop_range: tuple[float, float],
             n_points: int = 100) -> list[EnvelopePoint]:
    """Best predicted return per compute budget on a log-spaced grid.

    At each budget the winning model's parameter count and tokens consumed
    (steps at that budget times tokens per step) are recorded.
    """
    if not profiles:
        raise ValueError("need at least one profile")
    lo, hi = flop_range
    if not 0 < lo < hi:
        raise ValueError("flop range must be positive and increasing")
    grid = np.logspace(np.log10(lo), np.log10(hi), n_points)
    out = []
    for flops in grid:
        returns = [p.predict_at_flops(flops) for p in profiles]
        best = int(np.argmax(returns))
        prof = profiles[best]
        steps = flops / prof.flops_per_step
        out.append(EnvelopePoint(
            flops=float(flops), best_return=float(returns[best]),
            model_name=prof.name or str(best), model_params=prof.model_params,
            tokens=steps * prof.tokens_per_step, steps=steps))
    return out


@dataclass
class PowerLawFit:
    """N(C) = N0 * C^a and D(C) = D0 * C^b fitted in log-log space."""

    n0: float
    a_exp: float
    d0: float
    b_exp: float
    n_residual: float
    d_residual: float

    def predict_params(self, flops):
        return self.n0 * np.asarray(flops, dtype=np.float64) ** self.a_exp

    def predict_tokens(self, flops):
        return self.d0 * np.asarray(flops, dtype=np.float64) ** self.b_exp

    def to_dict(self) -> dict:
        return {"N0": self.n0, "a": self.a_exp, "D0": self.d0, "b": self.b_exp,
                "n_residual": self.n_residual, "d_residual": self.d_residual}


def _loglog_ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = float(np.sqrt(np.mean((ly - (slope * lx + intercept)) ** 2)))
    return float(np.exp(intercept)), float(slope), resid


def fit_power_laws(points) -> PowerLawFit:
    """Fit both power laws from (compute, params, tokens) triples."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("need (C, N, D) triples")
    c, n, d = pts[:, 0], pts[:, 1], pts[:, 2]
    if np.any(pts <= 0):
        raise ValueError("compute, parameter and token values must be positive")
    if np.unique(c).size < 2:
        raise ValueError("need at least 2 distinct compute values")
    n0, a_exp, n_res = _loglog_ols(c, n)
    d0, b_exp, d_res = _loglog_ols(c, d)
    return PowerLawFit(n0=n0, a_exp=a_exp, d0=d0, b_exp=b_exp,
                       n_residual=n_res, d_residual=d_res)


@dataclass
class IsoReturnGrid:
    """Predicted-return surface over (parameters, FLOPs) with level sets."""

    params_axis: np.ndarray          # (P,)
    flops_axis: np.ndarray           # (F,)
    values: np.ndarray               # (P, F)
    extrapolated: np.ndarray         # (P, F) bool
    contours: dict[float, list[tuple[float, float]]] = field(default_factory=dict)


def iso_return_grid(profiles: list[ReturnProfile], param_range: tuple[float, float],
                    flop_range: tuple[float, float], levels: list[float],
                    n_params: int = 64, n_flops: int = 64) -> IsoReturnGrid:
    """Interpolate predicted returns across profiles over a log-log grid.

    Interpolation is linear in log(parameter count) between the fitted
    profiles at each compute value; cells outside the fitted parameter
    range are flagged extrapolated. Level sets are emitted as plot-ready
    (params, flops) polylines found by column-wise crossings.
    """
    if not profiles:
        raise ValueError("need at least one profile")
    order = np.argsort([p.model_params for p in profiles])
    profs = [profiles[i] for i in order]
    prof_params = np.array([p.model_params for p in profs])
    params_axis = np.logspace(*np.log10(param_range), n_params)
    flops_axis = np.logspace(*np.log10(flop_range), n_flops)
    per_profile = np.stack([p.predict_at_flops(flops_axis) for p in profs])  # (M, F)
    log_pp = np.log(prof_params)
    values = np.empty((n_params, n_flops))
    for i, p in enumerate(params_axis):
        lp = np.log(p)
        if len(profs) == 1:
            values[i] = per_profile[0]
        else:
            j = np.clip(np.searchsorted(log_pp, lp) - 1, 0, len(profs) - 2)
            t = (lp - log_pp[j]) / (log_pp[j + 1] - log_pp[j])
            t = np.clip(t, 0.0, 1.0)
            values[i] = (1 - t) * per_profile[j] + t * per_profile[j + 1]
    extrapolated = ((params_axis < prof_params.min()) |
                    (params_axis > prof_params.max()))[:, None].repeat(n_flops, axis=1)

    contours: dict[float, list[tuple[float, float]]] = {}
    log_f = np.log(flops_axis)
    for level in levels:
        pts: list[tuple[float, float]] = []
        for i, p in enumerate(params_axis):
            row = values[i] - level
            sign_change = np.where(np.diff(np.signbit(row)))[0]
            for j in sign_change:
                t = row[j] / (row[j] - row[j + 1])
                lf = log_f[j] + t * (log_f[j + 1] - log_f[j])
                pts.append((float(p), float(np.exp(lf))))
        contours[level] = pts
    return IsoReturnGrid(params_axis=params_axis, flops_axis=flops_axis,
                         values=values, extrapolated=extrapolated,
                         contours=contours)


def read_profile_csv(path: str) -> np.ndarray:
    """Load a ``step,avg_return`` CSV into an (n, 2) array."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if [h.strip() for h in header] != ["step", "avg_return"]:
            raise ValueError(f"{path}: expected header 'step,avg_return'")
        rows = [(float(r[0]), float(r[1])) for r in reader if r]
    return np.asarray(rows)


def load_profiles_dir(directory: str) -> list[ReturnProfile]:
    """Fit one profile per CSV in a directory using its manifest.

    ``manifest.json`` maps model name to params, flops_per_step and
    optionally tokens_per_step; each model has ``<name>.csv``.
    """
    manifest_path = os.path.join(directory, "manifest.json")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    profiles = []
    for name, meta in sorted(manifest.items()):
        pts = read_profile_csv(os.path.join(directory, f"{name}.csv"))
        profiles.append(fit_return_profile(
            pts, flops_per_step=float(meta["flops_per_step"]),
            model_params=float(meta["params"]),
            tokens_per_step=float(meta.get("tokens_per_step", 0.0)), name=name))
    return profiles
