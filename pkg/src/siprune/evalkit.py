"""Measurement: pruning distortion, sparsity accounting, histogram export,
and the with/without-induction pipeline comparison.

All delimited output is UTF-8 CSV with a header row, '.' decimals and LF
line endings; figure rendering lives in :mod:`siprune.reporting`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import importance, masking
from .core import as_matrix
from .distribution import (OptConfig, Transforms, absorb,
                           identity_transforms, optimize_distribution,
                           refresh_masks)
from .errors import ConfigError, DomainError, ShapeError
from .feature import FeatureLossConfig, optimize_features
from .model import Linear, Model, forward, layer_inputs


@dataclass
class DistortionReport:
    layer_name: str
    frob: float
    rel: float
    per_sample: np.ndarray


@dataclass
class SparsityReport:
    layer_name: str
    zeros: int
    total: int
    rate: float
    pattern_ok: bool


def distortion(w, w_hat, calib) -> DistortionReport:
    """Output distortion (W - W_hat) X over a calibration batch."""
    w = as_matrix(w, "w")
    w_hat = as_matrix(w_hat, "w_hat")
    x = as_matrix(calib, "calib")
    if w.shape != w_hat.shape:
        raise ShapeError(f"weight shapes differ: {w.shape} vs {w_hat.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"calib has {x.shape[0]} rows, weights expect {w.shape[1]}")
    dy = (w - w_hat) @ x
    per_sample = np.sqrt(np.sum(dy * dy, axis=0))
    frob = float(np.sqrt(np.sum(dy * dy)))
    y_norm = float(np.linalg.norm(w @ x))
    rel = 0.0 if y_norm == 0.0 else frob / y_norm
    return DistortionReport("", frob, rel, per_sample)


def sparsity_report(name: str, mask, pattern) -> SparsityReport:
    mask = as_matrix(mask, "mask")
    zeros = int(np.sum(mask == 0.0))
    total = mask.size
    return SparsityReport(name, zeros, total, zeros / total,
                          masking.check_mask(mask, pattern))


def score_histogram(scores, bins: int) -> list[tuple[float, float, int]]:
    """Equal-width histogram rows (bin_low, bin_high, count) over [min, max].

    Constant scores collapse to a single bin holding every entry; the
    maximum value is closed on the right.
    """
    scores = as_matrix(scores, "scores")
    if bins < 1:
        raise DomainError(f"bins must be >= 1, got {bins}")
    flat = scores.ravel()
    lo, hi = float(flat.min()), float(flat.max())
    if lo == hi:
        return [(lo, hi, flat.size)]
    counts, edges = np.histogram(flat, bins=bins, range=(lo, hi))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i]))
            for i in range(bins)]


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


# --- induction pipeline --------------------------------------------------------

STAGES = ("off", "distribution", "feature", "both")


@dataclass
class SiConfig:
    stage: str = "distribution"
    feature: FeatureLossConfig = field(default_factory=FeatureLossConfig)
    opt: OptConfig = field(default_factory=OptConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown si stage {self.stage!r}, expected {STAGES}")


def run_induction(model: Model, calib, pattern, si: SiConfig):
    """Run the configured induction stages; returns (transforms, traces)."""
    traces: dict[str, list] = {}
    transforms: Transforms = identity_transforms(model)
    if si.stage in ("distribution", "both"):
        res = optimize_distribution(model, calib, pattern, si.opt)
        transforms = res.transforms
        traces["distribution"] = res.trace
    if si.stage in ("feature", "both"):
        init = transforms if si.stage == "both" else None
        res = optimize_features(model, calib, pattern, cfg=si.feature,
                                opt_cfg=si.opt, init_transforms=init)
        transforms = res.transforms
        traces["feature"] = res.trace
    return transforms, traces


def _projections(model: Model):
    """(report_name, weight, input_key) per prunable projection."""
    for layer in model.layers:
        if isinstance(layer, Linear):
            yield layer.name, layer.weight, layer.name
        else:
            yield layer.name + "#q", layer.wq, layer.name
            yield layer.name + "#k", layer.wk, layer.name


def baseline_masks(model: Model, d_base: dict, pattern,
                   metric: str) -> dict[str, np.ndarray]:
    if metric not in importance.METRICS:
        raise ConfigError(f"unknown metric {metric!r}, expected {importance.METRICS}")
    masks = {}
    for name, w, input_key in _projections(model):
        if metric == "magnitude":
            scores = importance.score_magnitude(w)
        else:
            scores = importance.score_activation(w, d_base[input_key])
        masks[name] = masking.make_mask(scores, pattern)
    return masks


def si_masks(model: Model, transforms: Transforms, d_base: dict, pattern,
             metric: str) -> dict[str, np.ndarray]:
    if metric == "magnitude":
        masks = {}
        for layer in model.layers:
            t = transforms[layer.name]
            if isinstance(layer, Linear):
                masks[layer.name] = masking.make_mask(
                    importance.score_magnitude(layer.weight * t.s[None, :]),
                    pattern)
            else:
                masks[layer.name + "#q"] = masking.make_mask(
                    importance.score_magnitude(layer.wq * t.s_a[:, None]), pattern)
                masks[layer.name + "#k"] = masking.make_mask(
                    importance.score_magnitude(layer.wk / t.s_a[:, None]), pattern)
        return masks
    # wanda and wanda-fast share the scoring rule; "wanda-fast" refreshes the
    # cached diagonals in O(d_in) instead of touching activations again.
    return refresh_masks(model, transforms, d_base, pattern)


def compare_pipelines(model: Model, calib, pattern, metric: str,
                      si: SiConfig | None = None):
    """Prune with and without induction, report per-layer distortion + totals.

    Distortion of the induced pipeline is measured in each layer's original
    coordinates (the deployed residual (W o (1-M))(X - delta), and the scaled
    Q/K residuals), so the two pipelines are directly comparable. Also checks
    that the absorbed dense model still matches the original.
    """
    si = si or SiConfig()
    x = as_matrix(calib, "calib")
    inputs = layer_inputs(model, x)
    d_base = {name: importance.hessian_diag(a) for name, a in inputs.items()}

    base_masks = baseline_masks(model, d_base, pattern, metric)
    if si.stage == "off":
        transforms = identity_transforms(model)
        traces = {}
    else:
        transforms, traces = run_induction(model, x, pattern, si)
    induced_masks = si_masks(model, transforms, d_base, pattern, metric)

    rows = []
    sq_base = 0.0
    sq_si = 0.0
    for name, w, input_key in _projections(model):
        x_l = inputs[input_key]
        rep0 = distortion(w, w * base_masks[name], x_l)
        layer = model.layer(input_key)
        t = transforms[input_key]
        if isinstance(layer, Linear):
            x_si = x_l - t.delta[:, None]
            w_si = w
        else:
            x_si = x_l
            s_a = t.s_a
            w_si = w * (s_a[:, None] if name.endswith("#q") else 1.0 / s_a[:, None])
        rep1 = distortion(w_si, w_si * induced_masks[name], x_si)
        rows.append({"layer": name, "frob_no_si": rep0.frob,
                     "frob_si": rep1.frob, "rel_no_si": rep0.rel,
                     "rel_si": rep1.rel})
        sq_base += rep0.frob ** 2
        sq_si += rep1.frob ** 2

    total_base = float(np.sqrt(sq_base))
    total_si = float(np.sqrt(sq_si))
    ratio = 1.0 if total_base == 0.0 and total_si == 0.0 else \
        (float("inf") if total_base == 0.0 else total_si / total_base)

    absorbed = absorb(model, transforms)
    y0 = forward(model, x)
    y1 = forward(absorbed, x)
    denom = float(np.max(np.abs(y0)))
    absorb_rel_err = 0.0 if denom == 0.0 else float(np.max(np.abs(y0 - y1))) / denom

    return {
        "rows": rows,
        "totals": {"frob_no_si": total_base, "frob_si": total_si, "ratio": ratio},
        "absorb_rel_err": absorb_rel_err,
        "transforms": transforms,
        "traces": traces,
        "masks_no_si": base_masks,
        "masks_si": induced_masks,
    }
