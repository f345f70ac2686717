"""Distribution-level sparsity induction.

Per-channel scale/shift reparameterization of linear layers (functionally
exact), inverse per-channel Q/K scaling for attention pairs (logit-exact),
gradient-descent optimization of the pre-adaptation distortion objective,
and absorption of the learned factors back into weights.

Scales are stored as u = log(s) so positivity is structural. Note that for a
*fixed* mask the linear pre-adaptation objective is algebraically independent
of s: ((W S) o (1-M)) S^-1 (X - delta) == (W o (1-M)) (X - delta). Scales
therefore act purely through mask refreshes (they reshape the importance
landscape), while shifts and attention scales carry smooth gradients.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import importance, masking
from .core import as_matrix, as_vector
from .errors import AbsorptionError, DivergenceError, DomainError, ShapeError
from .model import AttentionQK, Linear, Model, layer_inputs


@dataclass
class ScaleShift:
    """Learnable per-input-channel scale/shift of one linear layer."""

    layer_name: str
    u: np.ndarray      # log-scales, length d_in
    delta: np.ndarray  # shifts, length d_in

    @property
    def s(self) -> np.ndarray:
        return np.exp(self.u)

    @classmethod
    def identity(cls, layer: Linear) -> "ScaleShift":
        return cls(layer.name, np.zeros(layer.d_in), np.zeros(layer.d_in))


@dataclass
class AttnScale:
    """Learnable inverse Q/K row scaling of one attention pair."""

    pair_name: str
    v: np.ndarray  # log-scales, length d_k

    @property
    def s_a(self) -> np.ndarray:
        return np.exp(self.v)

    @classmethod
    def identity(cls, pair: AttentionQK) -> "AttnScale":
        return cls(pair.name, np.zeros(pair.d_k))


Transforms = dict[str, "ScaleShift | AttnScale"]


@dataclass
class InputTransform:
    """Compensating transform the layer's inputs must undergo: S^-1 (X - delta)."""

    s: np.ndarray
    delta: np.ndarray

    def apply(self, x) -> np.ndarray:
        x = as_matrix(x, "x")
        return (x - self.delta[:, None]) / self.s[:, None]


def _check_scales(s: np.ndarray, what: str) -> None:
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise DomainError(f"{what} must be strictly positive and finite")


def reparam_linear(layer: Linear, t: ScaleShift):
    """Exact reparameterization W~ = W S, b~ = b + W delta, X~ = S^-1 (X - delta).

    Returns the transformed layer and the input-transform descriptor. For any
    input batch, W~ X~ + b~ == W X + b.
    """
    s = t.s
    delta = as_vector(t.delta, "delta")
    if s.shape[0] != layer.d_in or delta.shape[0] != layer.d_in:
        raise ShapeError(
            f"transform length {s.shape[0]} does not match d_in {layer.d_in} "
            f"of layer {layer.name!r}"
        )
    _check_scales(s, "scales")
    w_t = layer.weight * s[None, :]
    bias = layer.bias if layer.bias is not None else np.zeros(layer.d_out)
    b_t = bias + layer.weight @ delta
    return Linear(layer.name, w_t, b_t), InputTransform(s, delta)


def reparam_attention(pair: AttentionQK, a: AttnScale) -> AttentionQK:
    """Row-scale Wq by s_a and Wk by 1/s_a; attention logits are unchanged."""
    s_a = a.s_a
    if s_a.shape[0] != pair.d_k:
        raise ShapeError(
            f"attention scale length {s_a.shape[0]} does not match d_k "
            f"{pair.d_k} of pair {pair.name!r}"
        )
    _check_scales(s_a, "attention scales")
    return AttentionQK(pair.name, pair.wq * s_a[:, None], pair.wk / s_a[:, None])


def preadapt_objective(layer: Linear, t: ScaleShift, mask, calib) -> float:
    """Mean squared pruning distortion of the reparameterized layer.

    Computed in the cancelled form (W o (1-M)) (X - delta), which equals
    (W~ - W~ o M) X~ exactly and is numerically stable in s.
    """
    mask = as_matrix(mask, "mask")
    x = as_matrix(calib, "calib")
    if mask.shape != layer.weight.shape:
        raise ShapeError(
            f"mask shape {mask.shape} != weight shape {layer.weight.shape}"
        )
    if x.shape[0] != layer.d_in:
        raise ShapeError(f"calib has {x.shape[0]} rows, layer d_in is {layer.d_in}")
    _check_scales(t.s, "scales")
    a = layer.weight * (1.0 - mask)
    r = a @ (x - t.delta[:, None])
    return float(np.sum(r * r) / x.shape[1])


def preadapt_grad(layer: Linear, t: ScaleShift, mask, calib):
    """Analytic gradient of :func:`preadapt_objective` w.r.t. (u, delta).

    The u-gradient is identically zero for a fixed mask (the scaling cancels
    between W~ and X~); the delta-gradient is 2 A^T A (delta - x_bar).
    """
    mask = as_matrix(mask, "mask")
    x = as_matrix(calib, "calib")
    a = layer.weight * (1.0 - mask)
    x_bar = np.mean(x, axis=1)
    grad_delta = 2.0 * (a.T @ (a @ (t.delta - x_bar)))
    return np.zeros(layer.d_in), grad_delta


def attention_objective(pair: AttentionQK, a: AttnScale, mask_q, mask_k, calib) -> float:
    """Pruning distortion of the scaled Q/K projections under their masks."""
    x = as_matrix(calib, "calib")
    s_a = a.s_a
    _check_scales(s_a, "attention scales")
    rq = (pair.wq * s_a[:, None] * (1.0 - as_matrix(mask_q, "mask_q"))) @ x
    rk = (pair.wk / s_a[:, None] * (1.0 - as_matrix(mask_k, "mask_k"))) @ x
    return float((np.sum(rq * rq) + np.sum(rk * rk)) / x.shape[1])


def attention_grad(pair: AttentionQK, a: AttnScale, mask_q, mask_k, calib) -> np.ndarray:
    """Analytic gradient of :func:`attention_objective` w.r.t. v = log s_a."""
    x = as_matrix(calib, "calib")
    s2 = np.exp(2.0 * a.v)
    q_res = (pair.wq * (1.0 - as_matrix(mask_q, "mask_q"))) @ x
    k_res = (pair.wk * (1.0 - as_matrix(mask_k, "mask_k"))) @ x
    qn = np.sum(q_res * q_res, axis=1)
    kn = np.sum(k_res * k_res, axis=1)
    return (2.0 / x.shape[1]) * (s2 * qn - kn / s2)


# --- topology analysis -------------------------------------------------------

@dataclass
class InputSite:
    """One activation signal: who produces it and who consumes it."""

    producer: str | None          # upstream Linear name; None = raw model input
    linear: str                   # the Linear layer owning the ScaleShift
    attention: list[str] = field(default_factory=list)  # co-consuming pairs


def input_sites(model: Model) -> list[InputSite]:
    sites: list[InputSite] = []
    producer: str | None = None
    attn: list[str] = []
    for layer in model.layers:
        if isinstance(layer, AttentionQK):
            attn.append(layer.name)
        else:
            sites.append(InputSite(producer, layer.name, attn))
            attn = []
            producer = layer.name
    return sites


def shift_feasible_layers(model: Model) -> set[str]:
    """Linear layers whose input signal is not shared with attention pairs.

    Only these can carry a nonzero shift: attention has no bias path to
    absorb a shift, so sharing a shifted signal would need a runtime op.
    """
    return {site.linear for site in input_sites(model) if not site.attention}


# --- optimization ------------------------------------------------------------

@dataclass
class OptConfig:
    lr: float = 0.5
    epochs: int = 5
    mask_refresh_period: int = 8   # 0 = frozen masks
    optimize_delta: bool = True
    optimize_attention: bool = True
    iters_per_epoch: int = 8


@dataclass
class OptimizeResult:
    transforms: Transforms
    initial_objective: float
    final_objective: float
    trace: list  # (step, total_objective)


def identity_transforms(model: Model) -> Transforms:
    out: Transforms = {}
    for layer in model.layers:
        if isinstance(layer, Linear):
            out[layer.name] = ScaleShift.identity(layer)
        else:
            out[layer.name] = AttnScale.identity(layer)
    return out


def refresh_masks(model: Model, transforms: Transforms, d_base: dict,
                  pattern) -> dict[str, np.ndarray]:
    """Masks from fast-refreshed importance scores under the current scales.

    Linear layers score the transformed weight against the original input
    statistics, i.e. |W| * sqrt(s^2 diag(H)) via the O(d_in) refresh;
    attention pairs score their row-scaled projections directly.
    """
    masks: dict[str, np.ndarray] = {}
    for layer in model.layers:
        t = transforms[layer.name]
        if isinstance(layer, Linear):
            d = importance.fast_refresh(d_base[layer.name], t.s)
            masks[layer.name] = masking.make_mask(
                importance.score_activation(layer.weight, d), pattern)
        else:
            s_a = t.s_a
            dq = d_base[layer.name]
            masks[layer.name + "#q"] = masking.make_mask(
                importance.score_activation(layer.wq * s_a[:, None], dq), pattern)
            masks[layer.name + "#k"] = masking.make_mask(
                importance.score_activation(layer.wk / s_a[:, None], dq), pattern)
    return masks


def total_objective(model: Model, transforms: Transforms,
                    masks: dict[str, np.ndarray], inputs: dict[str, np.ndarray]) -> float:
    total = 0.0
    for layer in model.layers:
        if isinstance(layer, Linear):
            total += preadapt_objective(layer, transforms[layer.name],
                                        masks[layer.name], inputs[layer.name])
        else:
            total += attention_objective(layer, transforms[layer.name],
                                         masks[layer.name + "#q"],
                                         masks[layer.name + "#k"],
                                         inputs[layer.name])
    return total


def optimize_distribution(model: Model, calib, pattern,
                          cfg: OptConfig | None = None) -> OptimizeResult:
    """Minimize the summed pre-adaptation distortion over scales and shifts.

    Backbone weights stay frozen; masks are refreshed from fast-refreshed
    scores every ``mask_refresh_period`` steps. Returns the best parameters
    seen, so the final objective never exceeds the initial one.
    """
    cfg = cfg or OptConfig()
    if cfg.epochs < 1:
        raise DomainError("epochs must be >= 1")
    inputs = layer_inputs(model, calib)
    d_base = {name: importance.hessian_diag(x) for name, x in inputs.items()}
    transforms = identity_transforms(model)
    delta_ok = shift_feasible_layers(model) if cfg.optimize_delta else set()

    masks = refresh_masks(model, transforms, d_base, pattern)
    initial = total_objective(model, transforms, masks, inputs)
    best = (initial, copy.deepcopy(transforms))
    trace = [(0, initial)]

    lrs = {name: cfg.lr for name in model.topology}
    steps = cfg.epochs * cfg.iters_per_epoch
    for step in range(1, steps + 1):
        if cfg.mask_refresh_period > 0 and step % cfg.mask_refresh_period == 0:
            masks = refresh_masks(model, transforms, d_base, pattern)
        for layer in model.layers:
            name = layer.name
            t = transforms[name]
            if isinstance(layer, Linear):
                if name not in delta_ok:
                    continue
                x = inputs[name]
                f0 = preadapt_objective(layer, t, masks[name], x)
                _, g = preadapt_grad(layer, t, masks[name], x)
                if not np.isfinite(f0):
                    raise DivergenceError(
                        f"objective diverged at layer {name!r}, step {step}")
                while lrs[name] > 1e-12:
                    cand = ScaleShift(name, t.u, t.delta - lrs[name] * g)
                    f1 = preadapt_objective(layer, cand, masks[name], x)
                    # non-finite trial steps just shrink the step size
                    if np.isfinite(f1) and f1 <= f0:
                        transforms[name] = cand
                        break
                    lrs[name] *= 0.5
            else:
                if not cfg.optimize_attention:
                    continue
                x = inputs[name]
                mq, mk = masks[name + "#q"], masks[name + "#k"]
                f0 = attention_objective(layer, t, mq, mk, x)
                g = attention_grad(layer, t, mq, mk, x)
                if not np.isfinite(f0):
                    raise DivergenceError(
                        f"objective diverged at pair {name!r}, step {step}")
                with np.errstate(over="ignore"):
                    while lrs[name] > 1e-12:
                        cand = AttnScale(name, t.v - lrs[name] * g)
                        f1 = attention_objective(layer, cand, mq, mk, x)
                        if np.isfinite(f1) and f1 <= f0:
                            transforms[name] = cand
                            break
                        lrs[name] *= 0.5
        total = total_objective(model, transforms, masks, inputs)
        trace.append((step, total))
        if total < best[0]:
            best = (total, copy.deepcopy(transforms))

    return OptimizeResult(best[1], initial, best[0], trace)


# --- transform persistence ------------------------------------------------------

def save_transforms(transforms: Transforms, path) -> None:
    from . import tensorfile
    tensors: dict[str, np.ndarray] = {}
    for name, t in transforms.items():
        if isinstance(t, ScaleShift):
            tensors[f"scaleshift:{name}:u"] = t.u
            tensors[f"scaleshift:{name}:delta"] = t.delta
        else:
            tensors[f"attnscale:{name}:v"] = t.v
    tensorfile.save_tensors(tensors, path)


def load_transforms(path) -> Transforms:
    from . import tensorfile
    tensors = tensorfile.load_tensors(path)
    out: Transforms = {}
    for key, arr in tensors.items():
        kind, name, part = key.split(":")
        if kind == "scaleshift":
            t = out.setdefault(name, ScaleShift(name, None, None))
            if part == "u":
                t.u = arr
            else:
                t.delta = arr
        else:
            out[name] = AttnScale(name, arr)
    return out


# --- absorption ---------------------------------------------------------------

def absorb(model: Model, transforms: Transforms) -> Model:
    """Fold learned transforms into weights, adding no runtime modules.

    Each linear layer's scale/shift is absorbed into its own weight/bias and
    the compensating input transform is composed into the producing upstream
    layer (or recorded as the model's input descriptor at the boundary).
    Attention pairs sharing a scaled signal compensate by column-scaling
    Wq/Wk; a *shifted* shared signal cannot be compensated and is reported.
    """
    sites = input_sites(model)
    offending = []
    for site in sites:
        t = transforms.get(site.linear)
        if t is None:
            continue
        if site.attention and np.any(t.delta != 0.0):
            signal = site.producer or "<model input>"
            offending.extend((signal, attn) for attn in site.attention)
    if offending:
        raise AbsorptionError(
            "shift absorption impossible on signals shared with attention",
            offending)

    out = model.copy()
    # own transform of each layer
    for layer in out.layers:
        t = transforms.get(layer.name)
        if t is None:
            continue
        if isinstance(layer, Linear):
            s, delta = t.s, t.delta
            _check_scales(s, "scales")
            if np.any(delta != 0.0):
                base = layer.bias if layer.bias is not None else np.zeros(layer.d_out)
                layer.bias = base + layer.weight @ delta
            layer.weight *= s[None, :]
        else:
            s_a = t.s_a
            _check_scales(s_a, "attention scales")
            layer.wq *= s_a[:, None]
            layer.wk /= s_a[:, None]
    # compensation of each site's input transform
    for site in sites:
        t = transforms.get(site.linear)
        if t is None:
            continue
        s, delta = t.s, t.delta
        if np.all(s == 1.0) and np.all(delta == 0.0):
            continue
        for attn_name in site.attention:
            pair = out.layer(attn_name)
            pair.wq *= s[None, :]
            pair.wk *= s[None, :]
        if site.producer is None:
            out.input_scale = s.copy()
            out.input_shift = delta.copy()
        else:
            prod = out.layer(site.producer)
            prod.weight /= s[:, None]
            base = prod.bias if prod.bias is not None else np.zeros(prod.d_out)
            prod.bias = (base - delta) / s
    return out
