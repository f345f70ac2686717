"""Feature-level sparsity induction.

Robust data-driven scale initialization from per-channel output statistics,
the total loss combining output matching with the norm-decay regularizer,
and its optimizer over the same scale/shift parameter family as the
distribution stage.

The sparse model is evaluated in cancelled form (transformed, masked, then
re-expressed in original coordinates), which is exactly the deployed
absorbed-and-masked model: a linear layer contributes
``W a + b - (W o (1-M)) (a - delta)`` and an attention pair contributes the
logit block of its masked projections. Scales consequently enter the MSE
only through mask refreshes; their smooth gradient comes from the
regularizer, which is computed on the transformed (unmasked) weights.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import importance
from .core import as_matrix, entrywise_p_norm, operator_norm, row_stats
from .distribution import (AttnScale, OptConfig, OptimizeResult, ScaleShift,
                           Transforms, attention_grad, attention_objective,
                           identity_transforms, preadapt_grad,
                           preadapt_objective, refresh_masks,
                           shift_feasible_layers)
from .errors import DivergenceError, DomainError, ShapeError
from .model import Linear, Model, forward, layer_inputs


@dataclass
class FeatureLossConfig:
    lam: float = 1e-3           # reconstruction/regularizer balance
    alpha: float = 0.01         # regularizer strength
    p: float | str = 2.0        # norm order, or "spectral" for the operator norm
    g_kind: str = "identity"    # monotone map applied to channel means
    g_a: float = 1.0
    g_b: float = 0.0
    eps_init: float = 1e-4      # floor keeping initial scales strictly positive
    distribution_weight: float = 0.0  # optional pre-adaptation summand

    def __post_init__(self):
        if self.lam < 0:
            raise DomainError(f"lambda must be >= 0, got {self.lam}")
        if self.alpha <= 0:
            raise DomainError(f"alpha must be > 0, got {self.alpha}")
        if self.p != "spectral" and float(self.p) < 1:
            raise DomainError(f"p must be >= 1 or 'spectral', got {self.p}")
        if self.eps_init <= 0:
            raise DomainError(f"eps_init must be > 0, got {self.eps_init}")
        if self.g_kind not in ("identity", "affine"):
            raise DomainError(f"unknown g mapping {self.g_kind!r}")
        if self.g_kind == "affine" and self.g_a <= 0:
            raise DomainError("affine g requires a > 0")

    def apply_g(self, mu: np.ndarray) -> np.ndarray:
        if self.g_kind == "identity":
            return mu
        return self.g_a * mu + self.g_b


def init_scales(layer: Linear, calib, cfg: FeatureLossConfig) -> np.ndarray:
    """Robust per-output-channel scale init: max((m_i - g(mu_i))^2, eps_init)."""
    x = as_matrix(calib, "calib")
    if x.shape[0] != layer.d_in:
        raise ShapeError(f"calib has {x.shape[0]} rows, layer d_in is {layer.d_in}")
    y = layer.weight @ x
    m, mu = row_stats(y)
    return np.maximum((m - cfg.apply_g(mu)) ** 2, cfg.eps_init)


def _weight_norm(w: np.ndarray, cfg: FeatureLossConfig) -> float:
    if cfg.p == "spectral":
        return operator_norm(w)
    return entrywise_p_norm(w, float(cfg.p))


def masked_forward(model: Model, transforms: Transforms,
                   masks: dict[str, np.ndarray], x):
    """Forward pass of the transformed-then-masked model, original coordinates."""
    x = as_matrix(x, "x")
    a = x
    logits = []
    for layer in model.layers:
        if isinstance(layer, Linear):
            t = transforms[layer.name]
            pruned = layer.weight * (1.0 - masks[layer.name])
            a2 = layer.weight @ a - pruned @ (a - t.delta[:, None])
            if layer.bias is not None:
                a2 = a2 + layer.bias[:, None]
            a = a2
        else:
            cq = layer.wq * masks[layer.name + "#q"]
            ck = layer.wk * masks[layer.name + "#k"]
            logits.append((cq @ a).T @ (ck @ a))
    return np.vstack([a] + logits) if logits else a


def feature_loss(model_dense: Model, model_sparse: Model, calib,
                 induced_layers, cfg: FeatureLossConfig) -> dict:
    """Output-matching MSE plus norm-decay regularizer between two models."""
    if model_dense.topology != model_sparse.topology:
        raise ShapeError("models do not share a topology")
    y_d = forward(model_dense, calib)
    y_s = forward(model_sparse, calib)
    if y_d.shape != y_s.shape:
        raise ShapeError(f"output shapes differ: {y_d.shape} vs {y_s.shape}")
    mse = float(np.mean((y_d - y_s) ** 2))
    norm_sum = 0.0
    for name in induced_layers:
        layer = model_sparse.layer(name)
        if isinstance(layer, Linear):
            norm_sum += _weight_norm(layer.weight, cfg)
        else:
            norm_sum += _weight_norm(layer.wq, cfg) + _weight_norm(layer.wk, cfg)
    reg = float(np.exp(-cfg.alpha * norm_sum))
    return {"total": mse + cfg.lam * reg, "mse": mse, "reg": reg}


# --- loss and analytic gradient over the transform parameters -----------------

def _reg_and_grads(model: Model, transforms: Transforms, induced_layers,
                   cfg: FeatureLossConfig):
    """exp(-alpha * sum of transformed-weight norms) and d/d(log-scales)."""
    norm_sum = 0.0
    dnorm_u: dict[str, np.ndarray] = {}
    dnorm_v: dict[str, np.ndarray] = {}
    for name in induced_layers:
        layer = model.layer(name)
        t = transforms[name]
        if isinstance(layer, Linear):
            s = t.s
            w_t = layer.weight * s[None, :]
            norm_sum += _weight_norm(w_t, cfg)
            if cfg.p == "spectral":
                u_vec, sv, vt = np.linalg.svd(w_t, full_matrices=False)
                dnorm_u[name] = (u_vec[:, 0] @ w_t) * vt[0]
            else:
                p = float(cfg.p)
                n_val = entrywise_p_norm(w_t, p)
                col = np.sum(np.abs(layer.weight) ** p, axis=0) * s ** p
                dnorm_u[name] = 0.0 * s if n_val == 0 else n_val ** (1 - p) * col
        else:
            s_a = t.s_a
            wq_t = layer.wq * s_a[:, None]
            wk_t = layer.wk / s_a[:, None]
            nq = _weight_norm(wq_t, cfg)
            nk = _weight_norm(wk_t, cfg)
            norm_sum += nq + nk
            if cfg.p == "spectral":
                uq, _, vqt = np.linalg.svd(wq_t, full_matrices=False)
                uk, _, vkt = np.linalg.svd(wk_t, full_matrices=False)
                dnorm_v[name] = uq[:, 0] * (wq_t @ vqt[0]) - uk[:, 0] * (wk_t @ vkt[0])
            else:
                p = float(cfg.p)
                rq = np.sum(np.abs(layer.wq) ** p, axis=1) * s_a ** p
                rk = np.sum(np.abs(layer.wk) ** p, axis=1) / s_a ** p
                gq = np.zeros_like(s_a) if nq == 0 else nq ** (1 - p) * rq
                gk = np.zeros_like(s_a) if nk == 0 else nk ** (1 - p) * rk
                dnorm_v[name] = gq - gk
    reg = float(np.exp(-cfg.alpha * norm_sum))
    scale = -cfg.alpha * reg
    return reg, {k: scale * g for k, g in dnorm_u.items()}, \
        {k: scale * g for k, g in dnorm_v.items()}


def feature_loss_and_grad(model: Model, transforms: Transforms,
                          masks: dict[str, np.ndarray], calib,
                          induced_layers, cfg: FeatureLossConfig,
                          inputs: dict[str, np.ndarray] | None = None):
    """Total loss and its analytic gradient w.r.t. every transform parameter.

    Returns (loss_dict, grads) where grads maps layer name to the gradient
    w.r.t. u and delta (linear) or v (attention). The MSE part is
    backpropagated through the masked chain; the regularizer contributes the
    log-scale gradients; ``distribution_weight`` optionally adds the
    pre-adaptation objective and its gradients.
    """
    x = as_matrix(calib, "calib")
    n = x.shape[1]

    # forward: dense and sparse chains in parallel, recording sparse inputs
    a_d = x
    a_s = x
    steps = []  # (layer, a_s_in) in topology order
    logit_errs = []  # (layer_index_in_steps, E-without-normalization, a_s_in)
    n_entries = 0
    for layer in model.layers:
        steps.append((layer, a_s))
        if isinstance(layer, Linear):
            t = transforms[layer.name]
            pruned = layer.weight * (1.0 - masks[layer.name])
            a_s2 = layer.weight @ a_s - pruned @ (a_s - t.delta[:, None])
            a_d2 = layer.weight @ a_d
            if layer.bias is not None:
                a_s2 = a_s2 + layer.bias[:, None]
                a_d2 = a_d2 + layer.bias[:, None]
            a_s, a_d = a_s2, a_d2
        else:
            cq = layer.wq * masks[layer.name + "#q"]
            ck = layer.wk * masks[layer.name + "#k"]
            l_s = (cq @ a_s).T @ (ck @ a_s)
            l_d = (layer.wq @ a_d).T @ (layer.wk @ a_d)
            logit_errs.append((len(steps) - 1, l_s - l_d, cq, ck))
            n_entries += n * n
    final_err = a_s - a_d
    n_entries += final_err.size
    mse = (float(np.sum(final_err ** 2))
           + sum(float(np.sum(e ** 2)) for _, e, _, _ in logit_errs)) / n_entries

    reg, reg_gu, reg_gv = _reg_and_grads(model, transforms, induced_layers, cfg)

    grads: dict[str, dict[str, np.ndarray]] = {}
    for layer in model.layers:
        if isinstance(layer, Linear):
            grads[layer.name] = {"u": np.zeros(layer.d_in),
                                 "delta": np.zeros(layer.d_in)}
        else:
            grads[layer.name] = {"v": np.zeros(layer.d_k)}
    for name, g in reg_gu.items():
        grads[name]["u"] += cfg.lam * g
    for name, g in reg_gv.items():
        grads[name]["v"] += cfg.lam * g

    # backward through the sparse chain for the MSE part
    logit_by_step = {idx: (e, cq, ck) for idx, e, cq, ck in logit_errs}
    g_a = (2.0 / n_entries) * final_err
    for idx in range(len(steps) - 1, -1, -1):
        layer, a_in = steps[idx]
        if isinstance(layer, Linear):
            pruned = layer.weight * (1.0 - masks[layer.name])
            grads[layer.name]["delta"] += (pruned.T @ g_a).sum(axis=1)
            g_a = (layer.weight - pruned).T @ g_a
        else:
            e, cq, ck = logit_by_step[idx]
            e_adj = (2.0 / n_entries) * e
            qa = cq @ a_in
            ka = ck @ a_in
            # L = (cq a)^T (ck a) = a^T P a; adjoint into a is P a E^T + P^T a E
            g_a = g_a + cq.T @ (ka @ e_adj.T) + ck.T @ (qa @ e_adj)

    total = mse + cfg.lam * reg
    if cfg.distribution_weight > 0:
        if inputs is None:
            inputs = layer_inputs(model, x)
        w = cfg.distribution_weight
        for layer in model.layers:
            t = transforms[layer.name]
            if isinstance(layer, Linear):
                total += w * preadapt_objective(layer, t, masks[layer.name],
                                                inputs[layer.name])
                _, gd = preadapt_grad(layer, t, masks[layer.name],
                                      inputs[layer.name])
                grads[layer.name]["delta"] += w * gd
            else:
                mq, mk = masks[layer.name + "#q"], masks[layer.name + "#k"]
                total += w * attention_objective(layer, t, mq, mk,
                                                 inputs[layer.name])
                grads[layer.name]["v"] += w * attention_grad(
                    layer, t, mq, mk, inputs[layer.name])

    return {"total": total, "mse": mse, "reg": reg}, grads


# --- optimizer -----------------------------------------------------------------

def propagated_init(model: Model, calib, cfg: FeatureLossConfig) -> Transforms:
    """Initial transforms with scales seeded from robust output statistics.

    A layer's per-output-channel init becomes the input scales of the next
    linear layer in topology order (the consumer of those channels); layers
    without a producer keep unit scales.
    """
    transforms = identity_transforms(model)
    inputs = layer_inputs(model, calib)
    prev: Linear | None = None
    for layer in model.layers:
        if not isinstance(layer, Linear):
            continue
        if prev is not None:
            s0 = init_scales(prev, inputs[prev.name], cfg)
            u0 = np.log(s0)
            # masks are invariant to a common scale factor; centering the
            # log-scales keeps the transformed weights numerically tame
            u0 -= np.mean(u0)
            transforms[layer.name] = ScaleShift(
                layer.name, u0, transforms[layer.name].delta)
        prev = layer
    return transforms


def optimize_features(model: Model, calib, pattern, induced_layers=None,
                      cfg: FeatureLossConfig | None = None,
                      opt_cfg: OptConfig | None = None,
                      init_transforms: Transforms | None = None) -> OptimizeResult:
    """Minimize the total feature loss over scales/shifts, weights frozen.

    Scales start from :func:`propagated_init`; shifts and attention scales
    are inherited from ``init_transforms`` when given (e.g. the distribution
    stage result). Masks are refreshed from fast-refreshed scores every
    ``mask_refresh_period`` steps. Best-seen parameters are returned, and the
    identity transform is always included among the candidates, so the result
    is never worse than either starting point.
    """
    cfg = cfg or FeatureLossConfig()
    opt_cfg = opt_cfg or OptConfig()
    if opt_cfg.epochs < 1:
        raise DomainError("epochs must be >= 1")
    induced = set(induced_layers) if induced_layers is not None \
        else set(model.topology)

    x = as_matrix(calib, "calib")
    inputs = layer_inputs(model, x)
    d_base = {name: importance.hessian_diag(a) for name, a in inputs.items()}
    delta_ok = shift_feasible_layers(model) if opt_cfg.optimize_delta else set()

    transforms = propagated_init(model, x, cfg)
    if init_transforms is not None:
        for name, t in init_transforms.items():
            if isinstance(t, ScaleShift):
                transforms[name] = ScaleShift(name, transforms[name].u,
                                              t.delta.copy())
            else:
                transforms[name] = AttnScale(name, t.v.copy())

    def evaluate(th, masks, strict: bool = True):
        with np.errstate(over="ignore"):
            loss, grads = feature_loss_and_grad(model, th, masks, x, induced,
                                                cfg, inputs)
        if strict and not np.isfinite(loss["total"]):
            raise DivergenceError("feature loss became non-finite")
        return loss, grads

    masks = refresh_masks(model, transforms, d_base, pattern)
    loss0, grads = evaluate(transforms, masks)
    initial = loss0["total"]
    trace = [(0, initial)]

    # the identity point and the inherited transforms are free candidates;
    # descend from whichever starting point scores lowest, so the result is
    # never worse than any of them
    extra = [identity_transforms(model)]
    if init_transforms is not None:
        extra.append(copy.deepcopy(init_transforms))
    for cand in extra:
        cand_masks = refresh_masks(model, cand, d_base, pattern)
        cand_loss, cand_grads = evaluate(cand, cand_masks, strict=False)
        if np.isfinite(cand_loss["total"]) and cand_loss["total"] < loss0["total"]:
            transforms, masks = cand, cand_masks
            loss0, grads = cand_loss, cand_grads
    best = (loss0["total"], copy.deepcopy(transforms))

    lr = opt_cfg.lr
    current = loss0
    steps = opt_cfg.epochs * opt_cfg.iters_per_epoch
    for step in range(1, steps + 1):
        if opt_cfg.mask_refresh_period > 0 and step % opt_cfg.mask_refresh_period == 0:
            masks = refresh_masks(model, transforms, d_base, pattern)
            current, grads = evaluate(transforms, masks)
        accepted = False
        while lr > 1e-12:
            cand: Transforms = {}
            for layer in model.layers:
                t = transforms[layer.name]
                g = grads[layer.name]
                if isinstance(layer, Linear):
                    du = g["u"]
                    ddelta = g["delta"] if layer.name in delta_ok else 0.0
                    cand[layer.name] = ScaleShift(layer.name, t.u - lr * du,
                                                  t.delta - lr * ddelta)
                else:
                    dv = g["v"] if opt_cfg.optimize_attention else 0.0
                    cand[layer.name] = AttnScale(layer.name, t.v - lr * dv)
            cand_loss, cand_grads = evaluate(cand, masks, strict=False)
            if np.isfinite(cand_loss["total"]) and cand_loss["total"] <= current["total"]:
                transforms, current, grads = cand, cand_loss, cand_grads
                accepted = True
                break
            lr *= 0.5
        trace.append((step, current["total"]))
        if current["total"] < best[0]:
            best = (current["total"], copy.deepcopy(transforms))
        if not accepted and lr <= 1e-12:
            break

    return OptimizeResult(best[1], initial, best[0], trace)
