"""Select, validate and export checkpoint weight matrices.

Attention Q/K projections are recognized by the common ``q_proj``/``k_proj``
naming and must come in pairs with matching head dimensions. Embedding and
LM-head tensors are excluded by default; pruning them is intrusive and the
toolkit downstream never consumes them.
"""

from __future__ import annotations

import fnmatch
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .writer import write_sif

EMBEDDING_MARKERS = ("embed", "lm_head", "wte", "wpe")


class ConvertError(Exception):
    pass


@dataclass
class ManifestEntry:
    source_tensor_name: str
    target_layer_name: str
    kind: str  # linear | attn_q | attn_k
    d_out: int
    d_in: int


def load_checkpoint(source) -> dict[str, torch.Tensor]:
    path = Path(source)
    if not path.exists():
        raise ConvertError(f"checkpoint not found: {source}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state \
            and isinstance(state["state_dict"], dict):
        state = state["state_dict"]
    if not isinstance(state, dict):
        raise ConvertError(f"checkpoint {source} is not a state dict")
    return state


def classify(name: str) -> str:
    lowered = name.lower()
    if any(marker in lowered for marker in EMBEDDING_MARKERS):
        return "embedding"
    if "q_proj" in lowered:
        return "attn_q"
    if "k_proj" in lowered:
        return "attn_k"
    return "linear"


def _split_fused(name: str, tensor: torch.Tensor):
    """Split a fused QKV matrix into (suffix, kind, rows, block) triples."""
    rows = tensor.shape[0]
    if rows % 3 != 0:
        raise ConvertError(
            f"fused tensor {name!r} has {rows} rows, not divisible into "
            f"three Q/K/V blocks")
    step = rows // 3
    for i, (suffix, kind) in enumerate((("q", "attn_q"), ("k", "attn_k"),
                                        ("v", "linear"))):
        yield suffix, kind, (i * step, (i + 1) * step), tensor[i * step:(i + 1) * step]


def convert(source, selection: str, out_path, include_embeddings: bool = False,
            split_qkv: str | None = None) -> list[ManifestEntry]:
    """Export matching 2-D tensors to ``out_path`` plus an adjacent manifest.

    ``selection`` is a glob over tensor names. Returns the manifest entries
    in output order.
    """
    state = load_checkpoint(source)
    names = [n for n in state if fnmatch.fnmatch(n, selection)]
    if not names:
        if any(ch in selection for ch in "*?["):
            raise ConvertError(f"no tensors match {selection!r}")
        raise ConvertError(f"tensor {selection!r} not found in checkpoint")

    selected: list[tuple[str, str, str, torch.Tensor]] = []
    non_2d: list[str] = []
    for name in names:
        tensor = state[name]
        kind = classify(name)
        if kind == "embedding":
            if not include_embeddings:
                continue
            warnings.warn(
                f"exporting embedding/LM-head tensor {name!r}; these are "
                f"normally kept dense", stacklevel=2)
            kind = "linear"
        if split_qkv and fnmatch.fnmatch(name, split_qkv):
            if tensor.dim() != 2:
                non_2d.append(name)
                continue
            for suffix, block_kind, (lo, hi), block in _split_fused(name, tensor):
                selected.append((f"{name}[rows {lo}:{hi}]",
                                 f"{name}.{suffix}", block_kind, block))
            continue
        if tensor.dim() != 2:
            non_2d.append(name)
            continue
        selected.append((name, name, kind, tensor))
    if non_2d:
        raise ConvertError(
            "only 2-D tensors are exportable, got: " + ", ".join(non_2d))
    if not selected:
        raise ConvertError(
            f"selection {selection!r} matched only excluded tensors")

    _check_pairing(selected)

    src_dtypes = sorted({str(t.dtype).replace("torch.", "")
                         for _, _, _, t in selected})
    tensors: dict[str, np.ndarray] = {}
    entries: list[ManifestEntry] = []
    for source_name, target, kind, tensor in selected:
        if target in tensors:
            raise ConvertError(f"duplicate target layer name {target!r}")
        tensors[target] = tensor.detach().to(torch.float32).numpy()
        d_out, d_in = tensor.shape
        entries.append(ManifestEntry(source_name, target, kind,
                                     int(d_out), int(d_in)))

    out_path = Path(out_path)
    write_sif(tensors, out_path)
    _write_manifest(entries, source, src_dtypes,
                    out_path.with_suffix(out_path.suffix + ".manifest.txt"))
    return entries


def _check_pairing(selected) -> None:
    qs = {t: w.shape[0] for _, t, kind, w in selected if kind == "attn_q"}
    ks = {t: w.shape[0] for _, t, kind, w in selected if kind == "attn_k"}
    problems = []
    for q_name, d_k in sorted(qs.items()):
        k_name = q_name.replace("q_proj", "k_proj") \
            if "q_proj" in q_name else q_name[:-1] + "k"
        if k_name not in ks:
            problems.append(f"{q_name} has no matching K projection")
        elif ks[k_name] != d_k:
            problems.append(
                f"{q_name} (d_k={d_k}) and {k_name} (d_k={ks[k_name]}) "
                f"have mismatched head dimensions")
        else:
            ks.pop(k_name)
    qs_matched = {q.replace("q_proj", "k_proj") for q in qs}
    for k_name in sorted(set(ks) - qs_matched):
        problems.append(f"{k_name} has no matching Q projection")
    if problems:
        raise ConvertError("Q/K pairing failed: " + "; ".join(problems))


def _write_manifest(entries, source, src_dtypes, path) -> None:
    lines = [
        "# sifconvert export manifest",
        f"source = {source}",
        f"dtype = {','.join(src_dtypes)} -> f32",
        "columns = source_tensor_name\ttarget_layer_name\tkind\td_out\td_in",
    ]
    for e in entries:
        lines.append(f"{e.source_tensor_name}\t{e.target_layer_name}\t"
                     f"{e.kind}\t{e.d_out}\t{e.d_in}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
