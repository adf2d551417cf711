"""Attention rollout and class-token heatmaps.

Only recorded attention probabilities are consumed here; nothing in this module
touches model weights.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

ROW_TOL = 1e-4


def _check_stochastic(mats: np.ndarray, what: str) -> None:
    if mats.shape[-1] != mats.shape[-2]:
        raise ValidationError(f"{what}: matrices must be square, got {mats.shape[-2:]}")
    if not np.all(np.isfinite(mats)) or mats.min() < -ROW_TOL:
        raise ValidationError(f"{what}: entries must be finite and non-negative")
    dev = np.abs(mats.sum(axis=-1) - 1.0).max()
    if dev > ROW_TOL:
        raise ValidationError(f"{what}: row sums deviate from 1 by {dev:.3g}")


def average_heads(stack: np.ndarray) -> np.ndarray:
    """(L, heads, T, T) -> (L, T, T) by arithmetic mean over heads."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 4:
        raise ValidationError(f"attention stack must be (layers, heads, T, T), got {stack.shape}")
    return stack.mean(axis=1)


def residual_adjust(a: np.ndarray) -> np.ndarray:
    """normalize_rows(0.5 * A + 0.5 * I)."""
    t = a.shape[-1]
    m = 0.5 * a + 0.5 * np.eye(t)
    return m / m.sum(axis=-1, keepdims=True)


def rollout(averaged: np.ndarray) -> np.ndarray:
    """Product of residual-adjusted layer matrices, last layer leftmost."""
    averaged = np.asarray(averaged, dtype=np.float64)
    if averaged.ndim != 3 or averaged.shape[0] < 1:
        raise ValidationError(f"expected (layers, T, T), got {averaged.shape}")
    _check_stochastic(averaged, "rollout input")
    out = residual_adjust(averaged[0])
    for a in averaged[1:]:
        out = residual_adjust(a) @ out
    return out


@dataclass
class ClassMap:
    raw: np.ndarray      # (N,) float32 attention from the class token to each patch
    overlay: np.ndarray  # (grid_h, grid_w) raw values painted over P x P blocks
    scaled: np.ndarray   # overlay min-max scaled to [0, 1]
    patch_grid: tuple    # (patch rows, patch cols)
    patch_size: int


def min_max(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def class_attention_map(r: np.ndarray, grid_h: int, grid_w: int, patch_size: int) -> ClassMap:
    """Row 0 of the rollout over patch columns, painted back onto the grid image."""
    rows, cols = grid_h // patch_size, grid_w // patch_size
    n = rows * cols
    if r.shape != (n + 1, n + 1):
        raise ValidationError(f"rollout {r.shape} does not match {n} patches")
    raw = np.asarray(r[0, 1:], dtype=np.float32)
    blocks = np.ones((patch_size, patch_size), dtype=np.float32)
    overlay = np.kron(raw.reshape(rows, cols), blocks)
    return ClassMap(raw, overlay, min_max(overlay), (rows, cols), patch_size)


def explain_stack(stack, grid_h: int, grid_w: int, patch_size: int) -> ClassMap:
    """Class map from one attention stack, or from a (T1, T2) pair of tower stacks.

    For a pair the two rollouts are averaged, which keeps rows stochastic.
    """
    if isinstance(stack, (tuple, list)):
        r = np.mean([rollout(average_heads(s)) for s in stack], axis=0)
    else:
        r = rollout(average_heads(stack))
    return class_attention_map(r, grid_h, grid_w, patch_size)


def write_pgm(image01: np.ndarray, path) -> None:
    """Binary P5 graymap, pixel = round(255 * value)."""
    img = np.asarray(image01, dtype=np.float64)
    if img.ndim != 2 or not np.all(np.isfinite(img)):
        raise ValidationError("graymap needs a finite 2D array")
    px = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None or int(m.group(3)) != 255:
        raise ValidationError(f"{path}: not an 8-bit P5 graymap")
    w, h = int(m.group(1)), int(m.group(2))
    data = raw[m.end():]
    if len(data) < w * h:
        raise ValidationError(f"{path}: truncated pixel data")
    return np.frombuffer(data[: w * h], dtype=np.uint8).reshape(h, w)


def write_patch_csv(cmap: ClassMap, path) -> None:
    rows, cols = cmap.patch_grid
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("patch_row,patch_col,value\n")
        for i, v in enumerate(cmap.raw):
            fh.write(f"{i // cols},{i % cols},{float(v):.9g}\n")


def read_patch_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 2].astype(np.float32)


def export_heatmap(cmap: ClassMap, path_prefix) -> tuple:
    """Write ``<prefix>.pgm`` (scaled overlay) and ``<prefix>.csv`` (raw per-patch values)."""
    prefix = str(path_prefix)
    pgm, csv = Path(prefix + ".pgm"), Path(prefix + ".csv")
    write_pgm(cmap.scaled, pgm)
    write_patch_csv(cmap, csv)
    return pgm, csv
