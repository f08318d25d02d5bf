"""Axis-aligned box math: format conversion, IoU, generalized IoU and the
linear [0,1] rescaling of GIoU used for quality targets.

Two representations:
  - corner form (x_min, y_min, x_max, y_max) in pixels,
  - center form (cx, cy, w, h) normalized to [0, 1].

Degenerate pairs (both boxes zero-area) map pessimistically: IoU 0,
GIoU -1.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def corner_to_center(box, image_size) -> np.ndarray:
    """(x_min, y_min, x_max, y_max) pixels -> (cx, cy, w, h) in [0,1]."""
    w_img, h_img = _image_wh(image_size)
    x0, y0, x1, y1 = np.moveaxis(np.asarray(box, dtype=np.float64), -1, 0)
    if np.any(x1 < x0) or np.any(y1 < y0):
        raise ValueError("corner box with min > max")
    out = np.stack([(x0 + x1) / (2 * w_img), (y0 + y1) / (2 * h_img),
                    (x1 - x0) / w_img, (y1 - y0) / h_img], axis=-1)
    return out


def center_to_corner(box, image_size) -> np.ndarray:
    """(cx, cy, w, h) in [0,1] -> (x_min, y_min, x_max, y_max) pixels."""
    w_img, h_img = _image_wh(image_size)
    cx, cy, w, h = np.moveaxis(np.asarray(box, dtype=np.float64), -1, 0)
    return np.stack([(cx - w / 2) * w_img, (cy - h / 2) * h_img,
                     (cx + w / 2) * w_img, (cy + h / 2) * h_img], axis=-1)


def _image_wh(image_size) -> tuple[float, float]:
    if np.isscalar(image_size):
        w = h = float(image_size)
    else:
        w, h = float(image_size[0]), float(image_size[1])
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate image size {image_size!r}")
    return w, h


def _areas(a, b):
    ax0, ay0, ax1, ay1 = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bx0, by0, bx1, by1 = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    inter_w = np.maximum(0.0, np.minimum(ax1, bx1) - np.maximum(ax0, bx0))
    inter_h = np.maximum(0.0, np.minimum(ay1, by1) - np.maximum(ay0, by0))
    inter = inter_w * inter_h
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    hull = (np.maximum(ax1, bx1) - np.minimum(ax0, bx0)) * \
           (np.maximum(ay1, by1) - np.minimum(ay0, by0))
    return inter, area_a, area_b, hull


def iou(a, b):
    """Intersection over union of corner-form boxes; 0 when both degenerate."""
    inter, area_a, area_b, _ = _areas(a, b)
    union = area_a + area_b - inter
    out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def giou(a, b):
    """Generalized IoU in [-1, 1]; -1 when both boxes are degenerate."""
    inter, area_a, area_b, hull = _areas(a, b)
    union = area_a + area_b - inter
    valid = union > 0
    safe_union = np.where(valid, union, 1.0)
    safe_hull = np.where(hull > 0, hull, 1.0)
    g = inter / safe_union - (hull - union) / safe_hull
    out = np.where(valid, g, -1.0)
    return float(out) if out.ndim == 0 else out


def giou_scaled01(a, b):
    """GIoU mapped affinely from [-1, 1] onto [0, 1]."""
    g = giou(a, b)
    return (g + 1.0) / 2.0


def giou_tensor(pred_center: Tensor, gt_corner: np.ndarray) -> Tensor:
    """Differentiable GIoU of predicted center-form boxes against fixed
    ground-truth corner-form boxes (both in the normalized [0,1] frame).

    ``pred_center``: (n, 4) tensor (cx, cy, w, h); ``gt_corner``: (n, 4)
    ndarray. Returns an (n,) tensor. Assumes non-degenerate ground truth.
    """
    cx = ad.narrow(pred_center, -1, 0, 1)
    cy = ad.narrow(pred_center, -1, 1, 1)
    w = ad.narrow(pred_center, -1, 2, 1)
    h = ad.narrow(pred_center, -1, 3, 1)
    px0, px1 = cx - w * 0.5, cx + w * 0.5
    py0, py1 = cy - h * 0.5, cy + h * 0.5

    g = np.asarray(gt_corner, dtype=np.float64)
    gx0, gy0 = g[..., 0:1], g[..., 1:2]
    gx1, gy1 = g[..., 2:3], g[..., 3:4]

    iw = ad.clamp_min(ad.minimum(px1, ad.constant(gx1)) - ad.maximum(px0, ad.constant(gx0)), 0.0)
    ih = ad.clamp_min(ad.minimum(py1, ad.constant(gy1)) - ad.maximum(py0, ad.constant(gy0)), 0.0)
    inter = iw * ih
    area_p = (px1 - px0) * (py1 - py0)
    area_g = ad.constant((gx1 - gx0) * (gy1 - gy0))
    union = area_p + area_g - inter

    hw = ad.maximum(px1, ad.constant(gx1)) - ad.minimum(px0, ad.constant(gx0))
    hh = ad.maximum(py1, ad.constant(gy1)) - ad.minimum(py0, ad.constant(gy0))
    hull = hw * hh

    eps = 1e-12
    out = inter / (union + eps) - (hull - union) / (hull + eps)
    return ad.reshape(out, (out.shape[0],))
