"""Synthetic cardiac-like complex phantoms.

Each phantom is a torso ellipse with a fat rim, two lungs, a left-ventricle
blood pool inside a myocardial ring, a right-ventricle pool, and a few small
vessels. Tissue plateaus are modulated by a gentle smooth bias field and the
whole image carries a smooth low-order phase. Output is scaled so the 99th
percentile magnitude is one.
"""
from __future__ import annotations

import numpy as np

# nominal magnitudes before bias and normalisation
TISSUE = {
    "muscle": (0.28, 0.34),
    "fat": (0.70, 0.80),
    "lung": (0.03, 0.06),
    "myocardium": (0.44, 0.50),
    "lv_blood": (0.95, 1.00),
    "rv_blood": (0.85, 0.90),
    "vessel": (0.90, 1.00),
}
BIAS_AMPLITUDE = 0.06
PHASE_AMPLITUDE = np.pi / 3


def _ellipse(yy, xx, cy, cx, ry, rx, theta=0.0):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def cardiac_phantom(H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    """One complex128 ``(H, W)`` phantom, p99 magnitude normalised to 1."""
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    u = rng.uniform
    level = {k: u(*v) for k, v in TISSUE.items()}
    img = np.zeros((H, W))

    cy, cx = u(-0.04, 0.04), u(-0.04, 0.04)
    ry, rx = u(0.70, 0.85), u(0.78, 0.92)
    body = _ellipse(yy, xx, cy, cx, ry, rx)
    rim = u(0.06, 0.10)
    img[body] = level["fat"]
    img[_ellipse(yy, xx, cy, cx, ry - rim, rx - rim)] = level["muscle"]

    for side in (-1, 1):
        img[_ellipse(yy, xx, cy + u(-0.15, 0.0), cx + side * u(0.38, 0.48),
                     u(0.30, 0.40), u(0.16, 0.22), u(-0.3, 0.3))] = level["lung"]

    hy, hx = cy + u(-0.05, 0.12), cx + u(-0.12, 0.02)
    theta = u(-0.6, 0.6)
    ory, orx = u(0.20, 0.26), u(0.22, 0.28)
    wall = u(0.05, 0.08)
    # RV sits beside the LV and is partly covered by the septum
    img[_ellipse(yy, xx, hy - 0.05, hx - orx * 0.9, ory * 0.9, orx * 0.75, theta)] = level["rv_blood"]
    img[_ellipse(yy, xx, hy, hx, ory, orx, theta)] = level["myocardium"]
    img[_ellipse(yy, xx, hy, hx, ory - wall, orx - wall, theta)] = level["lv_blood"]
    # papillary muscles
    for _ in range(2):
        a = u(0, 2 * np.pi)
        r = (ory - wall) * 0.55
        img[_ellipse(yy, xx, hy + r * np.sin(a), hx + r * np.cos(a), 0.025, 0.025)] = level["myocardium"]

    for _ in range(rng.integers(2, 5)):
        vy, vx = cy + u(-0.55, 0.55), cx + u(-0.55, 0.55)
        if img[int((vy + 1) / 2 * (H - 1)), int((vx + 1) / 2 * (W - 1))] == level["muscle"]:
            img[_ellipse(yy, xx, vy, vx, u(0.03, 0.06), u(0.03, 0.06))] = level["vessel"]

    coef = rng.uniform(-1, 1, size=5)
    basis = np.stack([xx, yy, xx * yy, xx ** 2 - 0.5, yy ** 2 - 0.5])
    bias = 1.0 + BIAS_AMPLITUDE * np.tanh(np.tensordot(coef, basis, axes=1))
    pc = rng.uniform(-1, 1, size=4)
    phase = PHASE_AMPLITUDE * np.tanh(pc[0] + pc[1] * xx + pc[2] * yy + pc[3] * xx * yy)

    z = img * bias * np.exp(1j * phase)
    p99 = np.percentile(np.abs(z), 99)
    return z / p99


def phantom_batch(count: int, H: int, W: int, seed: int) -> list[np.ndarray]:
    return [cardiac_phantom(H, W, np.random.default_rng([seed, i])) for i in range(count)]
