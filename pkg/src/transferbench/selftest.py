"""Built-in oracle checks behind `transferbench selftest`.

These re-run the core correctness oracles without pytest: finite-difference
gradient agreement, projection properties, optimizer closed forms, and the
rank-correlation unit values.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from . import attack, metrics, nnet

log = logging.getLogger("transferbench")


def finite_difference_gradient(net, pixels, label, step=1e-6):
    """Central-difference gradient of cross_entropy(forward(x), label)."""
    grad = np.zeros_like(pixels)
    for i in range(pixels.size):
        hi = pixels.copy()
        lo = pixels.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = nnet.cross_entropy(nnet.forward(net, hi), label)
        f_lo = nnet.cross_entropy(nnet.forward(net, lo), label)
        grad[i] = (f_hi - f_lo) / (2.0 * step)
    return grad


def random_small_net(rng) -> tuple[nnet.Network, int]:
    """A random tiny net (dense or conv head) with non-degenerate weights."""
    ncls = int(rng.integers(2, 5))
    if rng.random() < 0.5:
        n = int(rng.integers(4, 9))
        arch = nnet.ArchSpec(
            input_shape=(n, 1, 1),
            layers=(nnet.flatten(), nnet.dense(n, 6), nnet.relu(), nnet.dense(6, ncls)),
            num_classes=ncls,
        )
    else:
        side = int(rng.integers(4, 7))
        out = ((side - 2) // 1) ** 2 * 2
        arch = nnet.ArchSpec(
            input_shape=(side, side, 1),
            layers=(nnet.conv(1, 2, 3, 1), nnet.relu(), nnet.flatten(), nnet.dense(out, ncls)),
            num_classes=ncls,
        )
    net = nnet.init_network(arch, seed=int(rng.integers(0, 2**31)))
    for wts in net.weights:
        if "w" in wts:
            wts["w"] = wts["w"] * 2.0
    return net, ncls


def _min_relu_margin(net, pixels) -> float:
    """Smallest |pre-activation| feeding any relu; 0 means exactly on a kink."""
    xb = nnet._as_batch(net, pixels)
    _, caches = nnet._forward_cached(net, xb)
    margins = [
        float(np.min(np.abs(cache)))
        for layer, cache in zip(net.arch.layers, caches)
        if layer.kind == nnet.RELU
    ]
    return min(margins) if margins else np.inf


def draw_gradient_case(rng) -> tuple[nnet.Network, np.ndarray, int]:
    """Random (net, input, label) triple, resampled away from the two regimes
    where central differences say nothing: relu kinks (non-differentiable) and
    vanishing gradients (cancellation noise swamps the quotient)."""
    while True:
        net, ncls = random_small_net(rng)
        pixels = rng.uniform(0.05, 0.95, net.arch.input_size)
        label = int(rng.integers(0, ncls))
        if _min_relu_margin(net, pixels) < 1e-4:
            continue
        if np.linalg.norm(nnet.input_gradient(net, pixels, label)) < 1e-4:
            continue
        return net, pixels, label


def check_gradient_oracle(cases: int = 100, seed: int = 7, tol: float = 1e-5) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        net, pixels, label = draw_gradient_case(rng)
        g = nnet.input_gradient(net, pixels, label)
        g_fd = finite_difference_gradient(net, pixels, label)
        denom = max(float(np.linalg.norm(g_fd)), 1e-12)
        rel = float(np.linalg.norm(g - g_fd)) / denom
        worst = max(worst, rel)
    return worst <= tol, f"worst relative error {worst:.3g} over {cases} cases (tol {tol:g})"


def check_projection(cases: int = 10_000, seed: int = 11) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        n = int(rng.integers(1, 12))
        origin = rng.uniform(0.0, 1.0, n)
        eps = float(rng.uniform(0.5, 64.0))
        eps_unit = eps / 255.0
        cand = rng.uniform(-0.5, 1.5, n)
        proj = attack.project_linf_box(cand, origin, eps)
        # exact feasibility is against the box the clamp itself computes;
        # the 255-scale radius additionally holds to the documented 1e-9 slack
        lo = np.maximum(origin - eps_unit, 0.0)
        hi = np.minimum(origin + eps_unit, 1.0)
        if np.any(proj < lo) or np.any(proj > hi):
            return False, "projection left the feasible box"
        if np.max(np.abs(proj - origin)) * 255.0 > eps + 1e-9:
            return False, "projection exceeded the 255-scale radius"
        if np.any(proj < 0.0) or np.any(proj > 1.0):
            return False, "projection left the pixel range"
        if not np.array_equal(attack.project_linf_box(proj, origin, eps), proj):
            return False, "projection is not idempotent"
        # a point strictly inside both boxes must come back unchanged
        inside = np.clip(origin + (2.0 * rng.random(n) - 1.0) * 0.98 * eps_unit, 0.0, 1.0)
        if not np.array_equal(attack.project_linf_box(inside, origin, eps), inside):
            return False, "projection moved an already-feasible point"
    return True, f"{cases} cases: feasibility, idempotence, inside-ball identity"


def check_optimizer_closed_forms() -> tuple[bool, str]:
    checks: list[tuple[str, float]] = []

    cfg = attack.AttackConfig(optimizer_kind="gd")
    st = attack.init_optimizer_state("gd", 2)
    _, d = attack.optimizer_direction(st, np.array([0.5, -2.0]), cfg)
    checks.append(("gd sign", float(np.max(np.abs(d - np.array([1.0, -1.0]))))))

    cfg = attack.AttackConfig(optimizer_kind="mgd", mu=1.0)
    st = attack.init_optimizer_state("mgd", 2)
    st, d1 = attack.optimizer_direction(st, np.array([2.0, 0.0]), cfg)
    st, d2 = attack.optimizer_direction(st, np.array([0.0, 2.0]), cfg)
    checks.append(("mgd step1", float(np.max(np.abs(d1 - np.array([1.0, 0.0]))))))
    checks.append(("mgd step2", float(np.max(np.abs(d2 - np.array([1.0, 1.0]))))))

    cfg = attack.AttackConfig(optimizer_kind="adam", adam_eps=0.0)
    st = attack.init_optimizer_state("adam", 1)
    _, d = attack.optimizer_direction(st, np.array([3.0]), cfg)
    checks.append(("adam t=1", abs(float(d[0]) - 1.0)))

    cfg = attack.AttackConfig(optimizer_kind="adabelief", adam_eps=0.0)
    st = attack.init_optimizer_state("adabelief", 1)
    _, d = attack.optimizer_direction(st, np.array([1.0]), cfg)
    checks.append(("adabelief t=1", abs(float(d[0]) - 1.0 / 0.9)))

    cfg = attack.AttackConfig(optimizer_kind="msvag")
    st = attack.init_optimizer_state("msvag", 2)
    g = np.array([0.7, -0.3])
    for _ in range(6):
        st, d = attack.optimizer_direction(st, g, cfg)
    checks.append(("msvag constant", float(np.max(np.abs(d - g)))))

    worst = max(err for _, err in checks)
    detail = ", ".join(f"{name}={err:.2e}" for name, err in checks)
    return worst <= 1e-9, detail


def check_spearman_units() -> tuple[bool, str]:
    vals = [
        metrics.spearman_rho([1, 2, 3], [10, 20, 30]) - 1.0,
        metrics.spearman_rho([1, 2, 3], [30, 20, 10]) + 1.0,
        metrics.spearman_rho([1, 2, 3], [1, 3, 2]) - 0.5,
    ]
    worst = max(abs(v) for v in vals)
    return worst <= 1e-12, f"unit deviations {[f'{v:.1e}' for v in vals]}"


ORACLES = (
    ("gradient_vs_finite_differences", check_gradient_oracle),
    ("linf_box_projection", check_projection),
    ("optimizer_closed_forms", check_optimizer_closed_forms),
    ("spearman_unit_values", check_spearman_units),
)


def run_selftest() -> bool:
    ok = True
    for name, fn in ORACLES:
        passed, detail = fn()
        log.info("selftest %-32s %s (%s)", name, "PASS" if passed else "FAIL", detail)
        ok = ok and passed
    return ok
