"""Optimizer-driven l-inf attacks.

Seven iterative optimizers (gd, mgd, nagd, adam, ladam, adabelief, msvag)
plus one-step fgsm share a single ascent loop: compute the loss gradient at
the current (or lookahead) point, optionally add the outward l2 pull term,
turn the gradient into a direction, take a step of ``step_255/255``, and
clamp back into the epsilon box intersected with [0,1].

Budgets and distances (epsilon, alpha, RMSE) are configured and reported on
the 0-255 pixel scale; the pixel vectors themselves stay in unit scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .metrics import PerturbationStats, perturbation_stats
from .nnet import Network, cross_entropy, forward, input_gradient

GD = "gd"
MGD = "mgd"
NAGD = "nagd"
ADAM = "adam"
LADAM = "ladam"
ADABELIEF = "adabelief"
MSVAG = "msvag"
FGSM = "fgsm"

ITERATIVE_OPTIMIZERS = (GD, MGD, NAGD, ADAM, LADAM, ADABELIEF, MSVAG)
SIGN_FAMILY = (GD, MGD, NAGD)

L1_FLOOR = 1e-12


@dataclass(frozen=True)
class LossTarget:
    """Stop once the surrogate's probability on the true class drops to tau."""

    tau: float = 0.03


@dataclass(frozen=True)
class RmseTarget:
    """Stop once the perturbation RMSE (255 scale) reaches r_255."""

    r_255: float = 15.0


@dataclass(frozen=True)
class IterationsOnly:
    """Run for exactly max_iters steps."""


StopRule = LossTarget | RmseTarget | IterationsOnly


def describe_stop_rule(rule: StopRule) -> str:
    if isinstance(rule, LossTarget):
        return f"loss_target({rule.tau:.6g})"
    if isinstance(rule, RmseTarget):
        return f"rmse_target({rule.r_255:.6g})"
    return "iterations_only"


@dataclass(frozen=True)
class AttackConfig:
    """One attack run's knobs; defaults follow the epsilon=16 convention."""

    optimizer_kind: str
    epsilon_255: float = 16.0
    step_255: float | None = None  # default: epsilon/10 sign family, epsilon/5 otherwise
    gamma: float = 0.0
    max_iters: int = 200
    stop_rule: StopRule = field(default_factory=LossTarget)
    mu: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_lambda: float = 0.01

    def __post_init__(self):
        kind = self.optimizer_kind
        if kind not in ITERATIVE_OPTIMIZERS and kind != FGSM:
            raise ConfigError(f"optimizer_kind: unknown optimizer {kind!r}")
        if not 0.0 < self.epsilon_255 <= 255.0:
            raise ConfigError(f"epsilon_255: must be in (0, 255], got {self.epsilon_255}")
        if self.step_255 is None:
            divisor = 10.0 if kind in SIGN_FAMILY or kind == FGSM else 5.0
            object.__setattr__(self, "step_255", self.epsilon_255 / divisor)
        if self.step_255 <= 0.0:
            raise ConfigError(f"step_255: must be positive, got {self.step_255}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma: must be non-negative, got {self.gamma}")
        if self.max_iters < 0:
            raise ConfigError(f"max_iters: must be non-negative, got {self.max_iters}")
        if isinstance(self.stop_rule, LossTarget) and not 0.0 < self.stop_rule.tau < 1.0:
            raise ConfigError(f"stop_rule.tau: must be in (0, 1), got {self.stop_rule.tau}")
        if isinstance(self.stop_rule, RmseTarget):
            if self.stop_rule.r_255 <= 0.0:
                raise ConfigError(f"stop_rule.r_255: must be positive, got {self.stop_rule.r_255}")
            if self.stop_rule.r_255 > self.epsilon_255:
                raise ConfigError(
                    f"stop_rule.r_255: RMSE target {self.stop_rule.r_255} exceeds "
                    f"epsilon_255={self.epsilon_255}; RMSE cannot pass the l-inf bound"
                )


@dataclass
class OptimizerState:
    """Per-run buffers: step counter, first moment m, second moment / variance v.

    For the sign-momentum kinds m holds the l1-normalized velocity and v is
    unused (kept zeroed); for the Adam family and msvag both are exponential
    moving averages.
    """

    kind: str
    t: int
    m: np.ndarray
    v: np.ndarray


def init_optimizer_state(kind: str, n: int) -> OptimizerState:
    if kind not in ITERATIVE_OPTIMIZERS:
        raise ConfigError(f"init_optimizer_state: no state for optimizer {kind!r}")
    return OptimizerState(kind=kind, t=0, m=np.zeros(n), v=np.zeros(n))


def lookahead_point(state: OptimizerState, x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Where nagd evaluates its gradient: a jump along the accumulated velocity."""
    if state.kind != NAGD:
        return x
    return x + (cfg.step_255 / 255.0) * cfg.mu * state.m


def optimizer_direction(
    state: OptimizerState, grad: np.ndarray, cfg: AttackConfig
) -> tuple[OptimizerState, np.ndarray]:
    """Advance the optimizer one step and return the ascent direction.

    The caller applies ``x <- project(x + (step_255/255) * d)``. Sign-family
    directions are +-1/0 per pixel; Adam-family directions are bounded ratios;
    msvag keeps the gradient's own scale (variance-adapted momentum).
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to optimizer_direction")
    if state.kind != cfg.optimizer_kind:
        raise ConfigError(f"state kind {state.kind!r} does not match config {cfg.optimizer_kind!r}")

    state.t += 1
    t = state.t
    if state.kind == GD:
        return state, np.sign(grad)

    if state.kind in (MGD, NAGD):
        l1 = max(float(np.sum(np.abs(grad))), L1_FLOOR)
        state.m = cfg.mu * state.m + grad / l1
        return state, np.sign(state.m)

    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.adam_eps
    if state.kind in (ADAM, LADAM):
        state.m = b1 * state.m + (1.0 - b1) * grad
        state.v = b2 * state.v + (1.0 - b2) * grad * grad
        m_hat = state.m / (1.0 - b1**t)
        v_hat = state.v / (1.0 - b2**t)
        return state, m_hat / (np.sqrt(v_hat) + eps)

    if state.kind == ADABELIEF:
        state.m = b1 * state.m + (1.0 - b1) * grad
        diff = grad - state.m
        state.v = b2 * state.v + (1.0 - b2) * diff * diff + eps
        m_hat = state.m / (1.0 - b1**t)
        s_hat = state.v / (1.0 - b2**t)
        return state, m_hat / (np.sqrt(s_hat) + eps)

    # msvag: variance-adapted momentum with a single smoothing constant beta1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b1 * state.v + (1.0 - b1) * grad * grad
    m_hat = state.m / (1.0 - b1**t)
    v_hat = state.v / (1.0 - b1**t)
    rho = ((1.0 - b1) * (1.0 + b1 ** (t + 1))) / ((1.0 + b1) * (1.0 - b1 ** (t + 1)))
    s = (v_hat - m_hat * m_hat) / (1.0 - rho)
    m_sq = m_hat * m_hat
    denom = m_sq + rho * s
    factor = np.divide(m_sq, denom, out=np.zeros_like(m_sq), where=denom > 0.0)
    return state, np.clip(factor, 0.0, 1.0) * m_hat


def project_linf_box(
    candidate: np.ndarray, origin: np.ndarray, epsilon_255: float
) -> np.ndarray:
    """Elementwise clamp onto {x : |x-origin|*255 <= epsilon} intersected with [0,1].

    This is the exact l-inf metric projection onto the intersection, and is
    idempotent.
    """
    candidate = np.asarray(candidate, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if candidate.shape != origin.shape:
        raise ShapeError(f"project_linf_box: shape mismatch {candidate.shape} vs {origin.shape}")
    eps = epsilon_255 / 255.0
    return np.clip(np.clip(candidate, origin - eps, origin + eps), 0.0, 1.0)


def augmented_gradient(
    net: Network, x: np.ndarray, origin: np.ndarray, label: int, gamma: float
) -> np.ndarray:
    """Gradient of cross-entropy plus gamma times the l2 distance from the origin.

    The distance term's gradient is the unit vector (x-origin)/||x-origin||,
    defined as zero at x = origin. gamma=0 returns the plain input gradient
    bitwise.
    """
    g = input_gradient(net, x, label)
    if gamma == 0.0:
        return g
    x = np.asarray(x, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if x.shape != origin.shape:
        raise ShapeError(f"augmented_gradient: shape mismatch {x.shape} vs {origin.shape}")
    delta = x - origin
    norm = float(np.linalg.norm(delta))
    if norm > 0.0:
        g = g + gamma * delta / norm
    return g


def rmse_255(x: np.ndarray, origin: np.ndarray) -> float:
    delta = 255.0 * (np.asarray(x) - np.asarray(origin))
    return float(np.sqrt(np.mean(delta * delta)))


def check_stop(
    x: np.ndarray, origin: np.ndarray, true_prob: float, iters: int, cfg: AttackConfig
) -> str | None:
    """Return a stop reason or None; the iteration budget beats all other rules."""
    if iters >= cfg.max_iters:
        return "max_iters"
    rule = cfg.stop_rule
    if isinstance(rule, LossTarget) and true_prob <= rule.tau:
        return "loss_target"
    if isinstance(rule, RmseTarget) and rmse_255(x, origin) >= rule.r_255:
        return "rmse_target"
    return None


@dataclass(frozen=True)
class AttackResult:
    """Final adversarial pixels plus how the run went on the surrogate."""

    adv_pixels: np.ndarray
    iterations: int
    final_true_prob: float
    final_ce_loss: float
    stats: PerturbationStats
    surrogate_fooled: bool
    stop_reason: str


def _finish(net: Network, x: np.ndarray, origin: np.ndarray, label: int,
            iterations: int, stop_reason: str) -> AttackResult:
    probs = forward(net, x)
    return AttackResult(
        adv_pixels=x,
        iterations=iterations,
        final_true_prob=float(probs[label]),
        final_ce_loss=cross_entropy(probs, label),
        stats=perturbation_stats(x, origin),
        surrogate_fooled=int(np.argmax(probs)) != label,
        stop_reason=stop_reason,
    )


def run_attack(net: Network, sample, cfg: AttackConfig) -> AttackResult:
    """Iterative ascent loop with per-step box projection; fully deterministic.

    Stop conditions are evaluated before each step, so max_iters=0 returns
    the untouched original. The ladam kind additionally shrinks the current
    perturbation by (1 - decay_lambda) before every step, which is the
    perturbation-space analog of decoupled weight decay.
    """
    if cfg.optimizer_kind == FGSM:
        raise ConfigError("run_attack: fgsm is one-step; call fgsm() instead")
    origin = np.asarray(sample.pixels, dtype=np.float64)
    label = sample.label
    x = origin.copy()
    state = init_optimizer_state(cfg.optimizer_kind, origin.size)
    step = cfg.step_255 / 255.0
    true_prob = float(forward(net, x)[label])
    iters = 0
    while True:
        reason = check_stop(x, origin, true_prob, iters, cfg)
        if reason is not None:
            return _finish(net, x, origin, label, iters, reason)
        if cfg.optimizer_kind == LADAM:
            x = origin + (1.0 - cfg.decay_lambda) * (x - origin)
        grad_at = lookahead_point(state, x, cfg)
        g = augmented_gradient(net, grad_at, origin, label, cfg.gamma)
        state, d = optimizer_direction(state, g, cfg)
        x = project_linf_box(x + step * d, origin, cfg.epsilon_255)
        iters += 1
        true_prob = float(forward(net, x)[label])


def fgsm(net: Network, sample, epsilon_255: float = 16.0) -> AttackResult:
    """One full-budget signed-gradient step; pushes every pixel to the box edge."""
    origin = np.asarray(sample.pixels, dtype=np.float64)
    g = input_gradient(net, origin, sample.label)
    x = project_linf_box(origin + (epsilon_255 / 255.0) * np.sign(g), origin, epsilon_255)
    return _finish(net, x, origin, sample.label, iterations=1, stop_reason="max_iters")
