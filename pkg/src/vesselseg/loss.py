"""BCE + Dice + L2 hybrid loss with deep-supervision branch averaging.

Each supervision branch contributes ``bce + dice_term``; the weight penalty is
added once, to the final branch. The total is the mean over all branches. The
log-Dice term is shifted, ``log(1 - d + eps) - log(eps)``, so its minimum is 0
at d = 1 and the loss stays non-negative; ``linear`` mode uses ``1 - d``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arch import ForwardOutput, Network
from .errors import ConfigError
from .nn import Tensor, as_tensor, binary_cross_entropy, log, soft_dice, sum_squares

DICE_MODES = ("log", "linear")


@dataclass
class LossConfig:
    epsilon_clamp: float = 1e-7
    l2_coefficient: float = 1e-4
    dice_mode: str = "log"

    def validate(self) -> None:
        if not (0.0 < self.epsilon_clamp < 0.5):
            raise ConfigError(
                f"epsilon_clamp must be in (0, 0.5), got {self.epsilon_clamp}")
        if self.l2_coefficient < 0:
            raise ConfigError("l2_coefficient must be >= 0")
        if self.dice_mode not in DICE_MODES:
            raise ConfigError(f"dice_mode must be one of {DICE_MODES}")


@dataclass
class LossBreakdown:
    """Branch-averaged components; ``total == bce + dice_term + l2`` and also
    the mean of ``per_branch``. ``tensor`` is the differentiable scalar."""

    total: float
    bce: float
    dice_term: float
    l2: float
    per_branch: list[float] = field(default_factory=list)
    tensor: Tensor | None = None


def bce(pred, target, epsilon_clamp: float = 1e-7) -> Tensor:
    """Mean binary cross entropy over pixels (scalar tensor)."""
    return binary_cross_entropy(as_tensor(pred), _target_array(target), epsilon_clamp)


def dice_term(pred, target, cfg: LossConfig) -> Tensor:
    """Dice-derived penalty, 0 at perfect overlap, per the configured mode."""
    d = soft_dice(as_tensor(pred), _target_array(target))
    if cfg.dice_mode == "linear":
        return 1.0 - d
    eps = cfg.epsilon_clamp
    return log((1.0 - d) + eps) - float(np.log(eps))


def l2_penalty(network: Network, l2_coefficient: float) -> Tensor:
    """Coefficient times the sum of squared conv weights (biases excluded)."""
    if l2_coefficient < 0:
        raise ConfigError("l2 coefficient must be >= 0")
    weights = network.conv_weights()
    if l2_coefficient == 0.0 or not weights:
        return Tensor(np.asarray(0.0, dtype=np.float64))
    return sum_squares(weights) * l2_coefficient


def branch_loss(pred, target, network: Network, cfg: LossConfig) -> Tensor:
    """Backbone-branch loss: bce + dice_term + l2."""
    cfg.validate()
    core = bce(pred, target, cfg.epsilon_clamp) + dice_term(pred, target, cfg)
    return core + l2_penalty(network, cfg.l2_coefficient)


def hybrid_loss(outputs: ForwardOutput, target, network: Network,
                cfg: LossConfig) -> LossBreakdown:
    """Mean of per-branch losses over the final map and every side map."""
    cfg.validate()
    y = _target_array(target)
    branches = [outputs.final] + list(outputs.side_outputs)
    s = len(branches)
    bces = [bce(p, y, cfg.epsilon_clamp) for p in branches]
    dices = [dice_term(p, y, cfg) for p in branches]
    l2 = l2_penalty(network, cfg.l2_coefficient)
    per_branch_t = [bces[0] + dices[0] + l2] + \
        [b + d for b, d in zip(bces[1:], dices[1:])]
    total_t = per_branch_t[0]
    for t in per_branch_t[1:]:
        total_t = total_t + t
    total_t = total_t / s
    return LossBreakdown(
        total=total_t.item(),
        bce=sum(b.item() for b in bces) / s,
        dice_term=sum(d.item() for d in dices) / s,
        l2=l2.item() / s,
        per_branch=[t.item() for t in per_branch_t],
        tensor=total_t,
    )


def _target_array(target) -> np.ndarray:
    return target.data if isinstance(target, Tensor) else np.asarray(target)
