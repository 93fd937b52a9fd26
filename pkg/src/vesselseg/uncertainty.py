"""Objective-dependent uncertainty weighting for the two segmentation losses.

Each objective carries an observation-noise scale sigma, learned alongside the
network weights. We parameterize by s = log sigma^2 so the parameter is
unconstrained and sigma^2 = exp(s) stays positive. A single objective's loss
becomes exp(-s) * L + s/2, and the two objectives are combined by summing
their scaled losses plus the log-sigma regularizers.
"""

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
import torch.nn as nn


class UncertaintyParams(nn.Module):
    """Learnable log-variances, one scalar per objective."""

    def __init__(self, s_main=0.0, s_aux=0.0):
        super().__init__()
        self.s_main = nn.Parameter(torch.tensor(float(s_main), dtype=torch.float64))
        self.s_aux = nn.Parameter(torch.tensor(float(s_aux), dtype=torch.float64))

    @property
    def sigma_main(self):
        return float(torch.exp(0.5 * self.s_main))

    @property
    def sigma_aux(self):
        return float(torch.exp(0.5 * self.s_aux))


@dataclass
class LossBreakdown:
    """One training step's loss terms and the noise scales that weighted them.

    `combined` keeps whatever type the inputs had (a live tensor during
    training, a float in analysis code); the reporting fields are floats.
    """
    l_main: float
    l_aux: float
    combined: Union[float, torch.Tensor]
    sigma_main: float
    sigma_aux: float


def scaled_softmax(logits, sigma):
    """Softmax of logits / sigma^2, per pixel.

    Larger sigma flattens the distribution towards uniform; sigma = 1 is the
    plain softmax. Accepts a C-vector, (C, H, W), or (B, C, H, W); numpy in,
    numpy out.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    was_numpy = not torch.is_tensor(logits)
    x = torch.as_tensor(np.asarray(logits, dtype=np.float64) if was_numpy else logits)
    if x.dim() in (1, 3):
        dim = 0
    elif x.dim() == 4:
        dim = 1
    else:
        raise ValueError(f"unsupported logits rank {x.dim()}")
    probs = torch.softmax(x / float(sigma) ** 2, dim=dim)
    return probs.numpy() if was_numpy else probs


def single_objective_loss(base_loss, s):
    """exp(-s) * base_loss + s/2, with s = log sigma^2.

    This is (1/sigma^2) * L + log sigma. Works on floats or tensors; the
    result is differentiable in both arguments when they are tensors.
    """
    if torch.is_tensor(base_loss) or torch.is_tensor(s):
        base_loss = base_loss if torch.is_tensor(base_loss) else torch.tensor(float(base_loss))
        s = s if torch.is_tensor(s) else torch.tensor(float(s))
        return torch.exp(-s) * base_loss + 0.5 * s
    return math.exp(-s) * base_loss + 0.5 * s


def combined_loss(l_main, l_aux, params):
    """Two-objective loss: each term scaled by its learned inverse variance.

    combined = exp(-s_main) * l_main + exp(-s_aux) * l_aux
               + s_main/2 + s_aux/2

    Args:
        l_main, l_aux: finite non-negative losses (floats or scalar tensors).
        params: object exposing s_main and s_aux (see UncertaintyParams).

    Returns:
        LossBreakdown; `combined` is a tensor whenever any input is, so it
        can be backpropagated through both the losses and the s parameters.
    """
    def as_float(x):
        return float(x.detach()) if torch.is_tensor(x) else float(x)

    s_main, s_aux = params.s_main, params.s_aux
    combined = single_objective_loss(l_main, s_main) + single_objective_loss(l_aux, s_aux)
    return LossBreakdown(
        l_main=as_float(l_main),
        l_aux=as_float(l_aux),
        combined=combined,
        sigma_main=math.exp(0.5 * as_float(s_main)),
        sigma_aux=math.exp(0.5 * as_float(s_aux)),
    )


def static_combined_loss(l_main, l_aux, lam):
    """Fixed-weight baseline: l_main + lam * l_aux."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    return l_main + lam * l_aux


def approximation_gap(logits, sigma):
    """Diagnostic for the closed-form simplification of the scaled likelihood.

    Measures |log LHS - log RHS| where
        LHS = (sum_c exp f_c) ** (1 / sigma^2)
        RHS = (1 / sigma) * sum_c exp(f_c / sigma^2).
    Exact (gap 0) at sigma = 1; grows as sigma departs from 1. Not used in
    training.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    f = np.asarray(logits, dtype=np.float64).ravel()
    from scipy.special import logsumexp
    log_lhs = logsumexp(f) / sigma ** 2
    log_rhs = logsumexp(f / sigma ** 2) - math.log(sigma)
    return abs(log_lhs - log_rhs)
