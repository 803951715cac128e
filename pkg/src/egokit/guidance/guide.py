from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..body import SHAPE_RANGE
from ..geometry import matrix_to_rot6d, rot6d_to_matrix
from ..state import CONTACT_SLICE, ROT_SLICE, SHAPE_SLICE
from .costs import BodyGuidanceProblem, GuidanceInputs, GuidanceWeights
from .lm import LMConfig, LMResult, lm_solve


@dataclass(frozen=True)
class GuideConfig:
    guided_steps: int = 10  # guidance runs on this many final DDIM steps
    lm: LMConfig = field(default_factory=lambda: LMConfig(max_iterations=4, cg_tol=1e-4, cg_max_iterations=100))


def guide(theta_hat, beta, contacts, cpf_rot, cpf_pos, observations=(), weights: GuidanceWeights = GuidanceWeights(),
          config: GuideConfig = GuideConfig(), return_result: bool = False):
    """Refine denoiser rotations (T, 51, 3, 3) against hand, skating and prior costs."""
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    inputs = GuidanceInputs(theta_hat, beta, contacts, cpf_rot, cpf_pos, list(observations))
    result: LMResult = lm_solve(BodyGuidanceProblem(inputs, weights), theta_hat, config.lm)
    return (result.x, result) if return_result else result.x


def is_guided_step(step_index: int, total: int, guided_steps: int) -> bool:
    return step_index >= total - guided_steps


def make_hook(cpf_rot, cpf_pos, observations=(), weights: GuidanceWeights = GuidanceWeights(),
              config: GuideConfig = GuideConfig(), log=None):
    """Sampler hook replacing the clean-state prediction with its guided refinement.

    Shape (averaged over time) and contacts are read from the prediction and
    held fixed.
    """
    observations = list(observations)

    def hook(x0, step_index, total):
        if not is_guided_step(step_index, total, config.guided_steps):
            return x0
        theta_hat = rot6d_to_matrix(x0[:, ROT_SLICE].reshape(len(x0), -1, 6))
        beta = np.broadcast_to(np.clip(x0[:, SHAPE_SLICE].mean(axis=0), *SHAPE_RANGE), (len(x0), 2))
        contacts = np.clip(x0[:, CONTACT_SLICE], 0.0, 1.0)
        theta, res = guide(theta_hat, beta, contacts, cpf_rot, cpf_pos, observations, weights, config,
                           return_result=True)
        if log is not None:
            log.append((step_index, res.trace[0], res.cost))
        out = np.array(x0, dtype=np.float64)
        out[:, ROT_SLICE] = matrix_to_rot6d(theta).reshape(len(x0), -1)
        return out

    return hook
