"""Toy-scale self-evolving tool-use agent with experience distillation.

Modules:
    protocol     trajectory records, parsing, program validation, hard filters
    environment  fixture world, tools, rollout sampling
    policy       context-conditioned softmax policy and checkpoints
    reward       rubric judge, KScore and the mixed reward
    optimize     GRPO surrogate, SDL loss, gradients
    experience   comparison mining, bundles, buffer, teacher patching
    diagnostics  token-effect analysis and curve export
    evolve       the training loop
    adapters     external service adapters
"""

from .environment import World, load_world, run_group, run_rollout
from .evolve import RunConfig, run_evolution, run_step
from .experience import ExperienceBuffer, PromptEmbedder, mine_comparison
from .optimize import GrpoConfig, SdlConfig, combined_loss, group_advantages, k3, sdl_loss
from .policy import PolicyParameters
from .reward import compute_kscore, mixed_reward

__version__ = "0.1.0"

__all__ = [
    "World",
    "load_world",
    "run_group",
    "run_rollout",
    "RunConfig",
    "run_evolution",
    "run_step",
    "ExperienceBuffer",
    "PromptEmbedder",
    "mine_comparison",
    "GrpoConfig",
    "SdlConfig",
    "combined_loss",
    "group_advantages",
    "k3",
    "sdl_loss",
    "PolicyParameters",
    "compute_kscore",
    "mixed_reward",
]
