from .buffer import ReplayBuffer, Transition, TransitionBatch
from .sac import (MODES, FinetuneConfig, HighLevelAction, SacActor, SacState,
                  actor_update, alpha_update, critic_update, head_logp_np,
                  hl_sample, init_sac, load_actor, save_actor,
                  scalar_bound)
from .loop import (DIVERGENCE_THRESHOLD, EnvFault, FinetuneResult, MazeEnv,
                   finetune_loop, tmrl_rollout)

__all__ = [
    "Transition", "TransitionBatch", "ReplayBuffer",
    "MODES", "FinetuneConfig", "HighLevelAction", "SacActor", "SacState",
    "init_sac", "hl_sample", "critic_update", "actor_update", "alpha_update",
    "head_logp_np", "scalar_bound", "save_actor", "load_actor",
    "EnvFault", "MazeEnv", "FinetuneResult", "tmrl_rollout", "finetune_loop",
    "DIVERGENCE_THRESHOLD",
]
