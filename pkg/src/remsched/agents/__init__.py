"""Learning agents: structure-enhanced DQN/DDPG and their conventional baselines."""
from .common import (METRIC_COLUMNS, Featurizer, SeDdpgConfig, SeDqnConfig, TrainResult,
                     write_metrics_csv)
from .ddpg import (ActorModel, actor_gradients, critic_loss, ddpg_losses, encode_action,
                   map_virtual_action, se_critic_loss, se_ddpg_losses, train_ddpg, train_se_ddpg)
from .dqn import QNetModel, dqn_loss, se_dqn_loss, train_dqn, train_se_dqn
from .selection import (SelectionOutcome, epsilon_greedy_action, fill_free_channels,
                        loose_se_action, relaxed_constraint_ok, tight_se_action)

__all__ = [
    "METRIC_COLUMNS", "Featurizer", "SeDdpgConfig", "SeDqnConfig", "TrainResult",
    "write_metrics_csv", "ActorModel", "actor_gradients", "critic_loss", "ddpg_losses",
    "encode_action", "map_virtual_action", "se_critic_loss", "se_ddpg_losses", "train_ddpg",
    "train_se_ddpg", "QNetModel", "dqn_loss", "se_dqn_loss", "train_dqn", "train_se_dqn",
    "SelectionOutcome", "epsilon_greedy_action", "fill_free_channels", "loose_se_action",
    "relaxed_constraint_ok", "tight_se_action",
]
