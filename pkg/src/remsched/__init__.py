"""Sensor scheduling for remote state estimation over fading channels.

Exact MDP solutions with structural checks, and structure-enhanced deep
reinforcement-learning schedulers.
"""
from .channel import (ChannelModel, SchedulingEnv, SystemSpec, SysState, env_reset, env_step,
                      generate_random_system, is_valid_action, success_probability)
from .errors import CapacityError, ConvergenceError, ValidationError
from .estimation import (MseTable, ProcessModel, aoi_error_trace, reward,
                         steady_state_covariance)
from .mdp import (StateSpace, TruncatedMdp, enumerate_actions, evaluate_policy, solve,
                  transition_distribution, value_iteration)

__version__ = "0.1.0"
