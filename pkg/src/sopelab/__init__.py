"""Offline-to-online soft actor-critic with adaptively stopped critic stabilization."""
from .agent import AgentConfig, SacAgent
from .config import ScheduleConfig, load_config
from .driver import RunResult, evaluate_policy, run, run_rlpd_lite, run_sacfd, run_sope, run_speq_fixed
from .errors import ConfigError, DependencyError, FormatError, NumericError, SopeError, UsageError
from .opestop import OpeController, estimate_j_dm, observe, run_stabilization
from .replay import DualReplayBuffer

__version__ = "0.1.0"
