"""Teacher-constrained policy optimization on gridworlds."""
from .divergence import ClipConfig, check_step_bound, kl_step_estimate, kl_trajectory_exact
from .errors import AssumptionViolation, ConfigError, ContractError, InfiniteDivergenceError
from .grid import GridSpec, load_grid
from .mdp import MdpSpec, Trajectory, greedy_rollout, sample_batch
from .pdpg import PdpgConfig, run_pdpg
from .policy import Policy, TablePolicy, load_policy, save_policy
from .practical import PracticalConfig, run_practical

__version__ = "0.1.0"
