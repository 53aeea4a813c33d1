"""Online continual learning under explicit FLOPs and memory-bytes budgets."""
from .freezing import FreezePolicy, FreezeState, bfc, choose_depth, info_per_cost, update_fisher
from .ledger import BudgetLedger, adam_update_flops, check_budget, memory_capacity, step_flops
from .memory import MemoryStore
from .netcore import backward, build_network, forward, loss_grad, profile_layers
from .runner import RunConfig, compare, parse_config, run
from .stream import a_auc, a_last, disjoint_schedule, gaussian_schedule, load_dataset

__version__ = "0.1.0"
