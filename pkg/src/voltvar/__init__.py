"""Optimal design of IEEE 1547 Volt/VAR rules through an unrolled digital twin."""
from .feeder import (FeederModel, Scenario, ScenarioSet, build_radial_sensitivities,
                     load_explicit_model, load_model, load_scenarios, load_topology,
                     make_scenario, voltage)
from .rules import RuleParams, convert, default_rule, eval_rule, eval_rule_vector, validate
from .stability import (StabilityCertificate, min_depth, polytopic_check, polytopic_check_1p,
                        polytopic_check_3p, spectral_check)
from .dynamics import (DynamicsTrace, EquilibriumResult, equilibrium_coordinate_descent,
                       equilibrium_fixed_point, inner_objective, simulate, step)
from .twin import TwinConfig, TwinOutput, backward, block_forward, forward, loss
from .trainer import TrainConfig, TrainReport, evaluate, project, sgd_step, train
from .benchmark import (BigMSpec, GridSpec, check_bigM, enumerate_equilibrium,
                        grid_search_ord, kkt_residual)

__version__ = "0.1.0"
