"""Trace-driven simulation and scheduling for hybrid CPU/GPU MoE offloading."""

from .assignment import (Assignment, AssignmentInstance, all_cpu_assign,
                         all_gpu_assign, beam_assign, greedy_assign, makespan,
                         optimal_assign, static_threshold_assign, validate)
from .cache import (CacheState, CacheStats, ReplacementEvent, init_cache,
                    lookup, record_and_maybe_replace, replay_trace)
from .cost_model import (CostModel, default_cost_model, fit_cost_model,
                         load_cost_model, save_cost_model)
from .errors import (AssignmentError, CacheError, ConfigError,
                     ConstraintViolation, CostModelError, MoesimError,
                     PrefetchError, ReportError, SimulationError, TraceError)
from .metrics_report import HeatmapTable, load_balance_table, locality_heatmap
from .prefetch import (Predictor, PrefetchDecision, calibrate_residuals,
                       cosine_similarity_report, feature_predictor,
                       predict_next_layer, prefetch_accuracy, random_predictor,
                       residual_predictor, statistical_predictor)
from .simulator import (LayerTimeline, RunReport, SimConfig,
                        breakdown_experiment, pcie_fraction, simulate_layer,
                        simulate_run)
from .trace import (GateParams, ModelConfig, ResidualVectors, TokenStep, Trace,
                    derive_workloads, generate_synthetic_trace, load_trace,
                    save_trace)

__version__ = "0.1.0"
