from .pipeline import ExperimentConfig, load_config, run_pipeline, sweep_check_interval
from .scenarios import Obstacle, Scenario, ScenarioSpec, generate_scenario, initial_state, make_problem
from .stats import analyze_correlation, association_band, pearson, spearman

__all__ = [
    "ExperimentConfig", "load_config", "run_pipeline", "sweep_check_interval",
    "Obstacle", "Scenario", "ScenarioSpec", "generate_scenario", "initial_state",
    "make_problem", "analyze_correlation", "association_band", "pearson", "spearman",
]
