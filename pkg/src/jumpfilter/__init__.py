"""State estimation for jump Markov systems: classical filters (KF, EKF,
IMM, particle filter), a hybrid recurrent filter with learned per-mode
Kalman gains, benchmark scenario generators, and an experiment harness."""

from .filters import (GaussianBelief, IMMBelief, LinearFilterModel,
                      NonlinearFilterModel, NumericalError, ParticleEnsemble,
                      ekf_step, fuse_gaussians, imm_step, init_particle_ensemble,
                      kf_step, pf_step, run_ekf, run_imm, run_kf, run_pf)
from .neural_filter import (JumpFilterNet, TrainConfig, TrainingAborted,
                            als_train, mf_gru_baseline, run_filter,
                            switch_agnostic_baseline, train_sequence_regressor,
                            trajectory_loss)
from .rng import substream, substream_seed
from .scenarios import SCENARIOS, Scenario, build_scenario, scenario_from_json
from .ssm import (GaussianInitialState, GaussianMixtureNoise, GaussianNoise,
                  ImpulseNoise, LaplacianNoise, MarkovChainProcess,
                  ModeDynamics, ModeSystem, NoNoise, SimulationError,
                  SumNoise, Trajectory, linear_mode, simulate_dataset,
                  simulate_trajectory)

__version__ = "0.1.0"

__all__ = [
    "GaussianBelief", "IMMBelief", "LinearFilterModel", "NonlinearFilterModel",
    "NumericalError", "ParticleEnsemble", "ekf_step", "fuse_gaussians",
    "imm_step", "init_particle_ensemble", "kf_step", "pf_step", "run_ekf",
    "run_imm", "run_kf", "run_pf",
    "JumpFilterNet", "TrainConfig", "TrainingAborted", "als_train",
    "mf_gru_baseline", "run_filter", "switch_agnostic_baseline",
    "train_sequence_regressor", "trajectory_loss",
    "substream", "substream_seed",
    "SCENARIOS", "Scenario", "build_scenario", "scenario_from_json",
    "GaussianInitialState", "GaussianMixtureNoise", "GaussianNoise",
    "ImpulseNoise", "LaplacianNoise", "MarkovChainProcess", "ModeDynamics",
    "ModeSystem", "NoNoise", "SimulationError", "SumNoise", "Trajectory",
    "linear_mode", "simulate_dataset", "simulate_trajectory",
    "__version__",
]
