"""Benchmark of KV-cache management policies for generative recommendation backbones."""

from .backbone import DecodeSession, ModelConfig, Parameters, forward_full, init_params, predict_ctr
from .bench import BenchReport, ScenarioSpec, depth_sweep, emit_report, pareto_frontier, run_benchmark
from .data import Dataset, load_csv, save_csv, split_temporal, synth_generate
from .metrics import ScoredImpressions, auc, gauc, logloss
from .numerics import MacMeter, Rng
from .policies import POLICIES, PolicyConfig, build_policy
from .resources import ResourceReport, macs_formula, measure
from .training import TrainSettings, TrainingDiverged, evaluate, train

__version__ = "0.1.0"
