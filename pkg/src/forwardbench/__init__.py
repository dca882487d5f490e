"""Fair, desk-scale benchmark of backpropagation against BP-free training rules.

BP, Forward-Forward, Cascaded Forward (Rand / DFA) and Mono-Forward share
one data pipeline, one tuner, one early-stopping rule and one telemetry
bracket, so accuracy and efficiency deltas compare like with like.
"""
from .bench import ComparisonRow, ExperimentConfig, Summary, compare, load_config, render_report, run_experiment
from .data import DatasetSpec, DataSplits, LabeledBatch, load_dataset
from .models import CascadeSpec, ConvBlockSpec, DenseBlockSpec, MlpSpec
from .search import EarlyStopPolicy, SearchSpace, early_stop_step, random_search
from .telemetry import PowerModel, RunMetrics, Telemetry
from .trainers import TRAINERS, RunResult, TrainConfig, train

__version__ = "0.1.0"
