"""Trainers for BP and the three BP-free algorithms, behind one call signature."""
from .bp import BpModel, predict_bp, train_bp
from .cafo import CafoCascade, build_cascade, predict_cafo, train_cafo_dfa, train_cafo_rand
from .common import ALGORITHMS, RunResult, TrainConfig, TrainingDiverged
from .ff import FfModel, GoodnessConfig, predict_ff, train_ff
from .mf import MfModel, MfSchedule, predict_mf, train_mf

# every trainer is called as fn(spec, data, config, telemetry)
TRAINERS = {
    "bp": train_bp,
    "ff": train_ff,
    "mf": train_mf,
    "cafo_rand": train_cafo_rand,
    "cafo_dfa": train_cafo_dfa,
}


def train(spec, data, config: TrainConfig, telemetry=None) -> RunResult:
    return TRAINERS[config.algorithm](spec, data, config, telemetry)


__all__ = [
    "ALGORITHMS", "TRAINERS", "train", "TrainConfig", "RunResult", "TrainingDiverged",
    "train_bp", "predict_bp", "BpModel",
    "train_ff", "predict_ff", "FfModel", "GoodnessConfig",
    "train_mf", "predict_mf", "MfModel", "MfSchedule",
    "train_cafo_rand", "train_cafo_dfa", "predict_cafo", "CafoCascade", "build_cascade",
]
