"""plastinet: neuron-level network growth and grow-train-prune experiments.

A small numpy-only stack for studying width growth in neural networks:
reverse-mode autodiff, four expandable layer families, dropin growth with
exact bookkeeping, pruning that inverts it, LoRA baselines, and a synthetic
spoof-detection task with EER evaluation to compare the strategies on.
"""

from .autodiff import Graph, GraphStateError, Tensor, backprop, backward, finite_diff_check, forward
from .config import (ExperimentConfig, STRATEGIES, apply_overrides, load_config,
                     parse_config, parse_config_text)
from .datasynth import LabeledExample, SplitData, SynthSpec, as_sequence, generate
from .experiment import (AblationEntry, AblationResult, ablation_sweep,
                         compare_strategies, planned_epochs, run_experiment)
from .growth import (DropinPlan, LoraAdapter, NeuronLedger, SliceRecord, apply_freeze,
                     dropin, lora_wrap, param_count, prune, select_layers, unfreeze_all)
from .layers import (AttentionBlock, Conv2dLayer, DenseLayer, Flatten, GruLayer,
                     ModelGraph, TimeMeanPool, attention_forward, build_model,
                     conv2d_forward, dense_forward, gru_forward, model_forward)
from .metrics import (RunReport, ScoreSet, compute_eer, eer_bruteforce, emit_report,
                      gradcam, gradcam_bruteforce, measure_backward_time,
                      parse_report_csv)
from .params import ParamStore, load_checkpoint, save_checkpoint
from .plasticity import PlasticityConfig, StageRecord, run_plasticity
from .training import (Adam, Sgd, TrainResult, cross_entropy, evaluate, make_optimizer,
                       score_examples, train_stage)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Graph", "GraphStateError", "forward", "backward", "backprop",
    "finite_diff_check",
    "ParamStore", "save_checkpoint", "load_checkpoint",
    "DenseLayer", "Conv2dLayer", "GruLayer", "AttentionBlock", "Flatten",
    "TimeMeanPool", "ModelGraph", "build_model",
    "dense_forward", "conv2d_forward", "gru_forward", "attention_forward",
    "model_forward",
    "NeuronLedger", "SliceRecord", "DropinPlan", "LoraAdapter",
    "select_layers", "dropin", "apply_freeze", "unfreeze_all", "prune",
    "lora_wrap", "param_count",
    "cross_entropy", "Sgd", "Adam", "make_optimizer", "train_stage",
    "TrainResult", "score_examples", "evaluate",
    "PlasticityConfig", "StageRecord", "run_plasticity",
    "SynthSpec", "LabeledExample", "SplitData", "as_sequence", "generate",
    "ScoreSet", "compute_eer", "eer_bruteforce", "gradcam", "gradcam_bruteforce",
    "measure_backward_time", "RunReport", "emit_report", "parse_report_csv",
    "ExperimentConfig", "STRATEGIES", "load_config", "parse_config",
    "parse_config_text", "apply_overrides",
    "run_experiment", "compare_strategies", "planned_epochs",
    "ablation_sweep", "AblationResult", "AblationEntry",
]
