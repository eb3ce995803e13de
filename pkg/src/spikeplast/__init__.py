"""Unsupervised spiking neural networks trained with batched trace STDP.

The network is one spiking convolution (adaptive threshold, adaptive
synaptic filter, adaptive lateral inhibition), 2x2 max pooling, spike-rate
normalization and a fully connected layer with homeostatic thresholds,
read out by class voting.
"""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, DataFormatError, DegenerateWeights,
                     NumericalDivergence, SpecMismatch, SpikeplastError)
from .layers import Competition, ConvLayer, FcLayer, Mechanisms
from .neuron import MembraneState, NeuronConfig, lif_step
from .pipeline import (Network, NetworkSpec, VotingTable, assign_votes, evaluate, predict,
                       run_ablation, train_layerwise)

__all__ = [
    "CheckpointError", "Competition", "ConfigError", "ConvLayer", "DataFormatError",
    "DegenerateWeights", "FcLayer", "Mechanisms", "MembraneState", "Network", "NetworkSpec",
    "NeuronConfig", "NumericalDivergence", "SpecMismatch", "SpikeplastError", "VotingTable",
    "assign_votes", "evaluate", "lif_step", "predict", "run_ablation", "train_layerwise",
]
