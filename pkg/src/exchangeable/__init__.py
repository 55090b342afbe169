"""Permutation-invariant attention encoders for RL over exchangeable objects."""
from .analysis import MetricRecord, SpaceSizeReport, reduction_factor, space_sizes
from .encoder import (
    AttentionEncoderParams,
    AttentionTrace,
    DeepSetsParams,
    ObjectBatch,
    ObjectSet,
    OrderedParams,
    attention_as_sum_form,
    encode_attention,
    encode_deepsets,
    encode_multiclass,
    encode_ordered,
)
from .envs import ConvoyConfig, Env, ScavengerConfig, make_config
from .ppo import GreedyPursuitPolicy, Policy, PPOHyperparams, Trainer, evaluate_policy

__version__ = "0.1.0"
