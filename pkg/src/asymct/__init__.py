"""Unsupervised domain-adaptive metric learning with asymmetric co-teaching.

The package builds synthetic two-domain identity datasets, computes a
k-reciprocal / Jaccard clustering distance over learned embeddings, splits the
target domain into pseudo-labeled inliers and outliers with DBSCAN, and adapts
a small embedding encoder through three stages: supervised source training,
clustering-based fine-tuning, and an asymmetric co-teaching loop in which two
models exchange small-loss samples drawn from different pools.
"""

from asymct.datasynth import EvalSplit, FeatureSet, SynthConfig, generate_domain_pair, split_query_gallery
from asymct.metric import MetricConfig
from asymct.cluster import ClusterAssignment, ClusterConfig
from asymct.encoder import EncoderParams, TrainConfig
from asymct.adapt import AdaptConfig, RoundRecord

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "ClusterAssignment",
    "ClusterConfig",
    "EncoderParams",
    "EvalSplit",
    "FeatureSet",
    "MetricConfig",
    "RoundRecord",
    "SynthConfig",
    "TrainConfig",
    "generate_domain_pair",
    "split_query_gallery",
    "__version__",
]
