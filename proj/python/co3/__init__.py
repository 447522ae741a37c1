"""Joint code retrieval, summarisation and generation."""

from ._co3 import (
    Error,
    Model,
    bleu4,
    bleu_buckets,
    default_config,
    dual_regularizer,
    meteor,
    mrr,
    ndcg,
    paired_bootstrap_mrr,
    parameter_counts,
    ranking_loss,
    run,
    sentence_bleu4,
    tokenize,
)

__all__ = [
    "Error",
    "Model",
    "bleu4",
    "bleu_buckets",
    "default_config",
    "dual_regularizer",
    "meteor",
    "mrr",
    "ndcg",
    "paired_bootstrap_mrr",
    "parameter_counts",
    "ranking_loss",
    "run",
    "sentence_bleu4",
    "tokenize",
]
