"""Desk-scale laboratory for co-training a pair of classifiers on noisily
labeled tabular data, with label-confidence refurbishment and cross-view /
cross-model contrastive objectives."""

__version__ = "0.1.0"
