"""Synthetic scenes, staged training, evaluation metrics and the CLI."""

from . import cli, config, dataset, metrics, scene, train

__all__ = ["cli", "config", "dataset", "metrics", "scene", "train"]
