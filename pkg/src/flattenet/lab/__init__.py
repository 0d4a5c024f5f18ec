"""Toy backbone, synthetic dense-prediction tasks, optimizers, training and metrics."""
