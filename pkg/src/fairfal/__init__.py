"""Federated active learning simulator with class-fair query selection."""

from fairfal.data import ClientPools, Dataset, PartitionSpec
from fairfal.model import ModelParams, TrainConfig

__all__ = ["ClientPools", "Dataset", "ModelParams", "PartitionSpec", "TrainConfig"]
__version__ = "0.1.0"
