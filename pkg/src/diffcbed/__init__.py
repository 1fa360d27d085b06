"""Differentiable batch experimental design for causal discovery."""

from .data import Dataset, ParticleSet, effective_sample_size
from .priors import PriorSpec, sample_dag, sample_parameters, sample_particles, sample_scm
from .scm import Dag, Design, SampleMatrix, Scm, batch_log_likelihood, log_likelihood, sample

__version__ = "0.1.0"

__all__ = [
    "Dag",
    "Dataset",
    "Design",
    "ParticleSet",
    "PriorSpec",
    "SampleMatrix",
    "Scm",
    "batch_log_likelihood",
    "effective_sample_size",
    "log_likelihood",
    "sample",
    "sample_dag",
    "sample_parameters",
    "sample_particles",
    "sample_scm",
]
