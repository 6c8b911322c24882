"""Randomized sketching for projection-based reduced order models."""
from .core_la import AffineDecomposition, InnerProductSpace, ParamDomain, ParametricProblem, solve_full
from .embeddings import Embedding, EmbeddingSpec, sample_embedding
from .sketch import ThetaSketch, build_sketch

__version__ = "0.1.0"

__all__ = ["AffineDecomposition", "InnerProductSpace", "ParamDomain", "ParametricProblem", "solve_full",
           "Embedding", "EmbeddingSpec", "sample_embedding", "ThetaSketch", "build_sketch"]
