"""Two-stage dialogue response retrieval: a fast bi-encoder pre-retriever
over a MIPS index plus a cross-encoder re-ranker, trained jointly via
mutual learning."""

__version__ = "0.1.0"
