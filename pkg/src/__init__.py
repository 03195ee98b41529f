"""
mvp_rerank - A single-pass multi-view listwise passage reranker.

Every candidate is encoded independently into m view vectors, a small
decoder turns each view into an anchor in one decoding step, and candidates
are scored against the anchors. The package also carries the training loop,
bias audits, ablations and a cost model of sliding-window pipelines.
"""

__version__ = "0.1.0"
__author__ = "mvp_rerank contributors"
