from .extrapolation import SweepCell, extrapolation_sweep, make_needle_task, write_sweep
from .metrics import ndcg_at_k, random_ndcg_expectation
from .retrieval import RetrievalReport, RetrievalTask, embed_corpus, retrieval_eval, score_rankings

__all__ = [
    "SweepCell", "extrapolation_sweep", "make_needle_task", "write_sweep",
    "ndcg_at_k", "random_ndcg_expectation",
    "RetrievalReport", "RetrievalTask", "embed_corpus", "retrieval_eval", "score_rankings",
]
