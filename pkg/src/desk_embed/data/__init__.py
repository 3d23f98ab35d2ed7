from .pairs import TextPair, load_pairs, save_pairs, read_jsonl, write_jsonl, group_by_source
from .tokenizer import Tokenizer
from .curation import (
    pack_documents,
    consistency_filter_topk,
    consistency_filter_threshold,
    mine_hard_negatives,
    sample_negatives,
    random_negatives,
    make_batches_single_source,
    apply_prefix,
    prefix_pair,
    prefix_sides,
)

__all__ = [
    "TextPair", "load_pairs", "save_pairs", "read_jsonl", "write_jsonl", "group_by_source",
    "Tokenizer", "pack_documents", "consistency_filter_topk", "consistency_filter_threshold",
    "mine_hard_negatives", "sample_negatives", "random_negatives", "make_batches_single_source",
    "apply_prefix", "prefix_pair", "prefix_sides",
]
