from .decode import greedy_decode, greedy_decode_features
from .metrics import WerResult, corpus_wer, edit_ops, wer

__all__ = ["greedy_decode", "greedy_decode_features", "WerResult", "corpus_wer", "edit_ops", "wer"]
