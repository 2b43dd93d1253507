"""Nearest-neighbor analysis of the text-conditional mask columns.

Each vocabulary word owns one column of the conditional matrix; words
used in similar visual contexts should end up with nearby columns.
Distances are Euclidean, neighbors ranked ascending with ties broken by
word id.
"""

import numpy as np

from .vocab import Vocabulary


def mask_nearest_neighbors(w_c: np.ndarray, word_id: int,
                           k: int) -> list[tuple[int, float]]:
    """Top-k nearest mask columns to word_id, as (word_id, distance), self excluded."""
    if w_c.ndim != 2:
        raise ValueError("conditional matrix must be 2-D")
    vocab_size = w_c.shape[1]
    if not 0 <= word_id < vocab_size:
        raise ValueError(f"word id {word_id} out of range for V={vocab_size}")
    if not 1 <= k < vocab_size:
        raise ValueError(f"k must satisfy 1 <= k < V={vocab_size}")
    deltas = w_c - w_c[:, word_id][:, None]
    dists = np.sqrt(np.sum(deltas * deltas, axis=0))
    order = sorted((float(dists[j]), j) for j in range(vocab_size) if j != word_id)
    return [(j, d) for d, j in order[:k]]


def neighbor_report(w_c: np.ndarray, vocab: Vocabulary, words: list[str],
                    k: int) -> tuple[str, list[dict]]:
    """Text table and JSON-ready rows of top-k neighbors for each word."""
    rows = []
    lines = []
    for word in words:
        wid = vocab.lookup(word)
        neighbors = [{"word": vocab.word(j), "distance": d}
                     for j, d in mask_nearest_neighbors(w_c, wid, k)]
        rows.append({"word": word, "neighbors": neighbors})
        listing = "  ".join(f"{n['word']} ({n['distance']:.4f})" for n in neighbors)
        lines.append(f"{word:>12} | {listing}")
    header = f"{'word':>12} | top-{k} nearest mask columns (euclidean)"
    table = "\n".join([header, "-" * len(header)] + lines)
    return table, rows


def default_analysis_words(vocab: Vocabulary) -> list[str]:
    """All non-reserved words, in id order."""
    return list(vocab.words)


def category_top_k_rate(w_c: np.ndarray, vocab: Vocabulary,
                        categories: list[list[str]], k: int) -> float:
    """Fraction of category words with a same-category word among their top-k."""
    words = [w for group in categories for w in group]
    if not words:
        raise ValueError("no category words given")
    hits = 0
    for group in categories:
        ids = {vocab.lookup(w) for w in group}
        for word in group:
            wid = vocab.lookup(word)
            top = {j for j, _ in mask_nearest_neighbors(w_c, wid, k)}
            if top & (ids - {wid}):
                hits += 1
    return hits / len(words)


def distance_matrix(w_c: np.ndarray, word_ids: list[int]) -> np.ndarray:
    """Pairwise Euclidean distances between the selected mask columns."""
    cols = w_c[:, word_ids]
    sq = np.sum(cols * cols, axis=0)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (cols.T @ cols)
    return np.sqrt(np.maximum(d2, 0.0))
