"""Caption generation: greedy decoding and length-unnormalized beam search.

Both decoders grow a sequence from START, re-deriving the guidance
vector from the full history at every step, and never emit START again
(so any decoded sequence is a structurally valid caption). Scores are
cumulative log-probabilities without length normalization; ties break
lexicographically on the token sequence, which for a single step means
the lowest token id. Greedy decoding is an independent implementation
that must agree with beam_size=1 exactly.
"""

from dataclasses import dataclass

import numpy as np

from .model import (GuidanceMode, LstmState, ModelParams, decode_step,
                    embed_image, zero_state)
from .vocab import START, STOP


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 1
    max_length: int = 20
    mode: GuidanceMode = GuidanceMode()

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be at least 1")
        if self.max_length < 1:
            raise ValueError("max_length must be at least 1")


@dataclass(frozen=True)
class BeamHypothesis:
    """A partial or finished caption with its cumulative log-probability."""

    token_ids: tuple[int, ...]
    logprob: float
    state: LstmState
    finished: bool


def _masked_step(params, img, state, history, mode):
    """Next-token log-probabilities with START barred from generation."""
    logp, new_state = decode_step(params, img, state, history, mode)
    logp = logp.copy()
    logp[START] = -np.inf
    return logp, new_state


def greedy_decode(params: ModelParams, raw_feature, config: DecodeConfig) -> list[int]:
    """Repeatedly append the most probable next token.

    Ties break toward the lowest token id. Generation ends at STOP or
    after max_length generated tokens, whichever comes first.
    """
    img = embed_image(params, np.asarray(raw_feature, dtype=np.float64))
    state = zero_state(params.dims.hidden)
    history = [START]
    for _ in range(config.max_length):
        logp, state = _masked_step(params, img, state, history, config.mode)
        nxt = int(np.argmax(logp))
        history.append(nxt)
        if nxt == STOP:
            break
    return history


def beam_search(params: ModelParams, raw_feature,
                config: DecodeConfig) -> list[BeamHypothesis]:
    """Breadth-limited search over caption prefixes.

    Every live hypothesis is expanded by every candidate token; the best
    beam_size expansions survive, ranked by cumulative log-probability
    with lexicographic tie-breaking. Hypotheses that emit STOP retire
    into the result pool (never extended again); the search stops when
    no live hypotheses remain or max_length is reached, and unfinished
    survivors join the pool. Results are sorted best-first.
    """
    img = embed_image(params, np.asarray(raw_feature, dtype=np.float64))
    live = [BeamHypothesis((START,), 0.0, zero_state(params.dims.hidden), False)]
    pool: list[BeamHypothesis] = []

    for _ in range(config.max_length):
        if not live:
            break
        candidates = []
        for hyp in live:
            logp, new_state = _masked_step(params, img, hyp.state,
                                           list(hyp.token_ids), config.mode)
            for tok in range(logp.shape[0]):
                if tok == START:
                    continue
                candidates.append((hyp.logprob + float(logp[tok]),
                                   hyp.token_ids + (tok,), new_state))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, toks, state in candidates[:config.beam_size]:
            done = toks[-1] == STOP
            hyp = BeamHypothesis(toks, score, state, done)
            (pool if done else live).append(hyp)

    pool.extend(live)
    pool.sort(key=lambda h: (-h.logprob, h.token_ids))
    return pool
