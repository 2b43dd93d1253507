"""Guided LSTM captioner with time-dependent text-conditional guidance.

The recurrent cell feeds a guidance vector g into every gate alongside
the embedded word x_t and the previous hidden state m_{t-1}:

    i_t = sigmoid(W_ix x_t + W_im m_{t-1} + W_iq g_t + b_i)
    f_t = sigmoid(W_fx x_t + W_fm m_{t-1} + W_fq g_t + b_f)
    o_t = sigmoid(W_ox x_t + W_om m_{t-1} + W_oq g_t + b_o)
    c_t = f_t * c_{t-1} + i_t * tanh(W_cx x_t + W_cm m_{t-1} + W_cq g_t + b_c)
    m_t = o_t * c_t

Note m_t = o_t * c_t deliberately, with no output tanh; setting all
biases to zero recovers the bias-free cell exactly.

Guidance variants, all sharing the embedded image feature I:

  * time-invariant   g   = phi(I), constant across steps
  * n-gram           g_t = phi(I * W_c a_t), a_t the average one-hot of
                     the last n history words
  * sentence         g_t = phi(I * W_c a_t), a_t averaged over the whole
                     history (the n -> infinity limit of n-gram)
  * full-tensor      g_t[i] = phi(sum_jk T[i,j,k] I[j] s_t[k] + b[i]),
                     a reference coupling kept for tiny dimensions only

The forward pass caches every activation needed by the exact manual
backward pass (backpropagation through time, including the paths through
g_t into W_c, the full tensor, and the image embedding).
"""

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .numerics import (Transfer, affine, gaussian_init, log_softmax, sigmoid,
                       transfer_apply, transfer_backward)
from .vocab import START

GUIDANCE_KINDS = ("time_invariant", "ngram", "sentence", "full_tensor")

# Full-tensor coupling is quadratic in the embedding dim times vocab;
# refuse sizes where the reference implementation stops being sensible.
FULL_TENSOR_MAX_ENTRIES = 10**7


@dataclass(frozen=True)
class Dims:
    """Model dimensions: vocab V, word embed E, hidden H, image embed G, raw D."""

    vocab: int
    embed: int
    hidden: int
    img_embed: int
    raw: int

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 1:
                raise ValueError(f"dimension {name} must be positive, got {value}")


@dataclass(frozen=True)
class GuidanceMode:
    """Guidance variant plus the transfer function applied to it."""

    kind: str = "sentence"
    n: int = 1
    transfer: Transfer = Transfer.TANH

    def __post_init__(self):
        if self.kind not in GUIDANCE_KINDS:
            raise ValueError(f"unknown guidance kind {self.kind!r}")
        if self.kind == "ngram" and self.n < 1:
            raise ValueError("ngram guidance needs n >= 1")
        object.__setattr__(self, "transfer", Transfer(self.transfer))


@dataclass
class FullTensorParams:
    """3-D coupling tensor (G, G, V) and bias (G,) for full-tensor guidance."""

    w3: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.w3.ndim != 3 or self.b.ndim != 1 or self.w3.shape[0] != self.b.shape[0]:
            raise ValueError("full-tensor shapes inconsistent")
        if self.w3.size > FULL_TENSOR_MAX_ENTRIES:
            raise ValueError(f"full tensor with {self.w3.size} entries exceeds the "
                             f"{FULL_TENSOR_MAX_ENTRIES} reference-implementation guard")


@dataclass
class ModelParams:
    """All learnable tensors. Shapes in terms of Dims(V, E, H, G, D)."""

    w_e: np.ndarray     # (E, V) word embedding, one column per word
    w_c: np.ndarray     # (G, V) text-conditional mask, one column per word
    w_img: np.ndarray   # (G, D) image embedding (CNN stand-in)
    b_img: np.ndarray   # (G,)
    w_ix: np.ndarray;  w_im: np.ndarray;  w_iq: np.ndarray;  b_i: np.ndarray
    w_fx: np.ndarray;  w_fm: np.ndarray;  w_fq: np.ndarray;  b_f: np.ndarray
    w_ox: np.ndarray;  w_om: np.ndarray;  w_oq: np.ndarray;  b_o: np.ndarray
    w_cx: np.ndarray;  w_cm: np.ndarray;  w_cq: np.ndarray;  b_c: np.ndarray
    w_d: np.ndarray     # (V, H) output projection
    b_d: np.ndarray     # (V,)
    full_tensor: Optional[FullTensorParams] = None

    @property
    def dims(self) -> Dims:
        return Dims(vocab=self.w_e.shape[1], embed=self.w_e.shape[0],
                    hidden=self.w_ix.shape[0], img_embed=self.w_c.shape[0],
                    raw=self.w_img.shape[1])


# Checkpoint serialization order; full-tensor fields follow when present.
PARAM_FIELDS = ("w_e", "w_c", "w_img", "b_img",
                "w_ix", "w_im", "w_iq", "b_i",
                "w_fx", "w_fm", "w_fq", "b_f",
                "w_ox", "w_om", "w_oq", "b_o",
                "w_cx", "w_cm", "w_cq", "b_c",
                "w_d", "b_d")
FULL_TENSOR_FIELDS = ("w3", "b3")


def param_shapes(dims: Dims, full_tensor: bool = False) -> dict[str, tuple[int, ...]]:
    """Expected shape of every parameter tensor, in checkpoint order."""
    V, E, H, G, D = dims.vocab, dims.embed, dims.hidden, dims.img_embed, dims.raw
    shapes: dict[str, tuple[int, ...]] = {"w_e": (E, V), "w_c": (G, V),
                                          "w_img": (G, D), "b_img": (G,)}
    for gate in "ifoc":
        shapes[f"w_{gate}x"] = (H, E)
        shapes[f"w_{gate}m"] = (H, H)
        shapes[f"w_{gate}q"] = (H, G)
        shapes[f"b_{gate}"] = (H,)
    shapes["w_d"] = (V, H)
    shapes["b_d"] = (V,)
    if full_tensor:
        shapes["w3"] = (G, G, V)
        shapes["b3"] = (G,)
    return shapes


def param_dict(params: ModelParams) -> dict[str, np.ndarray]:
    """Name -> live array view, in checkpoint order."""
    out = {name: getattr(params, name) for name in PARAM_FIELDS}
    if params.full_tensor is not None:
        out["w3"] = params.full_tensor.w3
        out["b3"] = params.full_tensor.b
    return out


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(a) for name, a in param_dict(params).items()}


def copy_params(params: ModelParams) -> ModelParams:
    ft = params.full_tensor
    return replace(params,
                   **{name: getattr(params, name).copy() for name in PARAM_FIELDS},
                   full_tensor=None if ft is None else FullTensorParams(ft.w3.copy(), ft.b.copy()))


def init_params(dims: Dims, seed: int, mode: GuidanceMode | None = None, *,
                we_std: float = 0.01, gate_std: float = 0.1,
                wc_init: str = "gauss", img_init: str = "gauss",
                img_std: float = 0.1) -> ModelParams:
    """Seeded initialization.

    The word embedding draws from N(0, we_std^2) (default 0.01); the
    conditional matrix is either exactly all ones ("ones") or N(1, 0.001^2)
    ("gauss"); gates and the output projection draw from N(0, gate_std^2).
    The image embedding is N(0, img_std^2), or the identity when
    img_init="identity" and G == D. Sub-seeds are derived from `seed`
    through numpy's SeedSequence in a fixed field order.
    """
    V, E, H, G, D = dims.vocab, dims.embed, dims.hidden, dims.img_embed, dims.raw
    sub = iter(int(s) for s in np.random.SeedSequence(seed).generate_state(32))

    def gauss(rows, cols, mean, std):
        return gaussian_init(rows, cols, mean, std, next(sub))

    w_e = gauss(E, V, 0.0, we_std)
    w_c = init_conditional(G, V, wc_init, next(sub))
    if img_init == "identity":
        if G != D:
            raise ValueError("identity image embedding needs img_embed == raw")
        w_img = np.eye(G)
        next(sub)
    elif img_init == "gauss":
        w_img = gauss(G, D, 0.0, img_std)
    else:
        raise ValueError(f"unknown img_init {img_init!r}")

    gates = {}
    for gate in "ifoc":
        gates[f"w_{gate}x"] = gauss(H, E, 0.0, gate_std)
        gates[f"w_{gate}m"] = gauss(H, H, 0.0, gate_std)
        gates[f"w_{gate}q"] = gauss(H, G, 0.0, gate_std)
        gates[f"b_{gate}"] = np.zeros(H)

    params = ModelParams(w_e=w_e, w_c=w_c, w_img=w_img, b_img=np.zeros(G),
                         w_d=gauss(V, H, 0.0, gate_std), b_d=np.zeros(V), **gates)
    if mode is not None and mode.kind == "full_tensor":
        params.full_tensor = init_full_tensor(G, V, wc_init, next(sub))
    return params


def init_conditional(rows: int, cols: int, how: str, seed: int) -> np.ndarray:
    if how == "ones":
        return np.ones((rows, cols))
    if how == "gauss":
        return gaussian_init(rows, cols, 1.0, 0.001, seed)
    raise ValueError(f"unknown conditional-matrix init {how!r}")


def init_full_tensor(g_dim: int, vocab: int, how: str, seed: int) -> FullTensorParams:
    """Diagonal coupling tensor whose slices mirror the conditional-matrix init.

    T[i,i,k] carries the mask value for word k, off-diagonal entries are
    zero, so the initialized tensor reproduces the masked-guidance path.
    """
    diag = init_conditional(g_dim, vocab, how, seed)
    w3 = np.zeros((g_dim, g_dim, vocab))
    idx = np.arange(g_dim)
    w3[idx, idx, :] = diag
    return FullTensorParams(w3, np.zeros(g_dim))


class LstmState(NamedTuple):
    c: np.ndarray
    m: np.ndarray


def zero_state(hidden: int) -> LstmState:
    return LstmState(np.zeros(hidden), np.zeros(hidden))


class GateActs(NamedTuple):
    """Post-activation gate values and the candidate, one step."""

    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    cand: np.ndarray


def onehot(size: int, index: int) -> np.ndarray:
    if not 0 <= index < size:
        raise ValueError(f"index {index} out of range for one-hot of size {size}")
    v = np.zeros(size)
    v[index] = 1.0
    return v


def embed_word(params: ModelParams, word_id: int) -> np.ndarray:
    """Column word_id of the embedding matrix (x_t for a one-hot input)."""
    V = params.w_e.shape[1]
    if not 0 <= word_id < V:
        raise ValueError(f"word id {word_id} out of range for V={V}")
    return params.w_e[:, word_id].copy()


def embed_image(params: ModelParams, raw_feature: np.ndarray) -> np.ndarray:
    """I = W_img raw + b_img, the learnable stand-in for a CNN encoder."""
    return affine(params.w_img, raw_feature, params.b_img)


def history_vector(vocab_size: int, history, mode: GuidanceMode) -> np.ndarray:
    """Average one-hot of the conditioning window.

    n-gram averages the last min(n, len(history)) tokens; sentence
    averages the entire history (START included). Entries are
    non-negative and sum to 1 up to rounding.
    """
    if len(history) == 0:
        raise ValueError("history must contain at least the START token")
    if mode.kind == "ngram":
        window = history[-min(mode.n, len(history)):]
    elif mode.kind == "sentence":
        window = history
    else:
        raise ValueError(f"history_vector undefined for {mode.kind!r} guidance")
    v = np.zeros(vocab_size)
    np.add.at(v, np.asarray(window, dtype=np.intp), 1.0)
    return v / len(window)


def guidance(params: ModelParams, img_embed: np.ndarray, hist: np.ndarray | None,
             mode: GuidanceMode) -> np.ndarray:
    """Guidance vector for one step.

    time_invariant ignores `hist` and returns phi(I); the masked variants
    return phi(I * (W_c hist)) with the mask computed before the transfer.
    """
    g, _, _ = _guidance_cached(params, img_embed, hist, mode)
    return g


def _guidance_cached(params, img_embed, hist, mode):
    """Returns (g, pre-transfer input u, mask or None)."""
    if mode.kind == "time_invariant":
        u = img_embed
        return transfer_apply(mode.transfer, u), u, None
    if mode.kind in ("ngram", "sentence"):
        if hist is None:
            raise ValueError("masked guidance needs a history vector")
        mask = params.w_c @ hist
        u = img_embed * mask
        return transfer_apply(mode.transfer, u), u, mask
    raise ValueError(f"guidance() does not handle {mode.kind!r}")


def guidance_full_tensor(ft: FullTensorParams, img_embed: np.ndarray,
                         s_t: np.ndarray, transfer: Transfer) -> np.ndarray:
    """g[i] = phi(sum_jk T[i,j,k] I[j] s[k] + b[i]) for a text vector s."""
    g, _ = _full_tensor_cached(ft, img_embed, s_t, transfer)
    return g


def _full_tensor_cached(ft, img_embed, s_t, transfer):
    if ft.w3.shape[1] != img_embed.shape[0] or ft.w3.shape[2] != s_t.shape[0]:
        raise ValueError("full-tensor dimensions do not match inputs")
    u = np.einsum("ijk,j,k->i", ft.w3, img_embed, s_t) + ft.b
    return transfer_apply(transfer, u), u


def glstm_step(params: ModelParams, x_t: np.ndarray, state: LstmState,
               g: np.ndarray) -> tuple[LstmState, GateActs]:
    """One cell step; returns the new state and the gate activations."""
    i = sigmoid(affine(params.w_ix, x_t, params.b_i) + params.w_im @ state.m + params.w_iq @ g)
    f = sigmoid(affine(params.w_fx, x_t, params.b_f) + params.w_fm @ state.m + params.w_fq @ g)
    o = sigmoid(affine(params.w_ox, x_t, params.b_o) + params.w_om @ state.m + params.w_oq @ g)
    cand = np.tanh(affine(params.w_cx, x_t, params.b_c) + params.w_cm @ state.m + params.w_cq @ g)
    c = f * state.c + i * cand
    m = o * c
    return LstmState(c, m), GateActs(i, f, o, cand)


@dataclass
class StepTrace:
    """Cached activations for one timestep of the forward pass."""

    input_id: int
    target_id: int
    x: np.ndarray
    hist: np.ndarray | None      # history average (masked modes)
    s_id: int | None             # conditioning word (full-tensor mode)
    mask: np.ndarray | None      # W_c @ hist, before the hadamard
    u: np.ndarray                # pre-transfer guidance input
    g: np.ndarray
    gates: GateActs
    c: np.ndarray
    m: np.ndarray
    logits: np.ndarray
    logp: np.ndarray


@dataclass
class ForwardTrace:
    """Everything the backward pass needs for one (feature, caption) pair."""

    token_ids: tuple[int, ...]
    mode: GuidanceMode
    raw_feature: np.ndarray
    img_embed: np.ndarray
    steps: list[StepTrace] = field(default_factory=list)

    @property
    def logprobs(self) -> np.ndarray:
        return np.stack([s.logp for s in self.steps])

    @property
    def targets(self) -> list[int]:
        return [s.target_id for s in self.steps]

    def total_logprob(self) -> float:
        return float(sum(s.logp[s.target_id] for s in self.steps))


def _check_token_ids(token_ids, vocab_size):
    if len(token_ids) < 2:
        raise ValueError("need at least [START, STOP]")
    if token_ids[0] != START:
        raise ValueError("caption must begin with START")
    if any(not 0 <= i < vocab_size for i in token_ids):
        raise ValueError("token id out of range")


def forward_sequence(params: ModelParams, raw_feature: np.ndarray, token_ids,
                     mode: GuidanceMode) -> ForwardTrace:
    """Teacher-forced forward pass over an encoded caption.

    Step t (1-based) consumes token_ids[t-1], conditions guidance on
    token_ids[:t], and predicts token_ids[t]; the recurrent state starts
    at zero. Returns the per-step activation trace.
    """
    token_ids = tuple(int(i) for i in token_ids)
    dims = params.dims
    _check_token_ids(token_ids, dims.vocab)
    if mode.kind == "full_tensor" and params.full_tensor is None:
        raise ValueError("full-tensor guidance requires full-tensor parameters")

    raw_feature = np.asarray(raw_feature, dtype=np.float64)
    img = embed_image(params, raw_feature)
    trace = ForwardTrace(token_ids, mode, raw_feature, img)

    ti_cache = None
    if mode.kind == "time_invariant":
        g, u, _ = _guidance_cached(params, img, None, mode)
        ti_cache = (g, u)

    state = zero_state(dims.hidden)
    for t in range(1, len(token_ids)):
        input_id = token_ids[t - 1]
        hist = None
        s_id = None
        mask = None
        if mode.kind == "time_invariant":
            g, u = ti_cache
        elif mode.kind == "full_tensor":
            s_id = token_ids[t - 1]
            g, u = _full_tensor_cached(params.full_tensor, img,
                                       onehot(dims.vocab, s_id), mode.transfer)
        else:
            hist = history_vector(dims.vocab, token_ids[:t], mode)
            g, u, mask = _guidance_cached(params, img, hist, mode)

        x = embed_word(params, input_id)
        state, gates = glstm_step(params, x, state, g)
        logits = affine(params.w_d, state.m, params.b_d)
        trace.steps.append(StepTrace(
            input_id=input_id, target_id=token_ids[t], x=x, hist=hist,
            s_id=s_id, mask=mask, u=u, g=g, gates=gates,
            c=state.c, m=state.m, logits=logits, logp=log_softmax(logits)))
    return trace


def backward_sequence(params: ModelParams, trace: ForwardTrace, token_ids,
                      mode: GuidanceMode) -> dict[str, np.ndarray]:
    """Exact gradients of the summed cross-entropy w.r.t. every parameter.

    Backpropagates through time, through the guidance into W_c (or the
    full tensor), and through the shared image embedding. History
    averages are functions of discrete tokens and carry no gradient.
    The regularization term is not included here; the training loop adds
    lambda * W_img to the image-embedding gradient.
    """
    token_ids = tuple(int(i) for i in token_ids)
    if token_ids != trace.token_ids or mode != trace.mode:
        raise ValueError("trace does not match the given token ids and mode")

    dims = params.dims
    grads = zero_grads(params)
    d_img = np.zeros(dims.img_embed)
    dc_next = np.zeros(dims.hidden)
    dm_next = np.zeros(dims.hidden)

    for t in range(len(trace.steps), 0, -1):
        st = trace.steps[t - 1]
        c_prev = trace.steps[t - 2].c if t >= 2 else np.zeros(dims.hidden)
        m_prev = trace.steps[t - 2].m if t >= 2 else np.zeros(dims.hidden)

        # log-softmax loss layer: dlogits = softmax - onehot(target)
        dlogits = np.exp(st.logp)
        dlogits[st.target_id] -= 1.0
        grads["w_d"] += np.outer(dlogits, st.m)
        grads["b_d"] += dlogits
        dm = params.w_d.T @ dlogits + dm_next

        i, f, o, cand = st.gates
        do = dm * st.c
        dc = dm * o + dc_next
        di = dc * cand
        df = dc * c_prev
        dcand = dc * i
        dc_next = dc * f

        dpre = {"i": di * i * (1.0 - i),
                "f": df * f * (1.0 - f),
                "o": do * o * (1.0 - o),
                "c": dcand * (1.0 - cand * cand)}

        dx = np.zeros(dims.embed)
        dm_next = np.zeros(dims.hidden)
        dg = np.zeros(dims.img_embed)
        for gate, dp in dpre.items():
            grads[f"w_{gate}x"] += np.outer(dp, st.x)
            grads[f"w_{gate}m"] += np.outer(dp, m_prev)
            grads[f"w_{gate}q"] += np.outer(dp, st.g)
            grads[f"b_{gate}"] += dp
            dx += getattr(params, f"w_{gate}x").T @ dp
            dm_next += getattr(params, f"w_{gate}m").T @ dp
            dg += getattr(params, f"w_{gate}q").T @ dp

        grads["w_e"][:, st.input_id] += dx

        du = transfer_backward(mode.transfer, st.u, st.g, dg)
        if mode.kind == "time_invariant":
            d_img += du
        elif mode.kind == "full_tensor":
            s = onehot(dims.vocab, st.s_id)
            grads["w3"] += np.einsum("i,j,k->ijk", du, trace.img_embed, s)
            grads["b3"] += du
            d_img += np.einsum("ijk,i,k->j", params.full_tensor.w3, du, s)
        else:
            d_img += du * st.mask
            grads["w_c"] += np.outer(du * trace.img_embed, st.hist)

    grads["w_img"] += np.outer(d_img, trace.raw_feature)
    grads["b_img"] += d_img
    return grads


def decode_step(params: ModelParams, img_embed: np.ndarray, state: LstmState,
                history, mode: GuidanceMode) -> tuple[np.ndarray, LstmState]:
    """One inference step: consume history[-1], return (logprobs, new state)."""
    dims = params.dims
    if mode.kind == "time_invariant":
        g = guidance(params, img_embed, None, mode)
    elif mode.kind == "full_tensor":
        g = guidance_full_tensor(params.full_tensor, img_embed,
                                 onehot(dims.vocab, history[-1]), mode.transfer)
    else:
        hist = history_vector(dims.vocab, history, mode)
        g = guidance(params, img_embed, hist, mode)
    x = embed_word(params, history[-1])
    state, _ = glstm_step(params, x, state, g)
    logits = affine(params.w_d, state.m, params.b_d)
    return log_softmax(logits), state
