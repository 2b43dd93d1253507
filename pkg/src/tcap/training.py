"""Training loop: regularized loss, Adam, gradient checking, checkpoints.

The objective is the summed cross-entropy of the caption targets plus a
weight-decay term on the image embedding only:

    L = -sum_k log p(target_k) + (lam / 2) * ||W_img||_F^2

Training runs in three stages, re-creating the optimizer for each:

  1. time-invariant guidance, image embedding frozen, n1 iterations;
  2. time-invariant guidance, image embedding fine-tuned at lr_img, n2;
  3. the target guidance mode with the conditional weights at their
     fresh initialization (they receive no gradient while guidance is
     time-invariant, so their initial values survive stages 1-2
     untouched), image embedding frozen again, n3 iterations.

Minibatch gradients are means over the batch accumulated in ascending
example-index order, so a run is reproducible bit-for-bit from its seed
regardless of worker threads.
"""

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import FormatError, NumericError
from .model import (Dims, ForwardTrace, FullTensorParams, GuidanceMode,
                    ModelParams, PARAM_FIELDS, backward_sequence, copy_params,
                    forward_sequence, init_full_tensor, init_params,
                    param_dict, param_shapes, zero_grads)
from .numerics import require_finite

CHECKPOINT_MAGIC = b"TCG1"
CHECKPOINT_VERSION = 1

# Parameters that make up the image embedding: they train at lr_img and
# are the only ones carrying weight decay.
IMG_PARAMS = frozenset({"w_img", "b_img"})


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the three-stage schedule.

    `lam` is the weight-decay coefficient on the image embedding.
    Defaults follow the reference setting: lr 4e-4 for the language
    model, 1e-5 for image-embedding fine-tuning, Adam betas (0.8, 0.999).
    """

    lam: float = 1e-3
    lr_lm: float = 4e-4
    lr_img: float = 1e-5
    adam_beta1: float = 0.8
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    n1: int = 200
    n2: int = 100
    n3: int = 2000
    grad_clip: Optional[float] = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("weight decay must be non-negative")
        if self.lr_lm <= 0 or self.lr_img <= 0:
            raise ValueError("learning rates must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if min(self.n1, self.n2, self.n3) < 0:
            raise ValueError("stage iteration counts must be non-negative")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")
        if self.threads < 1:
            raise ValueError("threads must be positive")


@dataclass(frozen=True)
class InitConfig:
    """Model size and initialization choices (vocab/raw dims come from data)."""

    embed: int = 16
    hidden: int = 32
    img_embed: int = 16
    we_std: float = 0.01
    gate_std: float = 0.1
    wc_init: str = "gauss"
    img_init: str = "gauss"
    img_std: float = 0.1


@dataclass
class AdamState:
    """First/second-moment accumulators mirroring the parameter tensors."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam_state(params: ModelParams) -> AdamState:
    return AdamState(m=zero_grads(params), v=zero_grads(params), step=0)


def loss(logprobs: np.ndarray, target_ids, lam: float, w_img: np.ndarray) -> float:
    """Summed negative log-likelihood plus (lam/2)*||w_img||_F^2."""
    logprobs = np.asarray(logprobs, dtype=np.float64)
    if logprobs.ndim != 2 or logprobs.shape[0] != len(target_ids):
        raise ValueError("need exactly one logprob row per target")
    nll = -float(sum(logprobs[k, t] for k, t in enumerate(target_ids)))
    return nll + 0.5 * lam * float(np.sum(w_img * w_img))


def loss_from_trace(trace: ForwardTrace, lam: float, w_img: np.ndarray) -> float:
    return loss(trace.logprobs, trace.targets, lam, w_img)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, in place.

    Image-embedding tensors move at lr_img, everything else at lr_lm.
    A tensor whose gradient is identically zero is left bit-unchanged
    (its moments still decay); this keeps frozen tensors frozen even if
    they carry stale momentum.
    """
    tensors = param_dict(params)
    if set(grads) != set(tensors):
        raise ValueError("gradient keys do not match parameter keys")
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if not np.any(g):
            continue
        lr = config.lr_img if name in IMG_PARAMS else config.lr_lm
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
    return params, state


@dataclass
class GradientCheckReport:
    """Max relative finite-difference error per parameter group."""

    epsilon: float
    tolerance: float
    group_errors: dict[str, float]
    passed: bool

    @property
    def max_error(self) -> float:
        return max(self.group_errors.values())

    @property
    def failed_groups(self) -> list[str]:
        return sorted(n for n, e in self.group_errors.items() if not e < self.tolerance)


def gradient_check(params: ModelParams, raw_feature, token_ids, mode: GuidanceMode, *,
                   lam: float = 0.0, epsilon: float = 1e-5, tolerance: float = 1e-4,
                   analytic: dict[str, np.ndarray] | None = None) -> GradientCheckReport:
    """Central-difference check of every parameter coordinate.

    Compares (L(p+eps) - L(p-eps)) / (2 eps) against the analytic
    gradient using the error metric
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    `analytic` overrides the computed gradients (harness self-test).
    """
    raw_feature = np.asarray(raw_feature, dtype=np.float64)
    if analytic is None:
        trace = forward_sequence(params, raw_feature, token_ids, mode)
        analytic = backward_sequence(params, trace, token_ids, mode)
        if lam:
            analytic["w_img"] = analytic["w_img"] + lam * params.w_img

    def loss_at() -> float:
        t = forward_sequence(params, raw_feature, token_ids, mode)
        return loss_from_trace(t, lam, params.w_img)

    group_errors: dict[str, float] = {}
    for name, tensor in param_dict(params).items():
        worst = 0.0
        flat = tensor.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for idx in range(flat.shape[0]):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            plus = loss_at()
            flat[idx] = orig - epsilon
            minus = loss_at()
            flat[idx] = orig
            numeric = (plus - minus) / (2.0 * epsilon)
            a = a_flat[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        group_errors[name] = worst
    passed = all(e < tolerance for e in group_errors.values())
    return GradientCheckReport(epsilon=epsilon, tolerance=tolerance,
                               group_errors=group_errors, passed=passed)


@dataclass
class Checkpoint:
    """A trained model with its provenance: dims, mode, optimizer, metadata."""

    dims: Dims
    mode: GuidanceMode
    params: ModelParams
    adam: Optional[AdamState] = None
    metadata: dict = field(default_factory=dict)


def _example_pass(params, dataset, ex_index, mode):
    """Cross-entropy and gradients for one example (thread-safe, read-only params)."""
    ex = dataset.examples[ex_index]
    raw = dataset.features.row(ex.feature_id)
    trace = forward_sequence(params, raw, ex.token_ids, mode)
    ce = -trace.total_logprob()
    grads = backward_sequence(params, trace, ex.token_ids, mode)
    return ce, grads


def _batch_gradients(params, dataset, indices, mode, lam, frozen, executor):
    """Mean loss and gradients over a batch; reduction in ascending index order."""
    indices = sorted(indices)
    if executor is None:
        results = [_example_pass(params, dataset, i, mode) for i in indices]
    else:
        results = list(executor.map(
            lambda i: _example_pass(params, dataset, i, mode), indices))
    total = zero_grads(params)
    ce_sum = 0.0
    for ce, grads in results:
        ce_sum += ce
        for name, g in grads.items():
            total[name] += g
    n = float(len(indices))
    for g in total.values():
        g /= n
    reg = 0.5 * lam * float(np.sum(params.w_img * params.w_img))
    if lam and "w_img" not in frozen:
        total["w_img"] += lam * params.w_img
    for name in frozen:
        total[name][...] = 0.0
    return ce_sum / n + reg, total


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class _BatchSampler:
    """Epoch permutations drawn from a dedicated generator; batches of fixed size."""

    def __init__(self, n_examples: int, batch_size: int, rng: np.random.Generator):
        self.n = n_examples
        self.batch = min(batch_size, n_examples)
        self.rng = rng
        self.order = rng.permutation(self.n)
        self.pos = 0

    def next_batch(self) -> list[int]:
        if self.pos + self.batch > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        out = self.order[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return [int(i) for i in out]


def train(dataset: Dataset, mode: GuidanceMode, config: TrainConfig,
          init: InitConfig = InitConfig()) -> Checkpoint:
    """Run the three-stage schedule and return the final checkpoint.

    Deterministic given config.seed: sub-seeds for initialization,
    batching, and the stage-3 full-tensor creation are derived from it
    in a fixed order. Raises NumericError (with stage and iteration) if
    the loss ever goes non-finite.
    """
    if len(dataset.examples) == 0:
        raise ValueError("empty dataset")
    dims = Dims(vocab=dataset.vocab.size, embed=init.embed, hidden=init.hidden,
                img_embed=init.img_embed, raw=dataset.features.dim)
    init_seed, batch_seed, tensor_seed = (
        int(s) for s in np.random.SeedSequence(config.seed).generate_state(3))
    params = init_params(dims, init_seed, we_std=init.we_std, gate_std=init.gate_std,
                         wc_init=init.wc_init, img_init=init.img_init,
                         img_std=init.img_std)
    rng = np.random.Generator(np.random.PCG64(batch_seed))

    ti = GuidanceMode("time_invariant", transfer=mode.transfer)
    stages = [(1, ti, config.n1, IMG_PARAMS),
              (2, ti, config.n2, frozenset()),
              (3, mode, config.n3, IMG_PARAMS)]

    history: list[tuple[int, int, float]] = []
    iteration = 0
    executor = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    adam = None
    try:
        for stage_no, stage_mode, n_iters, frozen in stages:
            if stage_no == 3 and mode.kind == "full_tensor":
                params.full_tensor = init_full_tensor(dims.img_embed, dims.vocab,
                                                      init.wc_init, tensor_seed)
            adam = init_adam_state(params)
            sampler = _BatchSampler(len(dataset.examples), config.batch_size, rng)
            for _ in range(n_iters):
                iteration += 1
                batch = sampler.next_batch()
                batch_loss, grads = _batch_gradients(
                    params, dataset, batch, stage_mode, config.lam, frozen, executor)
                if not np.isfinite(batch_loss):
                    raise NumericError(
                        f"non-finite loss at stage {stage_no} iteration {iteration}")
                if config.grad_clip is not None:
                    clip_gradients(grads, config.grad_clip)
                adam_step(params, grads, adam, config)
                history.append((iteration, stage_no, float(batch_loss)))
    finally:
        if executor is not None:
            executor.shutdown()

    metadata = {
        "iteration": iteration,
        "loss_history": [[it, st, ls] for it, st, ls in history],
        "vocab": dataset.vocab.words,
        "config": asdict(config),
        "init": asdict(init),
    }
    return Checkpoint(dims=dims, mode=mode, params=params, adam=adam,
                      metadata=metadata)


def mean_per_token_loss(params: ModelParams, dataset: Dataset,
                        mode: GuidanceMode) -> float:
    """Dataset-wide cross-entropy per predicted token (no weight decay)."""
    nll = 0.0
    tokens = 0
    for ex in dataset.examples:
        raw = dataset.features.row(ex.feature_id)
        trace = forward_sequence(params, raw, ex.token_ids, mode)
        nll -= trace.total_logprob()
        tokens += len(ex.token_ids) - 1
    if tokens == 0:
        raise ValueError("dataset has no predicted tokens")
    return nll / tokens


def _tensor_records(checkpoint: Checkpoint) -> list[tuple[str, np.ndarray]]:
    """All tensors in serialization order: params, then Adam m and v."""
    records = [(f"param.{n}", a) for n, a in param_dict(checkpoint.params).items()]
    if checkpoint.adam is not None:
        records += [(f"adam.m.{n}", a) for n, a in checkpoint.adam.m.items()]
        records += [(f"adam.v.{n}", a) for n, a in checkpoint.adam.v.items()]
    return records


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Write the binary checkpoint: magic, version, JSON header, raw tensors.

    Little-endian throughout; tensors are row-major float64 in header
    order, so identical checkpoints serialize to identical bytes.
    """
    records = _tensor_records(checkpoint)
    header = {
        "dims": asdict(checkpoint.dims),
        "mode": {"kind": checkpoint.mode.kind, "n": checkpoint.mode.n,
                 "transfer": checkpoint.mode.transfer.value},
        "tensors": [[name, list(a.shape)] for name, a in records],
        "adam_step": None if checkpoint.adam is None else checkpoint.adam.step,
        "metadata": checkpoint.metadata,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, a in records:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _params_from_arrays(arrays: dict[str, np.ndarray]) -> ModelParams:
    missing = [n for n in PARAM_FIELDS if n not in arrays]
    if missing:
        raise FormatError(f"checkpoint missing parameter tensors: {missing}")
    ft = None
    if "w3" in arrays or "b3" in arrays:
        if not ("w3" in arrays and "b3" in arrays):
            raise FormatError("full-tensor checkpoint needs both w3 and b3")
        ft = FullTensorParams(arrays["w3"], arrays["b3"])
    return ModelParams(**{n: arrays[n] for n in PARAM_FIELDS}, full_tensor=ft)


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint written by save_checkpoint."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if len(blob) < 12:
        raise FormatError("truncated checkpoint header")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if len(blob) < 12 + header_len:
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"invalid checkpoint header: {e}") from e
    try:
        dims = Dims(**header["dims"])
        mode = GuidanceMode(**header["mode"])
        tensor_specs = [(str(n), tuple(int(d) for d in shape))
                        for n, shape in header["tensors"]]
        adam_step_count = header["adam_step"]
        metadata = header["metadata"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed checkpoint header: {e}") from e

    offset = 12 + header_len
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_specs:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise FormatError(f"checkpoint payload truncated at tensor {name}")
        a = np.frombuffer(blob[offset:offset + nbytes], dtype="<f8").astype(
            np.float64).reshape(shape)
        require_finite(name, a)
        tensors[name] = a
        offset += nbytes
    if offset != len(blob):
        raise FormatError("checkpoint has trailing bytes")

    params_arrays = {n[len("param."):]: a for n, a in tensors.items()
                     if n.startswith("param.")}
    params = _params_from_arrays(params_arrays)
    expected = param_shapes(dims, full_tensor=params.full_tensor is not None)
    for name, shape in expected.items():
        if params_arrays[name].shape != shape:
            raise FormatError(f"tensor {name} has shape "
                              f"{params_arrays[name].shape}, expected {shape}")

    adam = None
    if adam_step_count is not None:
        m = {n[len("adam.m."):]: a for n, a in tensors.items() if n.startswith("adam.m.")}
        v = {n[len("adam.v."):]: a for n, a in tensors.items() if n.startswith("adam.v.")}
        if set(m) != set(params_arrays) or set(v) != set(params_arrays):
            raise FormatError("optimizer tensors do not mirror parameters")
        adam = AdamState(m=m, v=v, step=int(adam_step_count))
    return Checkpoint(dims=dims, mode=mode, params=params, adam=adam,
                      metadata=metadata)
