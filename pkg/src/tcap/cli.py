"""Command-line entry point for reproducible captioning experiments.

Every subcommand reads an optional JSON config, applies `--section.key
value` dot-path overrides, honors `--seed`, prints the resolved config
it is about to run with, and writes only inside its declared outputs.

Exit codes: 0 success, 1 usage error, 2 input/format error,
3 gradient-check failure, 4 numeric failure (non-finite loss).
"""

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .analysis import default_analysis_words, neighbor_report
from .data import SynthSpec, load_dataset, save_dataset, synth_dataset
from .decoding import DecodeConfig, beam_search
from .errors import FormatError, NumericError
from .metrics import evaluate
from .model import Dims, GuidanceMode, init_params
from .numerics import Transfer
from .training import (InitConfig, TrainConfig, gradient_check,
                       load_checkpoint, mean_per_token_loss, save_checkpoint,
                       train)
from .vocab import Vocabulary, decode_caption
from . import report

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_VERIFY = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    """Bad command line: unknown flags, malformed overrides, missing args."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def default_config() -> dict:
    """Documented defaults for every configurable field."""
    return {
        "seed": 0,
        "mode": {"kind": "sentence", "n": 1, "transfer": "tanh"},
        "model": {"embed": 16, "hidden": 32, "img_embed": 16,
                  "we_std": 0.01, "gate_std": 0.1, "wc_init": "gauss",
                  "img_init": "gauss", "img_std": 0.1},
        "train": {"lam": 1e-3, "lr_lm": 4e-4, "lr_img": 1e-5,
                  "adam_beta1": 0.8, "adam_beta2": 0.999, "adam_eps": 1e-8,
                  "batch_size": 8, "n1": 200, "n2": 100, "n3": 2000,
                  "grad_clip": None, "threads": 1},
        "decode": {"beam_size": 1, "max_length": 20},
        "synth": {"categories": {"color": ["red", "blue", "green"],
                                 "object": ["dog", "cat", "bird"],
                                 "action": ["sitting", "running", "sleeping"]},
                  "n_examples": 32, "noise_std": 0.05, "article": "a"},
        # The verification instance is deliberately small and O(1)-scaled:
        # near-zero weights leave many gradient coordinates below the
        # finite-difference noise floor and fail the check spuriously.
        "gradcheck": {"vocab_words": 6, "raw": 4, "caption_length": 3,
                      "embed": 5, "hidden": 6, "img_embed": 7,
                      "we_std": 0.8, "gate_std": 0.4, "img_std": 0.5,
                      "epsilon": 1e-5, "tolerance": 1e-4, "lam": 1e-3},
    }


def _merge(base: dict, overlay: dict, path: str = "") -> None:
    for key, value in overlay.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ValueError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"config key {where} must be an object")
            _merge(base[key], value, where)
        else:
            base[key] = value


def _apply_override(cfg: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise UsageError(f"unknown config key: {dotted}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise UsageError(f"unknown config key: {dotted}")
    if isinstance(node[leaf], dict) and not isinstance(value, dict):
        raise UsageError(f"config key {dotted} must be a JSON object")
    node[leaf] = value


def resolve_config(config_path, seed, extra_args) -> dict:
    """Defaults <- config file <- dot-path overrides <- --seed."""
    cfg = default_config()
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise FormatError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid JSON in config {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise FormatError(f"config {path} must hold a JSON object")
        _merge(cfg, loaded)

    pending = list(extra_args)
    while pending:
        flag = pending.pop(0)
        if not flag.startswith("--") or "." not in flag:
            raise UsageError(f"unrecognized argument: {flag}")
        if "=" in flag:
            dotted, raw = flag[2:].split("=", 1)
        else:
            if not pending:
                raise UsageError(f"override {flag} needs a value")
            dotted, raw = flag[2:], pending.pop(0)
        _apply_override(cfg, dotted, raw)

    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _print_config(cfg: dict) -> None:
    print("resolved config:")
    print(json.dumps(cfg, indent=2, sort_keys=True))


def _dataclass_from(cls, section: dict, where: str, **extra):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ValueError(f"unknown {where} config keys: {unknown}")
    return cls(**section, **extra)


def _mode_from(cfg: dict) -> GuidanceMode:
    section = cfg["mode"]
    return GuidanceMode(kind=section["kind"], n=int(section["n"]),
                        transfer=Transfer.parse(section["transfer"]))


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"{what} not found: {p}")
    return p


def _load_vocab_from_checkpoint(ckpt) -> Vocabulary:
    words = ckpt.metadata.get("vocab")
    if words is None:
        raise FormatError("checkpoint carries no vocabulary metadata")
    return Vocabulary(list(words))


def cmd_synth(args, cfg) -> int:
    _print_config(cfg)
    spec = _dataclass_from(SynthSpec, cfg["synth"], "synth", seed=cfg["seed"])
    dataset = synth_dataset(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    print(f"wrote {len(dataset.examples)} examples, vocab size "
          f"{dataset.vocab.size}, feature dim {dataset.features.dim} -> {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    _print_config(cfg)
    manifest = _require_file(args.data, "dataset manifest")
    dataset = load_dataset(manifest)
    config = _dataclass_from(TrainConfig, cfg["train"], "train", seed=cfg["seed"])
    init = _dataclass_from(InitConfig, cfg["model"], "model")
    mode = _mode_from(cfg)

    checkpoint = train(dataset, mode, config, init)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.bin"
    save_checkpoint(ckpt_path, checkpoint)
    history = checkpoint.metadata["loss_history"]
    loss_path = out_dir / "loss.csv"
    with open(loss_path, "w") as f:
        f.write("iteration,stage,loss\n")
        for it, stage, value in history:
            f.write(f"{it},{stage},{value!r}\n")
    report.loss_curve([tuple(row) for row in history], out_dir / "loss_curve.png")

    per_token = mean_per_token_loss(checkpoint.params, dataset, mode)
    final = history[-1][2] if history else float("nan")
    print(f"trained {checkpoint.metadata['iteration']} iterations; "
          f"final batch loss {final:.6f}; mean per-token loss {per_token:.6f}")
    print(f"checkpoint -> {ckpt_path}")
    print(f"loss log -> {loss_path}")
    print(f"loss curve -> {out_dir / 'loss_curve.png'}")
    return EXIT_OK


def _decode_dataset(checkpoint, dataset, decode_cfg):
    """Best hypothesis per feature row, in feature-id order."""
    results = []
    for fid in range(dataset.features.count):
        hyps = beam_search(checkpoint.params, dataset.features.row(fid), decode_cfg)
        results.append((fid, hyps[0]))
    return results


def cmd_generate(args, cfg) -> int:
    _print_config(cfg)
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    manifest = _require_file(args.data, "dataset manifest")
    checkpoint = load_checkpoint(ckpt_path)
    dataset = load_dataset(manifest)
    if dataset.vocab.size != checkpoint.dims.vocab:
        raise FormatError(f"dataset vocab size {dataset.vocab.size} does not "
                          f"match checkpoint vocab {checkpoint.dims.vocab}")
    if dataset.features.dim != checkpoint.dims.raw:
        raise FormatError(f"feature dim {dataset.features.dim} does not match "
                          f"checkpoint raw dim {checkpoint.dims.raw}")
    decode_cfg = DecodeConfig(beam_size=int(cfg["decode"]["beam_size"]),
                              max_length=int(cfg["decode"]["max_length"]),
                              mode=checkpoint.mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        for fid, hyp in _decode_dataset(checkpoint, dataset, decode_cfg):
            words = decode_caption(dataset.vocab, list(hyp.token_ids))
            f.write(json.dumps({"feature_id": fid, "tokens": words,
                                "logprob": hyp.logprob}, sort_keys=True) + "\n")
    print(f"decoded {dataset.features.count} features "
          f"(beam {decode_cfg.beam_size}) -> {out}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    _print_config(cfg)
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    manifest = _require_file(args.data, "dataset manifest")
    checkpoint = load_checkpoint(ckpt_path)
    dataset = load_dataset(manifest)
    if dataset.vocab.size != checkpoint.dims.vocab:
        raise FormatError(f"dataset vocab size {dataset.vocab.size} does not "
                          f"match checkpoint vocab {checkpoint.dims.vocab}")
    decode_cfg = DecodeConfig(beam_size=int(cfg["decode"]["beam_size"]),
                              max_length=int(cfg["decode"]["max_length"]),
                              mode=checkpoint.mode)
    references = dataset.references_by_feature()
    feature_ids = sorted(references)
    candidates = []
    for fid in feature_ids:
        hyps = beam_search(checkpoint.params, dataset.features.row(fid), decode_cfg)
        candidates.append(decode_caption(dataset.vocab, list(hyps[0].token_ids)))
    metric_report = evaluate(candidates, [references[fid] for fid in feature_ids])

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = metric_report.to_dict()
    payload["feature_ids"] = feature_ids
    payload["candidates"] = candidates
    (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2,
                                                     sort_keys=True) + "\n")
    report.metrics_chart(metric_report, out_dir / "metrics.png")
    b = metric_report.bleu
    print(f"BLEU@1 {b[0]:.4f}  BLEU@2 {b[1]:.4f}  BLEU@3 {b[2]:.4f}  "
          f"BLEU@4 {b[3]:.4f}  CIDEr-D {metric_report.cider:.4f}")
    print(f"report -> {out_dir / 'metrics.json'}")
    print(f"chart -> {out_dir / 'metrics.png'}")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    _print_config(cfg)
    gc = cfg["gradcheck"]
    mode = _mode_from(cfg)
    dims = Dims(vocab=3 + int(gc["vocab_words"]), embed=int(gc["embed"]),
                hidden=int(gc["hidden"]), img_embed=int(gc["img_embed"]),
                raw=int(gc["raw"]))
    params = init_params(dims, cfg["seed"], mode=mode,
                         we_std=float(gc["we_std"]),
                         gate_std=float(gc["gate_std"]),
                         img_std=float(gc["img_std"]))
    rng = np.random.Generator(np.random.PCG64(cfg["seed"]))
    interior = rng.integers(3, dims.vocab, size=int(gc["caption_length"]))
    token_ids = [0] + [int(t) for t in interior] + [1]
    raw_feature = 0.5 + rng.random(dims.raw)

    check = gradient_check(params, raw_feature, token_ids, mode,
                           lam=float(gc["lam"]), epsilon=float(gc["epsilon"]),
                           tolerance=float(gc["tolerance"]))
    for name in sorted(check.group_errors):
        status = "ok" if check.group_errors[name] < check.tolerance else "FAIL"
        print(f"{name:>8}  max rel err {check.group_errors[name]:.3e}  {status}")
    print(f"overall max rel err {check.max_error:.3e} "
          f"(tolerance {check.tolerance:.1e})")
    if not check.passed:
        print(f"gradient check FAILED for groups: {', '.join(check.failed_groups)}",
              file=sys.stderr)
        return EXIT_VERIFY
    print("gradient check passed")
    return EXIT_OK


def cmd_analyze(args, cfg) -> int:
    _print_config(cfg)
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    checkpoint = load_checkpoint(ckpt_path)
    vocab = _load_vocab_from_checkpoint(checkpoint)
    if vocab.size != checkpoint.dims.vocab:
        raise FormatError("checkpoint vocabulary metadata does not match dims")
    words = args.word if args.word else default_analysis_words(vocab)
    for w in words:
        if w not in vocab:
            raise ValueError(f"word {w!r} is not in the checkpoint vocabulary")
    k = args.k
    if not 1 <= k < vocab.size:
        raise ValueError(f"k must satisfy 1 <= k < vocab size {vocab.size}")

    table, rows = neighbor_report(checkpoint.params.w_c, vocab, words, k)
    print(table)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "neighbors.txt").write_text(table + "\n")
    (out_dir / "neighbors.json").write_text(
        json.dumps({"k": k, "words": rows}, indent=2, sort_keys=True) + "\n")
    report.mask_distance_heatmap(checkpoint.params.w_c, vocab, words,
                                 out_dir / "mask_distances.png")
    print(f"tables -> {out_dir / 'neighbors.txt'}, {out_dir / 'neighbors.json'}")
    print(f"heatmap -> {out_dir / 'mask_distances.png'}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="tcap", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="manifest path to write")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the three-stage training schedule")
    common(p)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode captions for every feature")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="JSON-lines output path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score decoded captions against references")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("analyze", help="mask-column nearest-neighbor report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--word", action="append", help="word to analyze (repeatable)")
    p.add_argument("--k", type=int, default=6, help="neighbors per word")
    p.set_defaults(func=cmd_analyze)
    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError("missing subcommand "
                             "(synth, train, generate, eval, gradcheck, analyze)")
        cfg = resolve_config(args.config, args.seed, extra)
        return args.func(args, cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError, ValueError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
