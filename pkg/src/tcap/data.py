"""Dataset loading, the binary feature store, and the synthetic corpus.

A dataset pairs image feature vectors (precomputed, stand-ins for CNN
output) with id-encoded captions. On disk it is a JSON manifest plus a
little-endian binary feature file:

    magic "FEAT" | u32 version=1 | u32 count | u32 dim | count*dim f32

The synthetic corpus is compositional: each category of words (colors,
objects, actions) owns a disjoint block of feature dimensions, and every
example pairs a noisy block-signature feature with the templated caption
"a <color> <object> <action>". Words of one category therefore share
feature structure, which is what the mask-similarity analysis probes.
"""

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .numerics import gaussian_init
from .vocab import START, STOP, Vocabulary, build_vocab, encode_caption

FEATURE_MAGIC = b"FEAT"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class CaptionExample:
    """One feature-store row index paired with an encoded caption."""

    feature_id: int
    token_ids: tuple[int, ...]

    def __post_init__(self):
        ids = self.token_ids
        if len(ids) < 2:
            raise ValueError("caption must contain at least START and STOP")
        if ids[0] != START or ids[-1] != STOP:
            raise ValueError("caption must begin with START and end with STOP")
        if START in ids[1:]:
            raise ValueError("caption contains an interior START")


class FeatureStore:
    """Row-major matrix of image feature vectors."""

    def __init__(self, rows: np.ndarray):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ValueError("feature store needs a non-empty 2-D array")
        if not np.all(np.isfinite(rows)):
            raise FormatError("feature store contains non-finite entries")
        self.rows = rows

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def row(self, feature_id: int) -> np.ndarray:
        return self.rows[feature_id]


@dataclass
class Dataset:
    vocab: Vocabulary
    features: FeatureStore
    examples: list[CaptionExample]

    def references_by_feature(self) -> dict[int, list[list[str]]]:
        """Caption word lists grouped per feature id (metric references)."""
        refs: dict[int, list[list[str]]] = {}
        for ex in self.examples:
            words = [self.vocab.word(i) for i in ex.token_ids[1:-1]]
            refs.setdefault(ex.feature_id, []).append(words)
        return refs


def write_features(path, rows: np.ndarray) -> None:
    rows32 = np.asarray(rows, dtype="<f4")
    if rows32.ndim != 2:
        raise ValueError("feature rows must be 2-D")
    count, dim = rows32.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, count, dim))
        fh.write(rows32.tobytes(order="C"))


def read_features(path) -> FeatureStore:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise FormatError(f"{path}: truncated feature header")
        if header[:4] != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic {header[:4]!r}, expected {FEATURE_MAGIC!r}")
        version, count, dim = struct.unpack("<III", header[4:])
        if version != FEATURE_VERSION:
            raise FormatError(f"{path}: unsupported feature version {version}")
        payload = fh.read()
    expected = count * dim * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    rows = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    return FeatureStore(rows.astype(np.float64))


def save_dataset(dataset: Dataset, manifest_path, feature_file: str | None = None) -> None:
    """Write the manifest JSON and its feature file next to it."""
    manifest_path = Path(manifest_path)
    if feature_file is None:
        feature_file = manifest_path.stem + ".feat"
    write_features(manifest_path.parent / feature_file, dataset.features.rows)
    manifest = {
        "version": MANIFEST_VERSION,
        "feature_file": feature_file,
        "vocab": {"words": dataset.vocab.words},
        "examples": [
            {
                "feature_id": ex.feature_id,
                "tokens": [dataset.vocab.word(i) for i in ex.token_ids[1:-1]],
            }
            for ex in dataset.examples
        ],
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{manifest_path}: invalid JSON ({e})") from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{manifest_path}: unsupported manifest version "
                          f"{manifest.get('version')!r}")
    for key in ("feature_file", "vocab", "examples"):
        if key not in manifest:
            raise FormatError(f"{manifest_path}: missing field {key!r}")
    vocab = Vocabulary(manifest["vocab"]["words"])
    features = read_features(manifest_path.parent / manifest["feature_file"])
    examples = []
    for i, entry in enumerate(manifest["examples"]):
        fid = entry.get("feature_id")
        if not isinstance(fid, int) or not 0 <= fid < features.count:
            raise FormatError(f"{manifest_path}: example {i} feature_id {fid!r} "
                              f"out of range for {features.count} features")
        examples.append(CaptionExample(fid, tuple(encode_caption(vocab, entry["tokens"]))))
    return Dataset(vocab, features, examples)


@dataclass
class SynthSpec:
    """Recipe for the compositional synthetic corpus.

    categories: ordered name -> word list; each category gets one feature
    dimension per member (disjoint blocks, in declaration order).
    """

    categories: dict[str, list[str]] = field(default_factory=lambda: {
        "color": ["red", "blue", "green"],
        "object": ["dog", "cat", "bird"],
        "action": ["sitting", "running", "sleeping"],
    })
    n_examples: int = 32
    noise_std: float = 0.05
    seed: int = 0
    article: str = "a"

    def validate(self) -> None:
        if not self.categories or any(not words for words in self.categories.values()):
            raise ValueError("every category needs at least one word")
        all_words = [self.article] + [w for ws in self.categories.values() for w in ws]
        if len(set(all_words)) != len(all_words):
            raise ValueError("template words must be distinct across categories")
        if self.n_examples < 1:
            raise ValueError("n_examples must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def feature_dim(self) -> int:
        return sum(len(ws) for ws in self.categories.values())


def synth_dataset(spec: SynthSpec) -> Dataset:
    """Generate the synthetic corpus; deterministic for a fixed seed.

    Example i uses the i-th member combination (cycling through the
    cartesian product, so coverage stays balanced), a block-signature
    feature plus Gaussian noise, and the caption
    "<article> <member per category...>". Features are rounded to
    float32 so that save/load round-trips are bit-exact.
    """
    spec.validate()
    combos = list(itertools.product(*[range(len(ws)) for ws in spec.categories.values()]))
    member_lists = list(spec.categories.values())
    dim = spec.feature_dim
    offsets = np.cumsum([0] + [len(ws) for ws in member_lists])[:-1]

    noise = gaussian_init(spec.n_examples, dim, 0.0, spec.noise_std, spec.seed) \
        if spec.noise_std > 0 else np.zeros((spec.n_examples, dim))

    rows = np.zeros((spec.n_examples, dim))
    captions = []
    for i in range(spec.n_examples):
        combo = combos[i % len(combos)]
        for cat, member in enumerate(combo):
            rows[i, offsets[cat] + member] = 1.0
        rows[i] += noise[i]
        captions.append([spec.article] + [member_lists[c][m] for c, m in enumerate(combo)])
    rows = rows.astype(np.float32).astype(np.float64)

    vocab = build_vocab(captions, min_count=1)
    examples = [CaptionExample(i, tuple(encode_caption(vocab, captions[i])))
                for i in range(spec.n_examples)]
    return Dataset(vocab, FeatureStore(rows), examples)
