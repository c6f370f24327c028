"""Recognition head, CTC decoding (greedy and prefix beam search) and plate rules."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import PlatenetError, ShapeError
from .fusion import conv_from_tensors, conv_to_tensors
from .losses import ctc_loss
from .tensor import ConvSpec, activation, as_tensor, conv2d, maxpool2d

TIME_STEPS = 24
DEFAULT_TOKENS = tuple("0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ")


@dataclass(frozen=True)
class Alphabet:
    """Character tokens; the CTC blank is appended as the last class."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        tokens = tuple(self.tokens)
        if not tokens:
            raise PlatenetError("alphabet needs at least one token")
        if len(set(tokens)) != len(tokens):
            raise PlatenetError("alphabet tokens must be unique")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(tokens)})

    @property
    def blank(self) -> int:
        return len(self.tokens)

    @property
    def num_classes(self) -> int:
        return len(self.tokens) + 1

    def encode(self, text: str | Sequence[str]) -> list[int]:
        """Map a string (or token list) to class ids, greedily matching multi-char tokens."""
        if not isinstance(text, str):
            return [self._lookup(t) for t in text]
        ids, i = [], 0
        longest = max(len(t) for t in self.tokens)
        while i < len(text):
            for n in range(min(longest, len(text) - i), 0, -1):
                if text[i:i + n] in self._index:
                    ids.append(self._index[text[i:i + n]])
                    i += n
                    break
            else:
                raise PlatenetError(f"character {text[i]!r} is not in the alphabet")
        return ids

    def _lookup(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise PlatenetError(f"token {token!r} is not in the alphabet") from None

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in ids)

    @classmethod
    def from_json(cls, path) -> "Alphabet":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        tokens = data["tokens"] if isinstance(data, dict) else data
        return cls(tuple(tokens) if not isinstance(tokens, str) else tuple(tokens))


@dataclass
class RecognitionOutput:
    values: np.ndarray  # T x B_r x K
    is_prob: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 2:
            v = v[:, None, :]
        if v.ndim != 3:
            raise ShapeError(f"recognition output must be T x B x K, got {v.shape}")
        self.values = v

    def probs(self) -> np.ndarray:
        """Probabilities as float64, T x B x K."""
        v = self.values.astype(np.float64)
        if self.is_prob:
            return v
        v = v - v.max(axis=2, keepdims=True)
        e = np.exp(v)
        return e / e.sum(axis=2, keepdims=True)


@dataclass(frozen=True)
class HeadWeights:
    conv1: ConvSpec
    conv2: ConvSpec
    conv3: ConvSpec
    conv4: ConvSpec
    conv5: ConvSpec

    LAYERS = ("conv1", "conv2", "conv3", "conv4", "conv5")
    PADDING = {"conv1": 1, "conv2": 1, "conv3": 1, "conv4": 0, "conv5": 0}

    @property
    def num_classes(self) -> int:
        return self.conv5.out_channels

    @classmethod
    def random(cls, seed: int, num_classes: int, in_channels: int = 128) -> "HeadWeights":
        rng = np.random.default_rng(seed)
        return cls(
            ConvSpec.random(rng, in_channels, 128, 3, 3, padding=1, bn=True),
            ConvSpec.random(rng, 128, 128, 3, 3, padding=1, bn=True),
            ConvSpec.random(rng, 128, 256, 3, 3, padding=1, bn=True),
            ConvSpec.random(rng, 256, 256, 8, 1),
            ConvSpec.random(rng, 256, num_classes, 1, 1),
        )

    @classmethod
    def zeros(cls, num_classes: int, in_channels: int = 128) -> "HeadWeights":
        def z(i, o, kh, kw, pad):
            return ConvSpec(np.zeros((o, i, kh, kw)), np.zeros(o), padding=pad)
        return cls(z(in_channels, 128, 3, 3, 1), z(128, 128, 3, 3, 1), z(128, 256, 3, 3, 1),
                   z(256, 256, 8, 1, 0), z(256, num_classes, 1, 1, 0))

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray]) -> "HeadWeights":
        specs = {name: conv_from_tensors(tensors, name, padding=cls.PADDING[name]) for name in cls.LAYERS}
        expected = {"conv1": (3, 3), "conv2": (3, 3), "conv3": (3, 3), "conv4": (8, 1), "conv5": (1, 1)}
        for name, spec in specs.items():
            if spec.kernel != expected[name]:
                raise ShapeError(f"{name} kernel must be {expected[name]}, got {spec.kernel}")
        chain = [specs[n] for n in cls.LAYERS]
        for a, b, name in zip(chain, chain[1:], cls.LAYERS[1:]):
            if a.out_channels != b.in_channels:
                raise ShapeError(f"{name} expects {b.in_channels} inputs but previous layer gives {a.out_channels}")
        return cls(**specs)

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.LAYERS:
            out.update(conv_to_tensors(getattr(self, name), name))
        return out


def head_forward(crops, weights: HeadWeights, softmax: bool = True) -> RecognitionOutput:
    """B_r x C x 32 x 96 rectified crops to a T=24 x B_r x K output.

    conv1..conv3 are 3x3 (+BN+ReLU) with 2x2 max pools after conv1 and conv2;
    conv4 is an 8x1 valid conv collapsing the height; conv5 is the 1x1 classifier.
    """
    x = as_tensor(crops, ndim=4)
    if x.shape[2:] != (32, 96):
        raise ShapeError(f"recognition head expects 32x96 crops, got {x.shape[2:]}")
    x = activation(conv2d(x, weights.conv1), "relu")
    x = maxpool2d(x, 2, 2)
    x = activation(conv2d(x, weights.conv2), "relu")
    x = maxpool2d(x, 2, 2)
    x = activation(conv2d(x, weights.conv3), "relu")
    x = activation(conv2d(x, weights.conv4), "relu")
    x = conv2d(x, weights.conv5)  # B x K x 1 x 24
    if softmax:
        x = activation(x, "softmax")
    out = np.ascontiguousarray(x[:, :, 0, :].transpose(2, 0, 1))
    return RecognitionOutput(out, is_prob=softmax)


def collapse(path: Iterable[int], blank: int) -> tuple[int, ...]:
    """CTC collapse: merge consecutive repeats, then drop blanks."""
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return tuple(out)


def greedy_decode(out: RecognitionOutput, alphabet: Alphabet) -> list[str]:
    best = out.values.argmax(axis=2)  # T x B
    return [alphabet.decode(collapse(best[:, b], alphabet.blank)) for b in range(best.shape[1])]


@dataclass(order=True)
class BeamEntry:
    """A label prefix with its path mass split by the last emitted symbol."""

    prefix: tuple[int, ...]
    log_blank: float = -math.inf
    log_nonblank: float = -math.inf

    @property
    def log_total(self) -> float:
        return float(np.logaddexp(self.log_blank, self.log_nonblank))


@dataclass
class Candidate:
    tokens: tuple[int, ...]
    text: str
    log_prob: float


def _lse(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = max(a, b)
    return m + math.log1p(math.exp(-abs(a - b)))


def _rank(entries: Iterable[BeamEntry]) -> list[BeamEntry]:
    return sorted(entries, key=lambda e: (-e.log_total, e.prefix))


def beam_search_single(log_probs: np.ndarray, blank: int, beam_width: int = 10) -> list[BeamEntry]:
    """Prefix beam search over a T x K table of log-probabilities.

    Returns every surviving beam, best first (ties: lexicographic prefix).
    """
    if beam_width < 1:
        raise PlatenetError("beam_width must be >= 1")
    lp = np.asarray(log_probs, dtype=np.float64)
    T, K = lp.shape
    beams = [BeamEntry((), 0.0, -math.inf)]
    for t in range(T):
        row = lp[t]
        nxt: dict[tuple[int, ...], list[float]] = defaultdict(lambda: [-math.inf, -math.inf])
        for e in beams:
            total = e.log_total
            # stay on the same prefix by emitting blank
            acc = nxt[e.prefix]
            acc[0] = _lse(acc[0], total + row[blank])
            last = e.prefix[-1] if e.prefix else None
            if last is not None:
                # repeat of the last symbol without a blank collapses into the prefix
                acc[1] = _lse(acc[1], e.log_nonblank + row[last])
            for k in range(K):
                if k == blank:
                    continue
                ext = nxt[e.prefix + (k,)]
                if k == last:
                    ext[1] = _lse(ext[1], e.log_blank + row[k])
                else:
                    ext[1] = _lse(ext[1], total + row[k])
        beams = _rank(BeamEntry(p, b, nb) for p, (b, nb) in nxt.items())
        beams = [e for e in beams if e.log_total > -math.inf][:beam_width] or beams[:1]
    return beams


def beam_search_decode(out: RecognitionOutput, alphabet: Alphabet, beam_width: int = 10,
                       n_best: int = 5, rescore: bool = True) -> list[list[Candidate]]:
    """Ranked candidates per batch item, best first.

    With ``rescore`` the surviving beams and the greedy labeling are re-ranked
    by their exact CTC probability (pruning makes beam masses lower bounds),
    so the top candidate is never less probable than the greedy one.
    """
    probs = out.probs()
    if probs.shape[2] != alphabet.num_classes:
        raise ShapeError(f"output has {probs.shape[2]} classes, alphabet needs {alphabet.num_classes}")
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    results = []
    for b in range(probs.shape[1]):
        beams = beam_search_single(logp[:, b, :], alphabet.blank, beam_width)
        if rescore:
            prefixes = {e.prefix for e in beams}
            prefixes.add(collapse(logp[:, b, :].argmax(axis=1), alphabet.blank))
            scored = [(_exact_log_prob(logp[:, b, :], p, alphabet.blank), p) for p in prefixes]
            scored.sort(key=lambda sp: (-sp[0], sp[1]))
        else:
            scored = [(e.log_total, e.prefix) for e in beams]
        results.append([Candidate(p, alphabet.decode(p), lp) for lp, p in scored[:n_best]])
    return results


def _exact_log_prob(log_probs: np.ndarray, prefix: tuple[int, ...], blank: int) -> float:
    r = ctc_loss(np.exp(log_probs), prefix, blank=blank, from_probs=True)
    return -r.loss if r.feasible else -math.inf


@dataclass
class RuleSet:
    """Allowed plate lengths and per-position token subsets (0-based positions)."""

    allowed_lengths: Optional[frozenset[int]] = None
    positions: dict[int, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.allowed_lengths is not None:
            self.allowed_lengths = frozenset(int(n) for n in self.allowed_lengths)
        self.positions = {int(k): frozenset(v) for k, v in self.positions.items()}
        for k, v in self.positions.items():
            if not v:
                raise PlatenetError(f"position {k} has an empty allowed set")

    def accepts(self, tokens: Sequence[str]) -> bool:
        if self.allowed_lengths is not None and len(tokens) not in self.allowed_lengths:
            return False
        for pos, allowed in self.positions.items():
            # a constrained position the candidate does not reach fails the rule
            if pos >= len(tokens) or tokens[pos] not in allowed:
                return False
        return True

    @classmethod
    def from_dict(cls, d: Mapping) -> "RuleSet":
        lengths = d.get("allowed_lengths")
        positions = {}
        for k, v in d.get("positions", {}).items():
            positions[int(k)] = frozenset(v)  # a string is a set of single-char tokens
        return cls(frozenset(lengths) if lengths is not None else None, positions)

    @classmethod
    def from_json(cls, path) -> "RuleSet":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def apply_rules(candidates: Sequence, rules: Optional[RuleSet],
                alphabet: Optional[Alphabet] = None) -> tuple[Optional[str], bool]:
    """First candidate satisfying ``rules``, else the top one flagged unverified.

    Candidates are strings or ``Candidate`` objects, best first.
    """
    if not candidates:
        return None, False

    def tokens_of(c) -> tuple[str, ...]:
        if isinstance(c, Candidate):
            return tuple(alphabet.tokens[i] for i in c.tokens) if alphabet else tuple(c.text)
        return tuple(alphabet.tokens[i] for i in alphabet.encode(c)) if alphabet else tuple(c)

    def text_of(c) -> str:
        return c.text if isinstance(c, Candidate) else c

    if rules is None:
        return text_of(candidates[0]), True
    for c in candidates:
        if rules.accepts(tokens_of(c)):
            return text_of(c), True
    return text_of(candidates[0]), False
