"""Synthetic tasks with exact-match verifiers.

Every completion has the shape ``<think>* <sep> answer... <eos>``. The
reasoning prefix is free; the verifier only reads the span between the
first ``<sep>`` and the following ``<eos>``.

* ``keyed-recall``: key/value pairs, then ``<query> key``; answer is the
  key followed by its paired value. Each pair is one token ``Kk:Vv`` so
  that a pair lives in exactly one cache entry and recall is a single
  content lookup. Filler tokens between the pairs are irrelevant by design.
* ``copy-tail``: a run of symbols; answer is its last ``tail`` symbols.
* ``micro-arith``: ``a op b``; answer is the decimal digits of the result.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

SPECIALS = ["<pad>", "<bos>", "<sep>", "<eos>", "<think>", "<query>", "<meta>", "<filler>"]
TAG_TOKENS = ["<eviction_rate>", "</eviction_rate>", "%", "."]
DIGITS = [str(i) for i in range(10)]
OPS = ["+", "-", "*"]


class Vocab:
    def __init__(self, n_keys: int = 8, n_values: int = 8):
        self.n_keys = n_keys
        self.n_values = n_values
        self.tokens = (
            SPECIALS
            + TAG_TOKENS
            + DIGITS
            + OPS
            + [f"K{i}" for i in range(n_keys)]
            + [f"V{i}" for i in range(n_values)]
            + [f"K{k}:V{v}" for k in range(n_keys) for v in range(n_values)]
        )
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, tok: str) -> int:
        return self.ids[tok]

    @property
    def pad(self) -> int:
        return self.ids["<pad>"]

    @property
    def sep(self) -> int:
        return self.ids["<sep>"]

    @property
    def eos(self) -> int:
        return self.ids["<eos>"]

    @property
    def think(self) -> int:
        return self.ids["<think>"]

    @property
    def meta(self) -> int:
        return self.ids["<meta>"]

    def key(self, i: int) -> int:
        return self.ids[f"K{i}"]

    def value(self, i: int) -> int:
        return self.ids[f"V{i}"]

    def pair(self, k: int, v: int) -> int:
        return self.ids[f"K{k}:V{v}"]

    def encode(self, text: str) -> list[int]:
        """Split on whitespace; tag markup and numbers are split further."""
        out = []
        for word in text.split():
            for piece in re.findall(r"</?eviction_rate>|<[a-z_]+>|K\d+:V\d+|K\d+|V\d+|\d|[%.+\-*]", word):
                out.append(self.ids[piece])
        return out

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids)


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "keyed-recall"
    pairs: int = 4
    filler: int = 0
    think: int = 8
    tail: int = 2
    length: int = 8
    max_operand: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("keyed-recall", "copy-tail", "micro-arith"):
            raise ValueError(f"unknown task kind {self.kind!r}")


@dataclass
class Instance:
    prompt: list[int]
    answer: list[int]
    meta: dict = field(default_factory=dict)

    def target_completion(self, vocab: Vocab, think: int) -> list[int]:
        return [vocab.think] * think + [vocab.sep] + self.answer + [vocab.eos]


def verify(instance: Instance, completion, vocab: Vocab) -> int:
    """1 iff the completion holds ``<sep> answer <eos>`` exactly, else 0."""
    completion = list(completion)
    if vocab.sep not in completion:
        return 0
    start = completion.index(vocab.sep) + 1
    if vocab.eos not in completion[start:]:
        return 0
    stop = completion.index(vocab.eos, start)
    return int(completion[start:stop] == instance.answer)


def _keyed_recall(spec: TaskSpec, vocab: Vocab, rng: np.random.Generator) -> Instance:
    keys = rng.choice(vocab.n_keys, size=spec.pairs, replace=False)
    vals = rng.choice(vocab.n_values, size=spec.pairs, replace=spec.pairs > vocab.n_values)
    prompt = [vocab.pair(int(k), int(v)) for k, v in zip(keys, vals)]
    for _ in range(spec.filler):
        prompt.insert(int(rng.integers(0, len(prompt) + 1)), vocab["<filler>"])
    q = int(rng.integers(spec.pairs))
    prompt += [vocab["<query>"], vocab.key(int(keys[q]))]
    # the answer restates the key before its value
    answer = [vocab.key(int(keys[q])), vocab.value(int(vals[q]))]
    return Instance(prompt, answer, {"query_pair": q, "pair_position": prompt.index(vocab.pair(int(keys[q]), int(vals[q])))})


def _copy_tail(spec: TaskSpec, vocab: Vocab, rng: np.random.Generator) -> Instance:
    syms = [vocab.value(int(i)) for i in rng.integers(0, vocab.n_values, size=spec.length)]
    return Instance(syms + [vocab["<query>"]], syms[-spec.tail :])


def _micro_arith(spec: TaskSpec, vocab: Vocab, rng: np.random.Generator) -> Instance:
    a, b = (int(x) for x in rng.integers(0, spec.max_operand + 1, size=2))
    op = OPS[int(rng.integers(len(OPS)))]
    if op == "-" and b > a:
        a, b = b, a
    result = {"+": a + b, "-": a - b, "*": a * b}[op]
    prompt = vocab.encode(f"{a} {op} {b}") + [vocab["<query>"]]
    return Instance(prompt, vocab.encode(" ".join(str(result))), {"result": result})


_GENERATORS = {"keyed-recall": _keyed_recall, "copy-tail": _copy_tail, "micro-arith": _micro_arith}


def generate_instances(spec: TaskSpec, n: int, vocab: Vocab, offset: int = 0) -> list[Instance]:
    """Deterministic for a given spec; ``offset`` selects a disjoint stream."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([spec.seed, offset + i])
        out.append(_GENERATORS[spec.kind](spec, vocab, rng))
    return out
