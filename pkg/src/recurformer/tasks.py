"""HashHop linked-list reconstruction and multi-query associative recall (MQAR).

Generators draw from :class:`random.Random` seeded with an integer, so the
same ``(seed, params)`` reproduces the same instance byte for byte.

HashHop rendering (character level)::

    <a> -> <b>\\n        one line per pair, shuffled
    ...
    ===\\n               separator line
    <start> =>          start element and cue

A model continues after the cue with `` <e1> -> <e2> -> ...``; scoring
prepends the start element given in the prompt.

MQAR rendering (token level): ``k1 v1 k2 v2 ... kn vn PAD ... PAD q1 a1 q2 a2 ...``
padded between the pairs and the queries up to the requested length; the model
is scored on predicting ``a_i`` at the position of ``q_i``.
"""

from __future__ import annotations

import json
import random
import re
import string
from collections.abc import Hashable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .tensor import check_seed

ALPHABET = string.ascii_lowercase + string.digits
SEPARATOR = "==="
CUE = " =>"
ARROW = " -> "


class TaskConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


# ---------------------------------------------------------------- HashHop


def _line(a: str, b: str) -> str:
    return f"{a}{ARROW}{b}\n"


@dataclass(frozen=True)
class HashHopInstance:
    pairs: tuple[tuple[str, str], ...]
    start_element: str
    target_chain: tuple[str, ...]
    h_e: int
    h_p: int
    h_l: int
    seed: int | None = None

    def render(self) -> str:
        body = "".join(_line(a, b) for a, b in self.pairs)
        return f"{body}{SEPARATOR}\n{self.start_element}{CUE}"

    def answer(self) -> str:
        """The continuation an exact solver would emit after the cue."""
        return " " + ARROW.join(self.target_chain[1:])

    def validate(self) -> None:
        chain = self.target_chain
        if len(chain) != self.h_p + 1 or chain[0] != self.start_element:
            raise InputError("target chain must have h_p + 1 elements starting at the start element")
        elements = [e for p in self.pairs for e in p]
        if any(len(e) != self.h_e or set(e) - set(ALPHABET) for e in elements):
            raise InputError(f"elements must be {self.h_e}-character lowercase alphanumeric strings")
        lefts = [a for a, _ in self.pairs]
        rights = [b for _, b in self.pairs]
        if len(set(lefts)) != len(lefts) or len(set(rights)) != len(rights):
            raise InputError("an element appears twice on the same side")
        if len(set(elements)) != len(elements) - (len(chain) - 2):
            raise InputError("elements repeat outside the chain links")
        succ = dict(self.pairs)
        walk = [self.start_element]
        while walk[-1] in succ and len(walk) <= len(self.pairs):
            walk.append(succ[walk[-1]])
        if tuple(walk) != chain:
            raise InputError(f"following pairs from the start gives {walk}, not the target chain")
        chain_set = set(chain)
        chain_pairs = set(zip(chain, chain[1:]))
        for a, b in self.pairs:
            if (a, b) not in chain_pairs and (a in chain_set or b in chain_set):
                raise InputError(f"distractor {a}->{b} touches the target chain")
        if len(self.render()) > self.h_l:
            raise InputError(f"rendered length {len(self.render())} exceeds h_l={self.h_l}")

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]], start: str, h_l: int | None = None) -> HashHopInstance:
        """Build (and validate) an instance from explicit pairs, inferring the chain."""
        succ = dict(pairs)
        chain = [start]
        while chain[-1] in succ and len(chain) <= len(pairs):
            chain.append(succ[chain[-1]])
        inst = cls(tuple(map(tuple, pairs)), start, tuple(chain), len(start), len(chain) - 1, 0)
        inst = cls(inst.pairs, start, inst.target_chain, inst.h_e, inst.h_p, h_l or len(inst.render()))
        inst.validate()
        return inst

    def to_text(self) -> str:
        header = {"task": "hashhop", "seed": self.seed, "h_e": self.h_e, "h_p": self.h_p, "h_l": self.h_l,
                  "start": self.start_element, "chain": list(self.target_chain)}
        return json.dumps(header, sort_keys=True) + "\n" + self.render() + "\n"

    @classmethod
    def from_text(cls, text: str) -> HashHopInstance:
        head, _, body = text.partition("\n")
        meta = json.loads(head)
        if meta.get("task") != "hashhop":
            raise InputError("not a HashHop instance file")
        pairs = []
        for line in body.splitlines():
            if line == SEPARATOR:
                break
            a, sep, b = line.partition(ARROW)
            if not sep:
                raise InputError(f"malformed pair line {line!r}")
            pairs.append((a, b))
        inst = cls(tuple(pairs), meta["start"], tuple(meta["chain"]), meta["h_e"], meta["h_p"], meta["h_l"], meta["seed"])
        inst.validate()
        return inst


def generate_hashhop(seed: int, h_e: int, h_p: int, h_l: int) -> HashHopInstance:
    """A chain of ``h_p`` links plus as many distractor pairs as fit in ``h_l`` characters."""
    check_seed(seed)
    if h_e <= 0 or h_p <= 0:
        raise TaskConfigError("h_e and h_p must be positive")
    line = 2 * h_e + len(ARROW) + 1
    fixed = h_p * line + len(SEPARATOR) + 1 + h_e + len(CUE)
    n_distract = (h_l - fixed) // line
    if n_distract < 1:
        raise TaskConfigError(f"h_l={h_l} leaves no room for a distractor (needs >= {fixed + line})")
    need = h_p + 1 + 2 * n_distract
    if need > len(ALPHABET) ** h_e // 2:
        raise TaskConfigError(f"{need} distinct elements of length {h_e} is too dense to sample")
    rng = random.Random(seed)
    seen: dict[str, None] = {}
    while len(seen) < need:
        seen.setdefault("".join(rng.choice(ALPHABET) for _ in range(h_e)))
    elems = list(seen)
    chain = elems[: h_p + 1]
    rest = elems[h_p + 1 :]
    pairs = list(zip(chain, chain[1:])) + [(rest[2 * i], rest[2 * i + 1]) for i in range(n_distract)]
    rng.shuffle(pairs)
    return HashHopInstance(tuple(pairs), chain[0], tuple(chain), h_e, h_p, h_l, seed)


def parse_elements(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text)


def score_hashhop(instance: HashHopInstance, model_output: str | Sequence[str]) -> float:
    """h_gq: length of the longest correct prefix of the chain over the chain length."""
    out = parse_elements(model_output) if isinstance(model_output, str) else list(model_output)
    n = 0
    for got, want in zip(out, instance.target_chain):
        if got != want:
            break
        n += 1
    return n / len(instance.target_chain)


def echo_oracle(instance: HashHopInstance) -> list[str]:
    """Reference answerer: follow the pairs from the start element."""
    succ = dict(instance.pairs)
    out = [instance.start_element]
    while out[-1] in succ and len(out) <= len(instance.pairs):
        out.append(succ[out[-1]])
    return out


class CharTokenizer:
    """Character vocabulary covering rendered HashHop text."""

    chars = "\n" + " ->=" + ALPHABET

    def __init__(self) -> None:
        self.index = {c: i for i, c in enumerate(self.chars)}

    @property
    def vocab_size(self) -> int:
        return len(self.chars)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[c] for c in text]
        except KeyError as exc:
            raise InputError(f"character {exc.args[0]!r} outside the HashHop alphabet") from None

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.chars[i] for i in ids)


def hashhop_corpus(seed: int, n_docs: int, h_e: int = 4, h_p: int = 8, h_l: int = 256) -> str:
    """Concatenated solved instances (prompt + answer + newline) for language-model training."""
    rng = random.Random(check_seed(seed))
    docs = []
    for _ in range(n_docs):
        inst = generate_hashhop(rng.getrandbits(63), h_e, h_p, h_l)
        docs.append(inst.render() + inst.answer() + "\n")
    return "".join(docs)


# ---------------------------------------------------------------- MQAR


@dataclass(frozen=True)
class MQARInstance:
    kv_pairs: tuple[tuple[Hashable, Hashable], ...]
    queries: tuple[Hashable, ...]
    answers: tuple[Hashable, ...]
    length: int | None = None
    pad: Hashable = 0
    seed: int | None = None

    @property
    def n_pairs(self) -> int:
        return len(self.kv_pairs)

    def validate(self) -> None:
        keys = [k for k, _ in self.kv_pairs]
        if len(set(keys)) != len(keys):
            raise InputError("keys must be distinct")
        table = dict(self.kv_pairs)
        for q, a in zip(self.queries, self.answers, strict=True):
            if q not in table or table[q] != a:
                raise InputError(f"query {q!r} does not map to answer {a!r}")

    @classmethod
    def from_pairs(cls, kv_pairs: Sequence[tuple[Hashable, Hashable]], queries: Sequence[Hashable], **kw) -> MQARInstance:
        table = dict(kv_pairs)
        missing = [q for q in queries if q not in table]
        if missing:
            raise InputError(f"queried keys absent from the pairs: {missing}")
        inst = cls(tuple(map(tuple, kv_pairs)), tuple(queries), tuple(table[q] for q in queries), **kw)
        inst.validate()
        return inst

    def tokens(self) -> list:
        ctx = [t for kv in self.kv_pairs for t in kv]
        qa = [t for qa in zip(self.queries, self.answers) for t in qa]
        n_pad = 0 if self.length is None else self.length - len(ctx) - len(qa)
        if n_pad < 0:
            raise InputError(f"{len(ctx) + len(qa)} tokens do not fit in length {self.length}")
        return ctx + [self.pad] * n_pad + qa

    def query_positions(self) -> list[int]:
        n = len(self.tokens())
        first = n - 2 * len(self.queries)
        return list(range(first, n, 2))

    def to_text(self) -> str:
        header = {"task": "mqar", "seed": self.seed, "n_pairs": self.n_pairs, "length": self.length, "pad": self.pad}
        lines = [json.dumps(header, sort_keys=True)]
        lines.append("pairs: " + " ".join(f"{k}:{v}" for k, v in self.kv_pairs))
        lines.append("queries: " + " ".join(map(str, self.queries)))
        lines.append("answers: " + " ".join(map(str, self.answers)))
        lines.append("tokens: " + " ".join(map(str, self.tokens())))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> MQARInstance:
        lines = text.splitlines()
        meta = json.loads(lines[0])
        if meta.get("task") != "mqar":
            raise InputError("not an MQAR instance file")
        fields = dict(line.split(": ", 1) if ": " in line else (line.rstrip(":"), "") for line in lines[1:])
        pairs = [tuple(int(x) for x in p.split(":")) for p in fields["pairs"].split()]
        queries = [int(q) for q in fields["queries"].split()]
        return cls.from_pairs(pairs, queries, length=meta["length"], pad=meta["pad"], seed=meta["seed"])


def generate_mqar(
    seed: int,
    n_pairs: int,
    length: int,
    key_vocab: Sequence[int],
    value_vocab: Sequence[int],
    n_queries: int | None = None,
    pad: int = 0,
) -> MQARInstance:
    """Keys without replacement, values with replacement, queries a shuffled subset of the keys."""
    check_seed(seed)
    keys_v, vals_v = list(key_vocab), list(value_vocab)
    if set(keys_v) & set(vals_v):
        raise TaskConfigError("key and value vocabularies overlap")
    if pad in keys_v or pad in vals_v:
        raise TaskConfigError("pad token collides with the vocabularies")
    if not 1 <= n_pairs <= len(keys_v):
        raise TaskConfigError(f"n_pairs={n_pairs} outside [1, {len(keys_v)}]")
    q = n_pairs if n_queries is None else n_queries
    if not 1 <= q <= n_pairs:
        raise TaskConfigError(f"n_queries={q} outside [1, n_pairs]")
    if 2 * n_pairs + 2 * q > length:
        raise TaskConfigError(f"{n_pairs} pairs and {q} queries need {2 * (n_pairs + q)} tokens > {length}")
    rng = random.Random(seed)
    keys = rng.sample(keys_v, n_pairs)
    values = [rng.choice(vals_v) for _ in keys]
    queries = rng.sample(keys, q)
    return MQARInstance.from_pairs(list(zip(keys, values)), queries, length=length, pad=pad, seed=seed)


def score_mqar(instance: MQARInstance, predictions: Sequence[Hashable]) -> float:
    if len(predictions) != len(instance.answers):
        raise InputError(f"{len(predictions)} predictions for {len(instance.answers)} queries")
    return sum(p == a for p, a in zip(predictions, instance.answers)) / len(instance.answers)


@dataclass(frozen=True)
class MQARVocab:
    """Token ids: 0 is padding, then ``n_keys`` keys, then ``n_values`` values."""

    n_keys: int = 256
    n_values: int = 256

    @property
    def keys(self) -> range:
        return range(1, 1 + self.n_keys)

    @property
    def values(self) -> range:
        return range(1 + self.n_keys, 1 + self.n_keys + self.n_values)

    @property
    def size(self) -> int:
        return 1 + self.n_keys + self.n_values


@dataclass
class MQARBatch:
    tokens: torch.Tensor  # (B, L) long
    targets: torch.Tensor  # (B, L) long, answer at query positions
    mask: torch.Tensor  # (B, L) bool, True at query positions
    instances: list[MQARInstance] = field(default_factory=list)


def mqar_batch(instances: Sequence[MQARInstance]) -> MQARBatch:
    """Stack same-length instances into model inputs with targets at the query positions."""
    toks = torch.tensor([inst.tokens() for inst in instances], dtype=torch.long)
    targets = torch.zeros_like(toks)
    mask = torch.zeros_like(toks, dtype=torch.bool)
    for b, inst in enumerate(instances):
        pos = torch.tensor(inst.query_positions())
        targets[b, pos] = torch.tensor(inst.answers, dtype=torch.long)
        mask[b, pos] = True
    return MQARBatch(toks, targets, mask, list(instances))


def write_lines(path: str | Path, text: str) -> None:
    Path(path).write_text(text)
