"""Synthetic multimodal QA data with known corruption ground truth.

The generator draws a latent concept per example, renders it as a noisy
prototype vector (the "image"), asks a templated question about one
attribute, and answers from a fixed (concept, question-type) truth
table, so the best possible answer is recoverable from the image plus
the question. The question template depends on the concept only through
a coarse context token, which keeps the image informative.

Corruption mirrors the two real-world failure channels: answers swapped
for a different answer (label flips) and image features replaced by
another example's (mismatches). Both are injected in exact counts on
disjoint subsets, with the ground-truth mask returned.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffcore import make_rng
from .errors import ConfigError, DataError, ParseError

QUESTION_TYPES = ("what", "where", "how", "how_many", "why", "yes_no")

# Sampling weights loosely follow a real QA category skew (mostly yes/no
# and "what" questions, a long tail for the rest).
_TYPE_WEIGHTS = {
    "what": 0.31,
    "where": 0.10,
    "how": 0.07,
    "how_many": 0.06,
    "why": 0.06,
    "yes_no": 0.40,
}

_CONCEPT_WORDS = (
    "glomerulus", "melanoma", "fibrosis", "granuloma",
    "carcinoma", "thrombus", "abscess", "lipoma",
    "adenoma", "infarct", "polyp", "cyst",
    "ulcer", "edema", "nodule", "plaque",
)

_WHERE_ANSWERS = ("upper lobe", "lower lobe", "left margin", "right margin")
_HOW_ANSWERS = ("diffuse", "focal", "nodular")
_HOW_MANY_ANSWERS = ("one", "two", "three", "four", "five")
_WHY_ANSWERS = (
    "due to inflammation", "due to necrosis",
    "due to infection", "due to ischemia",
)

_QUESTION_TEMPLATES = {
    "what": "what structure is shown in section {ctx}",
    "where": "where is the lesion located in section {ctx}",
    "how": "how does the tissue appear in section {ctx}",
    "how_many": "how many lesions appear in section {ctx}",
    "why": "why is the tissue damaged in section {ctx}",
    "yes_no": "is the finding abnormal in section {ctx}",
}

UNKNOWN_TOKEN = "<unk>"


@dataclass
class VqaExample:
    """One (image vector, tokenized question, answer) record.

    ``corrupted`` is the synthetic ground truth (None when unknown);
    ``answer_class`` is the answer's index in an answer table and stays
    None until bound via :func:`bind_answer_classes`.
    """

    id: int
    image_features: np.ndarray
    question: list[int]
    question_type: str
    answer: str
    answer_class: int | None = None
    corrupted: bool | None = None


@dataclass
class Vocabulary:
    """Dense token<->id bijection with id 0 reserved for unknown tokens."""

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if not self.id_to_token or self.id_to_token[0] != UNKNOWN_TOKEN:
            raise ConfigError(f"id 0 must be {UNKNOWN_TOKEN!r}")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ConfigError("vocabulary tokens must be unique")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, words: list[str]) -> list[int]:
        return [self.token_to_id.get(w, 0) for w in words]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]


def build_vocabulary(texts, cap: int = 4631) -> Vocabulary:
    """Keep the ``cap`` most frequent tokens, ties broken lexicographically.

    ``texts`` is an iterable of strings or token lists. The unknown
    token occupies id 0 on top of the kept tokens.
    """
    if cap < 1:
        raise ConfigError(f"vocabulary cap must be >= 1, got {cap}")
    counts = Counter()
    for text in texts:
        tokens = text.split() if isinstance(text, str) else list(text)
        counts.update(tokens)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[:cap]]
    return Vocabulary([UNKNOWN_TOKEN] + kept)


@dataclass
class SyntheticDataset:
    """Examples plus the vocabulary and answer table they were built with."""

    examples: list[VqaExample]
    vocab: Vocabulary
    answer_table: list[str]
    prototypes: np.ndarray | None = None

    @property
    def n_answers(self) -> int:
        return len(self.answer_table)


def answer_for(concept: int, question_type: str) -> str:
    """The fixed truth table mapping (concept, question type) to an answer."""
    if question_type == "what":
        return _CONCEPT_WORDS[concept % len(_CONCEPT_WORDS)]
    if question_type == "where":
        return _WHERE_ANSWERS[concept % len(_WHERE_ANSWERS)]
    if question_type == "how":
        return _HOW_ANSWERS[concept % len(_HOW_ANSWERS)]
    if question_type == "how_many":
        return _HOW_MANY_ANSWERS[concept % len(_HOW_MANY_ANSWERS)]
    if question_type == "why":
        return _WHY_ANSWERS[concept % len(_WHY_ANSWERS)]
    if question_type == "yes_no":
        return "yes" if concept % 2 == 0 else "no"
    raise DataError(f"unknown question type {question_type!r}")


def _concept_prototypes(rng, n_concepts: int, d_img: int) -> np.ndarray:
    """Unit-norm prototypes; orthonormal when they fit in the space."""
    raw = rng.standard_normal((d_img, n_concepts))
    if n_concepts <= d_img:
        q, _ = np.linalg.qr(raw)
        return np.ascontiguousarray(q[:, :n_concepts].T)
    vecs = rng.standard_normal((n_concepts, d_img))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def build_answer_table(n_concepts: int) -> list[str]:
    """Sorted table of every answer the truth table can emit."""
    answers = set()
    for c in range(n_concepts):
        for qtype in QUESTION_TYPES:
            answers.add(answer_for(c, qtype))
    return sorted(answers)


def bind_answer_classes(examples: list[VqaExample], answer_table: list[str]) -> None:
    """Fill ``answer_class`` from the table, in place."""
    index = {a: i for i, a in enumerate(answer_table)}
    for ex in examples:
        if ex.answer not in index:
            raise DataError(
                f"example {ex.id}: answer {ex.answer!r} not in the answer table"
            )
        ex.answer_class = index[ex.answer]


def generate_synthetic(
    n: int,
    d_img: int = 16,
    n_concepts: int = 8,
    seed: int = 0,
    noise_sigma: float = 0.3,
    n_contexts: int = 3,
    vocab_cap: int = 4631,
) -> SyntheticDataset:
    """Draw ``n`` examples from the concept/truth-table process.

    Deterministic in ``seed``. The context token in the question is the
    concept modulo ``n_contexts``, so the question narrows but does not
    determine the concept; the image carries the rest.
    """
    if n_concepts < 2:
        raise ConfigError(f"need at least 2 concepts, got {n_concepts}")
    if n <= 0:
        raise ConfigError(f"need a positive number of examples, got {n}")
    rng = make_rng(seed)
    prototypes = _concept_prototypes(rng, n_concepts, d_img)
    type_names = list(_TYPE_WEIGHTS)
    type_probs = np.array([_TYPE_WEIGHTS[t] for t in type_names])
    type_probs = type_probs / type_probs.sum()

    concepts = rng.integers(0, n_concepts, size=n)
    qtype_ids = rng.choice(len(type_names), size=n, p=type_probs)
    noise = rng.standard_normal((n, d_img)) * noise_sigma

    questions_words = []
    answers = []
    for i in range(n):
        qtype = type_names[qtype_ids[i]]
        ctx = f"s{concepts[i] % n_contexts}"
        questions_words.append(_QUESTION_TEMPLATES[qtype].format(ctx=ctx).split())
        answers.append(answer_for(int(concepts[i]), qtype))

    vocab = build_vocabulary(
        questions_words + [a.split() for a in answers], cap=vocab_cap
    )
    answer_table = build_answer_table(n_concepts)
    examples = []
    for i in range(n):
        examples.append(
            VqaExample(
                id=i,
                image_features=prototypes[concepts[i]] + noise[i],
                question=vocab.encode(questions_words[i]),
                question_type=type_names[qtype_ids[i]],
                answer=answers[i],
                corrupted=False,
            )
        )
    bind_answer_classes(examples, answer_table)
    return SyntheticDataset(examples, vocab, answer_table, prototypes)


# ---------------------------------------------------------------------------
# Corruption.
# ---------------------------------------------------------------------------


@dataclass
class CorruptionSpec:
    label_flip_rate: float = 0.0
    mismatch_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("label_flip_rate", "mismatch_rate"):
            rate = getattr(self, name)
            if not (0.0 <= rate <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {rate}")
        if self.label_flip_rate + self.mismatch_rate > 1.0:
            raise ConfigError("corruption rates must sum to at most 1")


def corrupt(
    examples: list[VqaExample],
    spec: CorruptionSpec,
    answer_table: list[str],
) -> tuple[list[VqaExample], list[int]]:
    """Apply exactly floor(rate * n) flips and mismatches on disjoint subsets.

    Flipped answers are drawn uniformly from the table minus the original
    answer; mismatched examples take the image features of a different
    example. Returns (new examples, sorted corrupted ids).
    """
    rng = make_rng(spec.seed)
    n = len(examples)
    n_flip = int(spec.label_flip_rate * n)
    n_mismatch = int(spec.mismatch_rate * n)
    chosen = rng.permutation(n)[: n_flip + n_mismatch]
    flip_ids = set(int(i) for i in chosen[:n_flip])
    mismatch_ids = set(int(i) for i in chosen[n_flip:])

    index = {a: i for i, a in enumerate(answer_table)}
    out = []
    mask_ids = []
    for pos, ex in enumerate(examples):
        if pos in flip_ids:
            alternatives = [a for a in answer_table if a != ex.answer]
            if not alternatives:
                raise DataError("answer table too small to flip a label")
            new_answer = alternatives[int(rng.integers(0, len(alternatives)))]
            out.append(
                replace(
                    ex,
                    answer=new_answer,
                    answer_class=index[new_answer],
                    corrupted=True,
                )
            )
            mask_ids.append(ex.id)
        elif pos in mismatch_ids:
            donor = pos
            while donor == pos:
                donor = int(rng.integers(0, n))
            out.append(
                replace(
                    ex,
                    image_features=examples[donor].image_features.copy(),
                    corrupted=True,
                )
            )
            mask_ids.append(ex.id)
        else:
            out.append(replace(ex))
    return out, sorted(mask_ids)


# ---------------------------------------------------------------------------
# Stratified splitting.
# ---------------------------------------------------------------------------


@dataclass
class SplitSpec:
    ratios: tuple[float, float, float] = (3.0, 1.0, 1.0)
    stratify_by_type: bool = True
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ConfigError(f"ratios must be three positive numbers, got {self.ratios}")


def _largest_remainder_counts(n: int, fractions: np.ndarray) -> list[int]:
    exact = fractions * n
    counts = np.floor(exact).astype(int)
    remainder = n - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    for k in range(remainder):
        counts[order[k]] += 1
    return [int(c) for c in counts]


def stratified_split(
    examples: list[VqaExample], spec: SplitSpec
) -> tuple[list[VqaExample], list[VqaExample], list[VqaExample]]:
    """Per-category largest-remainder partition into train/val/test.

    Deterministic in ``spec.seed``; every category needs at least 3
    examples so each split can be represented.
    """
    rng = make_rng(spec.seed)
    fractions = np.array(spec.ratios, dtype=np.float64)
    fractions = fractions / fractions.sum()

    if spec.stratify_by_type:
        groups: dict[str, list[int]] = {}
        for pos, ex in enumerate(examples):
            groups.setdefault(ex.question_type, []).append(pos)
    else:
        groups = {"all": list(range(len(examples)))}

    splits: tuple[list[VqaExample], ...] = ([], [], [])
    for category in sorted(groups):
        members = groups[category]
        if len(members) < 3:
            raise DataError(
                f"category {category!r} has only {len(members)} examples; "
                "need at least 3 to populate every split"
            )
        counts = _largest_remainder_counts(len(members), fractions)
        order = rng.permutation(len(members))
        cursor = 0
        for split_idx, count in enumerate(counts):
            for k in order[cursor : cursor + count]:
                splits[split_idx].append(examples[members[k]])
            cursor += count
    for part in splits:
        part.sort(key=lambda ex: ex.id)
    return splits


def split_manifest(train, val, test, seed: int, ratios) -> dict:
    return {
        "train": [ex.id for ex in train],
        "val": [ex.id for ex in val],
        "test": [ex.id for ex in test],
        "seed": seed,
        "ratios": list(ratios),
    }


# ---------------------------------------------------------------------------
# JSON-lines persistence.
# ---------------------------------------------------------------------------

_REQUIRED_FIELDS = ("id", "image_features", "question_tokens", "question_type", "answer")


def save_dataset(examples: list[VqaExample], path) -> None:
    """One JSON object per line; floats keep full precision via repr."""
    with open(path, "w") as fh:
        for ex in examples:
            record = {
                "id": int(ex.id),
                "image_features": [float(x) for x in ex.image_features],
                "question_tokens": [int(t) for t in ex.question],
                "question_type": ex.question_type,
                "answer": ex.answer,
            }
            if ex.corrupted is not None:
                record["corrupted"] = bool(ex.corrupted)
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_dataset(path) -> list[VqaExample]:
    """Parse a JSON-lines dataset; empty files yield an empty list.

    ``answer_class`` is left unbound; call :func:`bind_answer_classes`
    with an answer table before building batches.
    """
    examples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"invalid JSON ({err.msg})", line=lineno) from err
            for fld in _REQUIRED_FIELDS:
                if fld not in record:
                    raise ParseError(f"missing required field {fld!r}", line=lineno)
            if record["question_type"] not in QUESTION_TYPES:
                raise ParseError(
                    f"unknown question type {record['question_type']!r}", line=lineno
                )
            examples.append(
                VqaExample(
                    id=int(record["id"]),
                    image_features=np.array(record["image_features"], dtype=np.float64),
                    question=[int(t) for t in record["question_tokens"]],
                    question_type=record["question_type"],
                    answer=record["answer"],
                    corrupted=record.get("corrupted"),
                )
            )
    return examples


def save_meta(path, dataset: SyntheticDataset, extra: dict | None = None) -> None:
    """Sidecar with the vocabulary and answer table for a dataset file."""
    doc = {
        "vocab": dataset.vocab.id_to_token,
        "answers": dataset.answer_table,
        "d_img": int(dataset.examples[0].image_features.shape[0]),
        "question_types": list(QUESTION_TYPES),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))


def load_meta(path) -> dict:
    doc = json.loads(Path(path).read_text())
    for fld in ("vocab", "answers", "d_img"):
        if fld not in doc:
            raise ParseError(f"meta file missing {fld!r}")
    return doc
