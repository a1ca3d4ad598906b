"""Synthetic subject-relation-object world with zsRE/CounterFact-shaped records."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

# Templates read like catalogue entries: relation words first, then the
# subject, then the object. The clue ends on the subject's last token, so the
# state being edited is also the one that predicts the object.
# Index 0 is the clue ("src") template; the rest are used for paraphrases.
RELATIONS = [
    ("citizenship", [
        "the citizenship of {S} {O}",
        "the homeland of {S} {O}",
        "a passport held by {S} {O}",
        "the birthplace of {S} {O}",
    ]),
    ("occupation", [
        "the occupation of {S} {O}",
        "the profession of {S} {O}",
        "the trade practiced by {S} {O}",
        "the job held by {S} {O}",
    ]),
    ("language", [
        "the language of {S} {O}",
        "the native tongue of {S} {O}",
        "the words spoken by {S} {O}",
        "the mother tongue of {S} {O}",
    ]),
    ("instrument", [
        "the instrument of {S} {O}",
        "the instrument played by {S} {O}",
        "the music made by {S} {O}",
        "the favourite instrument of {S} {O}",
    ]),
    ("employer", [
        "the employer of {S} {O}",
        "the company paying {S} {O}",
        "the firm that hired {S} {O}",
        "the boss of {S} {O}",
    ]),
    ("sport", [
        "the sport of {S} {O}",
        "the game played by {S} {O}",
        "the competition entered by {S} {O}",
        "the athletic field of {S} {O}",
    ]),
    ("residence", [
        "the residence of {S} {O}",
        "the home town of {S} {O}",
        "the city housing {S} {O}",
        "the current address of {S} {O}",
    ]),
    ("cuisine", [
        "the favourite dish of {S} {O}",
        "the meal ordered by {S} {O}",
        "the food cooked by {S} {O}",
        "the cuisine of {S} {O}",
    ]),
]

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "kr", "dr", "gl"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "n", "r", "s", "l", "k"]
REFERENCE_SUBJECT = "someone"


class VocabularyOverflowError(ValueError):
    pass


class RecordParseError(ValueError):
    pass


@dataclass
class CorpusConfig:
    n_subjects: int = 50
    n_relations: int = 5
    paraphrases_per_fact: int = 2
    neighbors_per_fact: int = 3
    objects_per_relation: int = 12
    seed: int = 0

    def validate(self):
        for name in ("n_subjects", "n_relations", "paraphrases_per_fact", "neighbors_per_fact"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.objects_per_relation < 2:
            raise ValueError("objects_per_relation must be >= 2 (counterfactual targets)")
        if self.n_relations > len(RELATIONS):
            raise VocabularyOverflowError(f"only {len(RELATIONS)} relation templates are available")
        if self.paraphrases_per_fact > len(RELATIONS[0][1]) - 1:
            raise ValueError(f"at most {len(RELATIONS[0][1]) - 1} paraphrase templates per relation")
        if self.n_subjects < 2 * (self.neighbors_per_fact + 1):
            raise ValueError("too few subjects to draw disjoint neighborhoods")


@dataclass
class KnowledgeRecord:
    subject: str
    relation: str
    src: str
    original_object: str
    rephrase: list[str] = field(default_factory=list)
    loc: list[tuple[str, str]] = field(default_factory=list)
    generation_prompts: list[str] = field(default_factory=list)
    target_new: str | None = None
    reference_texts: list[str] = field(default_factory=list)
    case_id: int = 0
    split: str = "edit"

    @property
    def object(self) -> str:
        return self.original_object

    @property
    def clue(self) -> str:
        return self.src

    def __post_init__(self):
        self.loc = [tuple(x) for x in self.loc]
        if self.target_new is not None and self.target_new == self.original_object:
            raise ValueError("target_new must differ from original_object")


def _words(rng, n, taken):
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > 200 * n + 1000:
            raise VocabularyOverflowError("could not generate enough distinct words")
        k = int(rng.integers(2, 4))
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] + _CODAS[rng.integers(len(_CODAS))]
            for _ in range(k)
        )
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def render(template: str, subject: str, obj: str | None = None) -> str:
    """Fill a template; with ``obj=None`` return the prompt up to the object."""
    text = template.replace("{S}", subject)
    if obj is None:
        return text.replace("{O}", "").strip()
    return text.replace("{O}", obj)


def generate_corpus(config: CorpusConfig):
    """Return ``(records, vocab_tokens, training_texts)``.

    One record per (subject, relation). Subjects are split in two halves:
    ``edit`` subjects may become edit requests, ``neighbor`` subjects supply
    neighborhood prompts, so requests and neighborhoods never share a subject.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    template_words = {w for _, tpls in RELATIONS for t in tpls for w in t.split() if "{" not in w}
    taken = set(template_words) | {REFERENCE_SUBJECT}
    relations = RELATIONS[: config.n_relations]
    subjects = _words(rng, config.n_subjects, taken)
    objects = {name: _words(rng, config.objects_per_relation, taken) for name, _ in relations}

    order = rng.permutation(config.n_subjects)
    edit_subjects = {subjects[i] for i in order[: config.n_subjects // 2]}
    neighbor_pool = [s for s in subjects if s not in edit_subjects]

    original = {}
    for s in subjects:
        for name, _ in relations:
            original[(s, name)] = objects[name][rng.integers(config.objects_per_relation)]

    records, texts = [], []
    case = 0
    for s in subjects:
        for ri, (name, tpls) in enumerate(relations):
            obj = original[(s, name)]
            others = [o for o in objects[name] if o != obj]
            first = int(rng.integers(len(others)))
            # a target shared by too many neighbors falls back to the next feasible object
            for target in others[first:] + others[:first]:
                pool = [n for n in neighbor_pool if n != s and original[(n, name)] != target]
                if len(pool) >= config.neighbors_per_fact:
                    break
            para_idx = rng.choice(np.arange(1, len(tpls)), size=config.paraphrases_per_fact, replace=False)
            rephrase = [render(tpls[i], s) for i in sorted(para_idx)]
            same = [n for n in pool if original[(n, name)] == obj]
            rest = [n for n in pool if original[(n, name)] != obj]
            rng.shuffle(same)
            rng.shuffle(rest)
            chosen = (same + rest)[: config.neighbors_per_fact]
            if len(chosen) < config.neighbors_per_fact:
                raise ValueError("not enough neighbor subjects")
            loc = [(render(tpls[0], n), original[(n, name)]) for n in chosen]
            next_rel = relations[(ri + 1) % len(relations)][1][0]
            gen = [s, f"{s} is a", render(next_rel, s)]
            refs = [render(t, REFERENCE_SUBJECT, target) for t in tpls[1:4]]
            records.append(KnowledgeRecord(
                subject=s, relation=name, src=render(tpls[0], s), original_object=obj,
                rephrase=rephrase, loc=loc, generation_prompts=gen, target_new=target,
                reference_texts=refs, case_id=case,
                split="edit" if s in edit_subjects else "neighbor",
            ))
            case += 1
            for t in tpls:
                texts.append(render(t, s, obj))

    words = set()
    for t in texts:
        words.update(t.split())
    for r in records:
        for t in r.reference_texts + r.generation_prompts:
            words.update(t.split())
        words.add(r.target_new)
    vocab = ["<pad>", "<bos>", "<eos>", "<unk>"] + sorted(words)
    return records, vocab, texts


def edit_requests(records, n: int, seed: int = 0):
    """Pick ``n`` edit-split records with distinct subjects, deterministically."""
    pool = [r for r in records if r.split == "edit" and r.target_new is not None]
    rng = np.random.default_rng(seed)
    seen, out = set(), []
    for i in rng.permutation(len(pool)):
        r = pool[i]
        if r.subject in seen:
            continue
        seen.add(r.subject)
        out.append(r)
        if len(out) == n:
            return out
    raise ValueError(f"only {len(out)} edit requests with distinct subjects available")


def records_checksum(records) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps(record_to_json(r), sort_keys=True).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# JSONL

REQUIRED_FIELDS = ("src", "rephrase", "loc", "subject", "target_new", "original_object", "generation_prompts")


def record_to_json(r: KnowledgeRecord) -> dict:
    d = asdict(r)
    d["loc"] = [{"prompt": p, "answer": a} for p, a in r.loc]
    return d


def record_from_json(d: dict) -> KnowledgeRecord:
    for name in REQUIRED_FIELDS:
        if name not in d:
            raise RecordParseError(f"missing required field {name!r}")
    rephrase = d["rephrase"]
    if isinstance(rephrase, str):
        rephrase = [rephrase]
    loc = []
    for entry in d["loc"]:
        if isinstance(entry, dict):
            loc.append((entry["prompt"], entry["answer"]))
        else:
            p, a = entry
            loc.append((p, a))
    return KnowledgeRecord(
        subject=d["subject"], relation=d.get("relation", ""), src=d["src"],
        original_object=d["original_object"], rephrase=list(rephrase), loc=loc,
        generation_prompts=list(d["generation_prompts"]), target_new=d["target_new"],
        reference_texts=list(d.get("reference_texts", [])), case_id=int(d.get("case_id", 0)),
        split=d.get("split", "edit"),
    )


def save_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json(r), sort_keys=True, ensure_ascii=False) + "\n")


def load_jsonl(path) -> list[KnowledgeRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(record_from_json(json.loads(line)))
            except (json.JSONDecodeError, RecordParseError, KeyError, TypeError, ValueError) as exc:
                raise RecordParseError(f"line {lineno}: {exc}") from None
    return records


def save_vocab(tokens, path) -> None:
    Path(path).write_text("".join(t + "\n" for t in tokens), encoding="utf-8")


def load_vocab(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def save_texts(texts, path) -> None:
    Path(path).write_text("".join(t + "\n" for t in texts), encoding="utf-8")


def load_texts(path) -> list[str]:
    return [t for t in Path(path).read_text(encoding="utf-8").splitlines() if t]
