"""Multilingual function corpus: ingestion, preprocessing, splits, synthesis.

Records are line-delimited JSON objects with fields id, language, code,
label and optional cwe, cve, split. Comment stripping runs a single-pass
3-state lexer per language family (code / string / comment); string
literals are never altered.
"""

from __future__ import annotations

import dataclasses
import json
import random
import warnings
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from . import tokenizer as tok

SPLIT_NAMES = ("train", "val", "test")


class CorpusError(ValueError):
    pass


class StripWarning(UserWarning):
    """Non-fatal lexing issue (e.g. unterminated block comment)."""


class Language(Enum):
    C = "C"
    CPP = "C++"
    CSHARP = "C#"
    GO = "Go"
    JAVA = "Java"
    JAVASCRIPT = "JavaScript"
    PYTHON = "Python"

    @property
    def tag(self) -> str:
        return self.value


LANGUAGES = tuple(Language)

_LANGUAGE_ALIASES = {
    "c": Language.C,
    "cpp": Language.CPP,
    "c++": Language.CPP,
    "csharp": Language.CSHARP,
    "c#": Language.CSHARP,
    "cs": Language.CSHARP,
    "go": Language.GO,
    "golang": Language.GO,
    "java": Language.JAVA,
    "javascript": Language.JAVASCRIPT,
    "js": Language.JAVASCRIPT,
    "python": Language.PYTHON,
    "py": Language.PYTHON,
}


def parse_language(tag: str) -> Language:
    lang = _LANGUAGE_ALIASES.get(str(tag).strip().lower())
    if lang is None:
        raise CorpusError(f"unknown language tag: {tag!r}")
    return lang


@dataclass
class CodeSample:
    """One labeled function."""

    id: str
    language: Language
    code: str
    label: int
    cwe: str | None = None
    cve: str | None = None
    split: str | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise CorpusError(f"sample {self.id!r}: label must be 0 or 1, got {self.label!r}")
        if self.split is not None and self.split not in SPLIT_NAMES:
            raise CorpusError(f"sample {self.id!r}: unknown split {self.split!r}")


@dataclass
class DatasetSplit:
    train: list[CodeSample]
    val: list[CodeSample]
    test: list[CodeSample]

    def __post_init__(self):
        seen: dict[str, str] = {}
        for name in SPLIT_NAMES:
            for s in getattr(self, name):
                if s.id in seen:
                    raise CorpusError(
                        f"sample id {s.id!r} appears in both {seen[s.id]} and {name}"
                    )
                seen[s.id] = name

    def __len__(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


# ---------------------------------------------------------------------------
# record IO

def record_to_sample(obj: dict, where: str = "record") -> CodeSample:
    for key in ("id", "language", "code", "label"):
        if key not in obj:
            raise CorpusError(f"{where}: missing field {key!r}")
    if not isinstance(obj["code"], str):
        raise CorpusError(f"{where}: field 'code' must be a string")
    return CodeSample(
        id=str(obj["id"]),
        language=parse_language(obj["language"]),
        code=obj["code"],
        label=obj["label"],
        cwe=obj.get("cwe"),
        cve=obj.get("cve"),
        split=obj.get("split"),
    )


def sample_to_record(s: CodeSample) -> dict:
    rec = {"id": s.id, "language": s.language.tag, "code": s.code, "label": s.label}
    if s.cwe is not None:
        rec["cwe"] = s.cwe
    if s.cve is not None:
        rec["cve"] = s.cve
    if s.split is not None:
        rec["split"] = s.split
    return rec


def load_records(path) -> list[CodeSample]:
    """Parse one JSON record per line; unknown fields are ignored, order kept."""
    samples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: malformed record: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}: line {lineno}: record must be an object")
            try:
                samples.append(record_to_sample(obj, where=f"line {lineno}"))
            except CorpusError as exc:
                raise CorpusError(f"{path}: {exc}") from None
    return samples


def save_records(samples, path):
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(sample_to_record(s), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# comment stripping

def _strip_c_family(code: str) -> str:
    out = []
    i, n = 0, len(code)
    while i < n:
        ch = code[i]
        nxt = code[i + 1] if i + 1 < n else ""
        if ch == "/" and nxt == "/":
            j = code.find("\n", i)
            i = n if j == -1 else j  # newline re-emitted in code state
            continue
        if ch == "/" and nxt == "*":
            j = code.find("*/", i + 2)
            if j == -1:
                warnings.warn("unterminated block comment stripped to end of input", StripWarning)
                out.append("\n" * code.count("\n", i))
                i = n
            else:
                # keep interior newlines so line numbering survives
                out.append("\n" * code.count("\n", i, j + 2))
                i = j + 2
            continue
        if ch in "\"'`":
            quote = ch
            out.append(ch)
            i += 1
            while i < n:
                c = code[i]
                out.append(c)
                i += 1
                if c == "\\" and quote != "`" and i < n:
                    out.append(code[i])
                    i += 1
                    continue
                if c == quote:
                    break
                if c == "\n" and quote != "`":
                    break  # unterminated single-line literal: fall back to code state
            continue
        out.append(ch)
        i += 1
    return "".join(out)


def _strip_python(code: str) -> str:
    out = []
    i, n = 0, len(code)
    only_ws = True  # current line so far (after stripping) is whitespace
    while i < n:
        if code.startswith('"""', i) or code.startswith("'''", i):
            q = code[i : i + 3]
            j = code.find(q, i + 3)
            end = n if j == -1 else j + 3
            nl = code.find("\n", end)
            trailing = code[end : n if nl == -1 else nl]
            if only_ws and trailing.strip() == "":
                # bare-expression triple-quoted string: a docstring
                if j == -1:
                    warnings.warn("unterminated triple-quoted string stripped", StripWarning)
                out.append("\n" * code.count("\n", i, end))
                i = end
            else:
                out.append(code[i:end])
                only_ws = False
                i = end
            continue
        ch = code[i]
        if ch == "#":
            j = code.find("\n", i)
            i = n if j == -1 else j
            continue
        if ch in "\"'":
            quote = ch
            out.append(ch)
            only_ws = False
            i += 1
            while i < n:
                c = code[i]
                out.append(c)
                i += 1
                if c == "\\" and i < n:
                    out.append(code[i])
                    i += 1
                    continue
                if c == quote or c == "\n":
                    break
            continue
        out.append(ch)
        if ch == "\n":
            only_ws = True
        elif not ch.isspace():
            only_ws = False
        i += 1
    return "".join(out)


def strip_comments(code: str, language: Language) -> str:
    """Remove comments (and Python docstrings) while leaving string literals
    and the line structure of the remaining code intact."""
    if language is Language.PYTHON:
        return _strip_python(code)
    return _strip_c_family(code)


# ---------------------------------------------------------------------------
# length filtering and splitting

def filter_by_length(samples, max_tokens: int = 512, length_fn=None):
    """Partition samples by framed token count; both halves are returned
    so nothing is silently discarded."""
    if length_fn is None:
        length_fn = tok.token_length
    kept, dropped = [], []
    for s in samples:
        (kept if length_fn(s.code) <= max_tokens else dropped).append(s)
    return kept, dropped


def _largest_remainder(n: int, ratios) -> list[int]:
    targets = [n * r for r in ratios]
    base = [int(t) for t in targets]
    short = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(targets[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def split_dataset(samples, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Partition samples into train/val/test.

    Pre-assigned `split` fields win (all samples must then carry one);
    otherwise a seeded shuffle stratified per (language, label) allocates
    counts per largest remainder. Pure function of (samples, ratios, seed).
    """
    samples = list(samples)
    assigned = [s for s in samples if s.split is not None]
    if assigned:
        if len(assigned) != len(samples):
            raise CorpusError(
                f"{len(samples) - len(assigned)} of {len(samples)} samples lack a split field"
            )
        buckets = {name: [] for name in SPLIT_NAMES}
        for s in samples:
            buckets[s.split].append(s)
        return DatasetSplit(buckets["train"], buckets["val"], buckets["test"])

    if len(ratios) != 3:
        raise CorpusError(f"expected 3 ratios, got {len(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"ratios must sum to 1, got {tuple(ratios)} (sum {sum(ratios)})")

    strata: dict[tuple[str, int], list[int]] = {}
    for idx, s in enumerate(samples):
        strata.setdefault((s.language.name, s.label), []).append(idx)

    rng = random.Random(seed)
    assignment: dict[int, str] = {}
    for key in sorted(strata):
        idxs = list(strata[key])
        rng.shuffle(idxs)
        counts = _largest_remainder(len(idxs), ratios)
        cursor = 0
        for name, count in zip(SPLIT_NAMES, counts):
            for i in idxs[cursor : cursor + count]:
                assignment[i] = name
            cursor += count

    buckets = {name: [] for name in SPLIT_NAMES}
    for idx, s in enumerate(samples):
        name = assignment[idx]
        buckets[name].append(dataclasses.replace(s, split=name))
    return DatasetSplit(buckets["train"], buckets["val"], buckets["test"])


# ---------------------------------------------------------------------------
# synthetic desk-scale corpus

# (sink call, safe counterpart) per language; sink presence carries the label
_SINKS = {
    Language.C: ("strcpy(buf, input);", "strncpy(buf, input, sizeof(buf));"),
    Language.CPP: ("memcpy(dst, src, len);", "std::copy_n(src, bounded(len), dst);"),
    Language.CSHARP: (
        "Buffer.BlockCopy(src, 0, dst, 0, len);",
        "Array.Clear(dst, 0, dst.Length);",
    ),
    Language.GO: ("exec.Command(userInput).Run()", "strconv.Itoa(count)"),
    Language.JAVA: (
        "Runtime.getRuntime().exec(cmd);",
        "logger.info(sanitize(cmd));",
    ),
    Language.JAVASCRIPT: ("eval(payload);", "JSON.parse(payload);"),
    Language.PYTHON: ("eval(payload)", "ast.literal_eval(payload)"),
}

# Two of every 20 samples use a shared API whose risk depends on the
# language: process_buffer is the dangerous call in the compiled group and
# the safe one in the scripting group, render_input the other way around.
# The label for these samples is decidable only jointly with the language,
# which is what language-specific parameters are for; the 10% cap keeps the
# corpus as a whole learnable by a flat bag-of-tokens baseline. The two
# slots land on one even and one odd index so both labels occur among the
# colliding samples at the default balanced rate.
_COLLIDE_SLOTS = (18, 19)
_COMPILED = {Language.C, Language.CPP, Language.CSHARP, Language.GO}


def _colliding_call(language: Language, vulnerable: bool) -> str:
    # identical argument tokens on both calls: only the callee name and the
    # language jointly decide the label
    risky = language in _COMPILED
    call = "process_buffer(data)" if vulnerable == risky else "render_input(data)"
    return call if language in (Language.GO, Language.PYTHON) else call + ";"


_FILLERS = {
    Language.C: ["int {v} = {k};", "{v} += {k};", "if ({v} > {k}) {v}--;"],
    Language.CPP: ["auto {v} = {k};", "{v} *= {k};", "while ({v} < {k}) {v}++;"],
    Language.CSHARP: ["var {v} = {k};", "{v} = {v} + {k};", "if ({v} != {k}) return;"],
    Language.GO: ["{v} := {k}", "{v} = {v} + {k}", "if {v} > {k} {{ return }}"],
    Language.JAVA: ["int {v} = {k};", "{v} -= {k};", "if ({v} == {k}) return;"],
    Language.JAVASCRIPT: ["let {v} = {k};", "{v} = {v} * {k};", "if ({v} < {k}) return;"],
    Language.PYTHON: ["{v} = {k}", "{v} = {v} + {k}", "if {v} > {k}: return"],
}

_VARS = ["acc", "total", "count", "idx", "size", "tmp", "pos", "flag"]


def _synth_one(language: Language, index: int, vulnerable: bool, rng: random.Random) -> str:
    sink, safe = _SINKS[language]
    lines = [
        _FILLERS[language][rng.randrange(3)].format(
            v=_VARS[rng.randrange(len(_VARS))], k=rng.randrange(1, 99)
        )
        for _ in range(rng.randrange(2, 5))
    ]
    if index % 20 in _COLLIDE_SLOTS:
        marker = _colliding_call(language, vulnerable)
    else:
        marker = sink if vulnerable else safe
    lines.insert(rng.randrange(len(lines) + 1), marker)
    body = "\n".join("    " + ln for ln in lines)
    name = f"f{index}"
    if language is Language.PYTHON:
        return f"def {name}(payload):\n{body}\n    return 0\n"
    if language is Language.GO:
        return f"func {name}(userInput string) int {{\n{body}\n    return 0\n}}\n"
    if language is Language.JAVASCRIPT:
        return f"function {name}(payload) {{\n{body}\n    return 0;\n}}\n"
    if language is Language.JAVA:
        return f"public int {name}(String cmd) {{\n{body}\n    return 0;\n}}\n"
    if language is Language.CSHARP:
        return f"public int {name}(byte[] src, byte[] dst, int len) {{\n{body}\n    return 0;\n}}\n"
    if language is Language.CPP:
        return f"int {name}(const char *src, char *dst, size_t len) {{\n{body}\n    return 0;\n}}\n"
    return f"int {name}(char *input) {{\n    char buf[64];\n{body}\n    return 0;\n}}\n"


def _spread_labels(n: int, k: int) -> list[int]:
    # Bresenham-style interleave: any prefix carries ~k/n vulnerable share
    return [1 if (i + 1) * k // n > i * k // n else 0 for i in range(n)]


def _stable_hash(name: str) -> int:
    # PYTHONHASHSEED-proof stream separator for per-language RNGs
    h = 0
    for ch in name:
        h = (h * 131 + ord(ch)) & 0xFFFFFFFF
    return h


def generate_synthetic(n_per_language: int, vuln_rate: float, seed: int) -> list[CodeSample]:
    """Emit deterministic function skeletons for all seven languages; the
    vulnerable ones contain a planted language-appropriate sink call."""
    if n_per_language < 2:
        raise CorpusError(f"n_per_language must be >= 2, got {n_per_language}")
    if not 0.0 < vuln_rate < 1.0:
        raise CorpusError(f"vuln_rate must lie in (0, 1), got {vuln_rate}")
    samples = []
    for language in LANGUAGES:
        rng = random.Random((seed * 1_000_003 + _stable_hash(language.name)) & 0x7FFFFFFF)
        labels = _spread_labels(n_per_language, round(n_per_language * vuln_rate))
        prefix = language.name.lower()
        for i, label in enumerate(labels):
            samples.append(
                CodeSample(
                    id=f"{prefix}-{i:04d}",
                    language=language,
                    code=_synth_one(language, i, bool(label), rng),
                    label=label,
                )
            )
    return samples


# ---------------------------------------------------------------------------
# statistics

@dataclass
class CorpusStats:
    """Counts per language x split x label."""

    counts: Counter = field(default_factory=Counter)  # (language, split, label) -> n

    @classmethod
    def from_split(cls, split: DatasetSplit) -> "CorpusStats":
        counts = Counter()
        for name in SPLIT_NAMES:
            for s in getattr(split, name):
                counts[(s.language, name, s.label)] += 1
        return cls(counts)

    def language_total(self, language: Language) -> int:
        return sum(n for (lang, _, _), n in self.counts.items() if lang is language)

    def split_total(self, split_name: str) -> int:
        return sum(n for (_, name, _), n in self.counts.items() if name == split_name)

    def label_total(self, label: int) -> int:
        return sum(n for (_, _, lab), n in self.counts.items() if lab == label)

    def cell(self, language: Language, split_name: str) -> int:
        return sum(
            n
            for (lang, name, _), n in self.counts.items()
            if lang is language and name == split_name
        )

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_record(self) -> dict:
        per_language = {}
        for lang in LANGUAGES:
            per_language[lang.tag] = {
                "train": self.cell(lang, "train"),
                "val": self.cell(lang, "val"),
                "test": self.cell(lang, "test"),
                "vulnerable": sum(
                    n for (lg, _, lab), n in self.counts.items() if lg is lang and lab == 1
                ),
                "non_vulnerable": sum(
                    n for (lg, _, lab), n in self.counts.items() if lg is lang and lab == 0
                ),
                "total": self.language_total(lang),
            }
        return {
            "per_language": per_language,
            "train": self.split_total("train"),
            "val": self.split_total("val"),
            "test": self.split_total("test"),
            "vulnerable": self.label_total(1),
            "non_vulnerable": self.label_total(0),
            "total": self.total,
        }

    def render(self) -> str:
        rec = self.to_record()
        header = ["Language", "Train", "Val", "Test", "Vul", "Non-Vul", "Total"]
        rows = []
        ordered = sorted(LANGUAGES, key=lambda lg: (self.language_total(lg), lg.tag))
        for lang in ordered:
            r = rec["per_language"][lang.tag]
            rows.append(
                [lang.tag, r["train"], r["val"], r["test"], r["vulnerable"],
                 r["non_vulnerable"], r["total"]]
            )
        rows.append(
            ["Total", rec["train"], rec["val"], rec["test"], rec["vulnerable"],
             rec["non_vulnerable"], rec["total"]]
        )
        widths = [
            max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))
        ]
        def fmt(row):
            return "  ".join(str(c).ljust(widths[i]) for i, c in enumerate(row)).rstrip()
        lines = [fmt(header), fmt(["-" * w for w in widths])]
        lines.extend(fmt(row) for row in rows)
        return "\n".join(lines)


def stats(split: DatasetSplit) -> CorpusStats:
    return CorpusStats.from_split(split)
