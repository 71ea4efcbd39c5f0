"""Language-specific parameter pool with key-based retrieval.

A pool of learnable prompt matrices, one key vector per matrix. An input's
query vector is matched against the keys by cosine similarity; the winning
matrices are prepended to the token embeddings. Training may restrict the
candidate set to the input language's assigned indices, while inference
always selects over the full pool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .corpus import LANGUAGES, Language
from .numcore import Tensor


class PoolError(ValueError):
    pass


class ParameterPool:
    """`size` learnable matrices of shape (prompt_len, d_model)."""

    def __init__(self, matrices: list[Tensor]):
        if not matrices:
            raise PoolError("pool must contain at least one matrix")
        shape = matrices[0].shape
        if len(shape) != 2:
            raise PoolError(f"pool matrices must be 2-D, got {shape}")
        for m in matrices[1:]:
            if m.shape != shape:
                raise PoolError(f"inconsistent pool matrix shapes: {shape} vs {m.shape}")
        self.matrices = matrices

    @classmethod
    def init_random(cls, size: int, prompt_len: int, d_model: int, rng) -> "ParameterPool":
        return cls([
            nc.parameter(rng.normal(0.0, 0.02, size=(prompt_len, d_model)))
            for _ in range(size)
        ])

    @property
    def size(self) -> int:
        return len(self.matrices)

    @property
    def prompt_len(self) -> int:
        return self.matrices[0].shape[0]

    @property
    def d_model(self) -> int:
        return self.matrices[0].shape[1]


class KeySet:
    """One learnable key vector per pool matrix."""

    def __init__(self, keys: list[Tensor]):
        if not keys:
            raise PoolError("key set must contain at least one key")
        for k in keys:
            if len(k.shape) != 1:
                raise PoolError(f"keys must be vectors, got shape {k.shape}")
        self.keys = keys

    @classmethod
    def init_random(cls, size: int, d_k: int, rng) -> "KeySet":
        return cls([nc.parameter(rng.normal(0.0, 0.02, size=(d_k,))) for _ in range(size)])

    @property
    def size(self) -> int:
        return len(self.keys)

    def reinit_zero_keys(self, rng, scale: float = 0.02) -> list[int]:
        """Re-draw any key whose norm underflowed to zero; returns indices."""
        redone = []
        for i, k in enumerate(self.keys):
            if float(np.linalg.norm(k.data)) < 1e-12:
                k.data[...] = rng.normal(0.0, scale, size=k.data.shape)
                k.grad = None
                redone.append(i)
        return redone


@dataclass
class LanguageAssignment:
    """Maps each language to its reserved pool indices (contiguous blocks)."""

    mapping: dict[Language, tuple[int, ...]]

    @classmethod
    def default(cls, per_language: int = 1) -> "LanguageAssignment":
        return cls({
            lang: tuple(range(i * per_language, (i + 1) * per_language))
            for i, lang in enumerate(LANGUAGES)
        })

    def indices_for(self, language: Language) -> tuple[int, ...]:
        if language not in self.mapping:
            raise PoolError(f"language {language.tag} has no assigned pool indices")
        return self.mapping[language]

    def validate(self, pool_size: int):
        seen: dict[int, Language] = {}
        for lang in LANGUAGES:
            if lang not in self.mapping:
                raise PoolError(f"language {lang.tag} missing from assignment")
            idxs = self.mapping[lang]
            if not idxs:
                raise PoolError(f"language {lang.tag} has an empty index list")
            for i in idxs:
                if not 0 <= i < pool_size:
                    raise PoolError(f"index {i} for {lang.tag} out of range [0, {pool_size})")
                if i in seen:
                    raise PoolError(
                        f"index {i} assigned to both {seen[i].tag} and {lang.tag}"
                    )
                seen[i] = lang

    def to_record(self) -> dict:
        return {lang.tag: list(idxs) for lang, idxs in self.mapping.items()}

    @classmethod
    def from_record(cls, rec: dict) -> "LanguageAssignment":
        from .corpus import parse_language

        return cls({parse_language(tag): tuple(idxs) for tag, idxs in rec.items()})


@dataclass
class Selection:
    """Chosen pool indices with their match scores, best first."""

    indices: tuple[int, ...]
    scores: tuple[float, ...]

    @property
    def i_star(self) -> int:
        return self.indices[0]


@dataclass
class AdaptedEmbedding:
    """Selected prompt rows stacked on top of the token embeddings."""

    matrix: Tensor
    prompt_len: int


def query(x_e: Tensor) -> Tensor:
    """The [CLS]-position row of the embedded sequence."""
    if x_e.shape[0] == 0:
        raise PoolError("cannot take a query from an empty sequence")
    return nc.select_row(x_e, 0)


def match_scores(q, keys: KeySet) -> np.ndarray:
    """Cosine similarity of the query against every key (values only)."""
    qd = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=float)
    qn = np.linalg.norm(qd)
    if qn < 1e-12:
        raise PoolError("query is a zero vector")
    out = np.empty(keys.size)
    for i, k in enumerate(keys.keys):
        kn = np.linalg.norm(k.data)
        if kn < 1e-12:
            raise PoolError(f"key {i} is a zero vector")
        out[i] = float(qd @ k.data) / (qn * kn)
    return out


def _ranked(scores: np.ndarray, candidates) -> list[int]:
    # ties break toward the lowest index
    return sorted(candidates, key=lambda i: (-scores[i], i))


def select(q, keys: KeySet, k: int = 1) -> Selection:
    """Instance-wise selection: the k best-matching keys, best first."""
    if not 1 <= k <= keys.size:
        raise PoolError(f"k must lie in [1, {keys.size}], got {k}")
    scores = match_scores(q, keys)
    order = _ranked(scores, range(keys.size))[:k]
    return Selection(tuple(order), tuple(float(scores[i]) for i in order))


def select_masked(q, keys: KeySet, allowed) -> Selection:
    """Selection restricted to the language's candidate indices."""
    allowed = list(allowed)
    if not allowed:
        raise PoolError("allowed index list is empty")
    for i in allowed:
        if not 0 <= i < keys.size:
            raise PoolError(f"allowed index {i} out of range [0, {keys.size})")
    scores = match_scores(q, keys)
    best = _ranked(scores, allowed)[0]
    return Selection((best,), (float(scores[best]),))


def adapt(selection: Selection, pool: ParameterPool, x_e: Tensor) -> AdaptedEmbedding:
    """Concatenate the selected prompt matrices above the token embeddings.

    Gradients flow only into the selected matrices; the embedding tail is
    carried through unchanged.
    """
    if x_e.shape[1] != pool.d_model:
        raise PoolError(
            f"embedding width {x_e.shape[1]} does not match pool width {pool.d_model}"
        )
    for i in selection.indices:
        if not 0 <= i < pool.size:
            raise PoolError(f"selected index {i} out of range [0, {pool.size})")
    parts = [pool.matrices[i] for i in selection.indices]
    matrix = nc.concat_rows(parts + [x_e])
    return AdaptedEmbedding(matrix=matrix, prompt_len=len(parts) * pool.prompt_len)


def surrogate_similarity(q: Tensor, keys: KeySet, selection: Selection) -> Tensor:
    """Differentiable query/key match term; the mean over selected keys."""
    sims = [nc.cosine_similarity(q, keys.keys[i]) for i in selection.indices]
    total = sims[0] if len(sims) == 1 else nc.add_n(sims)
    return nc.scale(total, 1.0 / len(sims)) if len(sims) > 1 else total
