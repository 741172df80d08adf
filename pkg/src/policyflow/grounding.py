"""Deterministic three-tier matching of criterion concepts to schema columns."""

from __future__ import annotations

import re
from typing import Iterable, Mapping

from .schema import PatientSchema

TIER_QUALIFIED = 1
TIER_EXACT = 2
TIER_KEYWORD = 3

STOPWORDS = frozenset(
    "a an and are as at be by for from has have in is of on or the to was were who whose with "
    "within than that this these those their patient patients".split()
)

_CAMEL_RE = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z0-9]+|[A-Z0-9]+")


def _stem(word: str) -> str:
    if len(word) > 3 and word.endswith("ies"):
        return word[:-3] + "y"
    if len(word) > 3 and word.endswith("s") and not word.endswith(("ss", "us", "is")):
        return word[:-1]
    return word


def name_tokens(text: str, aliases: Mapping[str, str] | None = None) -> frozenset[str]:
    """Lowercased, plural-stemmed tokens, split on separators and camel case."""
    tokens = []
    for chunk in re.split(r"[^A-Za-z0-9]+", text):
        for piece in _CAMEL_RE.findall(chunk):
            raw = piece.lower()
            word = _stem(raw)
            if aliases:
                word = aliases.get(raw, aliases.get(word, word))
            if word and word not in STOPWORDS:
                tokens.append(word)
    return frozenset(tokens)


def ground_criterion(
    concept_text: str,
    qualifiers: Iterable[str],
    schema: PatientSchema,
    aliases: Mapping[str, str] | None = None,
) -> tuple[frozenset[str], int] | None:
    """Rank schema columns for a criterion concept.

    Tier 1: the column covers every concept token and at least one qualifier token.
    Tier 2: the column's tokens are exactly the concept's tokens.
    Tier 3: the column shares at least one keyword with the concept.

    Returns every column at the best tier (callers OR them together) with the
    tier number, or None when nothing matches.
    """
    if not concept_text.strip():
        raise ValueError("concept_text must be non-empty")
    concept = name_tokens(concept_text, aliases)
    qual: set[str] = set()
    for q in qualifiers:
        qual |= name_tokens(q, aliases)
    qual -= concept

    best: dict[int, list[str]] = {}
    for col in schema.columns:
        toks = name_tokens(col.name, aliases)
        if not toks or not concept:
            continue
        if concept <= toks and toks & qual:
            tier = TIER_QUALIFIED
        elif toks == concept:
            tier = TIER_EXACT
        elif toks & concept:
            tier = TIER_KEYWORD
        else:
            continue
        best.setdefault(tier, []).append(col.name)
    if not best:
        return None
    tier = min(best)
    return frozenset(best[tier]), tier
