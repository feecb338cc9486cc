"""Rule-based remote-sensing flag for LLM-generated class captions.

A caption is flagged 1 when it mentions at least one overhead-imagery term,
none of the ground-level terms, and has an acceptable word count.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, List, Optional

import numpy as np

from .core import ValidationError

DEFAULT_POSITIVE = (
    "overhead",
    "aerial view",
    "satellite imagery",
    "nadir",
    "orthorectified",
    "multispectral",
    "SAR",
)
DEFAULT_NEGATIVE = ("street", "indoor", "selfie", "portrait", "close-up", "ground level")


@dataclass(frozen=True)
class RsFlagRuleset:
    positive_tokens: tuple = DEFAULT_POSITIVE
    negative_tokens: tuple = DEFAULT_NEGATIVE
    min_words: int = 6
    max_words: int = 20

    def __post_init__(self):
        object.__setattr__(self, "positive_tokens", tuple(self.positive_tokens))
        object.__setattr__(self, "negative_tokens", tuple(self.negative_tokens))
        if self.min_words < 1 or self.max_words < 1:
            raise ValidationError("word bounds must be positive")
        if self.min_words > self.max_words:
            raise ValidationError(f"min_words {self.min_words} > max_words {self.max_words}")
        for tok in self.positive_tokens + self.negative_tokens:
            if not tok:
                raise ValidationError("empty token in ruleset")


@dataclass
class CaptionCandidate:
    class_index: int
    caption_index: int
    text: str
    rs_flag: Optional[int] = None
    embedding: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.rs_flag is not None and self.rs_flag not in (0, 1):
            raise ValidationError(f"rs_flag must be 0 or 1, got {self.rs_flag!r}")


def word_count(text: str) -> int:
    return len(text.split())


@lru_cache(maxsize=256)
def _phrase_pattern(phrase: str) -> re.Pattern:
    # boundary = string edge or any non-alphanumeric char ([^\W_] is "alphanumeric")
    return re.compile(r"(?<![^\W_])" + re.escape(phrase) + r"(?![^\W_])", re.IGNORECASE)


def contains_token(text: str, phrase: str) -> bool:
    """Case-insensitive, word-boundary match of `phrase` inside `text`."""
    if not phrase:
        raise ValidationError("phrase must be non-empty")
    return _phrase_pattern(phrase).search(text) is not None


def assign_flag(text: str, rules: RsFlagRuleset = RsFlagRuleset()) -> int:
    if not rules.min_words <= word_count(text) <= rules.max_words:
        return 0
    if any(contains_token(text, tok) for tok in rules.negative_tokens):
        return 0
    return int(any(contains_token(text, tok) for tok in rules.positive_tokens))


def annotate_corpus(
    captions: Iterable[CaptionCandidate], rules: RsFlagRuleset = RsFlagRuleset()
) -> List[CaptionCandidate]:
    return [replace(c, rs_flag=assign_flag(c.text, rules)) for c in captions]
