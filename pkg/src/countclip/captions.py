"""Spelled-out count detection and number-word substitution for captions."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

NUMBER_WORDS = ("two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")
COUNTS = tuple(range(2, 11))

WORD_TO_COUNT = {word: i + 2 for i, word in enumerate(NUMBER_WORDS)}
COUNT_TO_WORD = {count: word for word, count in WORD_TO_COUNT.items()}

# hyphenated compounds ("twenty-two") stay a single token
_TOKEN_RE = re.compile(r"[^\W_]+(?:-[^\W_]+)*")


def word_for(count: int) -> str:
    if count not in COUNT_TO_WORD:
        raise ValueError(f"count must be in [2, 10], got {count!r}")
    return COUNT_TO_WORD[count]


def count_for(word: str) -> int | None:
    return WORD_TO_COUNT.get(word.lower())


def _match_case(template: str, word: str) -> str:
    if len(template) > 1 and template.isupper():
        return word.upper()
    if template[:1].isupper():
        return word.capitalize()
    return word


@dataclass(frozen=True)
class CountingCaption:
    """A caption with exactly one spelled-out count in [2, 10].

    ``token_span`` is the half-open character range of the number word
    inside ``text``.
    """

    text: str
    count: int
    token_span: tuple[int, int]

    def __post_init__(self):
        start, stop = self.token_span
        token = self.text[start:stop]
        if count_for(token) != self.count:
            raise ValueError(
                f"token {token!r} at {self.token_span} does not spell count {self.count}"
            )

    @property
    def number_word(self) -> str:
        start, stop = self.token_span
        return self.text[start:stop]

    def with_count(self, count: int) -> str:
        """Return the caption text with the number word swapped for ``count``."""
        start, stop = self.token_span
        replacement = _match_case(self.number_word, word_for(count))
        return self.text[:start] + replacement + self.text[stop:]


def detect_count(text: str) -> CountingCaption | None:
    """Find the single spelled-out count ("two".."ten") in a caption.

    Returns ``None`` when the caption has no number word, or when it has
    more than one (the depicted count would be ambiguous).
    """
    if not isinstance(text, str) or not text:
        return None
    matches = [m for m in _TOKEN_RE.finditer(text) if m.group().lower() in WORD_TO_COUNT]
    if len(matches) != 1:
        return None
    m = matches[0]
    return CountingCaption(text, WORD_TO_COUNT[m.group().lower()], m.span())


def make_all_counterfactuals(caption: CountingCaption) -> list[str]:
    """The 8 captions for every other count, ascending by count."""
    return [caption.with_count(j) for j in COUNTS if j != caption.count]


def make_candidate_captions(caption: CountingCaption) -> list[str]:
    """The 9 captions for counts 2..10; the true text sits at ``count - 2``."""
    return [caption.text if j == caption.count else caption.with_count(j) for j in COUNTS]


def make_counterfactual(caption: CountingCaption, rng=None) -> str:
    """Swap the count for a uniformly drawn different one.

    ``rng`` is anything ``numpy.random.default_rng`` accepts, or an object
    exposing ``integers(n)``.
    """
    if not hasattr(rng, "integers"):
        rng = np.random.default_rng(rng)
    alternatives = [j for j in COUNTS if j != caption.count]
    return caption.with_count(alternatives[int(rng.integers(len(alternatives)))])
