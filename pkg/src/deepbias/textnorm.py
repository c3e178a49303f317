"""Text normalization shared by counting, scoring, and bias-list handling."""

import re

_PUNCT = re.compile(r"[^A-Z0-9']+")


def normalize_word(word: str) -> str:
    """Uppercase and strip punctuation except apostrophes."""
    return _PUNCT.sub("", word.upper())


def normalize_words(text: str) -> list:
    """Split text on whitespace and normalize each word, dropping empties.

    Args:
        text: Raw transcript text.

    Returns:
        List of normalized (uppercase) words.
    """
    out = []
    for raw in text.split():
        w = normalize_word(raw)
        if w:
            out.append(w)
    return out
