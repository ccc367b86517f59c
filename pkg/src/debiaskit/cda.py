"""Counterfactual augmentation: swap gender-attribute words in text.

Matching is whole-token and case-insensitive on the encoder's tokenizer;
capitalization of each swapped token is restored. The ambiguous token
"her" is resolved with a lookahead heuristic (possessive vs objective).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import MalformedLexicon

# Core attribute pairs (masculine, feminine); plural noun forms follow.
CORE_PAIRS = [
    ("man", "woman"),
    ("boy", "girl"),
    ("he", "she"),
    ("father", "mother"),
    ("son", "daughter"),
    ("guy", "gal"),
    ("male", "female"),
    ("his", "her"),
    ("himself", "herself"),
    ("john", "mary"),
]

PLURAL_PAIRS = [
    ("men", "women"),  # irregular, listed explicitly
    ("boys", "girls"),
    ("fathers", "mothers"),
    ("sons", "daughters"),
    ("guys", "gals"),
    ("males", "females"),
]

# Objective-case extension so the map is total over third-person pronouns.
EXTENSION_PAIRS = [("him", "her")]

# If "her" is immediately followed by one of these (or by punctuation or
# nothing), it is read as objective case and maps to "him"; otherwise it
# is read as possessive and maps to "his".
_OBJECTIVE_FOLLOWERS = frozenset("""
    a an the to of in on at by for with from into onto about over under
    after before again away back down up out off and or but nor so yet
    that because if when while then there here as is was are were be
    been being am do does did not no too very
""".split())

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


@dataclass
class GenderLexicon:
    """Bidirectional attribute-word map with case and ambiguity handling."""

    pairs: list[tuple[str, str]]
    provenance: str = "builtin"
    forward: dict[str, str] = field(init=False, repr=False)
    _pattern: re.Pattern = field(init=False, repr=False)

    def __post_init__(self):
        fwd: dict[str, str] = {}
        for masc, fem in self.pairs:
            masc, fem = masc.lower(), fem.lower()
            for src, dst in ((masc, fem), (fem, masc)):
                if src in fwd and fwd[src] != dst:
                    if src == "her" and {fwd[src], dst} <= {"his", "him"}:
                        continue  # resolved positionally, see map_token
                    raise MalformedLexicon(
                        f"token {src!r} maps to both {fwd[src]!r} and {dst!r}")
                fwd.setdefault(src, dst)
        self.forward = fwd
        self._her_ambiguous = any(m == "him" for m, f in self.pairs if f == "her") and \
            any(m == "his" for m, f in self.pairs if f == "her")
        words = sorted(fwd, key=len, reverse=True)
        self._pattern = re.compile(
            r"\b(" + "|".join(re.escape(w) for w in words) + r")\b", re.IGNORECASE)

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.forward

    def map_token(self, token: str, next_token: str | None = None) -> str | None:
        """Image of a token, or None when it is not an attribute word."""
        low = token.lower()
        if low == "her" and self._her_ambiguous:
            if next_token is None or not next_token[0].isalnum() \
                    or next_token.lower() in _OBJECTIVE_FOLLOWERS:
                return _match_case(token, "him")
            return _match_case(token, "his")
        image = self.forward.get(low)
        return None if image is None else _match_case(token, image)


def _match_case(original: str, replacement: str) -> str:
    if original.isupper() and len(original) > 1:
        return replacement.upper()
    if original[0].isupper():
        return replacement.capitalize()
    return replacement


def builtin_lexicon() -> GenderLexicon:
    pairs = CORE_PAIRS + PLURAL_PAIRS + EXTENSION_PAIRS
    return GenderLexicon(pairs=pairs, provenance="builtin (core pairs, plural forms, "
                                                 "objective-case him/her extension)")


def load_lexicon(path=None) -> GenderLexicon:
    """Load a two-column TSV lexicon, or the builtin list when path is None."""
    if path is None:
        return builtin_lexicon()
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 2 or not cols[0] or not cols[1]:
                raise MalformedLexicon(f"{path}:{lineno}: expected 2 tab-separated columns")
            pairs.append((cols[0], cols[1]))
    if not pairs:
        raise MalformedLexicon(f"{path}: no word pairs found")
    return GenderLexicon(pairs=pairs, provenance=str(path))


def augment_sentence(text: str, lex: GenderLexicon) -> tuple[str, bool]:
    """Swap every attribute token in one pass; everything else is byte-identical."""

    def replace(match: re.Match) -> str:
        token = match.group(0)
        nxt = _TOKEN_RE.search(text, match.end())
        image = lex.map_token(token, nxt.group(0) if nxt else None)
        return token if image is None else image

    swapped = lex._pattern.sub(replace, text)
    return swapped, swapped != text


@dataclass(frozen=True)
class EntailmentPair:
    premise: str
    hypothesis: str
    label: str

    def __post_init__(self):
        if not self.premise or not self.hypothesis:
            raise ValueError("premise and hypothesis must be non-empty")


@dataclass(frozen=True)
class AugmentedQuad:
    premise: str
    hypothesis: str
    premise_aug: str
    hypothesis_aug: str
    premise_unchanged: bool
    hypothesis_unchanged: bool


def augment_pair(pair: EntailmentPair, lex: GenderLexicon) -> AugmentedQuad:
    p_aug, p_changed = augment_sentence(pair.premise, lex)
    h_aug, h_changed = augment_sentence(pair.hypothesis, lex)
    return AugmentedQuad(
        premise=pair.premise,
        hypothesis=pair.hypothesis,
        premise_aug=p_aug,
        hypothesis_aug=h_aug,
        premise_unchanged=not p_changed,
        hypothesis_unchanged=not h_changed,
    )
