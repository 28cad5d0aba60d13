"""Header stripping, token masking, skeleton construction and verb lookup.

Masking replaces five kinds of variable-shaped tokens with designated mask
tokens, one for one, so a skeleton always has exactly as many tokens as the
raw message. The rule patterns live in a plain-text fixture shipped with the
package (data/mask_rules.tsv) so the behaviour is frozen and testable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .model import MASK_TOKENS, PLACEHOLDER, CelerlogError, ConfigError

_MASK_TOKEN_SET = frozenset(MASK_TOKENS) | {PLACEHOLDER}

_OPEN_BRACKETS = "([<"
_CLOSE_BRACKETS = ")]>"
_TRAILING_PUNCT = ",:;.!?"

_RULE_NAMES = ("NUM", "CL", "UCL", "BL", "SL")


class EmptyMessageError(CelerlogError):
    """Raised when a message has no tokens to mask."""


@dataclass(frozen=True, slots=True)
class MaskRule:
    name: str
    pattern: re.Pattern
    replacement: str


def _data_text(name: str) -> str:
    return resources.files("celerlog.data").joinpath(name).read_text(encoding="utf-8")


def load_mask_rules(path: str | None = None) -> tuple[MaskRule, ...]:
    """Load the rule table: one ``NAME<TAB>PATTERN`` line per rule.

    Rules apply in file order and the order must be NUM, CL, UCL, BL, SL.
    """
    text = _data_text("mask_rules.tsv") if path is None else open(path, encoding="utf-8").read()
    rules: list[MaskRule] = []
    for line in text.splitlines():
        line = line.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            name, pattern = line.split("\t", 1)
        except ValueError as exc:
            raise ConfigError(f"malformed mask rule line: {line!r}") from exc
        name = name.strip()
        if name not in _RULE_NAMES:
            raise ConfigError(f"unknown mask rule name: {name!r}")
        try:
            compiled = re.compile(pattern)
        except re.error as exc:
            raise ConfigError(f"invalid mask rule pattern for {name}: {exc}") from exc
        rules.append(MaskRule(name=name, pattern=compiled, replacement=f"<{name}>"))
    if tuple(r.name for r in rules) != _RULE_NAMES:
        raise ConfigError(f"mask rule table must define exactly {_RULE_NAMES} in order")
    return tuple(rules)


@lru_cache(maxsize=1)
def default_mask_rules() -> tuple[MaskRule, ...]:
    return load_mask_rules()


def compile_header_pattern(pattern: str) -> re.Pattern:
    """Compile a header pattern; it must carry a named ``content`` capture."""
    try:
        compiled = re.compile(pattern)
    except re.error as exc:
        raise ConfigError(f"invalid header pattern: {exc}") from exc
    if "content" not in compiled.groupindex:
        raise ConfigError("header pattern must define a named 'content' capture group")
    return compiled


def strip_header(raw_line: str, header_pattern: re.Pattern | None = None) -> str:
    """Return the message body of a raw line.

    With no pattern, or when the pattern does not match, the whole line is the
    body; a nonempty line therefore never strips down to nothing by accident.
    """
    if header_pattern is None:
        return raw_line
    match = header_pattern.match(raw_line)
    if match is None or match.group("content") is None:
        return raw_line
    return match.group("content")


def _peel(token: str) -> tuple[str, str, str]:
    """Split a token into (leading brackets, core, trailing brackets/punctuation)."""
    start = 0
    end = len(token)
    while start < end and token[start] in _OPEN_BRACKETS:
        start += 1
    while end > start and (token[end - 1] in _CLOSE_BRACKETS or token[end - 1] in _TRAILING_PUNCT):
        end -= 1
    return token[:start], token[start:end], token[end:]


def _classify(core: str, had_adjacency: bool, rules: tuple[MaskRule, ...]) -> str | None:
    for rule in rules:
        if rule.pattern.fullmatch(core) is None:
            continue
        if rule.name == "SL" and len(core) == 1 and not had_adjacency:
            # A bare letter only masks when a delimiter sat right next to it.
            continue
        return rule.replacement
    return None


@lru_cache(maxsize=None)
def _mask_token_default(token: str) -> str:
    return _mask_token(token, default_mask_rules())


def _mask_token(token: str, rules: tuple[MaskRule, ...]) -> str:
    if any(mask in token for mask in _MASK_TOKEN_SET):
        # Already carries a designated token; re-masking must be a no-op.
        return token
    prefix, core, suffix = _peel(token)
    if not core:
        return token
    replacement = _classify(core, bool(prefix or suffix), rules)
    if replacement is None:
        return token
    return f"{prefix}{replacement}{suffix}"


def mask_token(token: str, rules: tuple[MaskRule, ...] | None = None) -> str:
    """Mask one whitespace-free token, preserving surrounding brackets and
    trailing sentence punctuation outside the replacement."""
    if rules is None:
        return _mask_token_default(token)
    return _mask_token(token, rules)


def mask_message(content: str, rules: tuple[MaskRule, ...] | None = None) -> tuple[str, tuple[str, ...]]:
    """Mask a message token for token; returns (skeleton, skeleton tokens)."""
    tokens = content.split()
    if not tokens:
        raise EmptyMessageError("cannot mask an empty message")
    key_tokens = tuple(mask_token(token, rules) for token in tokens)
    return " ".join(key_tokens), key_tokens


@lru_cache(maxsize=1)
def default_verb_lexicon() -> frozenset[str]:
    return load_verb_lexicon()


def load_verb_lexicon(path: str | None = None) -> frozenset[str]:
    """Load the newline-delimited list of lowercase verb lemmas."""
    text = _data_text("verbs.txt") if path is None else open(path, encoding="utf-8").read()
    return frozenset(word.strip() for word in text.splitlines() if word.strip())


def _lemma_candidates(word: str):
    yield word
    if word.endswith("ies") and len(word) > 4:
        yield word[:-3] + "y"
    if word.endswith("es") and len(word) > 3:
        yield word[:-2]
    if word.endswith("s") and len(word) > 3 and not word.endswith("ss"):
        yield word[:-1]
    if word.endswith("ing") and len(word) > 4:
        base = word[:-3]
        yield base
        yield base + "e"
        if len(base) > 2 and base[-1] == base[-2]:
            yield base[:-1]
    if word.endswith("ed") and len(word) > 3:
        yield word[:-1]
        base = word[:-2]
        yield base
        if len(base) > 2 and base[-1] == base[-2]:
            yield base[:-1]


@lru_cache(maxsize=None)
def _lemmatize_default(word: str) -> str | None:
    return _lemmatize(word, default_verb_lexicon())


def _lemmatize(word: str, lexicon: frozenset[str]) -> str | None:
    for candidate in _lemma_candidates(word):
        if candidate in lexicon:
            return candidate
    return None


def extract_verbs(key: str, lexicon: frozenset[str] | None = None) -> set[str]:
    """Collect the lowercase verb lemmas present in a skeleton key.

    Mask tokens never match; every other token is lowercased, stripped of
    surrounding punctuation, and looked up through the suffix lemmatizer.
    """
    verbs: set[str] = set()
    for token in key.split():
        if token in _MASK_TOKEN_SET:
            continue
        word = token.strip("()[]<>{}\"'`,.:;!?").lower()
        if not word or not word.isalpha():
            continue
        lemma = (
            _lemmatize_default(word)
            if lexicon is None
            else _lemmatize(word, lexicon)
        )
        if lemma is not None:
            verbs.add(lemma)
    return verbs
