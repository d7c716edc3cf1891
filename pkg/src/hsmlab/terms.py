"""Symbolic messages and Dolev-Yao attacker deduction.

Terms are atomic names, one-way hashes, or symmetric encryptions. The
attacker can hash anything it knows, encrypt anything it knows under
anything it knows, and decrypt a ciphertext when it can derive the key
term. Nothing recovers ``t`` from ``h(t)``.

The device always encrypts under ``h(k)`` rather than ``k``, so learning a
key's hash lets the attacker use the key offline without learning the key
itself.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Union

from .errors import ParseError

__all__ = [
    "Name",
    "Hash",
    "Senc",
    "Term",
    "KnowledgeBase",
    "close_knowledge",
    "derives",
    "parse_term",
    "format_term",
    "subterms",
    "term_size",
    "names_in",
]

_IDENT = re.compile(r"[A-Za-z0-9_]+")


@dataclass(frozen=True, slots=True)
class Name:
    label: str

    def __str__(self) -> str:
        return f"name:{self.label}"


@dataclass(frozen=True, slots=True)
class Hash:
    inner: "Term"
    _hash: int = field(init=False, repr=False, compare=False)
    _text: str | None = field(init=False, default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_hash", hash(("h", self.inner)))

    def __hash__(self) -> int:
        return self._hash

    def __str__(self) -> str:
        if self._text is None:
            object.__setattr__(self, "_text", f"h({self.inner})")
        return self._text


@dataclass(frozen=True, slots=True)
class Senc:
    payload: "Term"
    keyterm: "Term"
    _hash: int = field(init=False, repr=False, compare=False)
    _text: str | None = field(init=False, default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_hash", hash(("senc", self.payload, self.keyterm)))

    def __hash__(self) -> int:
        return self._hash

    def __str__(self) -> str:
        if self._text is None:
            object.__setattr__(self, "_text", f"senc({self.payload},{self.keyterm})")
        return self._text


Term = Union[Name, Hash, Senc]
KnowledgeBase = frozenset  # frozenset[Term]


def format_term(t: Term) -> str:
    return str(t)


def parse_term(text: str) -> Term:
    """Parse ``name:<ident>``, ``h(<term>)`` or ``senc(<term>,<term>)``."""
    term, pos = _parse(text, 0)
    if pos != len(text):
        raise ParseError(f"trailing characters in term {text!r} at offset {pos}")
    return term


def _parse(text: str, pos: int) -> tuple[Term, int]:
    if text.startswith("name:", pos):
        m = _IDENT.match(text, pos + 5)
        if m is None:
            raise ParseError(f"bad identifier in term {text!r} at offset {pos + 5}")
        return Name(m.group()), m.end()
    if text.startswith("h(", pos):
        inner, pos = _parse(text, pos + 2)
        return Hash(inner), _expect(text, pos, ")")
    if text.startswith("senc(", pos):
        payload, pos = _parse(text, pos + 5)
        pos = _expect(text, pos, ",")
        key, pos = _parse(text, pos)
        return Senc(payload, key), _expect(text, pos, ")")
    raise ParseError(f"unexpected input in term {text!r} at offset {pos}")


def _expect(text: str, pos: int, ch: str) -> int:
    if pos >= len(text) or text[pos] != ch:
        raise ParseError(f"expected {ch!r} in term {text!r} at offset {pos}")
    return pos + 1


def subterms(t: Term) -> Iterable[Term]:
    yield t
    if type(t) is Hash:
        yield from subterms(t.inner)
    elif type(t) is Senc:
        yield from subterms(t.payload)
        yield from subterms(t.keyterm)


def term_size(t: Term) -> int:
    if type(t) is Name:
        return 1
    if type(t) is Hash:
        return 1 + term_size(t.inner)
    return 1 + term_size(t.payload) + term_size(t.keyterm)


def names_in(t: Term) -> set[str]:
    return {s.label for s in subterms(t) if type(s) is Name}


def _constructible(known: frozenset | set, t: Term) -> bool:
    # Membership first, then the two construction rules.
    if t in known:
        return True
    tt = type(t)
    if tt is Hash:
        return _constructible(known, t.inner)
    if tt is Senc:
        return _constructible(known, t.payload) and _constructible(known, t.keyterm)
    return False


def close_knowledge(kb: Iterable[Term]) -> frozenset:
    """Return ``kb`` plus every payload the attacker can decrypt.

    Constructions (hashing, encrypting) are not materialized; use
    :func:`derives` to ask whether a term can be built.
    """
    known = set(kb)
    pending = [t for t in known if type(t) is Senc]
    while pending:
        progress = False
        rest = []
        for c in pending:
            if _constructible(known, c.keyterm):
                p = c.payload
                if p not in known:
                    known.add(p)
                    if type(p) is Senc:
                        rest.append(p)
                progress = True
            else:
                rest.append(c)
        if not progress:
            break
        pending = rest
    return frozenset(known)


def extend_closed(closed: frozenset, new: Iterable[Term]) -> frozenset:
    """Add terms to an already closed knowledge base and re-close it."""
    added = [t for t in new if t not in closed]
    if not added:
        return closed
    return close_knowledge(closed.union(added))


def derives(kb: Iterable[Term], target: Term) -> bool:
    """True iff the attacker holding ``kb`` can produce ``target``."""
    closed = kb if isinstance(kb, frozenset) and _is_closed(kb) else close_knowledge(kb)
    return _constructible(closed, target)


def derives_closed(closed: frozenset, target: Term) -> bool:
    """:func:`derives` for a knowledge base already passed through :func:`close_knowledge`."""
    return _constructible(closed, target)


def _is_closed(kb: frozenset) -> bool:
    for t in kb:
        if type(t) is Senc and t.payload not in kb and _constructible(kb, t.keyterm):
            return False
    return True
