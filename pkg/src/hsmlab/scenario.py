"""Scenario files, scripted setup, and the line-oriented trace format.

Scenario syntax, one directive per line, ``#`` starts a comment::

    user <id> <NU|KM|SO> [compromised]
    key <id> owner=<user> template=<generic|wwt|ne> [attrs=<a1,a2,...>] [trusted] [sensitive]
    importkey <id> owner=<user> value=<term> [attrs=...] [trusted] [sensitive]
    setattr <key> <attr> by=<user>
    unsetattr <key> <attr> by=<user>
    know <term>
    policy <on|off>
    mode <full|paper>
    depth <n>
    conflictguard <on|off>

Setup runs in declaration order. ``attrs=`` is performed by the owner right
after creation; ``trusted`` is granted by the first declared SO.

Trace syntax::

    trace v1
    1. wrap actor=U1 target=h1 wrapper=h2 -> c1
    2. decrypt actor=U1 ct=c1 key=h2 -> c2
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Union

from . import errors, token
from .errors import ParseError
from .terms import Hash, Name, Senc, Term, close_knowledge, names_in, parse_term, term_size
from .token import Attr, Mode, Role, Template, TokenState

if TYPE_CHECKING:
    from .search import SearchConfig

log = logging.getLogger(__name__)

__all__ = [
    "UserDecl",
    "KeyDecl",
    "AttrChange",
    "Scenario",
    "Setup",
    "Ref",
    "Action",
    "TraceStep",
    "parse_scenario",
    "format_scenario",
    "build_initial_state",
    "prepare",
    "format_trace",
    "parse_trace",
    "TRACE_HEADER",
]

_ID = re.compile(r"[A-Za-z0-9_]+")
TRACE_HEADER = "trace v1"
DEFAULT_DEPTH = 6


@dataclass(frozen=True)
class UserDecl:
    id: str
    role: Role
    compromised: bool = False


@dataclass(frozen=True)
class KeyDecl:
    id: str
    owner: str
    template: Template | None = None
    imported: Term | None = None
    attrs: tuple[Attr, ...] = ()
    trusted: bool = False
    sensitive: bool = False


@dataclass(frozen=True)
class AttrChange:
    key: str
    attr: Attr
    user: str
    set: bool = True


SetupItem = Union[UserDecl, KeyDecl, AttrChange]


@dataclass(frozen=True)
class Scenario:
    setup: tuple[SetupItem, ...]
    policy_on: bool = False
    mode: Mode = Mode.FULL
    depth: int = DEFAULT_DEPTH
    knowledge: tuple[Term, ...] = ()
    conflict_guard: bool = False

    @property
    def users(self) -> tuple[UserDecl, ...]:
        return tuple(s for s in self.setup if isinstance(s, UserDecl))

    @property
    def keys(self) -> tuple[KeyDecl, ...]:
        return tuple(s for s in self.setup if isinstance(s, KeyDecl))

    @property
    def attackers(self) -> frozenset[str]:
        return frozenset(u.id for u in self.users if u.compromised)

    def key(self, key_id: str) -> KeyDecl:
        for k in self.keys:
            if k.id == key_id:
                return k
        raise KeyError(key_id)


# -- scenario text ---------------------------------------------------------


def _ident(tok: str, lineno: int, what: str) -> str:
    if not _ID.fullmatch(tok):
        raise ParseError(f"bad {what} identifier {tok!r}", lineno)
    return tok


def _options(tokens: list[str], lineno: int) -> tuple[dict[str, str], set[str]]:
    kv: dict[str, str] = {}
    flags: set[str] = set()
    for tok in tokens:
        if "=" in tok:
            k, v = tok.split("=", 1)
            if k in kv:
                raise ParseError(f"option {k!r} given twice", lineno)
            kv[k] = v
        else:
            if tok in flags:
                raise ParseError(f"flag {tok!r} given twice", lineno)
            flags.add(tok)
    return kv, flags


def _attr_list(text: str, lineno: int) -> tuple[Attr, ...]:
    out = []
    for a in text.split(","):
        try:
            attr = Attr(a)
        except ValueError:
            raise ParseError(f"unknown attribute {a!r}", lineno) from None
        if attr in out:
            raise ParseError(f"attribute {a!r} listed twice", lineno)
        out.append(attr)
    return tuple(out)


def _term(text: str, lineno: int) -> Term:
    try:
        return parse_term(text)
    except ParseError as exc:
        raise ParseError(str(exc), lineno) from None


def _on_off(tok: str, lineno: int) -> bool:
    if tok not in ("on", "off"):
        raise ParseError(f"expected on|off, got {tok!r}", lineno)
    return tok == "on"


def parse_scenario(text: str) -> Scenario:
    setup: list[SetupItem] = []
    roles: dict[str, Role] = {}
    keys: dict[str, KeyDecl] = {}
    knowledge: list[Term] = []
    policy_on, mode, depth, guard = False, Mode.FULL, DEFAULT_DEPTH, False
    seen_global: set[str] = set()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        directive, *rest = line.split()

        if directive == "user":
            if len(rest) not in (2, 3) or (len(rest) == 3 and rest[2] != "compromised"):
                raise ParseError("usage: user <id> <NU|KM|SO> [compromised]", lineno)
            uid = _ident(rest[0], lineno, "user")
            if uid in roles:
                raise ParseError(f"duplicate user {uid!r}", lineno)
            try:
                role = Role(rest[1])
            except ValueError:
                raise ParseError(f"unknown role {rest[1]!r}", lineno) from None
            roles[uid] = role
            setup.append(UserDecl(uid, role, len(rest) == 3))

        elif directive in ("key", "importkey"):
            if not rest:
                raise ParseError(f"{directive} needs an identifier", lineno)
            kid = _ident(rest[0], lineno, "key")
            if kid in keys:
                raise ParseError(f"duplicate key {kid!r}", lineno)
            kv, flags = _options(rest[1:], lineno)
            allowed = {"owner", "attrs"} | ({"template"} if directive == "key" else {"value"})
            if set(kv) - allowed or flags - {"trusted", "sensitive"}:
                bad = sorted((set(kv) - allowed) | (flags - {"trusted", "sensitive"}))
                raise ParseError(f"unknown {directive} option(s) {', '.join(bad)}", lineno)
            owner = kv.get("owner")
            if owner is None:
                raise ParseError(f"{directive} {kid} has no owner", lineno)
            if owner not in roles:
                raise ParseError(f"key {kid} references undeclared owner {owner!r}", lineno)
            if roles[owner] is Role.SO:
                raise ParseError(f"key {kid} cannot be owned by security officer {owner}", lineno)
            template = imported = None
            if directive == "key":
                if "template" not in kv:
                    raise ParseError(f"key {kid} has no template", lineno)
                try:
                    template = Template(kv["template"])
                except ValueError:
                    raise ParseError(f"unknown template {kv['template']!r}", lineno) from None
            else:
                if "value" not in kv:
                    raise ParseError(f"importkey {kid} has no value", lineno)
                imported = _term(kv["value"], lineno)
            attrs = _attr_list(kv["attrs"], lineno) if "attrs" in kv else ()
            if "trusted" in flags and not any(r is Role.SO for r in roles.values()):
                raise ParseError(f"key {kid} is marked trusted but no SO is declared", lineno)
            decl = KeyDecl(kid, owner, template, imported, attrs, "trusted" in flags, "sensitive" in flags)
            keys[kid] = decl
            setup.append(decl)

        elif directive in ("setattr", "unsetattr"):
            if len(rest) != 3 or not rest[2].startswith("by="):
                raise ParseError(f"usage: {directive} <key> <attr> by=<user>", lineno)
            kid, user = rest[0], rest[2][3:]
            if kid not in keys:
                raise ParseError(f"{directive} references undeclared key {kid!r}", lineno)
            if user not in roles:
                raise ParseError(f"{directive} references undeclared user {user!r}", lineno)
            (attr,) = _attr_list(rest[1], lineno)
            setup.append(AttrChange(kid, attr, user, directive == "setattr"))

        elif directive == "know":
            if len(rest) != 1:
                raise ParseError("usage: know <term>", lineno)
            knowledge.append(_term(rest[0], lineno))

        elif directive in ("policy", "mode", "depth", "conflictguard"):
            if len(rest) != 1:
                raise ParseError(f"usage: {directive} <value>", lineno)
            if directive in seen_global:
                raise ParseError(f"{directive} given twice", lineno)
            seen_global.add(directive)
            if directive == "policy":
                policy_on = _on_off(rest[0], lineno)
            elif directive == "conflictguard":
                guard = _on_off(rest[0], lineno)
            elif directive == "mode":
                try:
                    mode = Mode(rest[0])
                except ValueError:
                    raise ParseError(f"unknown mode {rest[0]!r}", lineno) from None
            else:
                if not rest[0].isdigit():
                    raise ParseError(f"depth must be a non-negative integer, got {rest[0]!r}", lineno)
                depth = int(rest[0])
        else:
            raise ParseError(f"unknown directive {directive!r}", lineno)

    if not roles:
        raise ParseError("scenario declares no users")
    return Scenario(tuple(setup), policy_on, mode, depth, tuple(knowledge), guard)


def format_scenario(scn: Scenario) -> str:
    lines = []
    for item in scn.setup:
        if isinstance(item, UserDecl):
            lines.append(f"user {item.id} {item.role.value}" + (" compromised" if item.compromised else ""))
        elif isinstance(item, KeyDecl):
            if item.imported is None:
                parts = ["key", item.id, f"owner={item.owner}", f"template={item.template.value}"]
            else:
                parts = ["importkey", item.id, f"owner={item.owner}", f"value={item.imported}"]
            if item.attrs:
                parts.append("attrs=" + ",".join(a.value for a in item.attrs))
            if item.trusted:
                parts.append("trusted")
            if item.sensitive:
                parts.append("sensitive")
            lines.append(" ".join(parts))
        else:
            verb = "setattr" if item.set else "unsetattr"
            lines.append(f"{verb} {item.key} {item.attr.value} by={item.user}")
    lines.extend(f"know {t}" for t in scn.knowledge)
    lines.append(f"policy {'on' if scn.policy_on else 'off'}")
    lines.append(f"mode {scn.mode.value}")
    lines.append(f"depth {scn.depth}")
    if scn.conflict_guard:
        lines.append("conflictguard on")
    return "\n".join(lines) + "\n"


# -- setup -----------------------------------------------------------------


@dataclass(frozen=True)
class Setup:
    state: TokenState
    kb: frozenset
    config: "SearchConfig"
    # Setup steps the device refused under the policy (lenient mode only).
    refused: tuple[str, ...] = ()


def reserved_labels(scn: Scenario) -> frozenset[str]:
    labels = {k.id for k in scn.keys}
    for k in scn.keys:
        if k.imported is not None:
            labels |= names_in(k.imported)
    for t in scn.knowledge:
        labels |= names_in(t)
    return frozenset(labels)


def prepare(
    scn: Scenario,
    strict: bool = True,
    *,
    policy_on: bool | None = None,
    mode: Mode | None = None,
) -> Setup:
    """Run the scripted honest setup.

    With ``strict`` a policy refusal raises :class:`PolicyViolation`;
    otherwise the refused step is skipped (the device said no) and recorded.
    """
    from .search import SearchConfig

    pol = scn.policy_on if policy_on is None else policy_on
    st = token.empty_state(
        mode=scn.mode if mode is None else Mode(mode),
        policy_on=pol,
        conflict_guard=scn.conflict_guard,
        reserved=reserved_labels(scn),
    )
    sos = [u.id for u in scn.users if u.role is Role.SO]
    handles: dict[str, str] = {}
    refused: list[str] = []

    def run(desc: str, fn, *args):
        nonlocal st
        try:
            st = fn(st, *args)
        except errors.PolicyViolation as exc:
            if strict:
                raise
            log.warning("setup step refused by policy: %s (%s)", desc, exc)
            refused.append(f"{desc}: {exc.rule}")
        except errors.TokenError as exc:
            raise errors.GuardFailed(f"setup step {desc} failed: {exc.reason}: {exc}") from exc

    for item in scn.setup:
        if isinstance(item, UserDecl):
            st = token.new_user(st, item.id, item.role)
        elif isinstance(item, KeyDecl):
            if item.imported is None:
                st, h = token.create_key(st, item.owner, item.template, item.sensitive, key_id=item.id)
            else:
                st, h = token.import_key(st, item.owner, item.imported, item.sensitive, key_id=item.id)
            handles[item.id] = h
            for a in item.attrs:
                run(f"{item.owner} sets {a.value} on {item.id}", token.set_attribute, item.owner, h, a)
            if item.trusted:
                run(f"{sos[0]} sets trusted on {item.id}", token.set_attribute, sos[0], h, Attr.TRUSTED)
        else:
            fn = token.set_attribute if item.set else token.unset_attribute
            verb = "sets" if item.set else "unsets"
            run(f"{item.user} {verb} {item.attr.value} on {item.key}", fn, item.user, handles[item.key], item.attr)

    kb = close_knowledge(set(scn.knowledge) | st.emitted)
    cfg = SearchConfig(max_depth=scn.depth, attackers=scn.attackers)
    return Setup(st, kb, cfg, tuple(refused))


def build_initial_state(scn: Scenario, strict: bool = True) -> tuple[TokenState, frozenset, "SearchConfig"]:
    s = prepare(scn, strict)
    return s.state, s.kb, s.config


# -- traces ----------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Ref:
    """A reference to an earlier step's output binding, e.g. ``c1``."""

    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True, slots=True)
class Action:
    op: str
    actor: str
    args: tuple = ()

    def arg(self, key: str):
        for k, v in self.args:
            if k == key:
                return v
        raise KeyError(key)

    def sort_key(self) -> tuple:
        # Smaller terms and templates first, so traces use the simplest arguments.
        return (self.op, self.actor, tuple(_value_order(v) for _, v in self.args))

    def __str__(self) -> str:
        parts = [self.op, f"actor={self.actor}"]
        parts.extend(f"{k}={_value_text(v)}" for k, v in self.args)
        return " ".join(parts)


_ORDER_CACHE: dict = {}


def _value_order(v) -> tuple:
    key = _ORDER_CACHE.get(v)
    if key is None:
        if isinstance(v, (Name, Hash, Senc)):
            key = (term_size(v), str(v))
        elif isinstance(v, tuple):
            key = (len(v), _value_text(v))
        else:
            text = _value_text(v)
            key = (len(text), text)  # h2 before h10
        if len(_ORDER_CACHE) < 1 << 20:
            _ORDER_CACHE[v] = key
    return key


@dataclass(frozen=True, slots=True)
class TraceStep:
    index: int
    action: Action
    result: str | None = None


# Argument keys per op, in wire order, with their value kinds.
OP_ARGS: dict[str, tuple[tuple[str, str], ...]] = {
    "create": (("template", "template"),),
    "import": (("value", "term"),),
    "set": (("handle", "handle"), ("attr", "attr")),
    "unset": (("handle", "handle"), ("attr", "attr")),
    "wrap": (("target", "handle"), ("wrapper", "handle")),
    "unwrap": (("ct", "term"), ("wrapper", "handle"), ("template", "attrs")),
    "encrypt": (("data", "term"), ("key", "handle")),
    "decrypt": (("ct", "term"), ("key", "handle")),
    "leak": (),
}
RESULT_KIND = {
    "create": "handle",
    "import": "handle",
    "unwrap": "handle",
    "wrap": "term",
    "encrypt": "term",
    "decrypt": "term",
    "leak": "terms",
    "set": None,
    "unset": None,
}

_STEP_RE = re.compile(r"(\d+)\. ([a-z]+) actor=(\S+)((?: \S+)*?)(?: -> (\S+))?")
_HANDLE_RE = re.compile(r"h[1-9][0-9]*")
_CT_RE = re.compile(r"c[1-9][0-9]*")


def _value_text(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(a) for a in v) if v else "-"
    return str(v)


def _parse_value(kind: str, text: str, lineno: int):
    if kind == "handle":
        if not _HANDLE_RE.fullmatch(text):
            raise ParseError(f"bad handle {text!r}", lineno)
        return text
    if kind == "attr":
        try:
            return Attr(text)
        except ValueError:
            raise ParseError(f"unknown attribute {text!r}", lineno) from None
    if kind == "template":
        try:
            return Template(text)
        except ValueError:
            raise ParseError(f"unknown template {text!r}", lineno) from None
    if kind == "attrs":
        if text == "-":
            return ()
        attrs = _attr_list(text, lineno)
        if list(attrs) != sorted(attrs, key=lambda a: a.value):
            raise ParseError(f"template attributes must be sorted: {text!r}", lineno)
        return attrs
    if _CT_RE.fullmatch(text):
        return Ref(text)
    return _term(text, lineno)


def format_trace(trace) -> str:
    lines = [TRACE_HEADER]
    for step in trace:
        line = f"{step.index}. {step.action}"
        if step.result is not None:
            line += f" -> {step.result}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> list[TraceStep]:
    lines = text.splitlines()
    if not lines or lines[0] != TRACE_HEADER:
        raise ParseError(f"missing {TRACE_HEADER!r} header", 1)
    steps: list[TraceStep] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        m = _STEP_RE.fullmatch(line)
        if m is None:
            raise ParseError(f"malformed trace step {line!r}", lineno)
        index, op, actor, argtext, result = m.groups()
        if int(index) != len(steps) + 1:
            raise ParseError(f"step index {index} out of order (expected {len(steps) + 1})", lineno)
        if op not in OP_ARGS:
            raise ParseError(f"unknown operation {op!r}", lineno)
        _ident(actor, lineno, "actor")
        toks = argtext.split()
        spec = OP_ARGS[op]
        if len(toks) != len(spec):
            raise ParseError(f"{op} expects arguments {' '.join(k for k, _ in spec) or '(none)'}", lineno)
        args = []
        for tok, (key, kind) in zip(toks, spec):
            k, sep, v = tok.partition("=")
            if k != key or not sep:
                raise ParseError(f"{op}: expected {key}=..., got {tok!r}", lineno)
            args.append((key, _parse_value(kind, v, lineno)))
        kind = RESULT_KIND[op]
        if result is not None:
            ok = {
                "handle": lambda r: _HANDLE_RE.fullmatch(r),
                "term": lambda r: _CT_RE.fullmatch(r),
                "terms": lambda r: all(_CT_RE.fullmatch(x) for x in r.split(",")),
                None: lambda r: False,
            }[kind](result)
            if not ok:
                raise ParseError(f"bad result binding {result!r} for {op}", lineno)
        elif kind in ("handle", "term"):
            raise ParseError(f"{op} step must bind its result", lineno)
        steps.append(TraceStep(int(index), Action(op, actor, tuple(args)), result))
    return steps
