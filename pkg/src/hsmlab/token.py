"""Symbolic PKCS#11 token.

Every operation is a pure transition: it takes a :class:`TokenState` and
returns a new one (plus a result), or raises a :class:`~hsmlab.errors.TokenError`
subclass leaving the input untouched.

Handles and key objects are created together (there is no copy-object API),
so ``state.handles[i]`` always points at ``state.keys[i]`` and handle ids are
``h1, h2, ...`` in creation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

from . import errors
from .terms import Hash, Name, Senc, Term

__all__ = [
    "Role",
    "Attr",
    "Template",
    "Origin",
    "Mode",
    "KeyObject",
    "HandleRecord",
    "TokenState",
    "TEMPLATE_ATTRS",
    "empty_state",
    "new_user",
    "create_key",
    "import_key",
    "set_attribute",
    "unset_attribute",
    "wrap",
    "unwrap",
    "encrypt",
    "decrypt",
    "emit_leaks",
    "handle_id",
    "handle_index",
]


class Role(str, Enum):
    NU = "NU"
    KM = "KM"
    SO = "SO"


class Attr(str, Enum):
    EXTRACTABLE = "extractable"
    WRAP = "wrap"
    UNWRAP = "unwrap"
    ENCRYPT = "encrypt"
    DECRYPT = "decrypt"
    WRAP_WITH_TRUSTED = "wrap_with_trusted"
    TRUSTED = "trusted"

    def __str__(self) -> str:
        return self.value


class Template(str, Enum):
    GENERIC = "generic"
    WWT = "wwt"
    NE = "ne"

    def __str__(self) -> str:
        return self.value


class Origin(str, Enum):
    FRESH = "fresh"
    IMPORTED = "imported"
    UNWRAPPED = "unwrapped"


class Mode(str, Enum):
    FULL = "full"
    PAPER = "paper"

    def __str__(self) -> str:
        return self.value


TEMPLATE_ATTRS: dict[Template, frozenset[Attr]] = {
    Template.GENERIC: frozenset({Attr.EXTRACTABLE}),
    Template.WWT: frozenset({Attr.WRAP_WITH_TRUSTED, Attr.EXTRACTABLE}),
    Template.NE: frozenset(),
}

# Attributes a caller may request in an untrusted unwrap template.
UNWRAP_TEMPLATE_ATTRS = frozenset(Attr) - {Attr.TRUSTED}
TRUSTED_UNWRAP_ATTRS = frozenset({Attr.WRAP_WITH_TRUSTED, Attr.EXTRACTABLE})
OWNER_SETTABLE = frozenset(
    {Attr.WRAP, Attr.UNWRAP, Attr.ENCRYPT, Attr.DECRYPT, Attr.WRAP_WITH_TRUSTED}
)
OWNER_UNSETTABLE = frozenset(
    {Attr.WRAP, Attr.UNWRAP, Attr.ENCRYPT, Attr.DECRYPT, Attr.EXTRACTABLE}
)


@dataclass(frozen=True, slots=True)
class KeyObject:
    key_id: str
    value: Term
    owner: str
    origin: Origin
    template: Template | None = None


@dataclass(frozen=True, slots=True)
class HandleRecord:
    handle: str
    key: str
    attrs: frozenset
    sensitive: bool = False
    # Set once the SO has ever granted trusted on this handle; never cleared.
    ever_trusted: bool = False


@dataclass(frozen=True)
class TokenState:
    users: tuple[tuple[str, Role], ...] = ()
    keys: tuple[KeyObject, ...] = ()
    handles: tuple[HandleRecord, ...] = ()
    mode: Mode = Mode.FULL
    policy_on: bool = False
    emitted: frozenset = frozenset()
    conflict_guard: bool = False
    # Labels fresh key names must avoid (names supplied by the scenario).
    reserved: frozenset = frozenset()
    next_key: int = 1

    @cached_property
    def roles(self) -> dict[str, Role]:
        return dict(self.users)

    @cached_property
    def key_index(self) -> dict[str, int]:
        return {k.key_id: i for i, k in enumerate(self.keys)}

    def role_of(self, user: str) -> Role | None:
        return self.roles.get(user)

    def handle(self, h: str) -> HandleRecord:
        return self.handles[handle_index(self, h)]

    def key_of(self, h: str) -> KeyObject:
        return self.keys[handle_index(self, h)]

    def key(self, key_id: str) -> KeyObject:
        return self.keys[self.key_index[key_id]]

    def handle_of_key(self, key_id: str) -> str:
        return self.handles[self.key_index[key_id]].handle


def handle_id(index: int) -> str:
    return f"h{index + 1}"


def handle_index(st: TokenState, h: str) -> int:
    # Handle ids are positional ("h3" is handles[2]); compare the stored id
    # to reject spellings such as "h03".
    try:
        i = int(h[1:]) - 1
    except (TypeError, ValueError):
        i = -1
    if i < 0 or i >= len(st.handles) or st.handles[i].handle != h:
        raise errors.UnknownHandle(f"no such handle {h!r}")
    return i


def empty_state(
    mode: Mode = Mode.FULL,
    policy_on: bool = False,
    conflict_guard: bool = False,
    reserved: frozenset = frozenset(),
) -> TokenState:
    return TokenState(
        mode=mode, policy_on=policy_on, conflict_guard=conflict_guard, reserved=frozenset(reserved)
    )


def _with(st: TokenState, **changes) -> TokenState:
    base = {
        "users": st.users,
        "keys": st.keys,
        "handles": st.handles,
        "mode": st.mode,
        "policy_on": st.policy_on,
        "emitted": st.emitted,
        "conflict_guard": st.conflict_guard,
        "reserved": st.reserved,
        "next_key": st.next_key,
    }
    base.update(changes)
    return TokenState(**base)


def _require_api_user(st: TokenState, user: str) -> Role:
    role = st.role_of(user)
    if role is None:
        raise errors.NotAUser(f"unknown user {user!r}")
    if role is Role.SO:
        raise errors.RoleForbidden(f"security officer {user} has no cryptographic API access")
    return role


def _check_conflicts(st: TokenState, attrs: frozenset) -> None:
    if not st.conflict_guard:
        return
    if Attr.WRAP in attrs and Attr.DECRYPT in attrs:
        raise errors.ConflictingRoles("wrap and decrypt on one handle")
    if Attr.UNWRAP in attrs and Attr.ENCRYPT in attrs:
        raise errors.ConflictingRoles("unwrap and encrypt on one handle")


def _fresh_key_id(st: TokenState) -> tuple[str, int]:
    used = st.key_index
    n = st.next_key
    while f"k{n}" in used or f"k{n}" in st.reserved:
        n += 1
    return f"k{n}", n + 1


def _add_key(
    st: TokenState,
    owner: str,
    value: Term | None,
    origin: Origin,
    template: Template | None,
    attrs: frozenset,
    sensitive: bool,
    key_id: str | None,
) -> tuple[TokenState, str]:
    next_key = st.next_key
    if key_id is None:
        key_id, next_key = _fresh_key_id(st)
    elif key_id in st.key_index:
        raise errors.TokenError(f"duplicate key id {key_id!r}")
    if value is None:
        value = Name(key_id)
    h = handle_id(len(st.handles))
    key = KeyObject(key_id, value, owner, origin, template)
    rec = HandleRecord(h, key_id, attrs, sensitive)
    return _with(st, keys=st.keys + (key,), handles=st.handles + (rec,), next_key=next_key), h


def _replace_handle(st: TokenState, i: int, rec: HandleRecord) -> TokenState:
    return _with(st, handles=st.handles[:i] + (rec,) + st.handles[i + 1 :])


def new_user(st: TokenState, user: str, role: Role) -> TokenState:
    if user in st.roles:
        raise errors.DuplicateUser(f"user {user!r} already exists")
    return _with(st, users=st.users + ((user, Role(role)),))


def create_key(
    st: TokenState,
    user: str,
    tmpl: Template,
    sensitive: bool = False,
    key_id: str | None = None,
) -> tuple[TokenState, str]:
    """Generate a fresh key owned by ``user``; return the new state and its handle."""
    role = st.role_of(user)
    if role is None:
        raise errors.NotAUser(f"unknown user {user!r}")
    if role is Role.SO:
        raise errors.SOCannotCreateKeys(f"security officer {user} cannot create keys")
    tmpl = Template(tmpl)
    return _add_key(st, user, None, Origin.FRESH, tmpl, TEMPLATE_ATTRS[tmpl], sensitive, key_id)


def import_key(
    st: TokenState,
    user: str,
    value: Term,
    sensitive: bool = False,
    key_id: str | None = None,
) -> tuple[TokenState, str]:
    """Import a key value in the clear with the generic template."""
    role = st.role_of(user)
    if role is None:
        raise errors.NotAUser(f"unknown user {user!r}")
    if role is Role.SO:
        raise errors.SOCannotCreateKeys(f"security officer {user} cannot import keys")
    attrs = frozenset({Attr.EXTRACTABLE})
    return _add_key(st, user, value, Origin.IMPORTED, None, attrs, sensitive, key_id)


def set_attribute(st: TokenState, user: str, h: str, a: Attr) -> TokenState:
    from . import policy

    a = Attr(a)
    i = handle_index(st, h)
    role = st.role_of(user)
    if role is None:
        raise errors.NotAUser(f"unknown user {user!r}")
    rec = st.handles[i]
    if a is Attr.EXTRACTABLE:
        raise errors.AttributeImmutable("extractable can only be set at creation")
    if a is Attr.TRUSTED:
        if role is not Role.SO:
            raise errors.RoleForbidden(f"only the security officer may set trusted ({user} is {role.value})")
        if st.policy_on:
            verdict = policy.check_set_trusted(st, user, h)
            if not verdict.allowed:
                raise errors.PolicyViolation(verdict.detail, verdict.rule)
        attrs = rec.attrs | {a}
        return _replace_handle(
            st, i, HandleRecord(rec.handle, rec.key, attrs, rec.sensitive, True)
        )
    if role is Role.SO:
        raise errors.RoleForbidden(f"security officer {user} cannot change {a.value}")
    if st.keys[i].owner != user:
        raise errors.NotOwner(f"{user} does not own {h}")
    if st.policy_on and role is Role.KM:
        verdict = policy.check_km_attr_change(st, user, h, a)
        if not verdict.allowed:
            raise errors.PolicyViolation(verdict.detail, verdict.rule)
    attrs = rec.attrs | {a}
    _check_conflicts(st, attrs)
    return _replace_handle(st, i, HandleRecord(rec.handle, rec.key, attrs, rec.sensitive, rec.ever_trusted))


def unset_attribute(st: TokenState, user: str, h: str, a: Attr) -> TokenState:
    a = Attr(a)
    i = handle_index(st, h)
    role = st.role_of(user)
    if role is None:
        raise errors.NotAUser(f"unknown user {user!r}")
    rec = st.handles[i]
    if a is Attr.WRAP_WITH_TRUSTED:
        raise errors.AttributeImmutable("wrap_with_trusted cannot be unset")
    if a is Attr.TRUSTED:
        if role is not Role.SO:
            raise errors.RoleForbidden(f"only the security officer may unset trusted ({user} is {role.value})")
    else:
        if role is Role.SO:
            raise errors.RoleForbidden(f"security officer {user} cannot change {a.value}")
        if st.keys[i].owner != user:
            raise errors.NotOwner(f"{user} does not own {h}")
    attrs = rec.attrs - {a}
    return _replace_handle(st, i, HandleRecord(rec.handle, rec.key, attrs, rec.sensitive, rec.ever_trusted))


def wrap(st: TokenState, user: str, target: str, wrapper: str) -> tuple[TokenState, Term]:
    """Export ``target`` encrypted under ``wrapper``: ``senc(k1, h(k2))``."""
    _require_api_user(st, user)
    ti = handle_index(st, target)
    wi = handle_index(st, wrapper)
    t_attrs = st.handles[ti].attrs
    w_attrs = st.handles[wi].attrs
    if Attr.EXTRACTABLE not in t_attrs:
        raise errors.NotExtractable(f"{target} is not extractable")
    if Attr.WRAP not in w_attrs:
        raise errors.NotWrapKey(f"{wrapper} cannot wrap")
    if Attr.WRAP_WITH_TRUSTED in t_attrs and Attr.TRUSTED not in w_attrs:
        raise errors.TrustedRequired(f"{target} may only be wrapped under a trusted key")
    ct = Senc(st.keys[ti].value, Hash(st.keys[wi].value))
    return _with(st, emitted=st.emitted | {ct}), ct


def unwrap(
    st: TokenState,
    user: str,
    ct: Term,
    wrapper: str,
    tmpl: frozenset | set = frozenset(),
) -> tuple[TokenState, str]:
    """Import the key inside ``ct`` as a new object owned by ``user``.

    Under a trusted wrapper the requested template is ignored and the new
    handle gets exactly ``{wrap_with_trusted, extractable}``.
    """
    _require_api_user(st, user)
    wi = handle_index(st, wrapper)
    w_attrs = st.handles[wi].attrs
    if Attr.UNWRAP not in w_attrs:
        raise errors.NotUnwrapKey(f"{wrapper} cannot unwrap")
    if type(ct) is not Senc or ct.keyterm != Hash(st.keys[wi].value):
        raise errors.MalformedCiphertext(f"ciphertext is not encrypted under {wrapper}")
    if Attr.TRUSTED in w_attrs:
        attrs = TRUSTED_UNWRAP_ATTRS
    else:
        attrs = frozenset(Attr(a) for a in tmpl)
        if Attr.TRUSTED in attrs:
            raise errors.RoleForbidden("only the security officer may grant trusted")
        _check_conflicts(st, attrs)
    return _add_key(st, user, ct.payload, Origin.UNWRAPPED, None, attrs, False, None)


def encrypt(st: TokenState, user: str, data: Term, h: str) -> tuple[TokenState, Term]:
    if st.mode is not Mode.FULL:
        raise errors.ModeForbidden("encrypt is not available in paper mode")
    _require_api_user(st, user)
    i = handle_index(st, h)
    if Attr.ENCRYPT not in st.handles[i].attrs:
        raise errors.NotEncryptKey(f"{h} cannot encrypt")
    ct = Senc(data, Hash(st.keys[i].value))
    return _with(st, emitted=st.emitted | {ct}), ct


def decrypt(st: TokenState, user: str, ct: Term, h: str) -> tuple[TokenState, Term]:
    if st.mode is not Mode.FULL:
        raise errors.ModeForbidden("decrypt is not available in paper mode")
    _require_api_user(st, user)
    i = handle_index(st, h)
    if Attr.DECRYPT not in st.handles[i].attrs:
        raise errors.NotDecryptKey(f"{h} cannot decrypt")
    if type(ct) is not Senc or ct.keyterm != Hash(st.keys[i].value):
        raise errors.MalformedCiphertext(f"ciphertext is not encrypted under {h}")
    return _with(st, emitted=st.emitted | {ct.payload}), ct.payload


def leaked_hashes(st: TokenState) -> frozenset:
    """Hashes the simplified model hands to the attacker in the current state."""
    out = set()
    for key, rec in zip(st.keys, st.handles):
        attrs = rec.attrs
        if (
            Attr.ENCRYPT in attrs
            or Attr.DECRYPT in attrs
            or (Attr.EXTRACTABLE in attrs and Attr.WRAP_WITH_TRUSTED not in attrs)
        ):
            out.add(Hash(key.value))
    return frozenset(out)


def emit_leaks(st: TokenState) -> tuple[TokenState, frozenset]:
    if st.mode is not Mode.PAPER:
        raise errors.ModeForbidden("explicit leakage exists only in paper mode")
    out = leaked_hashes(st)
    return _with(st, emitted=st.emitted | out), out
