"""Secure-configuration rules: runtime guards and a static scenario linter.

Rule identifiers:

R1  sensitive keys are created with wrap_with_trusted set or extractable unset
R2  trusted is granted only to candidate keys generated by a KM
R3  candidate keys only ever carry wrap and unwrap
R4  candidate keys are generated non-extractable
R5  candidate keys are generated fresh inside the device
OWNERSHIP  only the owner changes a key's attributes (trusted excepted)

A candidate key is a fresh, non-extractable key created by a KM.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from . import errors
from .token import Attr, Origin, Role, Template, TokenState, handle_index

if TYPE_CHECKING:
    from .scenario import Scenario

__all__ = [
    "PolicyVerdict",
    "Violation",
    "LintReport",
    "RULES",
    "is_candidate",
    "check_set_trusted",
    "check_km_attr_change",
    "lint",
]

RULES = ("R1", "R2", "R3", "R4", "R5", "OWNERSHIP")
CANDIDATE_ATTRS = frozenset({Attr.WRAP, Attr.UNWRAP})


@dataclass(frozen=True)
class PolicyVerdict:
    allowed: bool
    rule: str | None = None
    detail: str = ""

    def __post_init__(self) -> None:
        if not self.allowed and self.rule is None:
            raise ValueError("a denied verdict must name a rule")


@dataclass(frozen=True)
class Violation:
    rule: str
    subject: str
    message: str

    def __str__(self) -> str:
        return f"VIOLATION {self.rule} {self.subject} {self.message}"


@dataclass
class LintReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def rules(self) -> list[str]:
        return [v.rule for v in self.violations]

    def format(self) -> str:
        return "".join(f"{v}\n" for v in self.violations)


def is_candidate(st: TokenState, h: str) -> bool:
    key = st.keys[handle_index(st, h)]
    return (
        key.origin is Origin.FRESH
        and key.template is Template.NE
        and st.role_of(key.owner) is Role.KM
    )


def _candidate_failure(owner_role: Role | None, origin: Origin, template: Template | None) -> tuple[str, str] | None:
    if owner_role is not Role.KM:
        return "R2", "trusted may only be granted to keys generated by a KM"
    if origin is not Origin.FRESH:
        return "R5", "trusted keys must be generated fresh in the device"
    if template is not Template.NE:
        return "R4", "trusted keys must be generated with extractable unset"
    return None


def check_set_trusted(st: TokenState, so: str, h: str) -> PolicyVerdict:
    if st.role_of(so) is not Role.SO:
        raise errors.RoleForbidden(f"{so} is not a security officer")
    key = st.keys[handle_index(st, h)]
    failure = _candidate_failure(st.role_of(key.owner), key.origin, key.template)
    if failure is None:
        return PolicyVerdict(True)
    rule, detail = failure
    return PolicyVerdict(False, rule, f"{h}: {detail}")


def check_km_attr_change(st: TokenState, km: str, h: str, a: Attr) -> PolicyVerdict:
    if st.role_of(km) is not Role.KM:
        raise errors.RoleForbidden(f"{km} is not a key manager")
    a = Attr(a)
    if st.keys[handle_index(st, h)].owner == km and is_candidate(st, h) and a not in CANDIDATE_ATTRS:
        return PolicyVerdict(False, "R3", f"{h}: candidate keys admit only wrap and unwrap, not {a.value}")
    return PolicyVerdict(True)


def lint(scn: "Scenario") -> LintReport:
    """Statically check a scenario's declared setup against the rules."""
    from .scenario import AttrChange, KeyDecl

    roles = {u.id: u.role for u in scn.users}
    keys: dict[str, KeyDecl] = {}
    report = LintReport()
    flagged: set[tuple[str, str]] = set()
    trusted: set[str] = set()

    def flag(rule: str, subject: str, message: str) -> None:
        if (rule, subject) not in flagged:
            flagged.add((rule, subject))
            report.violations.append(Violation(rule, subject, message))

    def candidate(k: KeyDecl) -> bool:
        return k.imported is None and k.template is Template.NE and roles.get(k.owner) is Role.KM

    for item in scn.setup:
        if isinstance(item, KeyDecl):
            k = item
            keys[k.id] = k
            if k.sensitive and (k.imported is not None or k.template is Template.GENERIC):
                flag("R1", k.id, "sensitive key must be created with wrap_with_trusted set or extractable unset")
            if k.trusted:
                trusted.add(k.id)
                origin = Origin.IMPORTED if k.imported is not None else Origin.FRESH
                failure = _candidate_failure(roles.get(k.owner), origin, k.template)
                if failure is not None:
                    flag(failure[0], k.id, failure[1])
            if (k.trusted or candidate(k)) and not set(k.attrs) <= CANDIDATE_ATTRS:
                extra = ",".join(sorted(a.value for a in set(k.attrs) - CANDIDATE_ATTRS))
                flag("R3", k.id, f"trusted or candidate key declares {extra}")
        elif isinstance(item, AttrChange):
            ch = item
            k = keys[ch.key]
            if ch.attr is Attr.TRUSTED:
                if roles.get(ch.user) is not Role.SO:
                    flag("OWNERSHIP", ch.key, f"{ch.user} is not a security officer and cannot change trusted")
                elif ch.set:
                    trusted.add(k.id)
                    origin = Origin.IMPORTED if k.imported is not None else Origin.FRESH
                    failure = _candidate_failure(roles.get(k.owner), origin, k.template)
                    if failure is not None:
                        flag(failure[0], k.id, failure[1])
                    elif not set(k.attrs) <= CANDIDATE_ATTRS:
                        flag("R3", k.id, "trusted key declares attributes beyond wrap and unwrap")
                continue
            if ch.user != k.owner:
                flag("OWNERSHIP", ch.key, f"{ch.user} changes {ch.attr.value} on a key owned by {k.owner}")
            elif ch.set and (candidate(k) or k.id in trusted) and ch.attr not in CANDIDATE_ATTRS:
                flag("R3", k.id, f"trusted or candidate key gains {ch.attr.value}")
    return report
