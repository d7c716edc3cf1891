"""Exception hierarchy.

Token guard failures derive from :class:`TokenError`; the class name is the
reason string that appears in replay verdicts (``FAILS step=2 reason=NotOwner``).
"""


class HsmLabError(Exception):
    pass


class ParseError(HsmLabError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TokenError(HsmLabError):
    """A device guard refused the request. The state is left unchanged."""

    @property
    def reason(self) -> str:
        return type(self).__name__


class DuplicateUser(TokenError):
    pass


class NotAUser(TokenError):
    pass


class SOCannotCreateKeys(TokenError):
    pass


class UnknownHandle(TokenError):
    pass


class NotOwner(TokenError):
    pass


class RoleForbidden(TokenError):
    pass


class AttributeImmutable(TokenError):
    pass


class PolicyViolation(TokenError):
    def __init__(self, message: str, rule: str | None = None):
        self.rule = rule
        super().__init__(message)


class NotExtractable(TokenError):
    pass


class NotWrapKey(TokenError):
    pass


class TrustedRequired(TokenError):
    pass


class NotUnwrapKey(TokenError):
    pass


class MalformedCiphertext(TokenError):
    pass


class NotEncryptKey(TokenError):
    pass


class NotDecryptKey(TokenError):
    pass


class ModeForbidden(TokenError):
    pass


class ConflictingRoles(TokenError):
    """Raised only when the optional per-handle role-conflict guard is enabled."""


class NotAttacker(TokenError):
    pass


class NotDerivable(TokenError):
    pass


class GuardFailed(HsmLabError):
    """An enumerated action did not apply: enumeration and token disagree (a bug)."""


class BudgetExceeded(HsmLabError):
    def __init__(self, limit: int, explored: int):
        self.limit = limit
        self.explored = explored
        super().__init__(f"state budget of {limit} canonical states exceeded")
