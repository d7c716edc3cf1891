"""Symbolic analysis of HSM key-management configurations."""

from .errors import BudgetExceeded, GuardFailed, HsmLabError, ParseError, TokenError
from .policy import LintReport, PolicyVerdict, Violation, lint
from .scenario import Action, Scenario, TraceStep, build_initial_state, format_trace, parse_scenario, parse_trace
from .search import Attack, Exhausted, Fails, Reproduces, SearchConfig, explore, replay
from .terms import Hash, Name, Senc, close_knowledge, derives, parse_term
from .token import Attr, Mode, Role, Template, TokenState

__all__ = [
    "Action",
    "Attack",
    "Attr",
    "BudgetExceeded",
    "Exhausted",
    "Fails",
    "GuardFailed",
    "Hash",
    "HsmLabError",
    "LintReport",
    "Mode",
    "Name",
    "ParseError",
    "PolicyVerdict",
    "Reproduces",
    "Role",
    "Scenario",
    "SearchConfig",
    "Senc",
    "Template",
    "TokenError",
    "TokenState",
    "TraceStep",
    "Violation",
    "build_initial_state",
    "close_knowledge",
    "derives",
    "explore",
    "format_trace",
    "lint",
    "parse_scenario",
    "parse_term",
    "parse_trace",
    "replay",
]
