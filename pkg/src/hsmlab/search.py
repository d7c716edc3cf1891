"""Bounded attack search over the token API.

The attacker drives the API as any compromised user, sees every device
output, and closes its knowledge after each step. :func:`explore` searches
all attacker action sequences up to a depth bound and either returns a
shortest trace after which a protected key's raw value is derivable, or an
:class:`Exhausted` certificate with exact state counts.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import errors, token
from .errors import BudgetExceeded, GuardFailed
from .scenario import Action, Ref, Scenario, TraceStep, prepare
from .terms import Hash, Name, Senc, Term, derives_closed, extend_closed
from .token import (
    OWNER_SETTABLE,
    OWNER_UNSETTABLE,
    UNWRAP_TEMPLATE_ATTRS,
    Attr,
    Mode,
    Origin,
    Role,
    Template,
    TokenState,
)

log = logging.getLogger(__name__)

__all__ = [
    "SearchConfig",
    "Attack",
    "Exhausted",
    "Reproduces",
    "Fails",
    "goal_keys",
    "leaked_goal",
    "enumerate_actions",
    "apply_action",
    "canonical_form",
    "canonical_fingerprint",
    "explore",
    "replay",
    "build_trace",
]

DEFAULT_STATE_CAP = 10**7
EMITTING_OPS = frozenset({"wrap", "encrypt", "decrypt", "leak"})
_ATTR_ORDER = tuple(sorted(UNWRAP_TEMPLATE_ATTRS, key=lambda a: a.value))


@dataclass(frozen=True)
class SearchConfig:
    max_depth: int = 6
    attackers: frozenset = frozenset()
    # None: protected keys are recomputed from each state (see goal_keys).
    goal_keys: frozenset | None = None
    strategy: str = "bfs"
    workers: int = 1
    state_cap: int = DEFAULT_STATE_CAP
    # Let honest users act inside the search, still under the policy guards.
    honest: bool = False
    # Dominance pruning: skip attacker moves that can only shrink its power.
    reduce: bool = False
    # Treat compromised NUs as interchangeable owners when deduplicating.
    symmetry: bool = True

    def __post_init__(self) -> None:
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.strategy not in ("bfs", "iddfs"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        object.__setattr__(self, "attackers", frozenset(self.attackers))
        if self.goal_keys is not None:
            object.__setattr__(self, "goal_keys", frozenset(self.goal_keys))


@dataclass(frozen=True)
class Attack:
    trace: tuple[TraceStep, ...]
    leaked_key: str
    states_explored: int = 0
    canonical_states: int = 0


@dataclass(frozen=True)
class Exhausted:
    depth: int
    states_explored: int
    canonical_states: int


@dataclass(frozen=True)
class Reproduces:
    leaked_key: str


@dataclass(frozen=True)
class Fails:
    step: int
    reason: str


# -- goals -----------------------------------------------------------------


def goal_keys(scn: Scenario | None, st: TokenState) -> frozenset[str]:
    """Keys whose raw value must stay secret in ``st``.

    Fresh keys made with the wwt or ne template, keys whose handle has ever
    been trusted, and anything the scenario marks sensitive.
    """
    out = set()
    for key, rec in zip(st.keys, st.handles):
        if key.origin is Origin.FRESH and key.template in (Template.WWT, Template.NE):
            out.add(key.key_id)
        elif rec.ever_trusted or rec.sensitive:
            out.add(key.key_id)
    if scn is not None:
        out |= {k.id for k in scn.keys if k.sensitive}
    return frozenset(out)


def leaked_goal(st: TokenState, kb: frozenset, goals: Iterable[str] | None = None) -> str | None:
    """Return the least protected key id whose value ``kb`` derives, if any."""
    if goals is None:
        goals = goal_keys(None, st)
    for kid in sorted(goals):
        if kid in st.key_index and derives_closed(kb, st.key(kid).value):
            return kid
    return None


# -- actions ---------------------------------------------------------------


def _actors(st: TokenState, cfg: SearchConfig) -> list[str]:
    if cfg.honest:
        return sorted(u for u, _ in st.users)
    return sorted(u for u in cfg.attackers if u in st.roles)


def _data_pool(kb: frozenset) -> list[Term]:
    # Known terms plus one hashing step over them.
    pool = set(kb)
    pool.update(Hash(t) for t in kb)
    return sorted(pool, key=str)


def _unwrap_templates(st: TokenState, reduce: bool) -> list[tuple]:
    attrs = _ATTR_ORDER
    if reduce:
        base = [a for a in attrs if a is not Attr.WRAP_WITH_TRUSTED]
        if not st.conflict_guard:
            return [tuple(base)]
        cands = []
        for keep_wrap in (True, False):
            for keep_unwrap in (True, False):
                drop = {Attr.DECRYPT if keep_wrap else Attr.WRAP, Attr.ENCRYPT if keep_unwrap else Attr.UNWRAP}
                cands.append(tuple(a for a in base if a not in drop))
        return sorted(cands, key=lambda t: ",".join(a.value for a in t))
    out = []
    for r in range(len(attrs) + 1):
        for combo in itertools.combinations(attrs, r):
            s = set(combo)
            if st.conflict_guard and (
                (Attr.WRAP in s and Attr.DECRYPT in s) or (Attr.UNWRAP in s and Attr.ENCRYPT in s)
            ):
                continue
            out.append(combo)
    return out


def _settable(st: TokenState, actor: str, role: Role, i: int, a: Attr) -> bool:
    rec = st.handles[i]
    if a in rec.attrs:
        return False
    if st.policy_on and role is Role.KM:
        from .policy import check_km_attr_change

        if not check_km_attr_change(st, actor, rec.handle, a).allowed:
            return False
    if st.conflict_guard:
        s = rec.attrs | {a}
        if (Attr.WRAP in s and Attr.DECRYPT in s) or (Attr.UNWRAP in s and Attr.ENCRYPT in s):
            return False
    return True


def enumerate_actions(
    st: TokenState,
    kb: frozenset,
    cfg: SearchConfig,
    representative: bool = False,
    emitting_only: bool = False,
) -> list[Action]:
    """All guard-satisfying actions available to the acting users, sorted.

    With ``representative`` set, actions whose outcome does not depend on who
    performs them (wrap, encrypt, decrypt) are listed once, for the least
    actor able to perform them; with ``cfg.symmetry`` the same applies to
    creation by interchangeable compromised NUs. ``emitting_only`` keeps
    just the actions that can add to the attacker's knowledge or grant
    trust, which is all that matters on the final step.
    """
    actors = _actors(st, cfg)
    if not actors:
        return []
    out: list[Action] = []
    roles = st.roles
    api_actors = [u for u in actors if roles[u] is not Role.SO]
    handles = st.handles
    keys = st.keys
    n = len(handles)
    reduce = cfg.reduce and not cfg.honest

    creators = api_actors
    if representative and cfg.symmetry:
        seen_nu = False
        creators = []
        for u in api_actors:
            if roles[u] is Role.NU and u in cfg.attackers:
                if seen_nu:
                    continue
                seen_nu = True
            creators.append(u)
    shared_actors = api_actors[:1] if representative else api_actors

    data_pool = _data_pool(kb) if api_actors else []

    for u in () if emitting_only else creators:
        for tmpl in (Template.GENERIC, Template.NE, Template.WWT):
            out.append(Action("create", u, (("template", tmpl),)))
        for t in data_pool:
            out.append(Action("import", u, (("value", t),)))

    for u in () if emitting_only else api_actors:
        role = roles[u]
        for i in range(n):
            if keys[i].owner != u:
                continue
            h = handles[i].handle
            attrs = handles[i].attrs
            for a in OWNER_SETTABLE:
                if reduce and a is Attr.WRAP_WITH_TRUSTED:
                    continue
                if _settable(st, u, role, i, a):
                    out.append(Action("set", u, (("handle", h), ("attr", a))))
            if not reduce or st.conflict_guard:
                for a in OWNER_UNSETTABLE:
                    if a in attrs:
                        out.append(Action("unset", u, (("handle", h), ("attr", a))))

    for u in actors:
        if roles[u] is not Role.SO:
            continue
        for i in range(n):
            h = handles[i].handle
            if Attr.TRUSTED in handles[i].attrs:
                if emitting_only:
                    continue
                out.append(Action("unset", u, (("handle", h), ("attr", Attr.TRUSTED))))
            elif not st.policy_on or _trust_allowed(st, u, h):
                out.append(Action("set", u, (("handle", h), ("attr", Attr.TRUSTED))))

    wrappers = [i for i in range(n) if Attr.WRAP in handles[i].attrs]
    for ti in range(n):
        t_attrs = handles[ti].attrs
        if Attr.EXTRACTABLE not in t_attrs:
            continue
        wwt = Attr.WRAP_WITH_TRUSTED in t_attrs
        for wi in wrappers:
            if wwt and Attr.TRUSTED not in handles[wi].attrs:
                continue
            args = (("target", handles[ti].handle), ("wrapper", handles[wi].handle))
            for u in shared_actors:
                out.append(Action("wrap", u, args))

    templates = None
    for wi in () if emitting_only else range(n):
        w_attrs = handles[wi].attrs
        if Attr.UNWRAP not in w_attrs:
            continue
        kh = Hash(keys[wi].value)
        cts = {t for t in kb if type(t) is Senc and t.keyterm == kh}
        if derives_closed(kb, kh):
            cts.update(Senc(p, kh) for p in kb)
        if not cts:
            continue
        if Attr.TRUSTED in w_attrs:
            tmpls = [()]
        else:
            if templates is None:
                templates = _unwrap_templates(st, reduce)
            tmpls = templates
        hw = handles[wi].handle
        unwrappers = creators
        for ct in sorted(cts, key=str):
            for tm in tmpls:
                args = (("ct", ct), ("wrapper", hw), ("template", tm))
                for u in unwrappers:
                    out.append(Action("unwrap", u, args))

    if st.mode is Mode.FULL:
        for i in range(n):
            attrs = handles[i].attrs
            h = handles[i].handle
            if Attr.ENCRYPT in attrs:
                for t in data_pool:
                    args = (("data", t), ("key", h))
                    for u in shared_actors:
                        out.append(Action("encrypt", u, args))
            if Attr.DECRYPT in attrs:
                kh = Hash(keys[i].value)
                # Only device-emitted ciphertexts: decrypting one the attacker
                # built itself returns a payload it already has.
                for ct in sorted((t for t in kb if type(t) is Senc and t.keyterm == kh), key=str):
                    args = (("ct", ct), ("key", h))
                    for u in shared_actors:
                        out.append(Action("decrypt", u, args))
    elif api_actors:
        out.append(Action("leak", api_actors[0], ()))

    out.sort(key=Action.sort_key)
    return out


def _trust_allowed(st: TokenState, so: str, h: str) -> bool:
    from .policy import check_set_trusted

    return check_set_trusted(st, so, h).allowed


def apply_action(st: TokenState, kb: frozenset, act: Action) -> tuple[TokenState, frozenset]:
    """Apply an enumerated action and fold any device output into ``kb``."""
    try:
        st2, out = _apply(st, kb, act)
    except errors.TokenError as exc:
        raise GuardFailed(f"{act}: {exc.reason}: {exc}") from exc
    if out:
        kb = extend_closed(kb, out)
    return st2, kb


def _apply(st: TokenState, kb: frozenset, act: Action) -> tuple[TokenState, tuple]:
    op, u, args = act.op, act.actor, act.args
    if op == "set":
        return token.set_attribute(st, u, args[0][1], args[1][1]), ()
    if op == "unset":
        return token.unset_attribute(st, u, args[0][1], args[1][1]), ()
    if op == "wrap":
        st2, ct = token.wrap(st, u, args[0][1], args[1][1])
        return st2, (ct,)
    if op == "create":
        st2, _ = token.create_key(st, u, args[0][1])
        return st2, ()
    if op == "import":
        _require_derivable(kb, args[0][1])
        st2, _ = token.import_key(st, u, args[0][1])
        return st2, ()
    if op == "unwrap":
        _require_derivable(kb, args[0][1])
        st2, _ = token.unwrap(st, u, args[0][1], args[1][1], args[2][1])
        return st2, ()
    if op == "encrypt":
        _require_derivable(kb, args[0][1])
        st2, ct = token.encrypt(st, u, args[0][1], args[1][1])
        return st2, (ct,)
    if op == "decrypt":
        _require_derivable(kb, args[0][1])
        st2, pt = token.decrypt(st, u, args[0][1], args[1][1])
        return st2, (pt,)
    if op == "leak":
        st2, out = token.emit_leaks(st)
        return st2, tuple(sorted(out, key=str))
    raise GuardFailed(f"unknown operation {op!r}")


def _require_derivable(kb: frozenset, t) -> None:
    if not isinstance(t, (Name, Hash, Senc)):
        raise errors.NotDerivable(f"argument {t!r} is not a term")
    if not derives_closed(kb, t):
        raise errors.NotDerivable(f"attacker cannot produce {t}")


# -- canonical fingerprints --------------------------------------------------

_ATTR_TEXT: dict[frozenset, str] = {}


def _head(key, rec, interchangeable: frozenset) -> str:
    """Owner, origin, template, attributes and marks of one handle, as text."""
    attrs = _ATTR_TEXT.get(rec.attrs)  # frozensets cache their hash
    if attrs is None:
        attrs = _ATTR_TEXT[rec.attrs] = ",".join(sorted(a.value for a in rec.attrs)) or "-"
    owner = "*" if key.owner in interchangeable else key.owner
    # _value_ skips the slow Enum.value descriptor on this hot path.
    tmpl = key.template._value_ if key.template is not None else "-"
    marks = ("S" if rec.sensitive else "s") + ("T" if rec.ever_trusted else "t")
    return f"{owner} {key.origin._value_} {tmpl} {attrs} {marks}"


def _render(t: Term, ren: dict[str, str]) -> str:
    tt = type(t)
    if tt is Name:
        return "name:" + ren.get(t.label, t.label)
    if tt is Hash:
        return "h(" + _render(t.inner, ren) + ")"
    return "senc(" + _render(t.payload, ren) + "," + _render(t.keyterm, ren) + ")"


def canonical_form(st: TokenState, kb: frozenset, interchangeable: frozenset = frozenset()) -> str:
    """Renaming-invariant text describing ``(st, kb)``.

    Keys the scenario named keep their identity and position. Keys created
    during the search are ordered by content and their fresh names renamed
    in that order; handle ids and the fresh-name counter do not appear.
    Owners in ``interchangeable`` collapse to a single placeholder. Terms
    the device has emitted matter only through ``kb``.
    """
    reserved = st.reserved
    fresh = {
        k.value.label
        for k in st.keys
        if k.origin is Origin.FRESH and k.key_id not in reserved
    }
    fixed = []
    mobile = []
    for key, rec in zip(st.keys, st.handles):
        head = _head(key, rec, interchangeable)
        if key.key_id in reserved:
            fixed.append(head + " " + str(key.value))
        else:
            mobile.append((head, key.value))

    if fresh:
        blank = dict.fromkeys(fresh, "?")
        mobile.sort(key=lambda m: (m[0], _render(m[1], blank)))
        ren: dict[str, str] = {}
        for _, value in mobile:
            if type(value) is Name and value.label in fresh and value.label not in ren:
                ren[value.label] = f"#{len(ren)}"
        # Fresh names that only survive inside other terms.
        for label in sorted(fresh - ren.keys()):
            ren[label] = f"#{len(ren)}"
        handles = sorted(head + " " + _render(v, ren) for head, v in mobile)
        know = sorted(_render(t, ren) for t in kb)
    else:
        handles = sorted(head + " " + str(v) for head, v in mobile)
        know = sorted(map(str, kb))
    users = ",".join(f"{u}:{r.value}" for u, r in st.users)
    header = f"{users} {st.mode.value} {int(st.policy_on)}{int(st.conflict_guard)}"
    return "\n".join((header, "|".join(fixed), "|".join(handles), "|".join(know)))


def canonical_fingerprint(st: TokenState, kb: frozenset, interchangeable: frozenset = frozenset()) -> bytes:
    form = canonical_form(st, kb, interchangeable)
    return hashlib.blake2b(form.encode(), digest_size=16).digest()


# -- exploration -------------------------------------------------------------


@dataclass
class _Ctx:
    cfg: SearchConfig
    scn: Scenario | None
    interchangeable: frozenset

    def goals(self, st: TokenState) -> frozenset:
        if self.cfg.goal_keys is not None:
            return self.cfg.goal_keys
        return goal_keys(self.scn, st)

    def fingerprint(self, st: TokenState, kb: frozenset) -> bytes:
        return canonical_fingerprint(st, kb, self.interchangeable)

    def actions(self, st: TokenState, kb: frozenset, last: bool = False) -> list[Action]:
        return enumerate_actions(st, kb, self.cfg, representative=True, emitting_only=last)


def _interchangeable(st: TokenState, cfg: SearchConfig) -> frozenset:
    if not cfg.symmetry or cfg.honest:
        return frozenset()
    nus = frozenset(u for u in cfg.attackers if st.role_of(u) is Role.NU)
    return nus if len(nus) > 1 else frozenset()


def _expand(ctx: _Ctx, st: TokenState, kb: frozenset, last: bool):
    """Successors of one state: (action index, action, state, kb, leaked key or None).

    On the final step only the leak verdict is needed, so successor states
    are not built (their entries carry ``None``) and each distinct device
    output is closed over once; when no final action can leak, just their
    number is returned.
    """
    if last:
        quiet = _quiet_final(ctx, st, kb)
        if quiet is not None:
            return quiet
    out = []
    actions = ctx.actions(st, kb, last)
    if last:
        goals = ctx.goals(st)
        seen: dict[tuple, str | None] = {}
        for ai, act in enumerate(actions):
            emitted = _output_of(st, act)
            if emitted is None:
                st2, kb2 = apply_action(st, kb, act)
                out.append((ai, act, None, None, leaked_goal(st2, kb2, ctx.goals(st2))))
                continue
            if emitted in seen:
                leak = seen[emitted]
            elif all(t in kb for t in emitted):
                leak = seen[emitted] = None
            else:
                leak = seen[emitted] = leaked_goal(st, extend_closed(kb, emitted), goals)
            out.append((ai, act, None, None, leak))
        return out
    for ai, act in enumerate(actions):
        st2, kb2 = apply_action(st, kb, act)
        leak = None
        if kb2 is not kb or _may_trust(act):
            leak = leaked_goal(st2, kb2, ctx.goals(st2))
        out.append((ai, act, st2, kb2, leak))
    return out


def _quiet_final(ctx: _Ctx, st: TokenState, kb: frozenset) -> int | None:
    """Number of final-step actions from ``st`` if none of them leaks, else None.

    Closure is monotone, so when the union of every final-step output leaks
    nothing, no single action does and the actions need not be listed. The
    count matches ``enumerate_actions(..., representative=True,
    emitting_only=True)``. States where the SO acts take the slow path,
    since granting trust changes the goal set.
    """
    actors = _actors(st, ctx.cfg)
    if not actors:
        return 0
    roles = st.roles
    if any(roles[u] is Role.SO for u in actors):
        return None
    handles, keys = st.handles, st.keys
    n = len(handles)
    outs: set = set()
    count = 0
    wrappers = [i for i in range(n) if Attr.WRAP in handles[i].attrs]
    for ti in range(n):
        t_attrs = handles[ti].attrs
        if Attr.EXTRACTABLE not in t_attrs:
            continue
        wwt = Attr.WRAP_WITH_TRUSTED in t_attrs
        value = keys[ti].value
        for wi in wrappers:
            if wwt and Attr.TRUSTED not in handles[wi].attrs:
                continue
            count += 1
            outs.add(Senc(value, Hash(keys[wi].value)))
    if st.mode is Mode.FULL:
        pool = None
        for i in range(n):
            attrs = handles[i].attrs
            if Attr.ENCRYPT in attrs:
                if pool is None:
                    pool = _data_pool(kb)
                kh = Hash(keys[i].value)
                count += len(pool)
                outs.update(Senc(t, kh) for t in pool)
            if Attr.DECRYPT in attrs:
                kh = Hash(keys[i].value)
                for t in kb:
                    if type(t) is Senc and t.keyterm == kh:
                        count += 1
                        outs.add(t.payload)
    else:
        count += 1
        outs |= token.leaked_hashes(st)
    new = [t for t in outs if t not in kb]
    if new and leaked_goal(st, extend_closed(kb, new), ctx.goals(st)) is not None:
        return None
    return count


def _output_of(st: TokenState, act: Action) -> tuple | None:
    """Device output of an enumerated emitting action, without applying it."""
    op, args = act.op, act.args
    if op == "wrap":
        return (Senc(st.key_of(args[0][1]).value, Hash(st.key_of(args[1][1]).value)),)
    if op == "encrypt":
        return (Senc(args[0][1], Hash(st.key_of(args[1][1]).value)),)
    if op == "decrypt":
        return (args[0][1].payload,)
    if op == "leak":
        return tuple(sorted(token.leaked_hashes(st), key=str))
    return None


def _may_trust(act: Action) -> bool:
    return act.op == "set" and act.args[1][1] is Attr.TRUSTED


def _worker_expand(payload):
    ctx, items, last = payload
    result = []
    for st, kb in items:
        expanded = _expand(ctx, st, kb, last)
        if isinstance(expanded, int):
            result.append(expanded)
            continue
        succ = []
        for ai, act, st2, kb2, leak in expanded:
            fp = None if (leak is not None or last) else ctx.fingerprint(st2, kb2)
            succ.append((ai, act, st2, kb2, leak, fp))
        result.append(succ)
    return result


def explore(scn: Scenario, cfg: SearchConfig | None = None, *, stats: dict | None = None):
    """Search attacker behaviours up to ``cfg.max_depth`` steps.

    Returns :class:`Attack` with a shortest trace, or :class:`Exhausted`.
    Raises :class:`BudgetExceeded` when more than ``cfg.state_cap`` canonical
    states are needed; that is never a security verdict.
    """
    setup = prepare(scn, strict=False)
    if cfg is None:
        cfg = setup.config
    st, kb = setup.state, setup.kb
    ctx = _Ctx(cfg, scn, _interchangeable(st, cfg))
    t0 = time.perf_counter()
    frontier_sizes: list[int] = []
    if cfg.strategy == "iddfs":
        result = _iddfs(ctx, st, kb)
    else:
        result = _bfs(ctx, st, kb, frontier_sizes)
    if stats is not None:
        elapsed = time.perf_counter() - t0
        stats["seconds"] = elapsed
        explored = result.states_explored
        stats["states_per_second"] = explored / elapsed if elapsed > 0 else float("inf")
        stats["frontier"] = frontier_sizes
    return result


def _bfs(ctx: _Ctx, st0: TokenState, kb0: frozenset, frontier_sizes: list[int] | None = None):
    cfg = ctx.cfg
    leak = leaked_goal(st0, kb0, ctx.goals(st0))
    if leak is not None:
        return Attack((), leak, 0, 1)
    visited = {ctx.fingerprint(st0, kb0)}
    # parents[i] = (parent node, action) for trace reconstruction
    parents: list[tuple[int, Action | None]] = [(-1, None)]
    frontier: list[tuple[TokenState, frozenset, int]] = [(st0, kb0, 0)]
    explored = 0
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for depth in range(1, cfg.max_depth + 1):
            last = depth == cfg.max_depth
            nxt: list[tuple[TokenState, frozenset, int]] = []
            for node, succ in _expand_frontier(ctx, frontier, last, pool):
                if isinstance(succ, int):
                    explored += succ
                    continue
                for ai, act, st2, kb2, leak, fp in succ:
                    explored += 1
                    if leak is not None:
                        path = _path(parents, node) + [act]
                        return Attack(tuple(build_trace(st0, kb0, path)), leak, explored, len(visited))
                    if last:
                        # Final-step states are only checked for leaks.
                        continue
                    if fp is None:
                        fp = ctx.fingerprint(st2, kb2)
                    if fp in visited:
                        continue
                    visited.add(fp)
                    if len(visited) > cfg.state_cap:
                        raise BudgetExceeded(cfg.state_cap, explored)
                    parents.append((node, act))
                    nxt.append((st2, kb2, len(parents) - 1))
            log.debug("depth %d: frontier %d, canonical %d", depth, len(nxt), len(visited))
            if frontier_sizes is not None:
                frontier_sizes.append(len(nxt))
            frontier = nxt
            if not frontier and not last:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return Exhausted(cfg.max_depth, explored, len(visited))


def _expand_frontier(ctx: _Ctx, frontier, last: bool, pool):
    if pool is None:
        for st, kb, node in frontier:
            expanded = _expand(ctx, st, kb, last)
            if isinstance(expanded, int):
                yield node, expanded
                continue
            succ = []
            for ai, act, st2, kb2, leak in expanded:
                succ.append((ai, act, st2, kb2, leak, None))
            yield node, succ
        return
    # Chunks are merged back in frontier order, so the outcome does not
    # depend on worker scheduling.
    n = ctx.cfg.workers * 4
    size = max(1, -(-len(frontier) // n))
    chunks = [frontier[i : i + size] for i in range(0, len(frontier), size)]
    payloads = [(ctx, [(st, kb) for st, kb, _ in ch], last) for ch in chunks]
    for ch, res in zip(chunks, pool.map(_worker_expand, payloads)):
        for (_, _, node), succ in zip(ch, res):
            yield node, succ


def _path(parents, node: int) -> list[Action]:
    out = []
    while node > 0:
        node, act = parents[node]
        out.append(act)
    out.reverse()
    return out


def _iddfs(ctx: _Ctx, st0: TokenState, kb0: frozenset):
    cfg = ctx.cfg
    leak = leaked_goal(st0, kb0, ctx.goals(st0))
    if leak is not None:
        return Attack((), leak, 0, 1)
    explored = 0
    visited: dict[bytes, int] = {}
    for limit in range(1, cfg.max_depth + 1):
        visited = {ctx.fingerprint(st0, kb0): limit}
        path: list[Action] = []

        def dfs(st: TokenState, kb: frozenset, remaining: int):
            nonlocal explored
            last = remaining == 1
            expanded = _expand(ctx, st, kb, last)
            if isinstance(expanded, int):
                explored += expanded
                return None
            for _, act, st2, kb2, leak in expanded:
                explored += 1
                if leak is not None:
                    return path + [act], leak
                if last:
                    continue
                fp = ctx.fingerprint(st2, kb2)
                if visited.get(fp, -1) >= remaining - 1:
                    continue
                visited[fp] = remaining - 1
                if len(visited) > cfg.state_cap:
                    raise BudgetExceeded(cfg.state_cap, explored)
                path.append(act)
                found = dfs(st2, kb2, remaining - 1)
                path.pop()
                if found:
                    return found
            return None

        found = dfs(st0, kb0, limit)
        if found:
            acts, leak = found
            return Attack(tuple(build_trace(st0, kb0, acts)), leak, explored, len(visited))
    return Exhausted(cfg.max_depth, explored, len(visited))


# -- traces ------------------------------------------------------------------


def build_trace(st: TokenState, kb: frozenset, actions: Sequence[Action]) -> list[TraceStep]:
    """Execute ``actions`` and record them with output bindings.

    Term arguments equal to an earlier output are written as that output's
    binding (``c1``); handles are written by id.
    """
    names: dict[Term, str] = {}
    counter = itertools.count(1)
    steps = []
    for index, act in enumerate(actions, start=1):
        st2, kb2 = apply_action(st, kb, act)
        args = tuple((k, Ref(names[v]) if isinstance(v, (Name, Hash, Senc)) and v in names else v) for k, v in act.args)
        result = None
        if act.op in ("create", "import", "unwrap"):
            result = st2.handles[-1].handle
        elif act.op in ("wrap", "encrypt", "decrypt"):
            out = _last_output(st, st2, act, kb)
            result = _bind(names, out, counter)
        elif act.op == "leak":
            outs = sorted(token.leaked_hashes(st), key=str)
            result = ",".join(_bind(names, t, counter) for t in outs) or None
        steps.append(TraceStep(index, Action(act.op, act.actor, args), result))
        st, kb = st2, kb2
    return steps


def _bind(names: dict, t: Term, counter) -> str:
    name = f"c{next(counter)}"
    names.setdefault(t, name)
    return name


def _last_output(st: TokenState, st2: TokenState, act: Action, kb) -> Term:
    _, out = _apply(st, kb, act)
    return out[0]


def replay(scn: Scenario, trace: Sequence[TraceStep], cfg: SearchConfig | None = None):
    """Re-execute a trace from the scenario's initial state.

    Returns :class:`Reproduces` when every step is accepted and the final
    knowledge derives a protected key, else :class:`Fails`.
    """
    for i, step in enumerate(trace, start=1):
        if step.index != i:
            raise errors.ParseError(f"trace step {step.index} out of order (expected {i})")
    setup = prepare(scn, strict=False)
    if cfg is None:
        cfg = setup.config
    st, kb = setup.state, setup.kb
    actors = set(_actors(st, cfg))
    env: dict[str, Term] = {}
    for step in trace:
        act = step.action
        if act.actor not in actors:
            return Fails(step.index, "NotAttacker")
        args = []
        for k, v in act.args:
            if isinstance(v, Ref):
                if v.name not in env:
                    return Fails(step.index, "UnboundReference")
                v = env[v.name]
            args.append((k, v))
        concrete = Action(act.op, act.actor, tuple(args))
        try:
            st2, out = _apply(st, kb, concrete)
        except errors.TokenError as exc:
            return Fails(step.index, exc.reason)
        except GuardFailed:
            return Fails(step.index, "UnknownOperation")
        if act.op in ("create", "import", "unwrap"):
            if step.result is not None and step.result != st2.handles[-1].handle:
                return Fails(step.index, "BindingMismatch")
        elif step.result is not None:
            bound = step.result.split(",")
            if len(bound) != len(out):
                return Fails(step.index, "BindingMismatch")
            for name, t in zip(bound, out):
                env[name] = t
        if out:
            kb = extend_closed(kb, out)
        st = st2
    goals = cfg.goal_keys if cfg.goal_keys is not None else goal_keys(scn, st)
    leak = leaked_goal(st, kb, goals)
    if leak is None:
        return Fails(len(trace), "NoLeak")
    return Reproduces(leak)
