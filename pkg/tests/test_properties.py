"""Randomized invariants, each checked on at least ten thousand cases."""

from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as hst

from gen import attr_timeline, execute, steps
from hsmlab.scenario import Action, Ref, TraceStep, format_trace, parse_scenario, parse_trace
from hsmlab.search import Attack, Reproduces, SearchConfig, explore, replay
from hsmlab.terms import Hash, Name, Senc, close_knowledge, derives
from hsmlab.token import UNWRAP_TEMPLATE_ATTRS, Attr, Role, Template
from oracles import brute_derives

CASES = 10_000
many = settings(max_examples=CASES, deadline=None, suppress_health_check=list(HealthCheck))

policy = hst.booleans()


@many
@given(steps, policy)
def test_extractable_never_regained_and_wwt_never_lost(raw, policy_on):
    run = execute(raw, policy_on)
    for r in run.final.handles:
        ext = attr_timeline(run, r.handle, Attr.EXTRACTABLE)
        wwt = attr_timeline(run, r.handle, Attr.WRAP_WITH_TRUSTED)
        assert all(a or not b for a, b in zip(ext, ext[1:]))
        assert all(b or not a for a, b in zip(wwt, wwt[1:]))


@many
@given(steps, policy)
def test_only_the_so_toggles_trusted(raw, policy_on):
    run = execute(raw, policy_on)
    for e in run.events:
        if not e.ok or e.op not in ("set", "unset"):
            continue
        was = Attr.TRUSTED in e.before.handle(e.handle).attrs
        now = Attr.TRUSTED in e.after.handle(e.handle).attrs
        if was != now:
            assert e.after.role_of(e.user) is Role.SO
    # no other operation touches trusted on an existing handle
    for e in run.events:
        if e.ok and e.op not in ("set", "unset"):
            for r in e.before.handles:
                assert (Attr.TRUSTED in r.attrs) == (Attr.TRUSTED in e.after.handle(r.handle).attrs)


@many
@given(steps, policy)
def test_only_owners_change_other_attributes(raw, policy_on):
    run = execute(raw, policy_on)
    for e in run.events:
        if e.ok and e.op in ("set", "unset") and e.attr is not Attr.TRUSTED:
            assert e.before.key_of(e.handle).owner == e.user


names = hst.sampled_from([Name(x) for x in "abcd"])
terms = hst.recursive(
    names,
    lambda inner: hst.one_of(hst.builds(Hash, inner), hst.builds(Senc, inner, inner)),
    max_leaves=5,
)
kbs = hst.frozensets(terms, max_size=8)


@many
@given(kbs, kbs)
def test_closure_is_idempotent_and_monotone(k1, k2):
    c1 = close_knowledge(k1)
    assert close_knowledge(c1) == c1
    assert k1 <= c1
    assert c1 <= close_knowledge(k1 | k2)


@many
@given(kbs, terms)
def test_derives_agrees_with_brute_force(kb, t):
    assert derives(kb, t) == brute_derives(kb, t)


handle_ids = hst.integers(1, 12).map(lambda i: f"h{i}")
term_args = hst.one_of(terms, hst.integers(1, 9).map(lambda i: Ref(f"c{i}")))
attr_lists = hst.sets(hst.sampled_from(sorted(UNWRAP_TEMPLATE_ATTRS, key=lambda a: a.value))).map(
    lambda s: tuple(sorted(s, key=lambda a: a.value))
)
cts = hst.integers(1, 9).map(lambda i: f"c{i}")
handle_out = hst.integers(1, 12).map(lambda i: f"h{i}")
actors = hst.sampled_from(["U1", "U2", "KM1", "SO1"])


def _action(op, **kinds):
    return hst.builds(lambda actor, *vals: Action(op, actor, tuple(zip(kinds, vals))), actors, *kinds.values())


ops = hst.one_of(
    hst.tuples(_action("create", template=hst.sampled_from(list(Template))), handle_out),
    hst.tuples(_action("import", value=term_args), handle_out),
    hst.tuples(_action("set", handle=handle_ids, attr=hst.sampled_from(list(Attr))), hst.none()),
    hst.tuples(_action("unset", handle=handle_ids, attr=hst.sampled_from(list(Attr))), hst.none()),
    hst.tuples(_action("wrap", target=handle_ids, wrapper=handle_ids), cts),
    hst.tuples(_action("unwrap", ct=term_args, wrapper=handle_ids, template=attr_lists), handle_out),
    hst.tuples(_action("encrypt", data=term_args, key=handle_ids), cts),
    hst.tuples(_action("decrypt", ct=term_args, key=handle_ids), cts),
    hst.tuples(_action("leak"), hst.one_of(hst.none(), hst.lists(cts, min_size=1, max_size=3).map(",".join))),
)


@many
@given(hst.lists(ops, max_size=8))
def test_trace_text_round_trips(items):
    trace = [TraceStep(i, act, res) for i, (act, res) in enumerate(items, start=1)]
    text = format_trace(trace)
    assert parse_trace(text) == trace
    assert format_trace(parse_trace(text)) == text


key_lines = hst.lists(
    hst.tuples(
        hst.sampled_from(["U1", "U2"]),
        hst.sampled_from(["generic", "ne", "wwt"]),
        hst.sets(hst.sampled_from(["wrap", "unwrap", "encrypt", "decrypt"])),
        hst.booleans(),
    ),
    min_size=1,
    max_size=3,
)


def tiny_scenario(keys, know, mode):
    lines = ["user U1 NU compromised", "user U2 NU"]
    for i, (owner, tmpl, attrs, sensitive) in enumerate(keys, start=1):
        line = f"key k{i} owner={owner} template={tmpl}"
        if attrs:
            line += " attrs=" + ",".join(sorted(attrs))
        if sensitive:
            line += " sensitive"
        lines.append(line)
    if know:
        lines.append("know name:kA")
    lines += [f"mode {mode}", "policy off", "depth 2"]
    return parse_scenario("\n".join(lines) + "\n")


@many
@given(key_lines, hst.booleans(), hst.sampled_from(["full", "paper"]))
def test_replay_reproduces_every_found_attack(keys, know, mode):
    scn = tiny_scenario(keys, know, mode)
    res = explore(scn, SearchConfig(2, scn.attackers))
    if isinstance(res, Attack):
        assert replay(scn, res.trace) == Reproduces(res.leaked_key)
        assert replay(scn, parse_trace(format_trace(res.trace))) == Reproduces(res.leaked_key)
