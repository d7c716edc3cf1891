import pytest

from hsmlab import errors, token
from hsmlab.terms import Hash, Name, Senc
from hsmlab.token import Attr, Mode, Origin, Role, Template

A = Attr


def users(mode=Mode.FULL, policy_on=False, conflict_guard=False):
    st = token.empty_state(mode=mode, policy_on=policy_on, conflict_guard=conflict_guard)
    for u, r in [("U1", Role.NU), ("U2", Role.NU), ("KM1", Role.KM), ("SO1", Role.SO)]:
        st = token.new_user(st, u, r)
    return st


def attrs(st, h):
    return st.handle(h).attrs


def with_attrs(st, user, h, *names):
    for a in names:
        st = token.set_attribute(st, user, h, a)
    return st


def fig1():
    st = users()
    st, a1 = token.create_key(st, "U1", Template.GENERIC, True)
    st, a2 = token.create_key(st, "U1", Template.GENERIC)
    st = with_attrs(st, "U1", a2, A.WRAP, A.DECRYPT)
    return st, a1, a2


# -- users -----------------------------------------------------------------


def test_new_user_single():
    st = token.new_user(token.empty_state(), "U1", Role.NU)
    assert st.roles == {"U1": Role.NU}


def test_duplicate_user_rejected():
    st = token.new_user(token.empty_state(), "SO1", Role.SO)
    with pytest.raises(errors.DuplicateUser):
        token.new_user(st, "SO1", Role.NU)


def test_one_user_per_role():
    st = users()
    assert {st.role_of(u) for u in ("U1", "KM1", "SO1")} == {Role.NU, Role.KM, Role.SO}


# -- key creation ----------------------------------------------------------


@pytest.mark.parametrize(
    "tmpl, expected",
    [
        (Template.GENERIC, {A.EXTRACTABLE}),
        (Template.WWT, {A.WRAP_WITH_TRUSTED, A.EXTRACTABLE}),
        (Template.NE, set()),
    ],
)
def test_create_key_templates(tmpl, expected):
    st, h = token.create_key(users(), "KM1", tmpl, True)
    assert attrs(st, h) == expected
    key = st.key_of(h)
    assert key.origin is Origin.FRESH and key.owner == "KM1" and isinstance(key.value, Name)
    assert st.handle(h).sensitive


def test_so_cannot_create_keys():
    with pytest.raises(errors.SOCannotCreateKeys):
        token.create_key(users(), "SO1", Template.GENERIC)


def test_unknown_user_cannot_create():
    with pytest.raises(errors.NotAUser):
        token.create_key(users(), "nobody", Template.GENERIC)


def test_fresh_ids_are_counters():
    st = users()
    st, h1 = token.create_key(st, "U1", Template.GENERIC)
    st, h2 = token.create_key(st, "U1", Template.GENERIC)
    assert (h1, h2) == ("h1", "h2")
    assert [k.key_id for k in st.keys] == ["k1", "k2"]


def test_fresh_ids_skip_reserved_labels():
    st = token.empty_state(reserved={"k1"})
    st = token.new_user(st, "U1", Role.NU)
    st, h = token.create_key(st, "U1", Template.GENERIC)
    assert st.key_of(h).key_id == "k2"


def test_import_key():
    st, h = token.import_key(users(), "U1", Name("kA"))
    assert attrs(st, h) == {A.EXTRACTABLE}
    assert st.key_of(h).origin is Origin.IMPORTED
    assert not st.handle(h).sensitive


def test_import_twice_gives_two_objects_with_equal_value():
    st, h1 = token.import_key(users(), "U1", Name("kA"))
    st, h2 = token.import_key(st, "U1", Name("kA"))
    assert h1 != h2
    assert st.key_of(h1).key_id != st.key_of(h2).key_id
    assert st.key_of(h1).value == st.key_of(h2).value == Name("kA")


def test_so_cannot_import():
    with pytest.raises((errors.SOCannotCreateKeys, errors.NotAUser)):
        token.import_key(users(), "SO1", Name("kA"))


# -- attributes ------------------------------------------------------------


def test_owner_sets_wrap():
    st, h = token.create_key(users(), "U1", Template.GENERIC)
    assert A.WRAP in attrs(token.set_attribute(st, "U1", h, A.WRAP), h)


def test_non_owner_cannot_set():
    st, h = token.create_key(users(), "U1", Template.GENERIC)
    with pytest.raises(errors.NotOwner):
        token.set_attribute(st, "U2", h, A.DECRYPT)


def test_so_sets_trusted_on_candidate_with_policy():
    st, h = token.create_key(users(policy_on=True), "KM1", Template.NE)
    st = token.set_attribute(st, "SO1", h, A.TRUSTED)
    assert A.TRUSTED in attrs(st, h)
    assert st.handle(h).ever_trusted


def test_only_so_sets_trusted():
    st, h = token.create_key(users(), "U1", Template.NE)
    with pytest.raises(errors.RoleForbidden):
        token.set_attribute(st, "U1", h, A.TRUSTED)


def test_so_cannot_touch_other_attributes():
    st, h = token.create_key(users(), "U1", Template.NE)
    with pytest.raises(errors.RoleForbidden):
        token.set_attribute(st, "SO1", h, A.WRAP)
    with pytest.raises(errors.RoleForbidden):
        token.unset_attribute(st, "SO1", h, A.WRAP)


def test_extractable_cannot_be_set():
    st, h = token.create_key(users(), "U1", Template.NE)
    with pytest.raises(errors.AttributeImmutable):
        token.set_attribute(st, "U1", h, A.EXTRACTABLE)


def test_unset_extractable_is_permanent():
    st, h = token.create_key(users(), "U1", Template.GENERIC)
    st = token.unset_attribute(st, "U1", h, A.EXTRACTABLE)
    assert A.EXTRACTABLE not in attrs(st, h)
    with pytest.raises(errors.AttributeImmutable):
        token.set_attribute(st, "U1", h, A.EXTRACTABLE)


def test_wwt_cannot_be_unset():
    st, h = token.create_key(users(), "U1", Template.WWT)
    with pytest.raises(errors.AttributeImmutable):
        token.unset_attribute(st, "U1", h, A.WRAP_WITH_TRUSTED)


def test_owner_may_set_wwt_later():
    st, h = token.create_key(users(), "U1", Template.GENERIC)
    assert A.WRAP_WITH_TRUSTED in attrs(token.set_attribute(st, "U1", h, A.WRAP_WITH_TRUSTED), h)


def test_so_unsets_trusted():
    st, h = token.create_key(users(), "KM1", Template.NE)
    st = token.set_attribute(st, "SO1", h, A.TRUSTED)
    st = token.unset_attribute(st, "SO1", h, A.TRUSTED)
    assert A.TRUSTED not in attrs(st, h)
    assert st.handle(h).ever_trusted


def test_failed_guard_leaves_state_unchanged():
    st, h = token.create_key(users(), "U1", Template.GENERIC)
    before = st
    with pytest.raises(errors.NotOwner):
        token.set_attribute(st, "U2", h, A.WRAP)
    assert st == before


def test_unknown_handle():
    with pytest.raises(errors.UnknownHandle):
        token.set_attribute(users(), "U1", "h9", A.WRAP)


def test_conflict_guard_blocks_wrap_and_decrypt():
    st, h = token.create_key(users(conflict_guard=True), "U1", Template.GENERIC)
    st = token.set_attribute(st, "U1", h, A.WRAP)
    with pytest.raises(errors.ConflictingRoles):
        token.set_attribute(st, "U1", h, A.DECRYPT)
    # unset first, then the other role is allowed
    st = token.unset_attribute(st, "U1", h, A.WRAP)
    assert A.DECRYPT in attrs(token.set_attribute(st, "U1", h, A.DECRYPT), h)


def test_km_policy_limits_candidate_roles():
    st, h = token.create_key(users(policy_on=True), "KM1", Template.NE)
    st = token.set_attribute(st, "KM1", h, A.WRAP)
    with pytest.raises(errors.PolicyViolation) as exc:
        token.set_attribute(st, "KM1", h, A.DECRYPT)
    assert exc.value.rule == "R3"


def test_trusted_on_nu_generic_key_refused_under_policy():
    st, h = token.create_key(users(policy_on=True), "U1", Template.GENERIC)
    with pytest.raises(errors.PolicyViolation) as exc:
        token.set_attribute(st, "SO1", h, A.TRUSTED)
    assert exc.value.rule == "R2"


# -- wrap / unwrap -----------------------------------------------------------


def test_fig1_wrap_then_decrypt():
    st, a1, a2 = fig1()
    st, c = token.wrap(st, "U1", a1, a2)
    assert c == Senc(Name("k1"), Hash(Name("k2")))
    assert c in st.emitted
    st, k = token.decrypt(st, "U1", c, a2)
    assert k == Name("k1")
    assert k in st.emitted


def test_wrap_needs_extractable_target():
    st, a1, a2 = fig1()
    st = token.unset_attribute(st, "U1", a1, A.EXTRACTABLE)
    with pytest.raises(errors.NotExtractable):
        token.wrap(st, "U1", a1, a2)


def test_wrap_needs_wrap_key():
    st, a1, a2 = fig1()
    with pytest.raises(errors.NotWrapKey):
        token.wrap(st, "U1", a2, a1)


def test_wwt_key_needs_trusted_wrapper():
    st = users()
    st, w = token.create_key(st, "U1", Template.WWT)
    st, k = token.create_key(st, "U1", Template.GENERIC)
    st = token.set_attribute(st, "U1", k, A.WRAP)
    with pytest.raises(errors.TrustedRequired):
        token.wrap(st, "U1", w, k)


def test_wwt_key_wraps_under_trusted_key():
    st = users()
    st, w = token.create_key(st, "U1", Template.WWT)
    st, t = token.create_key(st, "KM1", Template.NE)
    st = token.set_attribute(st, "KM1", t, A.WRAP)
    st = token.set_attribute(st, "SO1", t, A.TRUSTED)
    st, c = token.wrap(st, "U2", w, t)
    assert c == Senc(st.key_of(w).value, Hash(st.key_of(t).value))


def test_so_has_no_api_access():
    st, a1, a2 = fig1()
    with pytest.raises(errors.RoleForbidden):
        token.wrap(st, "SO1", a1, a2)


def test_encrypt_then_unwrap_imports_known_key():
    st = users()
    st, a2 = token.create_key(st, "U1", Template.GENERIC)
    st = with_attrs(st, "U1", a2, A.ENCRYPT, A.UNWRAP)
    st, c = token.encrypt(st, "U1", Name("kA"), a2)
    assert c == Senc(Name("kA"), Hash(st.key_of(a2).value))
    st, a3 = token.unwrap(st, "U1", c, a2, {A.WRAP})
    assert attrs(st, a3) == {A.WRAP}
    key = st.key_of(a3)
    assert key.value == Name("kA") and key.origin is Origin.UNWRAPPED and key.owner == "U1"


def test_trusted_unwrap_overrides_template():
    st = users()
    st, t = token.create_key(st, "KM1", Template.NE)
    st = with_attrs(st, "KM1", t, A.WRAP, A.UNWRAP)
    st = token.set_attribute(st, "SO1", t, A.TRUSTED)
    st, w = token.create_key(st, "U1", Template.WWT)
    st, c = token.wrap(st, "U1", w, t)
    st, h = token.unwrap(st, "U1", c, t, {A.DECRYPT})
    assert attrs(st, h) == {A.WRAP_WITH_TRUSTED, A.EXTRACTABLE}


def test_unwrap_rejects_wrong_key():
    st = users()
    st, a2 = token.create_key(st, "U1", Template.GENERIC)
    st = token.set_attribute(st, "U1", a2, A.UNWRAP)
    with pytest.raises(errors.MalformedCiphertext):
        token.unwrap(st, "U1", Senc(Name("p"), Hash(Name("k3"))), a2, set())
    with pytest.raises(errors.MalformedCiphertext):
        token.unwrap(st, "U1", Name("p"), a2, set())


def test_unwrap_needs_unwrap_attribute():
    st = users()
    st, a2 = token.create_key(st, "U1", Template.GENERIC)
    with pytest.raises(errors.NotUnwrapKey):
        token.unwrap(st, "U1", Senc(Name("p"), Hash(st.key_of(a2).value)), a2, set())


def test_untrusted_unwrap_cannot_grant_trusted():
    st = users()
    st, a2 = token.create_key(st, "U1", Template.GENERIC)
    st = token.set_attribute(st, "U1", a2, A.UNWRAP)
    with pytest.raises(errors.RoleForbidden):
        token.unwrap(st, "U1", Senc(Name("p"), Hash(st.key_of(a2).value)), a2, {A.TRUSTED})


# -- encrypt / decrypt / leaks -------------------------------------------------


def test_encrypt_requires_attribute():
    st, a1, _ = fig1()
    with pytest.raises(errors.NotEncryptKey):
        token.encrypt(st, "U1", Name("m"), a1)


def test_decrypt_guards():
    st, a1, a2 = fig1()
    st, c = token.wrap(st, "U1", a1, a2)
    with pytest.raises(errors.NotDecryptKey):
        token.decrypt(st, "U1", c, a1)
    st, a3 = token.create_key(st, "U1", Template.GENERIC)
    st = token.set_attribute(st, "U1", a3, A.DECRYPT)
    with pytest.raises(errors.MalformedCiphertext):
        token.decrypt(st, "U1", c, a3)


def test_paper_mode_disables_encrypt_and_decrypt():
    st = users(mode=Mode.PAPER)
    st, h = token.create_key(st, "U1", Template.GENERIC)
    st = with_attrs(st, "U1", h, A.ENCRYPT, A.DECRYPT)
    with pytest.raises(errors.ModeForbidden):
        token.encrypt(st, "U1", Name("m"), h)
    with pytest.raises(errors.ModeForbidden):
        token.decrypt(st, "U1", Senc(Name("m"), Hash(st.key_of(h).value)), h)


def test_emit_leaks_rules():
    st = users(mode=Mode.PAPER)
    st, dec = token.create_key(st, "U1", Template.NE)
    st = token.set_attribute(st, "U1", dec, A.DECRYPT)
    st, ext = token.create_key(st, "U1", Template.GENERIC)
    st, wwt = token.create_key(st, "U1", Template.WWT)
    st, quiet = token.create_key(st, "U1", Template.NE)
    st2, out = token.emit_leaks(st)
    assert out == {Hash(st.key_of(dec).value), Hash(st.key_of(ext).value)}
    assert out <= st2.emitted
    # idempotent on a fixed state
    assert token.emit_leaks(st2)[1] == out
    assert token.emit_leaks(st2)[0] == st2


def test_emit_leaks_full_mode_forbidden():
    with pytest.raises(errors.ModeForbidden):
        token.emit_leaks(users())


def test_error_reason_is_class_name():
    assert errors.NotOwner("x").reason == "NotOwner"
