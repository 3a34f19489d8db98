from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundplan.gateway import (
    BackendUnavailable,
    CHOICE_NONE,
    CHOICE_REFUSAL,
    CallableBackend,
    ChatRequest,
    FormatFailure,
    ResponseParseError,
    ScriptedBackend,
    ScriptRule,
    TransportError,
    complete,
    parse_choice,
    parse_plan,
    parse_proposal,
    render_request,
    tools_choice_key,
)


class _Roles:
    def __init__(self, supports):
        self.id = "roles"
        self.supports_system_role = supports


def test_render_request_with_system_role():
    messages = render_request(_Roles(True), "be brief", "do the thing")
    assert messages == [
        {"role": "system", "content": "be brief"},
        {"role": "user", "content": "do the thing"},
    ]


def test_render_request_prefixes_when_no_system_role():
    messages = render_request(_Roles(False), "be brief", "do the thing")
    assert messages == [{"role": "user", "content": "be brief\n\ndo the thing"}]


def test_render_request_empty_instruction():
    for supports in (True, False):
        messages = render_request(_Roles(supports), "", "just this")
        assert messages == [{"role": "user", "content": "just this"}]


def test_chat_request_invariants():
    with pytest.raises(ValueError):
        ChatRequest("i", "u", max_retries=0)
    with pytest.raises(ValueError):
        ChatRequest("i", "u", temperature=-0.1)
    assert ChatRequest("i", "u").temperature == 1.0
    assert ChatRequest("i", "u").max_retries == 5


def test_scripted_backend_first_match_and_fallback():
    backend = ScriptedBackend(
        rules=[
            ScriptRule(responses=["alpha"], contains="first cue"),
            ScriptRule(responses=["beta"], regex=r"cue\s+two"),
        ],
        fallback="dunno",
    )
    send = lambda text: backend.send([{"role": "user", "content": text}], 1.0)
    assert send("has first cue inside") == "alpha"
    assert send("has cue  two inside") == "beta"
    assert send("nothing matches") == "dunno"
    assert backend.calls == 3


def test_scripted_backend_consumes_then_repeats_last():
    backend = ScriptedBackend(rules=[ScriptRule(responses=["a", "b"], contains="x")])
    send = lambda: backend.send([{"role": "user", "content": "x"}], 1.0)
    assert [send(), send(), send()] == ["a", "b", "b"]


def test_scripted_backend_replay_determinism():
    spec = {"rules": [{"contains": "x", "responses": ["a", "b", "c"]}], "fallback": "f"}
    outs = []
    for _ in range(2):
        backend = ScriptedBackend.from_dict(spec)
        outs.append(
            [backend.send([{"role": "user", "content": t}], 1.0) for t in ("x", "y", "x", "x")]
        )
    assert outs[0] == outs[1] == ["a", "f", "b", "c"]


def _request(validator=parse_plan, max_retries=5):
    return ChatRequest("sys", "make a plan", max_retries=max_retries, validator=validator)


def test_complete_first_attempt():
    backend = ScriptedBackend(rules=[ScriptRule(responses=["1. a\n2. b"], contains="plan")])
    result = complete(backend, _request())
    assert result.parsed == ["a", "b"]
    assert result.attempts == 1


def test_complete_four_failures_then_success():
    responses = ["junk one", "junk two", "junk three", "junk four", "1. a"]
    backend = ScriptedBackend(rules=[ScriptRule(responses=responses, contains="plan")])
    result = complete(backend, _request())
    assert result.attempts == 5
    assert result.parsed == ["a"]
    assert list(result.attempt_texts) == responses
    assert backend.calls == 5


def test_complete_five_failures_is_format_failure():
    backend = ScriptedBackend(rules=[ScriptRule(responses=["junk"], contains="plan")])
    with pytest.raises(FormatFailure) as exc_info:
        complete(backend, _request())
    assert exc_info.value.attempts == 5
    assert exc_info.value.last_raw == "junk"
    assert backend.calls == 5


class _Flaky:
    def __init__(self, fail_times, payload="1. a"):
        self.id = "flaky"
        self.supports_system_role = True
        self.fail_times = fail_times
        self.sends = 0
        self.payload = payload

    def send(self, messages, temperature):
        self.sends += 1
        if self.sends <= self.fail_times:
            raise TransportError("connection reset")
        return self.payload


def test_transport_retries_recover():
    backend = _Flaky(fail_times=2)
    result = complete(backend, _request(), sleep=lambda s: None)
    assert result.attempts == 1
    assert backend.sends == 3


def test_transport_budget_exhausted_raises_backend_unavailable():
    backend = _Flaky(fail_times=99)
    with pytest.raises(BackendUnavailable):
        complete(backend, _request(), sleep=lambda s: None)


def test_parse_plan_numbered():
    assert parse_plan("1. a\n2. b") == ["a", "b"]
    assert parse_plan("1) a\n2) b") == ["a", "b"]
    assert parse_plan("- a\n* b") == ["a", "b"]


def test_parse_plan_ignores_prose_preamble():
    corpus = [
        ("Sure! Here is the plan:\n1. a", ["a"]),
        ("Of course. The steps are:\n\n1. gather the tools\n2. clear the weeds\nGood luck!",
         ["gather the tools", "clear the weeds"]),
        ("Plan:\n  1. first thing\n  2) second thing\nThat should do it.",
         ["first thing", "second thing"]),
        ("- only bullet", ["only bullet"]),
    ]
    for text, expected in corpus:
        assert parse_plan(text) == expected


def test_parse_plan_rejects_no_steps():
    with pytest.raises(ResponseParseError):
        parse_plan("no steps here")
    with pytest.raises(ResponseParseError):
        parse_plan("")


@settings(max_examples=40, deadline=None)
@given(
    st.lists(
        st.text(
            alphabet=st.characters(whitelist_categories=("Lu", "Ll", "Nd"), whitelist_characters=" ,"),
            min_size=1,
            max_size=30,
        ).filter(lambda s: s.strip()),
        min_size=1,
        max_size=8,
    )
)
def test_parse_plan_round_trips_rendered_lists(steps):
    steps = [s.strip() for s in steps]
    rendered = "\n".join(f"{i + 1}. {s}" for i, s in enumerate(steps))
    assert parse_plan(rendered) == steps


def test_parse_proposal_step_and_stop_token():
    assert parse_proposal("mix the batter") == "mix the batter"
    assert parse_proposal("1. mix the batter\n2. rest the dough") == "mix the batter"
    assert parse_proposal("None") is None
    assert parse_proposal(" none. ") is None
    with pytest.raises(ResponseParseError):
        parse_proposal("  \n ")


CANDS = ["set up a brooder", "feed the chicks", "warm the lamp", "add bedding", "close the door"]


def test_parse_choice_lone_index_is_zero_based():
    assert parse_choice("2", CANDS).index == 1
    assert parse_choice(" (3) ", CANDS).index == 2
    assert parse_choice("4.", CANDS).index == 3


def test_parse_choice_index_out_of_range():
    with pytest.raises(ResponseParseError):
        parse_choice("6", CANDS)
    with pytest.raises(ResponseParseError):
        parse_choice("0", CANDS)


def test_parse_choice_none_and_refusal_tokens():
    assert parse_choice("None", CANDS) is CHOICE_NONE
    assert parse_choice("none.", CANDS) is CHOICE_NONE
    assert parse_choice("Refuse", CANDS) is CHOICE_REFUSAL


def test_parse_choice_verbatim_candidate():
    assert parse_choice("Feed the chicks.", CANDS).index == 1
    assert parse_choice("The next step is: warm the lamp", CANDS).index == 2


def test_parse_choice_ambiguous_is_parse_error():
    text = "set up a brooder and then feed the chicks"
    with pytest.raises(ResponseParseError):
        parse_choice(text, CANDS)


def test_parse_choice_unrecognized_is_parse_error():
    with pytest.raises(ResponseParseError):
        parse_choice("do a backflip", CANDS)


def test_parse_choice_requires_candidates():
    with pytest.raises(ValueError):
        parse_choice("1", [])


def test_parse_choice_tools_key_accepts_bare_name():
    tools = [
        "SearchEngine DESCRIPTION: search the web",
        "ImageWriter DESCRIPTION: write images",
    ]
    choice = parse_choice("SearchEngine", tools, key=tools_choice_key)
    assert choice.index == 0
    choice = parse_choice("ImageWriter DESCRIPTION: whatever text", tools, key=tools_choice_key)
    assert choice.index == 1


def test_callable_backend_counts_calls():
    backend = CallableBackend(lambda messages: "1. ok")
    result = complete(backend, _request())
    assert result.parsed == ["ok"]
    assert backend.calls == 1
