import json

import pytest

from canarylab.program import (
    CallOp,
    ProgramError,
    ReturnOp,
    WriteOp,
    assign_function_id,
    parse_program,
    serialize_program,
)
from tests.conftest import DATA_DIR, corpus_program

MINIMAL = json.dumps({
    "entry": "f",
    "functions": [{"name": "f", "locals": [], "body": [{"op": "return"}]}],
})


def test_parse_minimal():
    prog = parse_program(MINIMAL)
    assert prog.entry == "f"
    assert list(prog.functions) == ["f"]
    assert prog.functions["f"].locals == ()
    assert prog.functions["f"].body == (ReturnOp(),)


def test_locals_preserve_declaration_order():
    text = json.dumps({
        "entry": "f",
        "functions": [{
            "name": "f",
            "locals": [
                {"name": "buf", "kind": "buffer", "size": 16},
                {"name": "x", "kind": "scalar", "size": 8},
            ],
            "body": [{"op": "return"}],
        }],
    })
    fn = parse_program(text).functions["f"]
    assert [lv.name for lv in fn.locals] == ["buf", "x"]
    assert fn.locals[0].is_array and not fn.locals[1].is_array


def test_unresolved_call_target_names_function():
    text = json.dumps({
        "entry": "f",
        "functions": [{"name": "f", "locals": [],
                       "body": [{"op": "call", "target": "g"},
                                {"op": "return"}]}],
    })
    with pytest.raises(ProgramError, match="'g'"):
        parse_program(text)


def test_syntax_error_carries_position():
    with pytest.raises(ProgramError, match="line 1"):
        parse_program("{nope")


@pytest.mark.parametrize("mutation,match", [
    ({"entry": "x"}, "entry"),
    ({"bogus": 1}, "unknown key"),
])
def test_top_level_errors(mutation, match):
    base = json.loads(MINIMAL)
    base.update(mutation)
    with pytest.raises(ProgramError, match=match):
        parse_program(json.dumps(base))


def test_duplicate_local_rejected():
    text = json.dumps({
        "entry": "f",
        "functions": [{
            "name": "f",
            "locals": [{"name": "a", "kind": "scalar", "size": 8},
                       {"name": "a", "kind": "scalar", "size": 8}],
            "body": [{"op": "return"}],
        }],
    })
    with pytest.raises(ProgramError, match="duplicate local"):
        parse_program(text)


def test_dynamic_size_rejected_with_dedicated_error():
    text = json.dumps({
        "entry": "f",
        "functions": [{
            "name": "f",
            "locals": [{"name": "a", "kind": "buffer", "size": "dynamic"}],
            "body": [{"op": "return"}],
        }],
    })
    with pytest.raises(ProgramError, match="dynamic"):
        parse_program(text)


def test_scalar_size_must_be_eight():
    text = json.dumps({
        "entry": "f",
        "functions": [{
            "name": "f",
            "locals": [{"name": "a", "kind": "scalar", "size": 16}],
            "body": [{"op": "return"}],
        }],
    })
    with pytest.raises(ProgramError, match="size 8"):
        parse_program(text)


def test_unknown_local_key_rejected():
    text = json.dumps({
        "entry": "f",
        "functions": [{
            "name": "f",
            "locals": [{"name": "a", "kind": "scalar", "size": 8,
                        "alignment": 4}],
            "body": [{"op": "return"}],
        }],
    })
    with pytest.raises(ProgramError, match="unknown key"):
        parse_program(text)


def test_explicit_function_id_respected_and_bounded():
    text = json.dumps({
        "entry": "f",
        "functions": [{"name": "f", "function_id": 7, "locals": [],
                       "body": [{"op": "return"}]}],
    })
    assert parse_program(text).functions["f"].function_id == 7
    bad = text.replace('"function_id": 7', '"function_id": 70000')
    with pytest.raises(ProgramError, match="16 bits"):
        parse_program(bad)


def test_write_op_parsed():
    text = json.dumps({
        "entry": "f",
        "functions": [{
            "name": "f",
            "locals": [{"name": "a", "kind": "buffer", "size": 8}],
            "body": [{"op": "write", "target": "a", "offset": 2,
                      "bytes": "cafe"}, {"op": "return"}],
        }],
    })
    fn = parse_program(text).functions["f"]
    assert fn.body[0] == WriteOp(target="a", offset=2, data=b"\xca\xfe")


class TestFunctionId:
    def test_deterministic(self):
        assert assign_function_id("main") == assign_function_id("main")

    def test_empty_name_defined(self):
        assert 0 <= assign_function_id("") < 1 << 16

    def test_frozen_fixture(self):
        for line in (DATA_DIR / "function_ids.txt").read_text().splitlines():
            if line.startswith("#"):
                continue
            name_repr, fid = line.rsplit(" ", 1)
            name = eval(name_repr)  # fixture rows are repr'd names
            assert assign_function_id(name) == int(fid)

    def test_injective_on_corpus(self):
        names = set()
        for fname in ("demo.json", "twobuf.json", "chain.json",
                      "single.json", "overflow_demo.json"):
            names.update(corpus_program(fname).functions)
        ids = {assign_function_id(n) for n in names}
        assert len(ids) == len(names)


@pytest.mark.parametrize("fname", ["demo.json", "twobuf.json", "chain.json",
                                   "single.json", "overflow_demo.json"])
def test_parse_serialize_round_trip(fname):
    prog = corpus_program(fname)
    again = parse_program(serialize_program(prog))
    assert again == prog


def test_call_op_equality():
    assert CallOp("g") == CallOp("g")
