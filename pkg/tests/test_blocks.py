import pytest

from odapipe.blocks import (ConfigError, ConfigBlock, ExpressionError, Selector,
                            apply_defaults, collect_defaults, glob_to_regex,
                            parse_config, parse_sensor_expression,
                            reject_unknown_keys, resolve_units)
from odapipe.core import parse_topic

T = parse_topic


class TestSensorExpression:
    def test_topdown_filter_suffix(self):
        e = parse_sensor_expression("<topdown 3, filter cm/s../socket>temp-p")
        assert e.selectors == (Selector("topdown", n=3),
                               Selector("filter", pattern="cm/s../socket"))
        assert e.suffix == "temp-p"

    def test_single_topdown(self):
        e = parse_sensor_expression("<topdown 1>power")
        assert e.selectors == (Selector("topdown", n=1),)
        assert e.suffix == "power"

    def test_bottomup(self):
        e = parse_sensor_expression("<bottomup 2>x")
        assert e.selectors == (Selector("bottomup", n=2),)

    def test_empty_pattern_rejected(self):
        with pytest.raises(ExpressionError, match="empty pattern"):
            parse_sensor_expression("<filter >x")

    def test_missing_close_angle(self):
        with pytest.raises(ExpressionError, match="missing '>'"):
            parse_sensor_expression("<topdown 1 x")

    def test_unknown_selector_named_with_offset(self):
        with pytest.raises(ExpressionError, match="unknown selector 'sideways' at offset 1"):
            parse_sensor_expression("<sideways 2>x")

    def test_non_integer_count(self):
        with pytest.raises(ExpressionError, match="positive integer"):
            parse_sensor_expression("<topdown x>y")

    def test_empty_suffix(self):
        with pytest.raises(ExpressionError, match="empty sensor suffix"):
            parse_sensor_expression("<topdown 1>")

    def test_str_roundtrip(self):
        text = "<topdown 3, filter cm/s../socket>temp-p"
        assert str(parse_sensor_expression(text)) == text


class TestGlob:
    def test_dot_matches_exactly_one_char(self):
        rx = glob_to_regex("s..")
        assert rx.match("s01")
        assert not rx.match("s1")
        assert not rx.match("s012")

    def test_star_never_crosses_slash(self):
        rx = glob_to_regex("cm/*/socket")
        assert rx.match("cm/n01/socket")
        assert not rx.match("cm/n01/extra/socket")

    def test_literal_specials_escaped(self):
        rx = glob_to_regex("a+b")
        assert rx.match("a+b")
        assert not rx.match("aab")


def inventory(*texts):
    return [T(t) for t in texts]


class TestResolveUnits:
    def test_fig_style_template_selects_only_matching_sensor(self):
        inv = inventory("/dc1/cm/s01/socket/temp-p", "/dc1/cm/s01/socket/power")
        got = resolve_units(parse_sensor_expression("<topdown 3, filter cm/s../socket>temp-p"),
                            "/dc1", inv)
        assert [str(t) for t in got] == ["/dc1/cm/s01/socket/temp-p"]

    def test_distractors_excluded(self):
        inv = inventory(
            "/dc1/cm/s01/socket/temp-p",
            "/dc1/cm/s02/socket/temp-p",
            "/dc1/cm/s02/socket/power",      # wrong suffix
            "/dc1/ax/s01/socket/temp-p",     # wrong rack
            "/dc1/cm/n001/socket/temp-p",    # node label too long for s..
            "/dc1/cm/s03/core/temp-p",       # wrong level name
            "/dc1/cm/s03/socket/extra/temp-p",  # too deep
        )
        got = resolve_units(parse_sensor_expression("<topdown 3, filter cm/s../socket>temp-p"),
                            "/dc1", inv)
        assert [str(t) for t in got] == ["/dc1/cm/s01/socket/temp-p",
                                        "/dc1/cm/s02/socket/temp-p"]

    def test_topdown_one_level(self):
        inv = inventory("/root9/a/x", "/root9/b/x", "/root9/c/y")
        got = resolve_units(parse_sensor_expression("<topdown 1>x"), "/root9", inv)
        assert [str(t) for t in got] == ["/root9/a/x", "/root9/b/x"]

    def test_no_match_returns_empty(self):
        inv = inventory("/dc1/cm/s01/socket/temp-p")
        got = resolve_units(parse_sensor_expression("<topdown 3, filter esb/*>temp-p"),
                            "/dc1", inv)
        assert got == []

    def test_bottomup_selects_sensor_parents(self):
        inv = inventory("/dc1/cm/s01/socket/temp-p", "/dc1/cm/s01/socket/power",
                        "/dc1/cm/s02/socket/temp-p")
        got = resolve_units(parse_sensor_expression("<bottomup 1>power"), "/dc1", inv)
        assert [str(t) for t in got] == ["/dc1/cm/s01/socket/power"]

    def test_deterministic_pure_function(self):
        inv = inventory("/dc1/cm/s02/socket/temp-p", "/dc1/cm/s01/socket/temp-p")
        expr = parse_sensor_expression("<topdown 3, filter cm/s../socket>temp-p")
        a = resolve_units(expr, "/dc1", inv)
        b = resolve_units(expr, "/dc1", list(reversed(inv)))
        assert a == b
        assert [str(t) for t in a] == sorted(str(t) for t in a)


CONF = """
# cooling control for the cm rack
default def1 {
  interval 60000
  window 6
}

controller c1 {
  default def1
  interval 30000
  input {
    sensor "<topdown 3, filter cm/s../socket>temp-p" {
      hotThreshold  73000
      critThreshold 93000
    }
  }
}
"""


class TestConfigGrammar:
    def test_parse_nested_blocks(self):
        blocks = parse_config(CONF)
        assert [b.kind for b in blocks] == ["default", "controller"]
        c1 = blocks[1]
        assert c1.name == "c1"
        sensors = c1.blocks("input")[0].blocks("sensor")
        assert sensors[0].name == "<topdown 3, filter cm/s../socket>temp-p"
        assert sensors[0].get("hotThreshold") == 73000
        assert sensors[0].get("critThreshold") == 93000

    def test_default_block_supplies_missing_keys(self):
        blocks = parse_config(CONF)
        defaults = collect_defaults(blocks)
        kv = apply_defaults(blocks[1], defaults)
        assert kv["interval"] == 30000   # own key wins
        assert kv["window"] == 6         # inherited

    def test_unknown_default_is_error(self):
        blocks = parse_config("controller c1 { default nope }")
        with pytest.raises(ConfigError, match="unknown default block 'nope'"):
            apply_defaults(blocks[0], {})

    def test_unbalanced_brace(self):
        with pytest.raises(ConfigError, match="unbalanced"):
            parse_config("a b { c 1 ")

    def test_dangling_value(self):
        with pytest.raises(ConfigError, match="no value"):
            parse_config("a b { c }")

    def test_quoted_strings_and_ints(self):
        blocks = parse_config('x y { path "/tmp/a b.csv" n -3 rate 0.5 }')
        kv = blocks[0].kv()
        assert kv["path"] == "/tmp/a b.csv"
        assert kv["n"] == -3
        assert kv["rate"] == 0.5

    def test_comments_ignored(self):
        blocks = parse_config("a b { # k gone\n k 1 }")
        assert blocks[0].kv() == {"k": 1}

    def test_unknown_keys_rejected(self):
        blocks = parse_config("a b { good 1 bad 2 }")
        with pytest.raises(ConfigError, match="unknown key 'bad'"):
            reject_unknown_keys(blocks[0], {"good"})

    def test_unknown_nested_block_rejected(self):
        blocks = parse_config("a b { sub { } }")
        with pytest.raises(ConfigError, match="unknown nested block 'sub'"):
            reject_unknown_keys(blocks[0], set(), set())

    def test_error_carries_line_number(self):
        with pytest.raises(ConfigError, match=":3:"):
            parse_config("a b {\n k 1\n }}")
