"""Sensor-expression templates and the block-structured config grammar.

Sensor expressions select sets of sensors from the topic tree, e.g.::

    <topdown 3, filter cm/s../socket>temp-p

navigates three levels down from the root, keeps nodes whose relative path
matches the glob (``.`` matches one character, ``*`` any run, ``/`` is never
matched implicitly), then appends the sensor name.

Config files are nested blocks: ``kind name { key value ... nested { } }``
with quoted strings and bare integers. A top-level ``default <name> { }``
block can be referenced by a ``default <name>`` line inside another block
to supply missing keys.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .core import Topic

_SELECTOR_WORDS = ("topdown", "bottomup", "filter")


class ExpressionError(ValueError):
    """Sensor-expression parse failure; message carries offset and expectation."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Selector:
    kind: str               # "topdown" | "bottomup" | "filter"
    n: int = 0
    pattern: str = ""


@dataclass(frozen=True)
class SensorExpression:
    selectors: tuple[Selector, ...]
    suffix: str

    def __str__(self) -> str:
        parts = []
        for s in self.selectors:
            parts.append(f"{s.kind} {s.n}" if s.kind != "filter" else f"filter {s.pattern}")
        return "<" + ", ".join(parts) + ">" + self.suffix


def parse_sensor_expression(text: str) -> SensorExpression:
    """Parse ``'<' selector (',' selector)* '>' suffix``."""
    if not text.startswith("<"):
        raise ExpressionError("expected '<' at offset 0")
    end = text.find(">")
    if end < 0:
        raise ExpressionError(f"missing '>' before offset {len(text)}")
    suffix = text[end + 1:]
    if not suffix:
        raise ExpressionError(f"empty sensor suffix at offset {end + 1}")
    if "/" in suffix or any(c.isspace() for c in suffix):
        raise ExpressionError(f"illegal character in sensor suffix at offset {end + 1}")
    selectors: list[Selector] = []
    pos = 1
    for chunk in text[1:end].split(","):
        word = chunk.strip()
        off = pos + (len(chunk) - len(chunk.lstrip()))
        if not word:
            raise ExpressionError(f"empty selector at offset {off}")
        head, _, arg = word.partition(" ")
        arg = arg.strip()
        if head not in _SELECTOR_WORDS:
            raise ExpressionError(f"unknown selector {head!r} at offset {off}, "
                                  f"expected one of {', '.join(_SELECTOR_WORDS)}")
        if head == "filter":
            if not arg:
                raise ExpressionError(f"empty pattern at offset {off}")
            selectors.append(Selector(kind="filter", pattern=arg))
        else:
            if not arg or not arg.isdigit() or int(arg) < 1:
                raise ExpressionError(f"selector {head!r} needs a positive integer "
                                      f"at offset {off}")
            selectors.append(Selector(kind=head, n=int(arg)))
        pos += len(chunk) + 1
    return SensorExpression(selectors=tuple(selectors), suffix=suffix)


def glob_to_regex(pattern: str) -> re.Pattern:
    """Glob where '.' matches one non-'/' character and '*' any non-'/' run."""
    out = []
    for ch in pattern:
        if ch == ".":
            out.append("[^/]")
        elif ch == "*":
            out.append("[^/]*")
        else:
            out.append(re.escape(ch))
    return re.compile("".join(out) + r"\Z")


def resolve_units(expr: SensorExpression, root: Topic | str,
                  known_topics) -> list[Topic]:
    """Expand a sensor expression against the current sensor inventory.

    Pure function of (expr, inventory): the result is the lexicographically
    sorted list of known topics selected by the template. The tree nodes are
    every proper prefix of a known topic under the root. Selectors:

    * ``topdown n``  — nodes exactly n levels beneath the root
    * ``bottomup n`` — nodes exactly n levels above the sensors (leaves)
    * ``filter p``   — keep selected nodes whose root-relative path matches p

    The suffix is appended to each selected node as the final label; only
    candidates present in the inventory are returned.
    """
    root_labels = root.labels if isinstance(root, Topic) else tuple(str(root).split("/")[1:])
    depth = len(root_labels)
    inventory: list[tuple[str, ...]] = []
    for t in known_topics:
        labels = t.labels if isinstance(t, Topic) else tuple(str(t).split("/")[1:])
        if labels[:depth] == root_labels and len(labels) > depth:
            inventory.append(labels[depth:])
    nodes: set[tuple[str, ...]] = {()}
    for rel in inventory:
        for i in range(1, len(rel)):
            nodes.add(rel[:i])
    selected = set(nodes)
    for sel in expr.selectors:
        if sel.kind == "topdown":
            selected = {n for n in nodes if len(n) == sel.n}
        elif sel.kind == "bottomup":
            selected = {rel[: len(rel) - sel.n] for rel in inventory
                        if len(rel) >= sel.n}
        else:
            rx = glob_to_regex(sel.pattern)
            selected = {n for n in selected if rx.match("/".join(n))}
    known = {tuple(root_labels) + rel for rel in inventory}
    results = [Topic(tuple(root_labels) + node + (expr.suffix,))
               for node in selected
               if tuple(root_labels) + node + (expr.suffix,) in known]
    results.sort(key=str)
    return results


# --------------------------------------------------------------------------
# block-structured config grammar
# --------------------------------------------------------------------------

@dataclass
class ConfigBlock:
    kind: str
    name: str | None
    entries: list = field(default_factory=list)   # ("kv", key, value) | ("block", ConfigBlock)
    line: int = 0

    def kv(self) -> dict:
        out = {}
        for entry in self.entries:
            if entry[0] == "kv":
                out[entry[1]] = entry[2]
        return out

    def blocks(self, kind: str | None = None) -> list["ConfigBlock"]:
        out = []
        for entry in self.entries:
            if entry[0] == "block" and (kind is None or entry[1].kind == kind):
                out.append(entry[1])
        return out

    def get(self, key: str, default=None):
        for entry in self.entries:
            if entry[0] == "kv" and entry[1] == key:
                return entry[2]
        return default


_TOKEN_RE = re.compile(r'"((?:[^"\\]|\\.)*)"|([{}])|([^\s{}"]+)')


def _tokenize(text: str):
    tokens: list[tuple[str, object, int]] = []   # (type, value, line)
    line = 1
    pos = 0
    for raw_line in text.split("\n"):
        body = raw_line.split("#", 1)[0]
        for m in _TOKEN_RE.finditer(body):
            if m.group(1) is not None:
                tokens.append(("str", m.group(1).replace('\\"', '"').replace("\\\\", "\\"), line))
            elif m.group(2) is not None:
                tokens.append((m.group(2), m.group(2), line))
            else:
                word = m.group(3)
                if re.fullmatch(r"-?\d+", word):
                    tokens.append(("int", int(word), line))
                elif re.fullmatch(r"-?\d+\.\d+", word):
                    tokens.append(("float", float(word), line))
                else:
                    tokens.append(("word", word, line))
        line += 1
        pos += len(raw_line) + 1
    return tokens


def parse_config(text: str, source: str = "<config>") -> list[ConfigBlock]:
    """Parse a config file into its top-level blocks (all-or-nothing)."""
    tokens = _tokenize(text)
    pos = 0

    def err(msg: str, line: int) -> ConfigError:
        return ConfigError(f"{source}:{line}: {msg}")

    def parse_block_body(block: ConfigBlock) -> None:
        nonlocal pos
        while pos < len(tokens):
            ttype, value, line = tokens[pos]
            if ttype == "}":
                pos += 1
                return
            if ttype != "word":
                raise err(f"expected key or block kind, got {value!r}", line)
            key = value
            pos += 1
            if pos >= len(tokens):
                raise err(f"dangling key {key!r}", line)
            ntype, nvalue, nline = tokens[pos]
            if ntype == "{":
                pos += 1
                child = ConfigBlock(kind=key, name=None, line=line)
                parse_block_body(child)
                block.entries.append(("block", child))
                continue
            if ntype == "}":
                raise err(f"key {key!r} has no value", line)
            pos += 1
            if pos < len(tokens) and tokens[pos][0] == "{":
                pos += 1
                child = ConfigBlock(kind=key, name=str(nvalue), line=line)
                parse_block_body(child)
                block.entries.append(("block", child))
            else:
                block.entries.append(("kv", key, nvalue))
        raise err("unexpected end of file: unbalanced '{'", tokens[-1][2] if tokens else 1)

    root = ConfigBlock(kind="", name=None)
    while pos < len(tokens):
        ttype, value, line = tokens[pos]
        if ttype != "word":
            raise err(f"expected block kind at top level, got {value!r}", line)
        kind = value
        pos += 1
        if pos >= len(tokens):
            raise err(f"dangling block kind {kind!r}", line)
        ntype, nvalue, nline = tokens[pos]
        if ntype == "{":
            pos += 1
            block = ConfigBlock(kind=kind, name=None, line=line)
            parse_block_body(block)
        else:
            pos += 1
            if pos >= len(tokens) or tokens[pos][0] != "{":
                raise err(f"top-level block {kind!r} must open a '{{' body", line)
            pos += 1
            block = ConfigBlock(kind=kind, name=str(nvalue), line=line)
            parse_block_body(block)
        root.entries.append(("block", block))
    return root.blocks()


def apply_defaults(block: ConfigBlock, defaults: dict[str, ConfigBlock]) -> dict:
    """Resolve a block's key/value map, pulling missing keys from its default.

    A ``default <name>`` line selects the top-level ``default`` block of that
    name; its keys fill in whatever the block itself does not set.
    """
    kv = block.kv()
    ref = kv.pop("default", None)
    if ref is not None:
        base = defaults.get(str(ref))
        if base is None:
            raise ConfigError(f"block {block.kind} {block.name or ''}: "
                              f"unknown default block {ref!r}")
        for k, v in base.kv().items():
            kv.setdefault(k, v)
    return kv


def collect_defaults(blocks: list[ConfigBlock]) -> dict[str, ConfigBlock]:
    out = {}
    for b in blocks:
        if b.kind == "default":
            if b.name is None:
                raise ConfigError("default block needs a name")
            out[b.name] = b
    return out


def reject_unknown_keys(block: ConfigBlock, allowed_keys: set[str],
                        allowed_blocks: set[str] = frozenset()) -> None:
    """Configs fail loudly on typos: unknown keys abort the load."""
    for entry in block.entries:
        if entry[0] == "kv":
            if entry[1] not in allowed_keys and entry[1] != "default":
                raise ConfigError(f"block {block.kind} {block.name or ''}: "
                                  f"unknown key {entry[1]!r}")
        else:
            if entry[1].kind not in allowed_blocks:
                raise ConfigError(f"block {block.kind} {block.name or ''}: "
                                  f"unknown nested block {entry[1].kind!r}")
