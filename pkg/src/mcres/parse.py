"""Constituency trees: bracketed ingestion and the synthetic expression grammar.

Natural-language expressions arrive pre-parsed as Penn-style s-expressions,
e.g. ``(NP (JJ white) (NN bird))``. A preterminal ``(TAG word)`` becomes a
:class:`Leaf` carrying its tag; every other constituent is an
:class:`Internal` node. Labels are kept for round-tripping but nothing
downstream looks at them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union


class TreeSyntaxError(ValueError):
    """Malformed bracketed input. ``offset`` is a character offset into the text."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnbalancedParens(TreeSyntaxError):
    pass


class EmptyConstituent(TreeSyntaxError):
    pass


class EmptyInput(TreeSyntaxError):
    pass


class NotDerivable(ValueError):
    """Expression is outside the synthetic grammar."""


@dataclass(frozen=True)
class Token:
    text: str
    vocab_id: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.text or any(c.isspace() for c in self.text):
            raise ValueError(f"invalid token text {self.text!r}")
        object.__setattr__(self, "text", self.text.lower())


@dataclass(frozen=True)
class Leaf:
    token: Token
    tag: str | None = None


@dataclass(frozen=True)
class Internal:
    label: str
    children: tuple[Node, ...]

    def __post_init__(self):
        if not self.children:
            raise ValueError("internal node needs at least one child")
        object.__setattr__(self, "children", tuple(self.children))


Node = Union[Leaf, Internal]


@dataclass(frozen=True)
class ParseTree:
    root: Node

    @property
    def tokens(self) -> tuple[str, ...]:
        return yield_of(self.root)

    def nodes(self) -> Iterator[Node]:
        """Pre-order traversal."""
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if isinstance(node, Internal):
                stack.extend(reversed(node.children))

    def to_bracketed(self) -> str:
        return to_bracketed(self.root)


def yield_of(node: Node) -> tuple[str, ...]:
    """Left-to-right leaf tokens of the subtree rooted at ``node``."""
    if isinstance(node, Leaf):
        return (node.token.text,)
    out: list[str] = []
    stack: list[Node] = [node]
    while stack:
        n = stack.pop()
        if isinstance(n, Leaf):
            out.append(n.token.text)
        else:
            stack.extend(reversed(n.children))
    return tuple(out)


def to_bracketed(node: Node) -> str:
    if isinstance(node, Leaf):
        if node.tag is None:
            return node.token.text
        return f"({node.tag} {node.token.text})"
    inner = " ".join(to_bracketed(c) for c in node.children)
    return f"({node.label} {inner})" if node.label else f"( {inner})"


# --------------------------------------------------------------------------
# bracketed reader

def _lex(text: str) -> list[tuple[str, int]]:
    toks: list[tuple[str, int]] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "()":
            toks.append((c, i))
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            toks.append((text[i:j], i))
            i = j
    return toks


def parse_bracketed(text: str) -> ParseTree:
    """Parse one Penn-style bracketed tree.

    >>> parse_bracketed("(NP (JJ white) (NN bird))").tokens
    ('white', 'bird')
    """
    toks = _lex(text)
    if not toks:
        raise EmptyInput("empty input", 0)
    end = len(text)

    def node_at(pos: int) -> tuple[Node, int]:
        tok, off = toks[pos]
        if tok == ")":
            raise UnbalancedParens("unexpected ')'", off)
        if tok != "(":
            return Leaf(Token(tok)), pos + 1
        pos += 1
        if pos >= len(toks):
            raise UnbalancedParens("missing ')'", end)
        label = ""
        if toks[pos][0] not in "()":
            label = toks[pos][0]
            pos += 1
        children: list[Node] = []
        while True:
            if pos >= len(toks):
                raise UnbalancedParens("missing ')'", end)
            if toks[pos][0] == ")":
                pos += 1
                break
            child, pos = node_at(pos)
            children.append(child)
        if not children:
            raise EmptyConstituent("constituent has no children", off)
        if len(children) == 1 and isinstance(children[0], Leaf) and children[0].tag is None and label:
            return Leaf(children[0].token, tag=label), pos
        return Internal(label, tuple(children)), pos

    root, pos = node_at(0)
    if pos != len(toks):
        tok, off = toks[pos]
        if tok == ")":
            raise UnbalancedParens("unexpected ')'", off)
        raise TreeSyntaxError("trailing input after tree", off)
    return ParseTree(root)


# --------------------------------------------------------------------------
# synthetic grammar:  EXPR -> NP | NP REL NP ;  NP -> ATTR* NOUN

@dataclass(frozen=True)
class SyntheticGrammar:
    sizes: tuple[str, ...]
    colors: tuple[str, ...]
    shapes: tuple[str, ...]
    relations: tuple[tuple[str, str], ...]

    @property
    def attributes(self) -> frozenset[str]:
        return frozenset(self.sizes) | frozenset(self.colors)

    @property
    def words(self) -> tuple[str, ...]:
        rel = [w for r in self.relations for w in r]
        return tuple(sorted(set(self.sizes) | set(self.colors) | set(self.shapes) | set(rel)))


def _np(tokens: Sequence[str]) -> Node:
    noun = Leaf(Token(tokens[-1]), "NOUN")
    if len(tokens) == 1:
        return Internal("NP", (noun,))
    node: Node = noun
    for attr in reversed(tokens[:-1]):
        node = Internal("NP", (Leaf(Token(attr), "ATTR"), node))
    return node


def parse_synthetic(expression: Sequence[str], grammar: SyntheticGrammar) -> ParseTree:
    """Deterministic parse of an expression generated by ``grammar``.

    Attributes nest as right-branching binary ``(ATTR, NP)`` pairs so that the
    attribute closest to the noun forms a word-word sibling pair with it.
    """
    toks = [t.lower() for t in expression]
    attrs, shapes = grammar.attributes, frozenset(grammar.shapes)
    rels = {tuple(r): r for r in grammar.relations}

    def read_np(i: int) -> int:
        j = i
        while j < len(toks) and toks[j] in attrs:
            j += 1
        if j >= len(toks) or toks[j] not in shapes:
            raise NotDerivable(f"expected a noun at position {j} in {toks!r}")
        return j + 1

    head_end = read_np(0)
    if head_end == len(toks):
        return ParseTree(_np(toks))
    rel = tuple(toks[head_end:head_end + 2])
    if rel not in rels:
        raise NotDerivable(f"expected a relation at position {head_end} in {toks!r}")
    land_start = head_end + 2
    if read_np(land_start) != len(toks):
        raise NotDerivable(f"trailing tokens in {toks!r}")
    rel_node = Internal("REL", (Leaf(Token(rel[0]), "RW"), Leaf(Token(rel[1]), "RW")))
    vp = Internal("VP", (rel_node, _np(toks[land_start:])))
    return ParseTree(Internal("EXPR", (_np(toks[:head_end]), vp)))
