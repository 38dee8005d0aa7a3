"""Output schema registry: parsing and format validation per role schema.

Malformed output is never a hard failure: the parser extracts what it can
(unparseable parts dropped) and the validity flag drives the format
penalty at reward time.
"""
from __future__ import annotations

from dataclasses import dataclass

from .vocab import END, SEP, Vocabulary

SCHEMAS = (
    "query-list",
    "evidence-subset",
    "answer-span",
    "knowledge-update",
    "program",
    "plan-text",
    "reflection-text",
)

MAX_PROGRAM_LEN = 8


@dataclass(frozen=True)
class ParseContext:
    """Workflow-local token domains the validators need."""
    retrieved_ids: frozenset[int] = frozenset()
    instruction_ids: frozenset[int] = frozenset()


@dataclass(frozen=True)
class ParsedOutput:
    valid: bool
    span: tuple[int, ...] = ()
    queries: tuple[tuple[int, ...], ...] = ()
    cited: tuple[int, ...] = ()
    end_token_exit: bool = False


def _split_terminated(tokens: tuple[int, ...]) -> tuple[tuple[int, ...], bool]:
    """Body before the first <end>; terminated=False when no <end> appears."""
    if END in tokens:
        return tokens[: tokens.index(END)], True
    return tokens, False


def parse_output(schema: str, tokens, vocab: Vocabulary,
                 ctx: ParseContext | None = None) -> ParsedOutput:
    if schema not in SCHEMAS:
        raise ValueError(f"unknown output schema {schema!r}")
    ctx = ctx or ParseContext()
    toks = tuple(int(t) for t in tokens)
    body, terminated = _split_terminated(toks)
    end_exit = bool(toks) and toks[0] == END

    if schema == "query-list":
        groups: list[tuple[int, ...]] = []
        current: list[int] = []
        clean = True
        for t in body:
            if t == SEP:
                groups.append(tuple(current))
                current = []
            elif vocab.is_content(t):
                current.append(t)
            else:
                clean = False
        groups.append(tuple(current))
        queries = tuple(g for g in groups if g)
        valid = terminated and clean and len(queries) == len(groups)
        if not body and terminated:
            valid = True  # bare <end>: empty query list is a legal stop
        return ParsedOutput(valid, queries=queries, end_token_exit=end_exit)

    if schema == "evidence-subset":
        cited = tuple(t for t in body if t in ctx.retrieved_ids)
        valid = terminated and len(body) > 0 and len(cited) == len(body)
        return ParsedOutput(valid, cited=cited, end_token_exit=end_exit)

    if schema == "program":
        span = tuple(t for t in body if t in ctx.instruction_ids)
        valid = (terminated and len(span) == len(body)
                 and 1 <= len(body) <= MAX_PROGRAM_LEN)
        return ParsedOutput(valid, span=span, end_token_exit=end_exit)

    # answer-span, knowledge-update, plan-text, reflection-text: free content
    span = tuple(t for t in body if vocab.is_content(t))
    valid = terminated and len(span) == len(body)
    if schema == "answer-span":
        valid = valid and len(span) >= 1  # an answer must name something
    return ParsedOutput(valid, span=span, end_token_exit=end_exit)
