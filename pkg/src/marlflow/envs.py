"""Synthetic, seeded task environments: retrieval QA and verified codegen.

Everything here is a pure function of (seed, inputs); datasets regenerate
byte-identically from the run config.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .errors import ToolError
from .rng import derive_stream
from .vocab import Vocabulary
from .workflow import WorkflowState

INSTRUCTIONS = ("PUSH_INPUT", "PUSH_1", "PUSH_2", "ADD", "SUB", "MUL", "RETURN")
MAX_PROGRAM_LEN = 8
ERR_SURFACE = "ERR"


# ---------------------------------------------------------------- QA family

@dataclass(frozen=True)
class QATask:
    task_id: str
    question: tuple[int, ...]
    gold: tuple[int, ...]
    hop_count: int
    chain: tuple[int, ...]  # key tokens leading to the gold fact


@dataclass(frozen=True)
class KnowledgeBase:
    facts: tuple[tuple[int, tuple[int, ...]], ...]  # (key token, value tokens)
    seed: int

    def value_of(self, key: int) -> tuple[int, ...]:
        for k, v in self.facts:
            if k == key:
                return v
        raise KeyError(key)


def qa_vocabulary(agent_roles, kb_size: int, n_values: int,
                  n_qwords: int) -> Vocabulary:
    content = [f"qw{i}" for i in range(n_qwords)]
    content += [f"k{i:02d}" for i in range(kb_size)]
    content += [f"v{i:02d}" for i in range(n_values)]
    return Vocabulary(agent_roles, content)


def make_knowledge_base(seed: int, kb_size: int, n_values: int,
                        vocab: Vocabulary) -> KnowledgeBase:
    keys = [vocab.id_of(f"k{i:02d}") for i in range(kb_size)]
    vals = [vocab.id_of(f"v{i:02d}") for i in range(n_values)]
    stream = derive_stream(seed, "kb")
    n_link = kb_size // 3
    facts: list[tuple[int, tuple[int, ...]]] = []
    terminal_keys = keys[n_link:]
    for key in keys[:n_link]:
        facts.append((key, (stream.choice(terminal_keys),)))
    for key in terminal_keys:
        facts.append((key, (stream.choice(vals),)))
    return KnowledgeBase(tuple(facts), seed)


def make_qa_dataset(seed: int, n_train: int, n_eval: int, hop_mix: float,
                    kb_size: int = 32, n_values: int = 16, n_qwords: int = 8,
                    vocab: Vocabulary | None = None,
                    ) -> tuple[KnowledgeBase, tuple[QATask, ...], tuple[QATask, ...]]:
    """Deterministic KB plus disjoint train/eval task splits."""
    if n_train < 1 or n_eval < 0:
        raise ValueError("need n_train >= 1 and n_eval >= 0")
    if not 0.0 <= hop_mix <= 1.0:
        raise ValueError("hop_mix must be in [0, 1]")
    if vocab is None:
        vocab = qa_vocabulary((), kb_size, n_values, n_qwords)
    kb = make_knowledge_base(seed, kb_size, n_values, vocab)
    n_link = kb_size // 3
    if hop_mix > 0 and n_link == 0:
        raise ValueError("knowledge base too small for 2-hop tasks")
    qwords = [vocab.id_of(f"qw{i}") for i in range(n_qwords)]
    link_facts = kb.facts[:n_link]
    terminal_facts = kb.facts[n_link:]

    total = n_train + n_eval
    if len(qwords) ** 2 * kb_size < total:
        raise ValueError(
            f"vocabulary too small: only {len(qwords)**2 * kb_size} distinct "
            f"questions available, {total} requested")
    stream = derive_stream(seed, "tasks")
    tasks: list[QATask] = []
    seen: set[tuple[int, ...]] = set()
    attempts = 0
    while len(tasks) < total:
        attempts += 1
        if attempts > 1000 * total:
            raise ValueError("vocabulary too small to generate distinct tasks")
        two_hop = stream.next_double() < hop_mix
        if two_hop:
            key, mid = link_facts[stream.next_below(len(link_facts))]
            gold = kb.value_of(mid[0])
            chain = (key, mid[0])
        else:
            key, gold = terminal_facts[stream.next_below(len(terminal_facts))]
            chain = (key,)
        question = (stream.choice(qwords), stream.choice(qwords), key)
        if question in seen:
            continue
        seen.add(question)
        tasks.append((question, gold, 2 if two_hop else 1, chain))
    # shuffle before splitting so both splits share the task distribution
    derive_stream(seed, "task-split").shuffle(tasks)
    final = tuple(QATask(f"qa-{i:04d}", *t) for i, t in enumerate(tasks))
    return kb, final[:n_train], final[n_train:]


def retrieve(kb: KnowledgeBase, query, k: int) -> list[tuple[int, tuple[int, ...]]]:
    """Key-matching facts first, then seeded distractors; exactly k results.

    A fact's passage id is its key token; entry tokens are (key, *value).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(kb.facts):
        raise ValueError(f"k={k} exceeds knowledge base size {len(kb.facts)}")
    qset = set(int(t) for t in query)
    matched = [f for f in kb.facts if f[0] in qset]
    rest = [f for f in kb.facts if f[0] not in qset]
    stream = derive_stream(kb.seed, "retrieve", *[int(t) for t in query])
    stream.shuffle(rest)
    chosen = (matched + rest)[:k]
    return [(key, (key, *value)) for key, value in chosen]


# -------------------------------------------------------------- code family

@dataclass(frozen=True)
class CodeTask:
    task_id: str
    target: tuple[int, ...]            # instruction token ids
    tests: tuple[tuple[int, int], ...]  # (input, expected output)


@dataclass(frozen=True)
class VerifierResult:
    score: float
    flags: tuple[bool, ...]
    feedback: tuple[int, ...]  # first failing (input, expected, actual) tokens


@dataclass(frozen=True)
class CodeCodec:
    """Token bridge for the code family: instructions and bounded integers."""
    vocab: Vocabulary
    int_min: int
    int_max: int

    @property
    def instruction_ids(self) -> frozenset[int]:
        return frozenset(self.vocab.id_of(name) for name in INSTRUCTIONS)

    def instruction_id(self, name: str) -> int:
        return self.vocab.id_of(name)

    def instruction_name(self, token: int) -> str:
        return self.vocab.surface_of(token)

    def int_token(self, n: int) -> int:
        n = min(max(n, self.int_min), self.int_max)
        return self.vocab.id_of(f"i{n}")

    @property
    def err_token(self) -> int:
        return self.vocab.id_of(ERR_SURFACE)

    def in_range(self, n: int) -> bool:
        return self.int_min <= n <= self.int_max


def code_vocabulary(agent_roles, int_min: int = -8, int_max: int = 81) -> Vocabulary:
    content = list(INSTRUCTIONS)
    content += [f"i{n}" for n in range(int_min, int_max + 1)]
    content.append(ERR_SURFACE)
    return Vocabulary(agent_roles, content)


def run_program(instructions: tuple[str, ...], x: int) -> int | None:
    """Execute the stack machine; None on any crash (total, loop-free)."""
    if not instructions or len(instructions) > MAX_PROGRAM_LEN:
        return None
    stack: list[int] = []
    for ins in instructions:
        if ins == "PUSH_INPUT":
            stack.append(x)
        elif ins == "PUSH_1":
            stack.append(1)
        elif ins == "PUSH_2":
            stack.append(2)
        elif ins in ("ADD", "SUB", "MUL"):
            if len(stack) < 2:
                return None
            b = stack.pop()
            a = stack.pop()
            stack.append(a + b if ins == "ADD" else a - b if ins == "SUB" else a * b)
        elif ins == "RETURN":
            return stack[-1] if stack else None
        else:
            return None
    return None  # fell off the end without RETURN


def verify(task: CodeTask, program_tokens, codec: CodeCodec) -> VerifierResult:
    """Score = fraction of tests passed; feedback names the first failure."""
    toks = tuple(int(t) for t in program_tokens)
    parseable = all(t in codec.instruction_ids for t in toks) and len(toks) > 0
    names = tuple(codec.instruction_name(t) for t in toks) if parseable else ()
    flags: list[bool] = []
    feedback: tuple[int, ...] = ()
    for x, expected in task.tests:
        actual = run_program(names, x) if parseable else None
        ok = actual == expected
        flags.append(ok)
        if not ok and not feedback:
            actual_tok = codec.err_token if actual is None or not codec.in_range(
                actual) else codec.int_token(actual)
            feedback = (codec.int_token(x), codec.int_token(expected), actual_tok)
    score = sum(flags) / len(flags)
    return VerifierResult(score, tuple(flags), feedback)


def _sample_target(stream, codec: CodeCodec, max_len: int,
                   inputs: tuple[int, ...]) -> tuple[tuple[int, ...], tuple[int, ...]] | None:
    length = 2 + stream.next_below(max_len - 1)
    names = [INSTRUCTIONS[stream.next_below(len(INSTRUCTIONS) - 1)]
             for _ in range(length - 1)]
    names.append("RETURN")
    outputs = []
    for x in inputs:
        y = run_program(tuple(names), x)
        if y is None or not codec.in_range(y):
            return None
        outputs.append(y)
    target = tuple(codec.instruction_id(n) for n in names)
    return target, tuple(outputs)


def make_code_dataset(seed: int, n_train: int, n_eval: int,
                      max_target_len: int = 4,
                      base_inputs: tuple[int, ...] = (0, 1, 2, 3),
                      extra_pool: tuple[int, ...] = (4, 5, 6, 7, 8, 9),
                      codec: CodeCodec | None = None,
                      ) -> tuple[tuple[CodeTask, ...], tuple[CodeTask, ...]]:
    """Deterministic tasks; each target verified against its own tests."""
    if max_target_len < 2 or max_target_len > MAX_PROGRAM_LEN:
        raise ValueError(f"max_target_len must be in [2, {MAX_PROGRAM_LEN}]")
    if codec is None:
        codec = CodeCodec(code_vocabulary(()), -8, 81)
    stream = derive_stream(seed, "code-tasks")
    total = n_train + n_eval
    tasks: list[CodeTask] = []
    seen: set[tuple] = set()
    attempts = 0
    while len(tasks) < total:
        attempts += 1
        if attempts > 5000 * total:
            raise ValueError("could not generate enough distinct code tasks")
        extras = sorted(extra_pool)
        stream.shuffle(extras)
        n_extra = 2 + stream.next_below(2)
        inputs = tuple(base_inputs) + tuple(sorted(extras[:n_extra]))
        sampled = _sample_target(stream, codec, max_target_len, inputs)
        if sampled is None:
            continue
        target, outputs = sampled
        signature = (inputs, outputs)
        if signature in seen:
            continue
        seen.add(signature)
        tasks.append((target, tuple(zip(inputs, outputs))))
    # shuffle before splitting so both splits share the class distribution
    derive_stream(seed, "task-split").shuffle(tasks)
    final = []
    for i, (target, tests) in enumerate(tasks):
        task = CodeTask(f"code-{i:04d}", target, tests)
        if verify(task, target, codec).score != 1.0:
            raise AssertionError("generated target fails its own tests")
        final.append(task)
    return tuple(final[:n_train]), tuple(final[n_train:])


def code_task_input(task: CodeTask, codec: CodeCodec) -> tuple[int, ...]:
    toks: list[int] = []
    for x, y in task.tests:
        toks.append(codec.int_token(x))
        toks.append(codec.int_token(y))
    return tuple(toks)


# ------------------------------------------------------------- environment

@dataclass
class Environment:
    """Bundle the controller consumes: vocab, tasks, tools, token domains."""
    family: str  # workflow family tag A/B/C/D
    vocab: Vocabulary
    train_tasks: tuple
    eval_tasks: tuple
    tools: dict[str, Callable]
    instruction_ids: frozenset[int] = frozenset()
    task_input_fn: Callable = None
    gold_fn: Callable = None

    def task_input(self, task) -> tuple[int, ...]:
        return self.task_input_fn(task)

    def gold_tokens(self, task):
        return self.gold_fn(task)


def build_qa_environment(family: str, agent_roles, seed: int, n_train: int,
                         n_eval: int, hop_mix: float = 0.0, kb_size: int = 32,
                         n_values: int = 16, n_qwords: int = 8,
                         retrieve_k: int = 4) -> Environment:
    vocab = qa_vocabulary(agent_roles, kb_size, n_values, n_qwords)
    kb, train, evals = make_qa_dataset(
        seed, n_train, n_eval, hop_mix, kb_size, n_values, n_qwords, vocab)

    def retrieve_tool(state: WorkflowState, params: dict, task) -> dict:
        idx = int(params.get("query_index", -1))
        k = int(params.get("k", retrieve_k))
        queries = state.scratchpad["queries"]
        if queries and -len(queries) <= idx < len(queries):
            query = queries[idx]
        else:
            query = ()
        return {"retrieved": [tokens for _, tokens in retrieve(kb, query, k)]}

    env = Environment(
        family=family, vocab=vocab, train_tasks=train, eval_tasks=evals,
        tools={"retrieve": retrieve_tool},
        task_input_fn=lambda task: task.question,
        gold_fn=lambda task: task.gold)
    env.kb = kb
    return env


def build_code_environment(family: str, agent_roles, seed: int, n_train: int,
                           n_eval: int, max_target_len: int = 4,
                           int_min: int = -8, int_max: int = 81,
                           base_inputs: tuple[int, ...] = (0, 1, 2, 3),
                           extra_pool: tuple[int, ...] = (4, 5, 6, 7, 8, 9),
                           ) -> Environment:
    vocab = code_vocabulary(agent_roles, int_min, int_max)
    codec = CodeCodec(vocab, int_min, int_max)
    train, evals = make_code_dataset(seed, n_train, n_eval, max_target_len,
                                     base_inputs, extra_pool, codec)

    def verify_tool(state: WorkflowState, params: dict, task) -> dict:
        programs = state.scratchpad["program"]
        program = programs[0] if programs else ()
        res = verify(task, program, codec)
        return {"verifier_score": res.score, "verifier_feedback": res.feedback}

    env = Environment(
        family=family, vocab=vocab, train_tasks=train, eval_tasks=evals,
        tools={"verify": verify_tool}, instruction_ids=codec.instruction_ids,
        task_input_fn=lambda task: code_task_input(task, codec),
        gold_fn=lambda task: None)
    env.codec = codec
    return env


def failing_tool(message: str = "injected tool failure") -> Callable:
    """Test helper: a registered tool that always fails."""
    def tool(state, params, task):
        raise ToolError(message)
    return tool
