"""Tree-based genetic programming for symbolic regression.

Programs are flat prefix lists. A node is either a function name (``str``), a
feature reference (``int``) or an ephemeral constant (``float``). Subtrees are
contiguous slices, which keeps crossover and mutation to list splicing.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import QualityDataset

PROTECT = 1e-6


def _div(a, b):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return np.where(np.abs(b) < PROTECT, 1.0, a / np.where(b == 0, 1.0, b))


def _sqrt(a):
    return np.sqrt(np.abs(a))


def _log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(np.abs(a) < PROTECT, 0.0, np.log(np.where(a == 0, 1.0, np.abs(a))))


def _inv(a):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return np.where(np.abs(a) < PROTECT, 1.0, 1.0 / np.where(a == 0, 1.0, a))


@dataclass(frozen=True)
class Primitive:
    name: str
    arity: int
    fn: Callable
    infix: str | None = None


PRIMITIVES: dict[str, Primitive] = {p.name: p for p in (
    Primitive("add", 2, np.add, "+"),
    Primitive("sub", 2, np.subtract, "-"),
    Primitive("mul", 2, np.multiply, "*"),
    Primitive("div", 2, _div, "/"),
    Primitive("sqrt", 1, _sqrt),
    Primitive("log", 1, _log),
    Primitive("abs", 1, np.abs),
    Primitive("neg", 1, np.negative),
    Primitive("inv", 1, _inv),
    Primitive("max", 2, np.maximum),
    Primitive("min", 2, np.minimum),
)}

ARITHMETIC = ("add", "sub", "mul", "div")
TRANSFORMER = ("sqrt", "log", "abs", "neg", "inv")
COMPARISON = ("max", "min")


def function_set(transformer: bool = True, comparison: bool = True) -> tuple[str, ...]:
    names = list(ARITHMETIC)
    if transformer:
        names += TRANSFORMER
    if comparison:
        names += COMPARISON
    return tuple(names)


@dataclass(frozen=True)
class GpParams:
    population_size: int = 5000
    generations: int = 200
    tournament_size: int = 20
    stopping_fitness: float = 0.0
    init_depth: tuple[int, int] = (2, 6)
    parsimony_coefficient: float = 0.001
    p_crossover: float = 0.9
    p_subtree_mutation: float = 0.01
    p_hoist_mutation: float = 0.01
    p_point_mutation: float = 0.01
    p_point_replace: float = 0.05
    max_samples: float = 0.8
    const_range: tuple[float, float] = (-1.0, 1.0)
    max_depth: int | None = 17
    functions: tuple[str, ...] = field(default_factory=function_set)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "init_depth", tuple(self.init_depth))
        object.__setattr__(self, "const_range", tuple(self.const_range))
        object.__setattr__(self, "functions", tuple(self.functions))
        probs = (self.p_crossover, self.p_subtree_mutation,
                 self.p_hoist_mutation, self.p_point_mutation)
        if any(p < 0 for p in probs) or sum(probs) > 1 + 1e-12:
            raise ValueError("operator probabilities must be >= 0 and sum to <= 1")
        if self.population_size < 1 or self.generations < 1:
            raise ValueError("population_size and generations must be positive")
        if self.tournament_size < 1:
            raise ValueError("tournament_size must be positive")
        lo, hi = self.init_depth
        if not 0 <= lo <= hi:
            raise ValueError("init_depth must be an ordered pair of depths >= 0")
        if not 0 < self.max_samples <= 1:
            raise ValueError("max_samples must lie in (0, 1]")
        unknown = [f for f in self.functions if f not in PRIMITIVES]
        if unknown:
            raise ValueError(f"unknown primitives: {unknown}")

    @property
    def operator_cdf(self) -> np.ndarray:
        return np.cumsum([self.p_crossover, self.p_subtree_mutation,
                          self.p_hoist_mutation, self.p_point_mutation])


# --- program structure -------------------------------------------------------

def _arity(node) -> int:
    return PRIMITIVES[node].arity if isinstance(node, str) else 0


def subtree_end(nodes: Sequence, start: int) -> int:
    """Index one past the subtree rooted at ``start``."""
    need = 1
    end = start
    while need:
        need += _arity(nodes[end]) - 1
        end += 1
    return end


def program_depth(nodes: Sequence) -> int:
    """Depth of the deepest leaf; a lone terminal has depth 0."""
    depth = 0
    pending = []  # remaining child slots per open function
    for node in nodes:
        d = len(pending)
        depth = max(depth, d)
        if pending:
            pending[-1] -= 1
        a = _arity(node)
        if a:
            pending.append(a)
        while pending and pending[-1] == 0:
            pending.pop()
    return depth


def leaf_depths(nodes: Sequence) -> list[int]:
    out = []
    pending = []
    for node in nodes:
        d = len(pending)
        if pending:
            pending[-1] -= 1
        a = _arity(node)
        if a:
            pending.append(a)
        else:
            out.append(d)
        while pending and pending[-1] == 0:
            pending.pop()
    return out


def validate(nodes: Sequence, n_features: int | None = None) -> None:
    if not nodes:
        raise ValueError("empty program")
    for node in nodes:
        if isinstance(node, str) and node not in PRIMITIVES:
            raise ValueError(f"unknown primitive {node!r}")
    need = 1
    for i, node in enumerate(nodes):
        need += _arity(node) - 1
        if need == 0 and i != len(nodes) - 1:
            raise ValueError("program arity does not match node count")
    if need != 0:
        raise ValueError("program arity does not match node count")
    for node in nodes:
        if n_features is not None and type(node) is int and not 0 <= node < n_features:
            raise ValueError(f"feature index {node} out of range")


@dataclass(frozen=True, eq=False)
class GpProgram:
    nodes: tuple
    raw_fitness: float | None = None
    fitness: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        validate(self.nodes)

    @property
    def length(self) -> int:
        return len(self.nodes)

    @property
    def depth(self) -> int:
        return program_depth(self.nodes)

    def execute(self, X) -> np.ndarray:
        return execute(self.nodes, X)

    def predict(self, X) -> np.ndarray:
        return execute(self.nodes, X)

    def to_sexpr(self, names: Sequence[str] | None = None) -> str:
        return _render(self.nodes, names, infix=False)

    def to_infix(self, names: Sequence[str] | None = None) -> str:
        return _render(self.nodes, names, infix=True)

    def to_json(self) -> str:
        return json.dumps({"format": "bitqoe.gp", "version": 1,
                           "nodes": list(self.nodes),
                           "raw_fitness": self.raw_fitness,
                           "fitness": self.fitness})

    @classmethod
    def from_json(cls, text: str) -> "GpProgram":
        doc = json.loads(text)
        if doc.get("format") != "bitqoe.gp":
            raise ValueError("not a serialized GP program")
        return cls(tuple(doc["nodes"]), doc.get("raw_fitness"), doc.get("fitness"))

    def __str__(self) -> str:
        return self.to_sexpr()


def _terminal_str(node, names) -> str:
    if type(node) is int:
        return names[node] if names is not None else f"X{node}"
    return f"{node:.6g}"


def _render(nodes, names, infix: bool) -> str:
    stack: list[str] = []
    for node in reversed(nodes):
        if isinstance(node, str):
            prim = PRIMITIVES[node]
            args = [stack.pop() for _ in range(prim.arity)]
            if infix and prim.infix:
                stack.append(f"({args[0]} {prim.infix} {args[1]})")
            elif infix:
                stack.append(f"{node}({', '.join(args)})")
            else:
                stack.append(f"({node} {' '.join(args)})")
        else:
            stack.append(_terminal_str(node, names))
    return stack[0]


def execute(nodes: Sequence, X) -> np.ndarray:
    """Evaluate a prefix program on every row of ``X`` (total: never raises on values)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    n, n_feat = X.shape
    stack = []
    with np.errstate(all="ignore"):
        for node in reversed(nodes):
            if isinstance(node, str):
                prim = PRIMITIVES[node]
                args = [stack.pop() for _ in range(prim.arity)]
                stack.append(prim.fn(*args))
            elif type(node) is int:
                if not 0 <= node < n_feat:
                    raise IndexError(f"program references feature {node}, "
                                     f"input has {n_feat}")
                stack.append(X[:, node])
            else:
                stack.append(np.full(n, float(node)))
    out = stack[0]
    return np.broadcast_to(out, (n,)).astype(np.float64, copy=True)


def evaluate_program(p: GpProgram | Sequence, features) -> float | np.ndarray:
    nodes = p.nodes if isinstance(p, GpProgram) else p
    x = np.asarray(features, dtype=np.float64)
    out = execute(nodes, x)
    return float(out[0]) if x.ndim == 1 else out


def fitness(p: GpProgram | Sequence, X, y, parsimony_coefficient: float = 0.001
            ) -> tuple[float, float]:
    """Return ``(raw_rmse, penalized)``; non-finite outputs score +inf."""
    nodes = p.nodes if isinstance(p, GpProgram) else p
    pred = execute(nodes, X)
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(all="ignore"):
        raw = float(np.sqrt(np.mean((pred - y) ** 2)))
    if not math.isfinite(raw):
        return math.inf, math.inf
    return raw, raw + parsimony_coefficient * len(nodes)


# --- random construction and variation ----------------------------------------

class _Builder:
    def __init__(self, params: GpParams, n_features: int):
        self.params = params
        self.n_features = n_features
        self.funcs = list(params.functions)
        self.by_arity: dict[int, list[str]] = {}
        for f in self.funcs:
            self.by_arity.setdefault(PRIMITIVES[f].arity, []).append(f)

    def terminal(self, rng):
        i = int(rng.integers(self.n_features + 1))
        if i < self.n_features:
            return i
        lo, hi = self.params.const_range
        return float(rng.uniform(lo, hi))

    def full(self, depth: int, rng) -> list:
        if depth == 0:
            return [self.terminal(rng)]
        f = self.funcs[int(rng.integers(len(self.funcs)))]
        out = [f]
        for _ in range(PRIMITIVES[f].arity):
            out += self.full(depth - 1, rng)
        return out

    def random_depth(self, rng) -> int:
        lo, hi = self.params.init_depth
        return int(rng.integers(lo, hi + 1))


def init_population(params: GpParams, feature_count: int, rng=None) -> list[GpProgram]:
    """Full-method initialization with depths ramped over ``init_depth``."""
    if feature_count < 1:
        raise ValueError("feature_count must be >= 1")
    rng = rng if rng is not None else np.random.default_rng([params.seed, 0xF011])
    b = _Builder(params, feature_count)
    return [GpProgram(b.full(b.random_depth(rng), rng))
            for _ in range(params.population_size)]


def tournament_select(fit: np.ndarray, lengths: np.ndarray, k: int, rng,
                      replace: bool = True) -> int:
    """Index of the tournament winner: lowest penalized fitness, then
    shortest program, then earliest index."""
    n = len(fit)
    picks = rng.integers(0, n, k) if replace else rng.choice(n, min(k, n), replace=False)
    order = np.lexsort((picks, lengths[picks], fit[picks]))
    return int(picks[order[0]])


def _within_cap(nodes, params: GpParams) -> bool:
    return params.max_depth is None or program_depth(nodes) <= params.max_depth


def crossover(parent_a: Sequence, parent_b: Sequence, rng, params: GpParams | None = None,
              retries: int = 5) -> list:
    """Replace a uniform subtree of ``parent_a`` with a uniform subtree of ``parent_b``."""
    a, b = list(parent_a), list(parent_b)
    for _ in range(retries):
        s = int(rng.integers(len(a)))
        e = subtree_end(a, s)
        bs = int(rng.integers(len(b)))
        be = subtree_end(b, bs)
        child = a[:s] + b[bs:be] + a[e:]
        if params is None or _within_cap(child, params):
            return child
    return a


def mutate(p: Sequence, kind: str, params: GpParams, n_features: int, rng,
           retries: int = 5) -> list:
    nodes = list(p)
    if kind == "subtree":
        b = _Builder(params, n_features)
        for _ in range(retries):
            s = int(rng.integers(len(nodes)))
            e = subtree_end(nodes, s)
            child = nodes[:s] + b.full(b.random_depth(rng), rng) + nodes[e:]
            if _within_cap(child, params):
                return child
        return nodes
    if kind == "hoist":
        s = int(rng.integers(len(nodes)))
        e = subtree_end(nodes, s)
        s2 = s + int(rng.integers(e - s))
        e2 = subtree_end(nodes, s2)
        return nodes[:s] + nodes[s2:e2] + nodes[e:]
    if kind == "point":
        b = _Builder(params, n_features)
        hits = rng.random(len(nodes)) < params.p_point_replace
        for i in np.flatnonzero(hits):
            node = nodes[i]
            if isinstance(node, str):
                same = b.by_arity[PRIMITIVES[node].arity]
                nodes[i] = same[int(rng.integers(len(same)))]
            else:
                nodes[i] = b.terminal(rng)
        return nodes
    raise ValueError(f"unknown mutation kind {kind!r}")


OPERATIONS = ("crossover", "subtree", "hoist", "point", "reproduction")


def draw_operation(params: GpParams, rng) -> str:
    u = rng.random()
    i = int(np.searchsorted(params.operator_cdf, u, side="right"))
    return OPERATIONS[i]


@dataclass
class GenerationLog:
    generation: int
    best_fitness: float
    mean_fitness: float
    best_length: int
    best_ever_fitness: float
    best_ever_raw: float


@dataclass(eq=False)
class GpModel:
    """Evolved program plus its per-generation log; exposes ``predict``."""

    program: GpProgram
    log: list[GenerationLog]
    params: GpParams
    feature_names: tuple[str, ...] = ()

    def predict(self, X) -> np.ndarray:
        return self.program.predict(X)

    def to_json(self) -> str:
        params = asdict(self.params)
        return json.dumps({
            "format": "bitqoe.gp-model", "version": 1,
            "nodes": list(self.program.nodes),
            "raw_fitness": self.program.raw_fitness,
            "fitness": self.program.fitness,
            "sexpr": self.program.to_sexpr(self.feature_names or None),
            "infix": self.program.to_infix(self.feature_names or None),
            "feature_names": list(self.feature_names),
            "params": params,
            "log": [asdict(g) for g in self.log],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GpModel":
        doc = json.loads(text)
        if doc.get("format") != "bitqoe.gp-model":
            raise ValueError("not a serialized GP model")
        prog = GpProgram(tuple(doc["nodes"]), doc["raw_fitness"], doc["fitness"])
        return cls(prog, [GenerationLog(**g) for g in doc["log"]],
                   GpParams(**doc["params"]), tuple(doc["feature_names"]))


def evolve(ds: QualityDataset, params: GpParams = GpParams(),
           on_generation: Callable[[int, list, np.ndarray], None] | None = None) -> GpModel:
    """Generational GP loop.

    Each generation draws one row subsample of size ``max_samples * N`` for
    selection fitness. The generation's best program is re-scored on all rows;
    the best-ever program is tracked by that full-data penalized fitness, and
    evolution stops early once its raw RMSE reaches ``stopping_fitness``.

    ``on_generation(gen, population, scores)`` is called after each
    generation is scored, for logging or inspection.
    """
    X, y = ds.X, ds.mos
    n, n_feat = X.shape
    n_sub = max(1, int(round(params.max_samples * n)))
    pc = params.parsimony_coefficient
    pop = [list(p.nodes) for p in init_population(params, n_feat)]
    log: list[GenerationLog] = []
    best_nodes, best_raw, best_pen = None, math.inf, math.inf

    for gen in range(params.generations):
        rng = np.random.default_rng([params.seed, gen])
        rows = np.arange(n) if n_sub == n else np.sort(rng.choice(n, n_sub, replace=False))
        Xs, ys = X[rows], y[rows]
        scores = np.array([fitness(p, Xs, ys, pc)[1] for p in pop])
        lengths = np.array([len(p) for p in pop])
        if on_generation is not None:
            on_generation(gen, pop, scores)
        order = np.lexsort((np.arange(len(pop)), lengths, scores))
        champion = pop[order[0]]
        raw_full, pen_full = fitness(champion, X, y, pc)
        if best_nodes is None or pen_full < best_pen:
            best_nodes, best_raw, best_pen = champion, raw_full, pen_full
        finite = scores[np.isfinite(scores)]
        log.append(GenerationLog(gen, float(scores[order[0]]),
                                 float(finite.mean()) if finite.size else math.inf,
                                 len(champion), best_pen, best_raw))
        if best_raw <= params.stopping_fitness or gen == params.generations - 1:
            break

        nxt = []
        k = params.tournament_size
        for _ in range(params.population_size):
            op = draw_operation(params, rng)
            parent = pop[tournament_select(scores, lengths, k, rng)]
            if op == "crossover":
                donor = pop[tournament_select(scores, lengths, k, rng)]
                child = crossover(parent, donor, rng, params)
            elif op == "reproduction":
                child = list(parent)
            else:
                child = mutate(parent, op, params, n_feat, rng)
            nxt.append(child)
        pop = nxt

    program = GpProgram(tuple(best_nodes), best_raw, best_pen)
    return GpModel(program, log, params, ds.column_names)
