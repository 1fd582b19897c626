"""Genetic-programming symbolic regression over {+, -, *, /}.

Expressions are immutable trees.  A search keeps the lowest-MSE expression
found at every complexity (node count) and the final model is picked from
that front by the steepest log-MSE drop per unit of added complexity.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Union

import numpy as np

DIV_GUARD = 1e-12
OPS = ("+", "-", "*", "/")


class UnboundVariableError(KeyError):
    pass


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown operator {self.op!r}")


Expr = Union[Const, Var, BinOp]


# ---------------------------------------------------------------- evaluation


def evaluate(expr: Expr, data: Mapping[str, object]):
    """Evaluate on scalars or equal-length arrays.

    Division by a value with magnitude below 1e-12 yields NaN at that sample,
    which later poisons the expression's fitness.
    """
    with np.errstate(all="ignore"):
        return _evaluate(expr, data)


def _evaluate(expr: Expr, data):
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, Var):
        try:
            return data[expr.name]
        except KeyError:
            raise UnboundVariableError(expr.name) from None
    a = _evaluate(expr.left, data)
    b = _evaluate(expr.right, data)
    if expr.op == "+":
        return a + b
    if expr.op == "-":
        return a - b
    if expr.op == "*":
        return a * b
    return _div(a, b)


def _div(a, b):
    # Callers hold np.errstate(all="ignore").
    if np.ndim(b) == 0:
        return a / b if abs(b) >= DIV_GUARD else a * math.nan
    q = a / b
    bad = np.abs(b) < DIV_GUARD
    if bad.any():
        q = np.where(bad, np.nan, q)
    return q


def mse(expr: Expr, data: Mapping[str, np.ndarray], y: np.ndarray) -> float:
    """Mean squared error; invalid or non-finite predictions give inf."""
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(all="ignore"):
        return _mse_of(_evaluate(expr, data), y)


def compile_expr(expr: Expr):
    """Flatten ``expr`` into ``f(consts, data)`` with its constants as a parameter vector.

    Arithmetic order matches :func:`evaluate` exactly; used by the constant
    optimizer, which re-evaluates one tree shape many times.
    """
    counter = iter(range(1 << 30))

    def emit(e) -> str:
        if isinstance(e, Const):
            return f"c[{next(counter)}]"
        if isinstance(e, Var):
            return f"d[{e.name!r}]"
        a, b = emit(e.left), emit(e.right)
        return f"_div({a}, {b})" if e.op == "/" else f"({a} {e.op} {b})"

    raw = eval(f"lambda c, d: {emit(expr)}", {"_div": _div})

    def fn(c, d):
        with np.errstate(all="ignore"):
            return raw(c, d)

    return fn


def _mse_of(pred, y: np.ndarray) -> float:
    r = np.subtract(pred, y)
    err = float(np.dot(r, r)) / r.size
    return err if math.isfinite(err) else math.inf


# ------------------------------------------------------------------ structure


def complexity(expr: Expr) -> int:
    """Count of every operator, constant and variable occurrence."""
    if isinstance(expr, BinOp):
        return 1 + complexity(expr.left) + complexity(expr.right)
    return 1


def depth(expr: Expr) -> int:
    if isinstance(expr, BinOp):
        return 1 + max(depth(expr.left), depth(expr.right))
    return 1


def is_well_formed(expr, variables=None, max_depth: int | None = None) -> bool:
    def ok(e):
        if isinstance(e, Const):
            return isinstance(e.value, float) and math.isfinite(e.value)
        if isinstance(e, Var):
            return variables is None or e.name in variables
        if isinstance(e, BinOp):
            return e.op in OPS and ok(e.left) and ok(e.right)
        return False

    return ok(expr) and (max_depth is None or depth(expr) <= max_depth)


def kinds(expr: Expr) -> set:
    """Node kinds present: operator symbols, variable names and 'const'."""
    if isinstance(expr, BinOp):
        return {expr.op} | kinds(expr.left) | kinds(expr.right)
    if isinstance(expr, Var):
        return {expr.name}
    return {"const"}


def subtrees(expr: Expr, path: tuple = ()) -> Iterator[tuple[tuple, Expr]]:
    """Yield (path, node) in pre-order; a path is a tuple of 0 (left) / 1 (right)."""
    yield path, expr
    if isinstance(expr, BinOp):
        yield from subtrees(expr.left, path + (0,))
        yield from subtrees(expr.right, path + (1,))


def replace_at(expr: Expr, path: tuple, new: Expr) -> Expr:
    if not path:
        return new
    if not isinstance(expr, BinOp):
        raise IndexError("path descends into a leaf")
    if path[0] == 0:
        return BinOp(expr.op, replace_at(expr.left, path[1:], new), expr.right)
    return BinOp(expr.op, expr.left, replace_at(expr.right, path[1:], new))


def constants(expr: Expr) -> list[float]:
    return [e.value for _, e in subtrees(expr) if isinstance(e, Const)]


def with_constants(expr: Expr, values) -> Expr:
    it = iter(values)

    def rebuild(e):
        if isinstance(e, Const):
            return Const(float(next(it)))
        if isinstance(e, BinOp):
            return BinOp(e.op, rebuild(e.left), rebuild(e.right))
        return e

    return rebuild(expr)


def _first_leaf(expr: Expr) -> Expr:
    while isinstance(expr, BinOp):
        expr = expr.left
    return expr


def truncate(expr: Expr, max_depth: int) -> Expr:
    """Replace subtrees that reach below ``max_depth`` with one of their own leaves."""
    if max_depth <= 1 or not isinstance(expr, BinOp):
        return _first_leaf(expr)
    return BinOp(expr.op, truncate(expr.left, max_depth - 1), truncate(expr.right, max_depth - 1))


def fold_constants(expr: Expr) -> Expr:
    if not isinstance(expr, BinOp):
        return expr
    left, right = fold_constants(expr.left), fold_constants(expr.right)
    if isinstance(left, Const) and isinstance(right, Const):
        v = evaluate(BinOp(expr.op, left, right), {})
        if math.isfinite(v):
            return Const(float(v))
    return BinOp(expr.op, left, right)


# --------------------------------------------------------------- infix text


def to_infix(expr: Expr) -> str:
    """Fully parenthesised infix; constants use the shortest round-trip repr."""
    if isinstance(expr, Const):
        return repr(float(expr.value))
    if isinstance(expr, Var):
        return expr.name
    return f"({to_infix(expr.left)} {expr.op} {to_infix(expr.right)})"


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|inf|nan)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/()]))"
)


def parse_infix(text: str) -> Expr:
    """Read an infix expression with the usual precedence; inverse of :func:`to_infix`."""
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ValueError(f"cannot parse expression at {text[pos:]!r}")
        pos = m.end()
        kind = m.lastgroup
        tokens.append((kind, m.group(kind)))
    tokens.append(("end", ""))
    i = 0

    def peek():
        return tokens[i]

    def take():
        nonlocal i
        i += 1
        return tokens[i - 1]

    def expr_():
        node = term()
        while peek() in (("op", "+"), ("op", "-")):
            op = take()[1]
            node = BinOp(op, node, term())
        return node

    def term():
        node = atom()
        while peek() in (("op", "*"), ("op", "/")):
            op = take()[1]
            node = BinOp(op, node, atom())
        return node

    def atom():
        kind, val = take()
        if kind == "num":
            return Const(float(val))
        if kind == "name":
            return Var(val)
        if (kind, val) == ("op", "-") and peek()[0] == "num":
            return Const(-float(take()[1]))
        if (kind, val) == ("op", "("):
            node = expr_()
            if take() != ("op", ")"):
                raise ValueError("unbalanced parentheses")
            return node
        raise ValueError(f"unexpected token {val!r}")

    node = expr_()
    if peek()[0] != "end":
        raise ValueError(f"trailing input {peek()[1]!r}")
    return node


# ------------------------------------------------------------- Pareto front


@dataclass
class ParetoFront:
    entries: dict[int, tuple[Expr, float]] = field(default_factory=dict)

    def offer(self, expr: Expr, err: float, c: int | None = None) -> bool:
        """Insert if no simpler-or-equal entry is at least as good; drop newly dominated ones."""
        if not math.isfinite(err):
            return False
        c = complexity(expr) if c is None else c
        for ci, (_, ei) in self.entries.items():
            if ci <= c and ei <= err:
                return False
        self.entries = {ci: v for ci, v in self.entries.items() if not (ci >= c and v[1] >= err)}
        self.entries[c] = (expr, err)
        return True

    def items(self) -> list[tuple[int, Expr, float]]:
        return [(c, e, m) for c, (e, m) in sorted(self.entries.items())]

    def __len__(self) -> int:
        return len(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)


def selection_scores(front: ParetoFront, floor: float = 1e-300) -> list[tuple[int, float]]:
    """(complexity, score) with score = -d(log MSE)/d(complexity) against the next simpler entry."""
    items = front.items()
    out = []
    for k, (c, _, m) in enumerate(items):
        if k == 0:
            out.append((c, 0.0))
            continue
        c_prev, _, m_prev = items[k - 1]
        out.append((c, (math.log(max(m_prev, floor)) - math.log(max(m, floor))) / (c - c_prev)))
    return out


def select_best(front: ParetoFront) -> tuple[Expr, int]:
    if not front:
        raise ValueError("empty Pareto front")
    scores = selection_scores(front)
    best_c, best_s = scores[0]
    for c, s in scores[1:]:
        if s > best_s:
            best_c, best_s = c, s
    return front.entries[best_c][0], best_c


def write_front_csv(path, front: ParetoFront) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["complexity", "mse", "expression"])
        for c, e, m in front.items():
            w.writerow([c, format(m, ".17g"), to_infix(e)])


def read_front_csv(path) -> ParetoFront:
    front = ParetoFront()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            front.entries[int(row["complexity"])] = (parse_infix(row["expression"]), float(row["mse"]))
    return front


# ------------------------------------------------------------------------ GP


@dataclass(frozen=True)
class GPConfig:
    population: int = 200
    generations: int = 100
    tournament: int = 5
    p_crossover: float = 0.7
    p_mutation: float = 0.3
    max_depth: int = 7
    init_depth: int = 4
    const_iters: int = 3
    p_const_opt: float = 0.05
    elitism: int = 4
    parsimony: float = 0.0
    max_complexity: int = 31
    const_range: float = 2.0
    islands: int = 4
    migration_interval: int = 10
    migrants: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("p_crossover", "p_mutation", "p_const_opt"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.tournament < 1 or self.max_depth < 1 or self.init_depth < 1:
            raise ValueError("tournament and depths must be >= 1")
        if self.islands < 1 or self.migration_interval < 1 or self.migrants < 0:
            raise ValueError("islands and migration interval must be >= 1")


def random_leaf(variables, config: GPConfig, rng: np.random.Generator) -> Expr:
    if rng.random() < 0.3:
        return Const(float(rng.uniform(-config.const_range, config.const_range)))
    return Var(variables[rng.integers(len(variables))])


def random_tree(variables, config: GPConfig, rng: np.random.Generator, max_depth: int, full: bool = False) -> Expr:
    if max_depth <= 1 or (not full and rng.random() < 0.3):
        return random_leaf(variables, config, rng)
    op = OPS[rng.integers(len(OPS))]
    return BinOp(
        op,
        random_tree(variables, config, rng, max_depth - 1, full),
        random_tree(variables, config, rng, max_depth - 1, full),
    )


def _pick_subtree(expr: Expr, rng: np.random.Generator, p_internal: float = 0.0) -> tuple[tuple, Expr]:
    nodes = list(subtrees(expr))
    if p_internal and rng.random() < p_internal:
        inner = [n for n in nodes if isinstance(n[1], BinOp)]
        if inner:
            nodes = inner
    return nodes[rng.integers(len(nodes))]


def mutate(expr: Expr, variables, config: GPConfig, rng: np.random.Generator) -> Expr:
    """One of five edits, chosen uniformly.

    Point mutation of a node's kind, constant jitter, subtree replacement,
    insertion (a node wrapped in a new operator with a random leaf) and
    deletion (an operator replaced by one of its operands).
    """
    path, node = _pick_subtree(expr, rng)
    kind = rng.integers(5)
    if kind == 0:
        if isinstance(node, BinOp):
            new = BinOp(OPS[rng.integers(len(OPS))], node.left, node.right)
        else:
            new = random_leaf(variables, config, rng)
    elif kind == 1:
        consts = [(p, n) for p, n in subtrees(expr) if isinstance(n, Const)]
        if consts:
            path, node = consts[rng.integers(len(consts))]
            new = Const(float(node.value * (1 + 0.1 * rng.normal()) + 0.1 * rng.normal()))
        else:
            new = random_leaf(variables, config, rng)
    elif kind == 2:
        new = random_tree(variables, config, rng, max(1, min(3, config.max_depth - len(path))))
    elif kind == 3:
        leaf = random_leaf(variables, config, rng)
        op = OPS[rng.integers(len(OPS))]
        new = BinOp(op, node, leaf) if rng.random() < 0.5 else BinOp(op, leaf, node)
    else:
        new = (node.left if rng.random() < 0.5 else node.right) if isinstance(node, BinOp) else node
    return truncate(replace_at(expr, path, new), config.max_depth)


def crossover(a: Expr, b: Expr, config: GPConfig, rng: np.random.Generator) -> Expr:
    """Replace a uniformly chosen subtree of ``a`` with one chosen from ``b``."""
    path, _ = _pick_subtree(a, rng, 0.9)
    _, donor = _pick_subtree(b, rng, 0.9)
    return truncate(replace_at(a, path, donor), config.max_depth)


def _golden_min(f, lo: float, hi: float, iters: int = 60) -> tuple[float, float]:
    g = (math.sqrt(5) - 1) / 2
    c, d = hi - g * (hi - lo), lo + g * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - g * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + g * (hi - lo)
            fd = f(d)
        if hi - lo <= 1e-12 * (1 + abs(lo)):
            break
    return (c, fc) if fc < fd else (d, fd)


def optimize_constants(expr: Expr, data, y: np.ndarray, config: GPConfig | None = None) -> Expr:
    """Coordinate-wise bracketing plus golden-section refinement of each constant.

    A candidate is only accepted when it lowers the MSE, so the result is never worse.
    """
    values = constants(expr)
    if not values:
        return expr
    passes = config.const_iters if config is not None else 3
    fn = compile_expr(expr)
    best = list(values)

    def err_of(c) -> float:
        return _mse_of(fn(c, data), y)

    best_err = err_of(best)
    for _ in range(passes):
        improved = False
        for k in range(len(best)):

            def f(v, k=k):
                trial = list(best)
                trial[k] = v
                return err_of(trial)

            x0 = best[k]
            f0 = best_err
            step = 0.1 * max(abs(x0), 1.0)
            # Walk downhill with doubling steps until the minimum is bracketed.
            fr, fl = f(x0 + step), f(x0 - step)
            if not (fr < f0 or fl < f0):
                lo, hi = x0 - step, x0 + step
            else:
                direction = 1.0 if fr <= fl else -1.0
                prev, cur, f_cur = x0, x0 + direction * step, min(fr, fl)
                for _ in range(60):
                    step *= 2
                    nxt = cur + direction * step
                    f_next = f(nxt)
                    if not f_next < f_cur:
                        break
                    prev, cur, f_cur = cur, nxt, f_next
                lo, hi = sorted((prev, cur + direction * step))
            x, fx = _golden_min(f, lo, hi)
            if fx < best_err:
                best[k] = x
                best_err = fx
                improved = True
        if not improved:
            break
    return with_constants(expr, best)


def _fitness_key(err: float, c: int, parsimony: float) -> tuple[float, int]:
    return (err * (1 + parsimony * c), c)


def search(data: Mapping[str, np.ndarray], y, config: GPConfig = GPConfig()) -> ParetoFront:
    """Evolve expressions for ``y`` from the feature columns in ``data``.

    Single-threaded and deterministic for a given ``config.seed``.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("no data rows")
    if y.size < 10:
        raise ValueError("symbolic search needs at least 10 rows")
    data = {k: np.asarray(v, dtype=np.float64) for k, v in data.items()}
    variables = sorted(data)
    rng = np.random.default_rng(config.seed)
    front = ParetoFront()
    cache: dict[Expr, float] = {}
    polished_already: set = set()

    def score(e: Expr) -> float:
        err = cache.get(e)
        if err is None:
            c = complexity(e)
            err = mse(e, data, y) if c <= config.max_complexity else math.inf
            cache[e] = err
            front.offer(e, err, c)
        return err

    def polish(e: Expr) -> Expr:
        if not constants(e):
            return e
        out = optimize_constants(e, data, y, config)
        score(out)
        return out

    def init_island() -> list[Expr]:
        pop = [
            random_tree(variables, config, rng, 2 + i % config.init_depth, full=bool(i % 2))
            for i in range(config.population - 1)
        ]
        return pop + [Const(float(np.mean(y)))]

    def key(e: Expr):
        return _fitness_key(score(e), complexity(e), config.parsimony)

    def evolve(pop: list[Expr]) -> list[Expr]:
        def tournament() -> Expr:
            idx = rng.integers(len(pop), size=config.tournament)
            return min((pop[i] for i in idx), key=key)

        nxt = sorted(pop, key=key)[: config.elitism]
        while len(nxt) < len(pop):
            child = tournament()
            if rng.random() < config.p_crossover:
                child = crossover(child, tournament(), config, rng)
            if rng.random() < config.p_mutation:
                child = mutate(child, variables, config, rng)
            if rng.random() < config.p_const_opt:
                child = polish(child)
            score(child)
            nxt.append(child)
        return nxt

    def front_members() -> list[Expr]:
        # Constants of each front member are refined once.
        out = []
        for _, e, _ in front.items():
            if e not in polished_already and constants(e):
                p = polish(e)
                polished_already.update((e, p))
                e = p
            out.append(e)
        return out

    islands = [init_island() for _ in range(config.islands)]
    for gen in range(1, config.generations + 1):
        islands = [evolve(pop) for pop in islands]
        if gen % config.migration_interval and gen != config.generations:
            continue
        # Ring migration, then the front rejoins every island so that small
        # building blocks survive the selection pressure toward low MSE.
        k = min(config.migrants, config.population // 4)
        if k and len(islands) > 1:
            best = [sorted(pop, key=key)[:k] for pop in islands]
            for i, pop in enumerate(islands):
                pop.sort(key=key)
                pop[len(pop) - k :] = best[i - 1]
        elite = front_members()[: config.population // 2]
        for pop in islands:
            pop.sort(key=key)
            pop[len(pop) - len(elite) :] = elite
    return front
