"""Step-wise search: single-step prediction by self-consistency, MCTS and Retro*-0.

Both searches work on molecule names through a ``Predictor`` (product ->
list of Expansion) and a purchasability test, so they run equally on
SMILES with a proposer-backed predictor and on abstract toy worlds.
"""

from __future__ import annotations

import math
import re
import time
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Hashable, Iterable, Sequence

from .molgraph import Molecule, ParseError, parse_smiles
from .proposer import Proposer, ProposerError, build_single_step_prompt, propose_many
from .route import Route, RouteStep
from .template import NonExistent, ReactionDatabase, TemplateLibrary, ground_reaction, grounded_reactant_sets

DEFAULT_K = 4
DEFAULT_UCB = 1.41
DEFAULT_POLICY_TEMPERATURE = 3.0
DEFAULT_VALUE = 0.5
DEFAULT_PROB_FLOOR = 1e-5


# --------------------------------------------------------------------------
# self-consistency


@dataclass(frozen=True)
class GroundedReaction:
    label: str  # template id or database reaction, usable as a route step's reaction
    reactants: tuple[str, ...]


@dataclass(frozen=True)
class StepPrediction:
    reaction: Hashable
    p: Fraction
    count: int

    @property
    def probability(self) -> float:
        return float(self.p)


def self_consistency(samples: Sequence[Hashable], k: int | None = None) -> list[StepPrediction]:
    """p(n) = count(n) / k over the unique samples, most frequent first (ties by first occurrence)."""
    if k is None:
        k = len(samples)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(samples) != k:
        raise ValueError(f"expected {k} samples, got {len(samples)}")
    counts = Counter(samples)
    first = {}
    for i, s in enumerate(samples):
        first.setdefault(s, i)
    ordered = sorted(counts, key=lambda s: (-counts[s], first[s]))
    return [StepPrediction(s, Fraction(counts[s], k), counts[s]) for s in ordered]


_REACTION_RE = re.compile(r"<\s*REACTION\s*>(.*?)<\s*/\s*REACTION\s*>", re.S | re.I)


def extract_reaction(text: str) -> str:
    """The proposed reaction: a <REACTION> block, else the first token with '>', else the text."""
    m = _REACTION_RE.search(text)
    if m:
        s = m.group(1).strip()
    else:
        tokens = [t for t in re.split(r"\s+", text.strip()) if ">" in t]
        s = tokens[0] if tokens else text.strip()
    s = s.strip().strip("'\"`")
    if s.startswith("[") and s.endswith("]") and ">" in s:
        try:
            parse_smiles(s.split(">", 1)[0])
        except ParseError:
            s = s[1:-1]
    return s.strip()


def ground_sample(text: str, product: Molecule, templates: TemplateLibrary | None,
                  db: ReactionDatabase) -> GroundedReaction | None:
    proposed = extract_reaction(text)
    try:
        outcome = ground_reaction(proposed, product, db, templates)
    except ParseError:
        return None
    if isinstance(outcome, NonExistent):
        return None
    sets = grounded_reactant_sets(outcome, product, templates)
    if not sets:
        return None
    rec = outcome.record
    label = rec.template_id if rec.template_id is not None and templates is not None \
        and templates.get(rec.template_id) is not None else rec.rsmi
    return GroundedReaction(label, sets[0])


def predict_single_step(product: Molecule, proposer: Proposer, templates: TemplateLibrary | None,
                        db: ReactionDatabase, k: int = DEFAULT_K, parallelism: int = 1) -> list[StepPrediction]:
    """Ask ``k`` times, ground each answer, drop the ungroundable ones and count the rest.

    Probabilities are renormalised over the surviving samples.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    prompt = build_single_step_prompt(product.canonical_smiles)
    answers = propose_many(proposer, [prompt] * k, parallelism)
    survivors = []
    for a in answers:
        if isinstance(a, ProposerError):
            raise a
        g = ground_sample(a, product, templates, db)
        if g is not None:
            survivors.append(g)
    if not survivors:
        return []
    return self_consistency(survivors)


# --------------------------------------------------------------------------
# predictor interface


@dataclass(frozen=True)
class Expansion:
    label: str
    reactants: tuple[str, ...]
    p: float


Predictor = Callable[[str], Sequence[Expansion]]


class TablePredictor:
    """Fixed expansions per molecule name."""

    def __init__(self, table: dict[str, Sequence[Expansion]]):
        self.table = {k: list(v) for k, v in table.items()}
        self.calls = 0

    def __call__(self, mol: str) -> list[Expansion]:
        self.calls += 1
        return list(self.table.get(mol, ()))


class ProposerPredictor:
    """Self-consistency predictions from a proposer, cached per canonical product."""

    def __init__(self, proposer: Proposer, templates: TemplateLibrary | None, db: ReactionDatabase,
                 k: int = DEFAULT_K, parallelism: int = 1):
        self.proposer, self.templates, self.db = proposer, templates, db
        self.k, self.parallelism = k, parallelism
        self.cache: dict[str, list[Expansion]] = {}

    def __call__(self, mol: str) -> list[Expansion]:
        if mol not in self.cache:
            try:
                m = parse_smiles(mol)
            except ParseError:
                self.cache[mol] = []
                return []
            preds = predict_single_step(m, self.proposer, self.templates, self.db, self.k, self.parallelism)
            self.cache[mol] = [Expansion(p.reaction.label, p.reaction.reactants, float(p.p)) for p in preds]
        return list(self.cache[mol])


def policy_priors(ps: Sequence[float], temperature: float = DEFAULT_POLICY_TEMPERATURE) -> list[float]:
    """Softmax of log-probabilities divided by the temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if not ps:
        return []
    logits = [math.log(max(p, 1e-300)) / temperature for p in ps]
    top = max(logits)
    ex = [math.exp(x - top) for x in logits]
    z = sum(ex)
    return [e / z for e in ex]


def terminal_reward(molecules: Iterable[str], purchasable: Callable[[str], bool]) -> float:
    return 1.0 if all(purchasable(m) for m in molecules) else 0.0


# --------------------------------------------------------------------------
# results


@dataclass
class SearchConfig:
    algorithm: str = "mcts"
    iterations: int = 500
    k: int = DEFAULT_K
    ucb_c: float = DEFAULT_UCB
    policy_temperature: float = DEFAULT_POLICY_TEMPERATURE
    value_constant: float = DEFAULT_VALUE
    prob_floor: float = DEFAULT_PROB_FLOOR
    max_depth: int = 10
    time_limit: float = 3600.0
    stop_at_first: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("mcts", "retrostar"):
            raise ValueError("algorithm must be 'mcts' or 'retrostar'")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.policy_temperature <= 0:
            raise ValueError("policy temperature must be > 0")
        if not 0 < self.prob_floor <= 1:
            raise ValueError("probability floor must be in (0, 1]")

    def heuristic(self, mol: str) -> float:
        """Retro*-0 search heuristic."""
        return 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SearchResult:
    target: str
    solved: bool
    reactions: list[tuple[str, Expansion]]  # (product, expansion) in route order
    cost: float = math.inf
    iterations: int = 0
    stats: dict = field(default_factory=dict)

    def to_route(self, provenance: str = "search") -> Route:
        return reactions_to_route(self.target, self.reactions, provenance)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "solved": self.solved,
            "cost": None if math.isinf(self.cost) else self.cost,
            "iterations": self.iterations,
            "stats": dict(self.stats),
            "route": self.to_route().to_dict(),
        }


def reactions_to_route(target: str, reactions: Sequence[tuple[str, Expansion]],
                       provenance: str = "search") -> Route:
    current = [target]
    steps = []
    for product, e in reactions:
        before = tuple(current)
        current.remove(product)
        current.extend(e.reactants)
        steps.append(RouteStep(before, f"{e.label} (p={e.p:.4g})", product, e.label,
                               tuple(e.reactants), tuple(current)))
    return Route(target, tuple(steps), provenance)


# --------------------------------------------------------------------------
# MCTS


class _MNode:
    __slots__ = ("open", "done", "path", "children", "priors", "actions", "n", "w", "expanded", "depth")

    def __init__(self, open_mols: tuple[str, ...], done: tuple, depth: int):
        self.open = open_mols  # unpurchasable molecules still to make, sorted
        self.done = done  # (product, expansion) taken to reach this state
        self.children: list[_MNode] = []
        self.priors: list[float] = []
        self.n = 0
        self.w = 0.0
        self.expanded = False
        self.depth = depth


def mcts_search(target: str, predictor: Predictor, purchasable: Callable[[str], bool],
                config: SearchConfig | None = None) -> SearchResult:
    """MCTS over molecule-set states; the first open molecule is expanded at each state.

    Terminal reward is 1.0 when every molecule is purchasable and 0.0 for
    dead ends; unsolved leaves are valued at ``value_constant``.  Children
    are chosen by Q + c * prior * sqrt(N) / (1 + n); unvisited children
    have Q = value_constant and ties go to the lower index.
    """
    cfg = config or SearchConfig()
    start = time.monotonic()
    root = _MNode(tuple(sorted(m for m in [target] if not purchasable(m))), (), 0)
    if not root.open:
        return SearchResult(target, True, [], 0.0, 0, {"root_visits": 0})
    solutions: list[_MNode] = []
    it = 0

    def score(parent: _MNode, i: int) -> float:
        ch = parent.children[i]
        q = ch.w / ch.n if ch.n else cfg.value_constant
        return q + cfg.ucb_c * parent.priors[i] * math.sqrt(parent.n) / (1 + ch.n)

    def select_child(parent: _MNode) -> int:
        best, best_i = -math.inf, 0
        for i in range(len(parent.children)):
            s = score(parent, i)
            if s > best:
                best, best_i = s, i
        return best_i

    while it < cfg.iterations and time.monotonic() - start < cfg.time_limit:
        it += 1
        node, path = root, [root]
        while node.expanded and node.children and node.open:
            node = node.children[select_child(node)]
            path.append(node)
        if not node.open:
            value = 1.0
        elif node.expanded or node.depth >= cfg.max_depth:
            value = 0.0
        else:
            node.expanded = True
            mol, rest = node.open[0], node.open[1:]
            ancestors = {p for p, _ in node.done} | {target}
            exps = [e for e in predictor(mol) if not ancestors.intersection(e.reactants)]
            for e in exps:
                child_open = tuple(sorted(rest + tuple(r for r in e.reactants if not purchasable(r))))
                node.children.append(_MNode(child_open, node.done + ((mol, e),), node.depth + 1))
            node.priors = policy_priors([e.p for e in exps], cfg.policy_temperature)
            solved_children = [c for c in node.children if not c.open]
            if not node.children:
                value = 0.0
            elif solved_children:
                node = solved_children[0]
                path.append(node)
                value = terminal_reward((), purchasable)
            else:
                value = cfg.value_constant
        for p in path:
            p.n += 1
            p.w += value
        if not node.open and node not in solutions:
            solutions.append(node)
            if cfg.stop_at_first:
                break
    stats = {"root_visits": root.n, "solutions": len(solutions)}
    if not solutions:
        return SearchResult(target, False, [], math.inf, it, stats)
    best = min(solutions, key=lambda s: _route_cost(s.done, cfg.prob_floor))
    return SearchResult(target, True, list(best.done), _route_cost(best.done, cfg.prob_floor), it, stats)


def _route_cost(reactions: Iterable[tuple[str, Expansion]], floor: float) -> float:
    return sum(reaction_cost(e.p, floor) for _, e in reactions)


def reaction_cost(p: float, floor: float = DEFAULT_PROB_FLOOR) -> float:
    """-log of the pseudo-probability, with the probability floored at ``floor``."""
    return -math.log(max(p, floor))


# --------------------------------------------------------------------------
# Retro*-0


class _Or:
    __slots__ = ("mol", "parent", "children", "expanded", "purchasable", "rn", "sc", "ancestors")

    def __init__(self, mol, parent, purchasable, ancestors):
        self.mol = mol
        self.parent: _And | None = parent
        self.children: list[_And] = []
        self.expanded = False
        self.purchasable = purchasable
        self.ancestors = ancestors
        self.rn = 0.0  # lower bound (heuristic 0 for open leaves)
        self.sc = 0.0 if purchasable else math.inf  # cost of the best fully solved subtree

    def update(self):
        if self.purchasable:
            self.rn = self.sc = 0.0
        elif not self.expanded:
            self.rn, self.sc = 0.0, math.inf
        else:
            self.rn = min((a.rn for a in self.children), default=math.inf)
            self.sc = min((a.sc for a in self.children), default=math.inf)


class _And:
    __slots__ = ("exp", "parent", "children", "cost", "rn", "sc")

    def __init__(self, exp: Expansion, parent: _Or, cost: float):
        self.exp = exp
        self.parent = parent
        self.children: list[_Or] = []
        self.cost = cost
        self.rn = self.sc = cost

    def update(self):
        self.rn = self.cost + sum(c.rn for c in self.children)
        self.sc = self.cost + sum(c.sc for c in self.children)


def retrostar_search(target: str, predictor: Predictor, purchasable: Callable[[str], bool],
                     config: SearchConfig | None = None) -> SearchResult:
    """Best-first AND-OR search with heuristic 0.

    Purchasable molecules cost 0, reactions cost -log(max(p, floor)).  The
    open leaf on the current cheapest partial tree is expanded until that
    tree is fully solved, which makes the returned route cost-optimal.
    Reactions that would reintroduce an ancestor molecule are skipped.
    """
    cfg = config or SearchConfig(algorithm="retrostar")
    start = time.monotonic()
    root = _Or(target, None, purchasable(target), frozenset())
    it = 0
    expansions = 0

    def leaf(node: _Or) -> _Or | None:
        while True:
            if not node.expanded:
                return node
            best = min(node.children, key=lambda a: a.rn)  # min keeps the first on ties
            nxt = None
            for c in best.children:
                if c.sc > c.rn:
                    nxt = c
                    break
            if nxt is None:
                return None
            node = nxt

    while root.sc > root.rn and not math.isinf(root.rn):
        if it >= cfg.iterations or time.monotonic() - start >= cfg.time_limit:
            break
        node = leaf(root)
        if node is None:
            break
        it += 1
        expansions += 1
        node.expanded = True
        forbidden = node.ancestors | {node.mol}
        for e in predictor(node.mol):
            if forbidden.intersection(e.reactants):
                continue
            a = _And(e, node, reaction_cost(e.p, cfg.prob_floor))
            for r in e.reactants:
                o = _Or(r, a, purchasable(r), forbidden)
                a.children.append(o)
            a.update()
            node.children.append(a)
        n: _Or | _And | None = node
        while n is not None:
            n.update()
            n = n.parent
    stats = {"expansions": expansions, "lower_bound": root.rn}
    if math.isinf(root.sc):
        return SearchResult(target, False, [], math.inf, it, stats)
    return SearchResult(target, True, _solved_reactions(root), root.sc, it, stats)


def _solved_reactions(root: _Or) -> list[tuple[str, Expansion]]:
    out = []

    def visit(o: _Or):
        if o.purchasable:
            return
        best = min((a for a in o.children), key=lambda a: a.sc)
        out.append((o.mol, best.exp))
        for c in best.children:
            visit(c)

    visit(root)
    return out


def brute_force_min_cost(target: str, predictor: Predictor, purchasable: Callable[[str], bool],
                         floor: float = DEFAULT_PROB_FLOOR) -> float:
    """Minimum route cost by enumerating every route tree (no molecule under itself)."""
    memo: dict[tuple[str, frozenset], float] = {}

    def best(m: str, anc: frozenset) -> float:
        if purchasable(m):
            return 0.0
        key = (m, anc)
        if key in memo:
            return memo[key]
        inner = anc | {m}
        out = math.inf
        for e in predictor(m):
            if inner.intersection(e.reactants):
                continue
            total = reaction_cost(e.p, floor)
            for r in e.reactants:
                total += best(r, inner)
                if math.isinf(total):
                    break
            out = min(out, total)
        memo[key] = out
        return out

    return best(target, frozenset())


def run_search(target: str, predictor: Predictor, purchasable: Callable[[str], bool],
               config: SearchConfig) -> SearchResult:
    if config.algorithm == "retrostar":
        return retrostar_search(target, predictor, purchasable, config)
    return mcts_search(target, predictor, purchasable, config)
