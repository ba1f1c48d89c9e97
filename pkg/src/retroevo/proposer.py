"""Route proposers, reference-route retrieval and prompt construction.

Proposers turn a prompt into raw text.  ``HttpProposer`` posts a
chat-completion request; ``ScriptedProposer`` replays canned responses so
whole planner runs can be reproduced exactly.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .fingerprint import BitFingerprint, morgan_fingerprint, tanimoto
from .molgraph import Molecule, ParseError, parse_smiles
from .route import EvaluationReport, Route, RouteStep, route_to_block

DEFAULT_TEMPERATURE = 0.7
DEFAULT_RETRIEVAL = 3


class ProposerError(RuntimeError):
    pass


class EndpointError(ProposerError):
    pass


class ProposerTimeout(ProposerError):
    pass


Timeout = ProposerTimeout


class ScriptExhausted(ProposerError):
    pass


class EmptyDatabase(ValueError):
    pass


# --------------------------------------------------------------------------
# reference routes


@dataclass(frozen=True)
class RouteRecord:
    target: str
    steps: tuple[dict, ...]
    fingerprint: BitFingerprint = field(compare=False, repr=False)
    index: int = -1

    def as_route(self) -> Route:
        """Expand the stored (product, reaction, reactants) steps into full route steps."""
        current = [self.target]
        steps = []
        for s in self.steps:
            product = s["product"]
            reactants = tuple(s.get("reactants", ()))
            start = tuple(current)
            if product in current:
                current.remove(product)
            current.extend(reactants)
            steps.append(RouteStep(start, s.get("rational", ""), product, s.get("reaction", ""),
                                   reactants, tuple(current)))
        return Route(self.target, tuple(steps), "reference")


class RouteDatabase:
    def __init__(self, records: Iterable[RouteRecord] = ()):
        self.records: list[RouteRecord] = []
        for r in records:
            self.records.append(RouteRecord(r.target, r.steps, r.fingerprint, len(self.records)))

    def add(self, target: str, steps: Sequence[dict]) -> RouteRecord:
        m = parse_smiles(target)
        canon_steps = []
        for s in steps:
            step = dict(s)
            step["product"] = parse_smiles(s["product"]).canonical_smiles
            step["reactants"] = [parse_smiles(x).canonical_smiles for x in s.get("reactants", [])]
            canon_steps.append(step)
        rec = RouteRecord(m.canonical_smiles, tuple(canon_steps), morgan_fingerprint(m), len(self.records))
        self.records.append(rec)
        return rec

    def __len__(self):
        return len(self.records)


def load_route_db(path: str | Path) -> RouteDatabase:
    """JSON lines ``{"target", "steps": [{"product", "reaction", "reactants"}, ...]}``."""
    db = RouteDatabase()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            db.add(rec["target"], rec.get("steps", []))
        except (KeyError, json.JSONDecodeError, ParseError) as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return db


def weighted_sample(items: Sequence, weights: Sequence[float], k: int, rng: random.Random) -> list:
    """Draw ``k`` items without replacement, each draw proportional to the remaining weights.

    When every remaining weight is zero the draw is uniform.
    """
    pool = list(range(len(items)))
    w = [max(0.0, float(x)) for x in weights]
    out = []
    for _ in range(min(k, len(pool))):
        total = sum(w[i] for i in pool)
        if total <= 0:
            pick = pool[rng.randrange(len(pool))]
        else:
            r = rng.random() * total
            acc = 0.0
            pick = pool[-1]
            for i in pool:
                acc += w[i]
                if r < acc:
                    pick = i
                    break
        pool.remove(pick)
        out.append(items[pick])
    return out


def retrieve_reference_routes(query: Molecule, db: RouteDatabase, n: int = DEFAULT_RETRIEVAL,
                              mode: str = "top", rng: random.Random | None = None
                              ) -> list[tuple[RouteRecord, float]]:
    """Reference routes for ``query`` with their Tanimoto similarity.

    ``mode="top"`` returns the ``n`` most similar targets (ties by database
    order); ``mode="sample"`` draws ``n`` without replacement with weight
    equal to similarity.
    """
    if not db.records:
        raise EmptyDatabase("route database is empty")
    if n < 1:
        raise ValueError("n must be >= 1")
    fp = morgan_fingerprint(query)
    scored = [(r, tanimoto(fp, r.fingerprint)) for r in db.records]
    if mode == "top":
        scored.sort(key=lambda t: (-t[1], t[0].index))
        return scored[:n]
    if mode == "sample":
        if rng is None:
            raise ValueError("sampling needs an rng")
        return weighted_sample(scored, [s for _, s in scored], n, rng)
    raise ValueError(f"unknown retrieval mode {mode!r}")


# --------------------------------------------------------------------------
# prompts

_SCHEMA_EXAMPLE = """<ROUTE>
[
    {
        'Molecule set': "[Target]",
        'Rational': Reasoning for this step,
        'Product': "[Target]",
        'Reaction': "[Target>>ReactantA.ReactantB]",
        'Reactants': "[ReactantA, ReactantB]",
        'Updated molecule set': "[ReactantA, ReactantB]"
    },
    {
        'Molecule set': "[ReactantA, ReactantB]",
        'Rational': Reasoning for this step,
        'Product': "[ReactantA]",
        'Reaction': "[ReactantA>>PrecursorC.PrecursorD]",
        'Reactants': "[PrecursorC, PrecursorD]",
        'Updated molecule set': "[ReactantB, PrecursorC, PrecursorD]"
    }
]
</ROUTE>
<EXPLANATION>Your reasoning about the route as a whole.</EXPLANATION>"""

_FORMAT_RULES = """Write the route as a list of steps inside <ROUTE></ROUTE>, followed by an <EXPLANATION></EXPLANATION> block. Every step is a dictionary. Keep track of a molecule set holding everything that still has to be made or bought. In a step, pick one molecule of the 'Molecule set' as the product and disconnect it with a backward reaction. Then take the product out of the set, put the reactants in, and record the result as the step's 'Updated molecule set'. The next step starts from that updated set. After the final step every molecule left in the 'Updated molecule set' must be purchasable. The layout looks like this:

{schema}

Rules:
1. 'Molecule set' lists the molecules still to be obtained. {first_set_rule} Later steps start from the previous step's 'Updated molecule set'.
2. 'Rational' holds your analysis of the step as a quoted string.
3. 'Product' is the molecule made in this step; it must come from the 'Molecule set'. Give its SMILES as a quoted string.
4. 'Reaction' is a reaction producing the product, written as reaction SMILES in the form [Product>>Reactant1.Reactant2].
5. 'Reactants' lists the reactant SMILES as quoted strings.
6. 'Updated molecule set' is the 'Molecule set' with the product removed and the reactants added. After the last step it must contain only purchasable molecules.
7. In <EXPLANATION>, review the whole route and confirm that the final updated set is purchasable."""

_SMILES_NOTE = ("Give every molecule as SMILES, e.g. ClCl for chlorine, BrBr for bromine, O for water, "
                "[H]Br for hydrogen bromide and N for ammonia. Hydrogens stay implicit unless they are needed.")


def _reference_section(refs: Sequence, heading: str) -> str:
    blocks = []
    for r in refs:
        if isinstance(r, tuple):
            r = r[0]
        route = r.as_route() if isinstance(r, RouteRecord) else r
        blocks.append(route_to_block(route))
    if not blocks:
        return ""
    return heading + "\n" + "\n".join(blocks) + "\n\n"


def build_init_prompt(target: str, refs: Sequence = ()) -> str:
    rules = _FORMAT_RULES.format(schema=_SCHEMA_EXAMPLE,
                                 first_set_rule="The first step starts from the target molecule alone.")
    parts = [
        "You are an expert synthetic chemist. Propose a retrosynthesis route for the target "
        "molecule below, given as SMILES.",
        "",
        "A retrosynthesis route is a chain of backward steps that begins at the target and ends "
        "at commercially available compounds. Use known reaction types and keep track of "
        "stereochemistry.",
        "",
        rules,
        "",
        f"Target molecule: {target}",
        "",
    ]
    text = "\n".join(parts)
    text += _reference_section(refs, "Reference routes for similar or representative molecules:")
    text += ("Now write a route for the target molecule. Use the reference routes where they help, "
             "or rely on your own chemical knowledge.\n")
    return text


def build_mutation_prompt(molecule_set: Sequence[str], partial_route: Sequence[RouteStep] | Route,
                          feedback, refs: Sequence = ()) -> str:
    steps = partial_route.steps if isinstance(partial_route, Route) else tuple(partial_route)
    fb = feedback.text if isinstance(feedback, Feedback) else str(feedback)
    rules = _FORMAT_RULES.format(schema=_SCHEMA_EXAMPLE,
                                 first_set_rule="The first step starts from the given starting molecule set.")
    parts = [
        "You are an expert synthetic chemist. Revise a retrosynthesis route for a set of molecules "
        "given as SMILES.",
        "",
        "Start from the given molecule set. In each step apply one backward reaction: remove its "
        "product from the set and add its reactants. Continue until every molecule in the set is "
        "commercially available. Use known reaction types and keep track of stereochemistry, "
        "including E/Z double-bond geometry.",
        "",
        rules,
        "",
        "Starting molecule set: " + json.dumps(list(molecule_set)),
        "",
    ]
    text = "\n".join(parts)
    if steps:
        text += "Current route from the first step that needs changes:\n" + route_to_block(steps) + "\n\n"
    text += "Feedback on the current route:\n" + fb.rstrip() + "\n\n"
    text += _reference_section(refs, "Reference routes for molecules close to the starting set:")
    text += ("Now write a route for the starting molecule set. Use the reference routes where they "
             "help, or rely on your own chemical knowledge. " + _SMILES_NOTE + "\n")
    return text


def build_single_step_prompt(product: str, refs: Sequence = ()) -> str:
    text = (
        "You are an expert synthetic chemist. Suggest one backward reaction that makes the product "
        "below from simpler, preferably purchasable, reactants.\n\n"
        f"Product: {product}\n\n"
        "Answer with the reaction SMILES inside <REACTION></REACTION>, written as "
        "[Product>>Reactant1.Reactant2]. " + _SMILES_NOTE + "\n"
    )
    text += _reference_section(refs, "\nReference routes for similar molecules:")
    return text


def build_designer_prompt(parents: Sequence[tuple[str, float]], oracle_description: str) -> str:
    lines = [f"I have {len(parents)} molecules with their scores. {oracle_description}"]
    for k, (smi, score) in enumerate(parents, start=1):
        lines.append(f"Molecule {k}: {smi}, score {score:.4f}")
    lines += [
        "",
        "Propose one new molecule that should score higher and that can be made from purchasable "
        "building blocks. You may combine or edit the molecules above or design a new one.",
        "",
        "Reply in this format:",
        "<EXPLANATION>Your reasoning</EXPLANATION>",
        "<MOLECULE>SMILES of the proposed molecule</MOLECULE>",
        "",
        "Requirements:",
        "1. In <EXPLANATION>, say how the edits should raise the score and how the molecule could be synthesised.",
        "2. In <MOLECULE>, give only the SMILES of the proposed molecule.",
    ]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# feedback


@dataclass(frozen=True)
class Feedback:
    text: str
    step_index: int | None
    prefix: tuple[RouteStep, ...]


def render_feedback(route: Route, report: EvaluationReport, stock=None) -> Feedback:
    """Describe the first invalid step (or the unpurchasable frontier) for a mutation prompt."""
    k = report.first_invalid_step
    lines = []
    if k is None:
        if not route.steps:
            lines.append("The route has no steps yet; the target still has to be made.")
        else:
            lines.append("Every step is valid, but the final molecule set is not fully purchasable.")
        missing = [s for s in report.frontier if stock is None or s not in stock.smiles]
        if missing:
            lines.append("Molecule availability: not purchasable: " + ", ".join(missing))
        return Feedback("\n".join(lines), None if not route.steps else len(route.steps) - 1,
                        tuple(route.steps))
    v = report.verdicts[k]
    kept = "" if not k else " Step 1 is valid and is kept." if k == 1 else f" Steps 1-{k} are valid and are kept."
    lines.append(f"Step {k + 1} is the first invalid step." + kept)
    if not v.molecule_valid:
        lines.append("Molecule validity: these SMILES are not valid: " + ", ".join(v.invalid_molecules))
    if v.reaction_exists is False:
        lines.append("Reaction existence: the reaction matches no known reaction that applies to the product.")
    if v.reaction_valid is False:
        lines.append("Reaction validity: the matched reaction cannot produce the declared product.")
    if v.connected is False:
        lines.append("Route connectivity: the step does not follow from the previous molecule set "
                     "(expected " + json.dumps(list(report.start_set)) + ").")
    unavailable = [s for s, ok in v.availability.items() if not ok]
    if unavailable:
        lines.append("Molecule availability: not purchasable: " + ", ".join(unavailable))
    for msg in v.messages:
        lines.append("- " + msg)
    return Feedback("\n".join(lines), k, tuple(route.steps[:k]))


# --------------------------------------------------------------------------
# proposers


class Proposer(Protocol):
    def propose(self, prompt: str) -> str: ...


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode()).hexdigest()


@dataclass
class ScriptRule:
    """Answer prompts that contain ``pattern`` (kind "substring") or whose hash starts with it."""

    pattern: str
    responses: list[str]
    kind: str = "substring"
    repeat: bool = False

    def matches(self, prompt: str) -> bool:
        if self.kind == "hash":
            return prompt_hash(prompt).startswith(self.pattern)
        return self.pattern in prompt


class ScriptedProposer:
    """Replays canned responses: matching rules first (in order), then the FIFO queue."""

    sequential = True

    def __init__(self, responses: Iterable[str] = (), rules: Iterable[ScriptRule] = (),
                 repeat_last: bool = False):
        self.queue = list(responses)
        self.rules = list(rules)
        self.repeat_last = repeat_last
        self.calls = 0
        self.prompts: list[str] = []
        self._last: str | None = None
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedProposer:
        """JSON ``{"responses": [...], "rules": [{"pattern", "responses", "kind"?, "repeat"?}], "repeat_last"?}``."""
        data = json.loads(Path(path).read_text())
        if isinstance(data, list):
            return cls(data)
        rules = [ScriptRule(r["pattern"], list(r["responses"]), r.get("kind", "substring"),
                            bool(r.get("repeat", False))) for r in data.get("rules", [])]
        return cls(data.get("responses", []), rules, bool(data.get("repeat_last", False)))

    def propose(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
            self.prompts.append(prompt)
            for rule in self.rules:
                if rule.responses and rule.matches(prompt):
                    if rule.repeat and len(rule.responses) == 1:
                        return rule.responses[0]
                    return rule.responses.pop(0)
            if self.queue:
                self._last = self.queue.pop(0)
                return self._last
            if self.repeat_last and self._last is not None:
                return self._last
            raise ScriptExhausted("scripted proposer has no response left")


class SampledProposer:
    """Returns one of ``choices`` at random (seeded), optionally weighted.

    ``rules`` maps a prompt substring to its own (choices, weights); the first
    matching rule wins and unmatched prompts fall back to ``choices``.
    """

    sequential = True

    def __init__(self, choices: Sequence[str] = (), weights: Sequence[float] | None = None, seed: int = 0,
                 rules: dict[str, tuple[Sequence[str], Sequence[float] | None]] | None = None):
        self.choices = list(choices)
        self.weights = list(weights) if weights is not None else None
        self.rules = dict(rules or {})
        self.rng = random.Random(seed)
        self.calls = 0
        self._lock = threading.Lock()

    def propose(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
            for pattern, (choices, weights) in self.rules.items():
                if pattern in prompt:
                    return self.rng.choices(list(choices), weights=weights)[0]
            if not self.choices:
                raise ScriptExhausted("no sampled response matches the prompt")
            return self.rng.choices(self.choices, weights=self.weights)[0]


def load_script(path: str | Path, seed: int = 0) -> ScriptedProposer | SampledProposer:
    """Build a scripted proposer from JSON; ``{"kind": "sampled", ...}`` gives a SampledProposer."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and data.get("kind") == "sampled":
        rules = {r["pattern"]: (r["choices"], r.get("weights")) for r in data.get("rules", [])}
        return SampledProposer(data.get("choices", []), data.get("weights"), seed, rules)
    return ScriptedProposer.from_file(path)


@dataclass
class ProposerConfig:
    kind: str = "scripted"
    endpoint: str | None = None
    api_key: str | None = None
    model: str = "gpt-4o"
    temperature: float = DEFAULT_TEMPERATURE
    max_retries: int = 3
    timeout: float = 60.0
    backoff: float = 1.0
    n_o: int = DEFAULT_RETRIEVAL

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.n_o < 1:
            raise ValueError("n_o must be >= 1")


class HttpProposer:
    """Chat-completion client.

    Request: POST ``endpoint`` with ``{"model", "messages": [{"role": "user",
    "content": prompt}], "temperature"}`` and a bearer token.  The reply's
    ``choices[0].message.content`` is returned.  Transport errors and 5xx
    replies are retried with exponential backoff.
    """

    sequential = False

    def __init__(self, config: ProposerConfig, client=None):
        import httpx

        if not config.endpoint:
            raise EndpointError("no endpoint configured")
        self.config = config
        self._httpx = httpx
        self._client = client or httpx.Client(timeout=config.timeout)
        self.calls = 0
        self._lock = threading.Lock()

    def propose(self, prompt: str) -> str:
        cfg, httpx = self.config, self._httpx
        with self._lock:
            self.calls += 1
        body = {"model": cfg.model, "messages": [{"role": "user", "content": prompt}],
                "temperature": cfg.temperature}
        headers = {"Content-Type": "application/json"}
        if cfg.api_key:
            headers["Authorization"] = f"Bearer {cfg.api_key}"
        last: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                time.sleep(cfg.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(cfg.endpoint, json=body, headers=headers, timeout=cfg.timeout)
            except httpx.TimeoutException as exc:
                last = ProposerTimeout(str(exc))
                continue
            except httpx.TransportError as exc:
                last = EndpointError(f"transport error: {exc}")
                continue
            if resp.status_code >= 500:
                last = EndpointError(f"server error {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise EndpointError(f"request rejected with {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise EndpointError(f"unexpected response body: {exc}") from exc
        raise last if last is not None else EndpointError("request failed")


def make_proposer(config: ProposerConfig, script: str | Path | None = None, seed: int = 0) -> Proposer:
    if config.kind == "http":
        return HttpProposer(config)
    if config.kind == "scripted":
        return load_script(script, seed) if script else ScriptedProposer()
    raise ValueError(f"unknown proposer kind {config.kind!r}")


def propose_many(proposer: Proposer, prompts: Sequence[str], parallelism: int = 1) -> list:
    """Responses (or the raised ProposerError) for each prompt, in prompt order."""

    def one(p):
        try:
            return proposer.propose(p)
        except ProposerError as exc:
            return exc

    if parallelism <= 1 or getattr(proposer, "sequential", True) or len(prompts) <= 1:
        return [one(p) for p in prompts]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, prompts))
