"""Regenerate the packaged toy worlds under src/retroevo/data/toy.

Prompt keys in the scripts use canonical SMILES, so the files are built
from code rather than typed by hand.
"""

from __future__ import annotations

import json
from pathlib import Path

from retroevo.molgraph import canonicalize
from retroevo.route import Route, RouteStep, route_to_block

ROOT = Path(__file__).resolve().parents[1] / "src" / "retroevo" / "data" / "toy"

TEMPLATES = {
    "amide": ("[C:1](=[O:2])[NH:3][#6:4]>>[C:1](=[O:2])[OH].[NH2:3][#6:4]", "amide coupling"),
    "ester": ("[C:1](=[O:2])[O:3][CH3:4]>>[C:1](=[O:2])[OH].[OH:3][CH3:4]", "methyl esterification"),
    "boc": ("[NH2:1][C:2]>>CC(C)(C)OC(=O)[NH:1][C:2]", "Boc deprotection"),
    "suzuki": ("[c:1]-[c:2]>>[c:1]B(O)O.[c:2]Br", "Suzuki coupling"),
    "redam": ("[CH2:1][NH:2][#6:3]>>[CH:1]=O.[NH2:2][#6:3]", "reductive amination"),
    "ether": ("[CH2:1][O:2][c:3]>>[CH2:1]Br.[OH:2][c:3]", "Williamson ether synthesis"),
    "sulfonamide": ("[S:1](=[O:2])(=[O:3])[NH:4][#6:5]>>[S:1](=[O:2])(=[O:3])Cl.[NH2:4][#6:5]",
                    "sulfonamide formation"),
}

REACTIONS = [
    ("CC(=O)O.NCc1ccccc1>>CC(=O)NCc1ccccc1", "amide"),
    ("O=C(O)c1ccccc1.Nc1ccccc1>>O=C(Nc1ccccc1)c1ccccc1", "amide"),
    ("CC(=O)O.NCCC>>CC(=O)NCCC", "amide"),
    ("O=C(O)CC.CO>>COC(=O)CC", "ester"),
    ("OB(O)c1ccccc1.Brc1ccccc1>>c1ccc(-c2ccccc2)cc1", "suzuki"),
    ("BrCc1ccccc1.Oc1ccc(C)cc1>>Cc1ccc(OCc2ccccc2)cc1", "ether"),
    ("CS(=O)(=O)Cl.NCc1ccccc1>>CS(=O)(=O)NCc1ccccc1", "sulfonamide"),
    ("O=Cc1ccccc1.NCC>>CCNCc1ccccc1", "redam"),
    ("CC(C)(C)OC(=O)NCCO>>NCCO", "boc"),
]

REFERENCE_ROUTES = [
    ("CC(=O)NCCC", [("CC(=O)NCCC", "CC(=O)NCCC>>CC(=O)O.NCCC", ["CC(=O)O", "NCCC"])]),
    ("COC(=O)CC", [("COC(=O)CC", "COC(=O)CC>>O=C(O)CC.CO", ["O=C(O)CC", "CO"])]),
    ("c1ccc(-c2ccccc2)cc1", [("c1ccc(-c2ccccc2)cc1", "c1ccc(-c2ccccc2)cc1>>OB(O)c1ccccc1.Brc1ccccc1",
                               ["OB(O)c1ccccc1", "Brc1ccccc1"])]),
    ("CCNCc1ccccc1", [("CCNCc1ccccc1", "CCNCc1ccccc1>>O=Cc1ccccc1.NCC", ["O=Cc1ccccc1", "NCC"])]),
    ("CC(=O)NCCO", [("CC(=O)NCCO", "CC(=O)NCCO>>CC(=O)O.NCCO", ["CC(=O)O", "NCCO"]),
                    ("NCCO", "NCCO>>CC(C)(C)OC(=O)NCCO", ["CC(C)(C)OC(=O)NCCO"])]),
]


def steps(start: list[str], moves: list[tuple[str, str, list[str]]], rational: str = "") -> list[RouteStep]:
    current = list(start)
    out = []
    for product, reaction, reactants in moves:
        before = tuple(current)
        current.remove(product)
        current.extend(reactants)
        out.append(RouteStep(before, rational or f"Disconnect {product}.", product, reaction,
                             tuple(reactants), tuple(current)))
    return out


def answer(route_steps: list[RouteStep], note: str = "All final molecules are purchasable.") -> str:
    return route_to_block(route_steps) + f"\n<EXPLANATION>{note}</EXPLANATION>"


def init_key(target: str) -> str:
    return f"Target molecule: {canonicalize(target)}\n"


def mutation_key(molecule_set: list[str]) -> str:
    return "Starting molecule set: " + json.dumps(sorted(canonicalize(s) for s in molecule_set))


def rule(pattern: str, text: str) -> dict:
    return {"pattern": pattern, "responses": [text], "kind": "substring", "repeat": True}


def write_common(d: Path, stock: list[str], templates: list[str], reactions, routes):
    d.mkdir(parents=True, exist_ok=True)
    (d / "stock.smi").write_text("# purchasable building blocks\n" + "".join(
        f"{s}\tB{i:03d}\n" for i, s in enumerate(stock)))
    (d / "templates.jsonl").write_text("".join(
        json.dumps({"id": t, "smarts": TEMPLATES[t][0], "name": TEMPLATES[t][1]}) + "\n" for t in templates))
    (d / "reactions.jsonl").write_text("".join(
        json.dumps({"rsmi": r, "template_id": t}) + "\n" for r, t in reactions))
    lines = []
    for target, moves in routes:
        lines.append(json.dumps({"target": target, "steps": [
            {"product": p, "reaction": r, "reactants": rs} for p, r, rs in moves]}))
    (d / "routes.jsonl").write_text("".join(x + "\n" for x in lines))


def planner_world():
    d = ROOT / "planner"
    stock = ["CC(=O)O", "NCc1ccccc1", "Nc1ccccc1", "O=C(O)c1ccccc1", "CO", "OB(O)c1ccccc1",
             "Brc1ccncc1", "COc1ccc(Br)cc1", "BrCc1ccccc1", "Oc1ccccc1", "CS(=O)(=O)Cl", "NCCC(=O)O",
             "Nc1ccc(Br)cc1", "CC(C)(C)OC(=O)NCc1ccccc1", "CCO", "CC(C)O", "O", "N", "ClCl", "CCN",
             "c1ccccc1", "O=C(O)CC", "NCCC", "Brc1ccccc1", "NCC", "NCCO", "O=Cc1ccccc1"]
    write_common(d, stock, list(TEMPLATES), REACTIONS, REFERENCE_ROUTES)

    targets = ["CC(=O)NCc1ccccc1", "CC(=O)Nc1ccccc1", "O=C(NCc1ccccc1)c1ccccc1", "COC(=O)c1ccccc1",
               "c1ccc(-c2ccncc2)cc1", "COc1ccc(-c2ccccc2)cc1", "c1ccc(OCc2ccccc2)cc1",
               "CS(=O)(=O)Nc1ccccc1", "CC(=O)NCCC(=O)OC", "CC(=O)Nc1ccc(-c2ccccc2)cc1"]
    (d / "targets.txt").write_text("".join(t + "\n" for t in targets))

    def one(t, reactants):
        return steps([t], [(t, f"{t}>>{'.'.join(reactants)}", reactants)])

    rules = []
    # immediate solves
    for t, rs in [(targets[0], ["CC(=O)O", "NCc1ccccc1"]), (targets[1], ["CC(=O)O", "Nc1ccccc1"]),
                  (targets[2], ["O=C(O)c1ccccc1", "NCc1ccccc1"]), (targets[3], ["O=C(O)c1ccccc1", "CO"]),
                  (targets[7], ["CS(=O)(=O)Cl", "Nc1ccccc1"])]:
        rules.append(rule(init_key(t), answer(one(t, rs))))
    # disconnected: a reactant is dropped from the updated set
    t = targets[4]
    bad = one(t, ["OB(O)c1ccccc1", "Brc1ccncc1"])[0]
    bad = RouteStep(bad.molecule_set, bad.rational, bad.product, bad.reaction, bad.reactants, ("OB(O)c1ccccc1",))
    rules.append(rule(init_key(t), answer([bad], "Only the boronic acid is left.")))
    rules.append(rule(mutation_key([t]), answer(one(t, ["OB(O)c1ccccc1", "Brc1ccncc1"]))))
    # invalid SMILES in a reactant
    t = targets[5]
    bad = one(t, ["OB(O)c1ccccc", "COc1ccc(Br)cc1"])
    rules.append(rule(init_key(t), answer(bad)))
    rules.append(rule(mutation_key([t]), answer(one(t, ["OB(O)c1ccccc1", "COc1ccc(Br)cc1"]))))
    # no route block at all
    t = targets[6]
    rules.append(rule(init_key(t), "I would start from benzyl bromide, but I am not sure of the details."))
    rules.append(rule(mutation_key([t]), answer(one(t, ["BrCc1ccccc1", "Oc1ccccc1"]))))
    # first step only; the ester still has to be made
    t = targets[8]
    first = steps([t], [(t, f"{t}>>CC(=O)O.NCCC(=O)OC", ["CC(=O)O", "NCCC(=O)OC"])])
    rules.append(rule(init_key(t), answer(first, "The amine ester still needs a step.")))
    rules.append(rule(mutation_key(["CC(=O)O", "NCCC(=O)OC"]), answer(steps(
        ["CC(=O)O", "NCCC(=O)OC"], [("NCCC(=O)OC", "NCCC(=O)OC>>NCCC(=O)O.CO", ["NCCC(=O)O", "CO"])]))))
    # second step cites a template that does not apply
    t = targets[9]
    inter = "Nc1ccc(-c2ccccc2)cc1"
    full = steps([t], [(t, f"{t}>>CC(=O)O.{inter}", ["CC(=O)O", inter]),
                       (inter, "ester", ["OB(O)c1ccccc1", "Nc1ccc(Br)cc1"])])
    rules.append(rule(init_key(t), answer(full)))
    rules.append(rule(mutation_key(["CC(=O)O", inter]), answer(steps(
        ["CC(=O)O", inter], [(inter, f"{inter}>>OB(O)c1ccccc1.Nc1ccc(Br)cc1", ["OB(O)c1ccccc1", "Nc1ccc(Br)cc1"])]))))
    (d / "script.json").write_text(json.dumps({"rules": rules}, indent=2) + "\n")


def twostep_world():
    d = ROOT / "twostep"
    target = "CC(=O)NCc1ccccc1"
    stock = ["CC(=O)O", "CC(C)(C)OC(=O)NCc1ccccc1", "CCO", "O"]
    reactions = [r for r in REACTIONS if r[1] in ("amide", "boc", "redam")]
    write_common(d, stock, ["amide", "boc", "redam"], reactions, REFERENCE_ROUTES[:1])
    (d / "targets.txt").write_text(target + "\n")
    inter = "NCc1ccccc1"
    rules = [
        rule(init_key(target), "<ROUTE>\n</ROUTE>"),
        rule(mutation_key([target]), answer(steps([target], [(target, "amide", ["CC(=O)O", inter])]),
                                            "The benzylamine still needs a step.")),
        rule(mutation_key(["CC(=O)O", inter]), answer(steps(
            ["CC(=O)O", inter], [(inter, "boc", ["CC(C)(C)OC(=O)NCc1ccccc1"])]))),
    ]
    (d / "script.json").write_text(json.dumps({"rules": rules}, indent=2) + "\n")
    product = "Product: {}\n"
    sampled = {"kind": "sampled", "choices": ["<REACTION>no idea</REACTION>"], "rules": [
        {"pattern": product.format(canonicalize(target)),
         "choices": ["<REACTION>amide</REACTION>", "<REACTION>redam</REACTION>",
                     f"<REACTION>[{target}>>CC(=O)Cl.{inter}]</REACTION>"],
         "weights": [0.7, 0.2, 0.1]},
        {"pattern": product.format(canonicalize(inter)),
         "choices": ["<REACTION>boc</REACTION>", "<REACTION>redam</REACTION>", "It is already simple."],
         "weights": [0.7, 0.2, 0.1]},
    ]}
    (d / "search_script.json").write_text(json.dumps(sampled, indent=2) + "\n")


def designer_world():
    d = ROOT / "designer"
    target = "NC(COPCl)C(=O)Nc1ccc(F)c(F)c1"
    acid, amine = "NC(COPCl)C(=O)O", "Nc1ccc(F)c(F)c1"
    stock = [acid, amine, "Nc1ccc(F)cc1", "NC(CO)C(=O)O", "CC(=O)O", "Clc1ccccc1", "OCCP", "CCO",
             "Nc1ccccc1", "O=C(O)c1ccc(F)cc1"]
    reactions = [("CC(=O)O.Nc1ccccc1>>CC(=O)Nc1ccccc1", "amide"),
                 ("NC(CO)C(=O)O.Nc1ccc(F)cc1>>NC(CO)C(=O)Nc1ccc(F)cc1", "amide")]
    write_common(d, stock, ["amide"], reactions,
                 [("CC(=O)Nc1ccccc1", [("CC(=O)Nc1ccccc1", "CC(=O)Nc1ccccc1>>CC(=O)O.Nc1ccccc1",
                                        ["CC(=O)O", "Nc1ccccc1"])])])
    near = "NC(CO)C(=O)Nc1ccc(F)c(F)c1"
    rules = [
        rule(init_key(target), answer(steps([target], [(target, f"{target}>>{acid}.{amine}", [acid, amine])]))),
        rule(init_key(near), answer(steps([near], [(near, f"{near}>>NC(CO)C(=O)O.{amine}",
                                                    ["NC(CO)C(=O)O", amine])]))),
        rule("Target molecule:", "<ROUTE>\n</ROUTE>"),
        rule("Starting molecule set:", "<ROUTE>\n</ROUTE>"),
    ]
    proposals = [
        f"<EXPLANATION>Join serine to the difluoroaniline.</EXPLANATION>\n<MOLECULE>{near}</MOLECULE>",
        "<EXPLANATION>A rigid steroid core.</EXPLANATION>\n<MOLECULE>"
        "C[C@]12CC[C@H]3[C@@H](CC=C4C[C@@H](O)CC[C@@]43C)[C@@H]1CC[C@@H]2O</MOLECULE>",
        "I would rather not guess.",
        f"<EXPLANATION>Swap the serine hydroxyl for a chlorophosphine ether.</EXPLANATION>\n"
        f"<MOLECULE>{target}</MOLECULE>",
    ]
    (d / "script.json").write_text(json.dumps({"responses": proposals, "rules": rules}, indent=2) + "\n")
    (d / "oracle.txt").write_text("isomers:C9H10N2O2PF2Cl\n")


if __name__ == "__main__":
    planner_world()
    twostep_world()
    designer_world()
