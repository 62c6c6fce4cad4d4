#!/usr/bin/env python3
"""Regenerates crates/core/data/corpus500.smi, the bundled training corpus.

Molecules are assembled from Kekulé ring templates, chain templates and
substituents (no aromatic lowercase atoms, no '.' components), so every
line is in the SMILES subset the parser supports. The output is fixed by
the seed below; `molgen` validates the file in the test suite.
"""
import random
import re
import sys

SEED = 20240611
COUNT = 500
MIN_ATOMS, MAX_ATOMS = 5, 24

# {d} is the ring-closure digit, {} a substituent slot.
RINGS = [
    "C{d}=CC=C({})C=C{d}",
    "C{d}=CC({})=CC=C{d}{}",
    "C{d}=CC=C({})C({})=C{d}",
    "C{d}CCC({})CC{d}",
    "C{d}CCN({})CC{d}",
    "C{d}CN({})CCN{d}{}",
    "C{d}=CN=C({})C=C{d}",
    "C{d}=CC=NC({})=C{d}",
    "C{d}CC{d}{}",
    "C{d}CCC{d}{}",
    "C{d}CCOC{d}{}",
    "C{d}CCCC{d}{}",
    "C{d}=CSC({})=C{d}",
    "C{d}=COC({})=C{d}",
    "C{d}CC(=O)C({})C{d}",
    "C{d}CCC({})C{d}",
    "N{d}C=CC({})=C{d}",
]
CHAINS = [
    "CC({})C",
    "CCC({})=O",
    "NC({})C(=O)O",
    "CCOC(=O){}",
    "CC(=O)N{}",
    "OCC{}",
    "OC(=O)C{}",
    "CN(C){}",
    "CCCC{}",
    "C=CC{}",
    "C#CC{}",
    "CS(=O)(=O){}",
    "CC(C)(C){}",
    "NC(=O){}",
    "CC(O)C{}",
]
SUBSTITUENTS = [
    "C", "C", "C", "CC", "CCC", "O", "O", "N", "Cl", "F", "Br", "I", "OC",
    "C(=O)O", "C(=O)N", "C#N", "CO", "CCN", "S", "SC", "C(F)(F)F", "N(C)C",
    "OCC", "CC(C)C", "C=O", "NC(=O)C", "P(=O)(O)O", "CCl", "N=O", "C(C)=O",
]


def heavy_atoms(smiles):
    return len(re.findall(r"Cl|Br|[CNOFPSI]", smiles))


def fill(template, rng, depth, digit):
    out = template.replace("{d}", str(digit))
    while "{}" in out:
        r = rng.random()
        if depth < 2 and r < 0.25:
            part = build(rng, depth + 1, digit + 1)
        elif r < 0.85:
            part = rng.choice(SUBSTITUENTS)
        else:
            part = ""
        # Slots inside parentheses need a non-empty branch.
        i = out.index("{}")
        if not part and out[i - 1:i] == "(":
            part = rng.choice(SUBSTITUENTS)
        out = out[:i] + part + out[i + 2:]
    return out


def build(rng, depth=0, digit=1):
    template = rng.choice(RINGS) if rng.random() < 0.7 else rng.choice(CHAINS)
    return fill(template, rng, depth, digit)


def main(path):
    rng = random.Random(SEED)
    seen, out = set(), []
    while len(out) < COUNT:
        s = build(rng)
        if s in seen or not MIN_ATOMS <= heavy_atoms(s) <= MAX_ATOMS:
            continue
        seen.add(s)
        out.append(s)
    with open(path, "w") as f:
        f.write("# Bundled training corpus: 500 Kekulé SMILES, one per line.\n")
        f.write("# Generated by scripts/make_corpus.py (seed %d).\n" % SEED)
        for s in out:
            f.write(s + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/data/corpus500.smi")
