"""Variables and DAGs of the pneumonia use case.

Level index 0 is always the "no" / "warm" / "none" level.
"""

from __future__ import annotations

from .discrete import Cpt, DiscreteBn, VariableSpec

SEASON = VariableSpec("season", ("warm", "cold"))
PNEU = VariableSpec("pneu", ("no", "yes"))
INF = VariableSpec("inf", ("no", "yes"))
DYSP = VariableSpec("dysp", ("no", "yes"))
COUGH = VariableSpec("cough", ("no", "yes"))
FEVER = VariableSpec("fever", ("none", "low", "high"))
PAIN = VariableSpec("pain", ("no", "yes"))
NASAL = VariableSpec("nasal", ("no", "yes"))

DIAGNOSES = ("pneu", "inf")
SYMPTOMS = ("dysp", "cough", "nasal")
HIDDEN_SYMPTOMS = ("fever", "pain")
TEXT_SYMPTOMS = ("dysp", "cough", "fever", "pain", "nasal")

BN_VARIABLES = (SEASON, PNEU, INF, DYSP, COUGH, NASAL)
BNPP_VARIABLES = (SEASON, PNEU, INF, DYSP, COUGH, NASAL, FEVER, PAIN)
GT_VARIABLES = (SEASON, PNEU, INF, DYSP, COUGH, FEVER, PAIN, NASAL)

STRUCTURE = {
    "season": (),
    "pneu": ("season",),
    "inf": ("season",),
    "dysp": ("pneu",),
    "cough": ("pneu", "inf"),
    "nasal": ("inf",),
    "fever": ("pneu", "inf"),
    "pain": ("pneu", "inf"),
}

SPECS = {v.name: v for v in GT_VARIABLES}


def structure_for(variables) -> dict[str, tuple[str, ...]]:
    return {v.name: STRUCTURE[v.name] for v in variables}


def _binary(p_yes):
    return [[1.0 - p, p] for p in p_yes]


def default_ground_truth() -> DiscreteBn:
    """Illustrative default ground-truth network with hand-picked CPT values.

    The numbers only give the domain a plausible shape: pneumonia is rare
    (about 1%), infection common and season-modulated, and the two symptoms
    kept out of the tabular data (fever, pain) are the strongest pneumonia
    signals.
    """
    rows = {
        "season": [[0.5, 0.5]],
        "pneu": _binary([0.006, 0.018]),
        "inf": _binary([0.30, 0.60]),
        "dysp": _binary([0.15, 0.60]),
        # parents (pneu, inf), row-major: (0,0) (0,1) (1,0) (1,1)
        "cough": _binary([0.10, 0.60, 0.80, 0.90]),
        "fever": [
            [0.85, 0.12, 0.03],
            [0.55, 0.40, 0.05],
            [0.05, 0.15, 0.80],
            [0.05, 0.15, 0.80],
        ],
        "pain": _binary([0.03, 0.08, 0.80, 0.80]),
        "nasal": _binary([0.10, 0.70]),
    }
    cpts = {k: Cpt(k, STRUCTURE[k], v) for k, v in rows.items()}
    return DiscreteBn(GT_VARIABLES, cpts)


def check_ground_truth(bn: DiscreteBn) -> None:
    """Raise ValueError unless ``bn`` has the use-case variables and DAG."""
    if set(bn.names) != set(SPECS):
        raise ValueError(f"ground truth must define exactly {sorted(SPECS)}, got {sorted(bn.names)}")
    for name, spec in SPECS.items():
        if bn.spec(name).levels != spec.levels:
            raise ValueError(f"variable {name!r} must have levels {spec.levels}")
        if bn.cpts[name].parents != STRUCTURE[name]:
            raise ValueError(
                f"variable {name!r} must have parents {STRUCTURE[name]}, got {bn.cpts[name].parents}"
            )
