"""JSON run reports and their published schema."""
from __future__ import annotations

import json

import jsonschema

from . import __version__

SCHEMA_VERSION = "1.0"

_num = {"type": "number"}
_num_or_null = {"type": ["number", "null"]}
_int = {"type": "integer"}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "GSU run report",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "tool_version", "command", "inputs", "seed"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "tool_version": {"type": "string"},
        "command": {"enum": ["test", "power", "samplesize"]},
        "seed": _int,
        "inputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "genotype_file": {"type": "string"},
                "genotype_digest": {"type": "string"},
                "phenotype_file": {"type": "string"},
                "phenotype_digest": {"type": "string"},
                "subjects_used": _int,
                "subjects_dropped_unmatched": _int,
            },
        },
        "kernels": {
            "type": "object",
            "additionalProperties": False,
            "required": ["genetic", "phenotypic"],
            "properties": {
                "genetic": {"enum": ["ibs", "wibs", "ed"]},
                "phenotypic": {"enum": ["ed", "ed-corr"]},
                "covariates": {"type": "array", "items": {"type": "string"}},
                "covariate_mode": {"enum": ["projection", "residualize"]},
                "missing_genotypes": {"enum": ["impute", "drop"]},
                "small_sample_correction": {"type": "boolean"},
            },
        },
        "statistic": {
            "type": "object",
            "additionalProperties": False,
            "required": ["U", "nU", "n"],
            "properties": {"U": _num, "nU": _num, "n": _int},
        },
        "p_values": {
            "type": "object",
            "additionalProperties": False,
            "required": ["asymptotic", "engine"],
            "properties": {
                "asymptotic": _num_or_null,
                "engine": {"enum": ["davies", "liu", "montecarlo", "degenerate"]},
                "permutation": _num_or_null,
                "permutations": _int,
                "alpha": _num,
                "reject": {"type": "boolean"},
            },
        },
        "power": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mu", "zeta1", "alpha", "q_crit"],
            "properties": {
                "mu": _num,
                "zeta1": _num,
                "zeta0": _num_or_null,
                "alpha": _num,
                "q_crit": _num,
                "moments_source": {"enum": ["given", "pilot"]},
                "mixture_terms": _int,
                "n": _int,
                "power": _num,
                "target_power": _num,
                "achieved_power": _num,
                "closed_form_n": _num,
                "pilot_p_value": _num,
            },
        },
        "diagnostics": {"type": "object"},
    },
}


def validate(report: dict):
    jsonschema.validate(report, REPORT_SCHEMA)


def dumps(report: dict) -> str:
    validate(report)
    # json uses repr for floats, which round-trips exactly
    return json.dumps(report, indent=2, sort_keys=False, allow_nan=False, default=_default) + "\n"


def _default(obj):
    import numpy as np

    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def base_report(command: str, seed: int) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "command": command,
        "seed": int(seed),
        "inputs": {},
    }
