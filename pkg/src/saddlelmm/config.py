"""YAML run configuration: schema, validation, presets and the run plan.

Schema (all sections optional except ``problem``)::

    preset: nlse-table1          # start from a named preset
    problem:    {case, omega, ell, f, a}
    domain:     {kind: square | dumbbell | mask, resolution, mask_file}
    method:     {preset, direction, preconditioner, rule, sigma1, sigma2,
                 sigma, delta, lambda, rho, alpha_init, alpha_max, max_evals, safeguard}
    tolerances: {grad_tol, sup_res_tol, inner_tol, t_min, max_outer_iters}
    solver:     {linear: direct | pcg, rel_tol}
    runs:
      - {label, support: [labels], omega1, omega2, support_files: [paths],
         overrides: {method: {...}, tolerances: {...}}}

When ``preset`` is given, the sections present in the file replace keys of
the preset's sections one by one; ``runs`` replaces the preset's runs.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .driver import METHOD_PRESETS, RunConfig
from .stepsize import ConfigError, RuleParams

__all__ = [
    "ConfigFile",
    "ConfigError",
    "parse_config",
    "load_config",
    "parse_config_text",
    "serialize_config",
    "PRESETS",
    "preset_config",
    "preset_names",
    "TABLE_ENERGIES",
]

_SCHEMA = {
    "problem": {"case", "omega", "ell", "f", "a"},
    "domain": {"kind", "resolution", "mask_file"},
    "method": {
        "preset", "direction", "preconditioner", "rule", "sigma1", "sigma2", "sigma",
        "delta", "lambda", "rho", "alpha_init", "alpha_max", "max_evals", "safeguard",
    },
    "tolerances": {"grad_tol", "sup_res_tol", "inner_tol", "t_min", "max_outer_iters"},
    "solver": {"linear", "rel_tol"},
}
_RUN_KEYS = {"label", "support", "omega1", "omega2", "support_files", "overrides"}
_TOP_KEYS = set(_SCHEMA) | {"runs", "preset"}

_DEFAULTS = {
    "problem": {"case": "nlse"},
    "domain": {"kind": "square", "resolution": 129, "mask_file": None},
    "method": {
        "preset": None,
        "direction": "cg-fr",
        "preconditioner": "identity",
        "rule": "strong-wolfe",
        "sigma1": 0.1,
        "sigma2": 0.4,
        "sigma": None,
        "delta": 0.8,
        "lambda": 0.1,
        "rho": 0.5,
        "alpha_init": 1.0,
        "alpha_max": 1e3,
        "max_evals": 50,
        "safeguard": 0.1,
    },
    "tolerances": {"grad_tol": 1e-5, "sup_res_tol": 5e-5, "inner_tol": 1e-8, "t_min": 1e-6, "max_outer_iters": 2000},
    "solver": {"linear": "direct", "rel_tol": 1e-10},
}

_PROBLEM_DEFAULTS = {"nlse": {"omega": 8.0}, "henon": {"ell": 6.0}, "chandrasekhar": {}, "custom": {"a": "0"}}


@dataclass
class ConfigFile:
    """A fully resolved configuration document."""

    problem: dict
    domain: dict
    method: dict
    tolerances: dict
    solver: dict
    runs: list
    preset: str | None = None
    source: str | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        out = {
            "problem": dict(self.problem),
            "domain": dict(self.domain),
            "method": dict(self.method),
            "tolerances": dict(self.tolerances),
            "solver": dict(self.solver),
            "runs": copy.deepcopy(self.runs),
        }
        if self.preset:
            out = {"preset": self.preset, **out}
        return out

    def with_method(self, name: str) -> "ConfigFile":
        """Copy with the method section replaced by a named method preset."""
        new = copy.deepcopy(self)
        new.method = _resolve_method({"preset": name}, ("method",), {})
        for run in new.runs:
            run.get("overrides", {}).pop("method", None)
        return new

    def plan(self) -> list[RunConfig]:
        return [self.run_config(run) for run in self.runs]

    def run_config(self, run: dict) -> RunConfig:
        ov = run.get("overrides") or {}
        method = dict(self.method)
        if ov.get("method"):
            method = _resolve_method({**_strip_derived(method), **ov["method"]}, ("runs", run["label"], "method"), {})
        tol = {**self.tolerances, **(ov.get("tolerances") or {})}
        rp = RuleParams(
            rule=method["rule"],
            sigma1=method["sigma1"],
            sigma2=method["sigma2"],
            sigma=method["sigma"],
            delta=method["delta"],
            lam=method["lambda"],
            rho=method["rho"],
            alpha_init=method["alpha_init"],
            alpha_max=method["alpha_max"],
            max_evals=method["max_evals"],
            safeguard=method["safeguard"],
        )
        domain = {k: v for k, v in self.domain.items() if k != "resolution" and v is not None}
        return RunConfig(
            label=run["label"],
            problem=dict(self.problem),
            domain=domain if domain.get("kind") == "mask" else domain["kind"],
            resolution=self.domain["resolution"],
            direction=method["direction"],
            preconditioner=method["preconditioner"],
            rule=rp,
            support=tuple(run.get("support", ())),
            support_files=tuple(run.get("support_files", ())),
            omega1=run["omega1"],
            omega2=run["omega2"],
            grad_tol=tol["grad_tol"],
            sup_res_tol=tol["sup_res_tol"],
            inner_tol=tol["inner_tol"],
            t_min=tol["t_min"],
            max_outer_iters=tol["max_outer_iters"],
            solver={"rel_tol": self.solver["rel_tol"], "method": self.solver["linear"]},
        )


def _strip_derived(method):
    m = dict(method)
    m.pop("preset", None)
    return m


# -- presets -----------------------------------------------------------------

_NLSE_ROWS = [
    ("u1", [], "Omega", 14.7889),
    ("u2", ["u1"], "x1>0", 73.8223),
    ("u3", ["u1"], "x2>0", 73.8223),
    ("u4", ["u1"], "x1+x2>0", 70.9151),
    ("u5", ["u1"], "x1-x2>0", 70.9151),
    ("u6", ["u1", "u2"], "|x1|>0.2", 210.0238),
    ("u7", ["u1", "u4"], "|x1+x2|>0.3", 178.2474),
    ("u8", ["u1", "u2", "u3"], "x1x2>0", 213.6423),
    ("u9", ["u1", "u4", "u5"], "|x1|>|x2|", 243.2646),
    ("u10", ["u1", "u2", "u3", "u8"], "x1^2+x2^2>0.25", 306.4755),
]

_HENON_ROWS = [
    ("u1", [], "x1>0,x2>0", "empty", 61.9634),
    ("u2", ["u1"], "x1<0,x2>0", "empty", 120.7887),
    ("u3", ["u1"], "x1<0,x2<0", "empty", 122.4078),
    ("u4", ["u1"], "x2>0", "empty", 126.6988),
    ("u5", ["u1"], "x1>0,x2>0", "x1<0,x2<0", 125.3561),
    ("u6", ["u1", "u2"], "x1<0,x2<0", "empty", 177.6068),
    ("u7", ["u1", "u3"], "x2>0", "empty", 187.1379),
    ("u8", ["u1", "u4"], "x1<0,x2<0", "empty", 189.9406),
    ("u9", ["u1", "u2", "u6"], "x1>0,x2<0", "empty", 230.0141),
    ("u10", ["u1", "u2", "u6"], "x2<0", "x2>0", 247.0220),
    ("u11", ["u1", "u2", "u6"], "x1x2>0", "x1x2<0", 250.6746),
    ("u12", ["u1", "u2", "u6"], "x1x2<0", "empty", 255.9728),
]

_CHANDRA_ROWS = [
    ("u1", [], "(x1-2)^2+x2^2<1", 1.6624),
    ("u2", [], "(x1+1)^2+x2^2<0.5", 18.0067),
    ("u3", [], "(x1-0.25)^2+x2^2<0.1", 108.0580),
    ("u4", ["u1"], "(x1+1)^2+x2^2<0.5", 19.6691),
    ("u5", ["u1"], "(x1-0.25)^2+x2^2<0.1", 109.6897),
    ("u6", ["u2"], "(x1-0.25)^2+x2^2<0.1", 125.8846),
    ("u7", ["u1", "u2"], "(x1-0.25)^2+x2^2<0.1", 127.5247),
]

TABLE_ENERGIES = {
    "nlse-table1": {r[0]: r[-1] for r in _NLSE_ROWS},
    "henon-table2": {r[0]: r[-1] for r in _HENON_ROWS},
    "chandrasekhar-table3": {r[0]: r[-1] for r in _CHANDRA_ROWS},
}


def _preset_docs():
    nlse = {
        "problem": {"case": "nlse", "omega": 8.0},
        "domain": {"kind": "square", "resolution": 129},
        "method": {"preset": "cg-strongwolfe"},
        "runs": [
            {"label": lab, "support": sup, "omega1": o1, "omega2": "complement"}
            for lab, sup, o1, _ in _NLSE_ROWS
        ],
    }
    henon = {
        "problem": {"case": "henon", "ell": 6.0},
        "domain": {"kind": "square", "resolution": 129},
        "method": {"preset": "cg-strongwolfe"},
        "runs": [
            {"label": lab, "support": sup, "omega1": o1, "omega2": o2}
            for lab, sup, o1, o2, _ in _HENON_ROWS
        ],
    }
    chandra = {
        "problem": {"case": "chandrasekhar"},
        "domain": {"kind": "dumbbell", "resolution": 161},
        "method": {"preset": "cg-strongwolfe"},
        "runs": [
            {"label": lab, "support": sup, "omega1": o1, "omega2": "empty"}
            for lab, sup, o1, _ in _CHANDRA_ROWS
        ],
    }
    return {"nlse-table1": nlse, "henon-table2": henon, "chandrasekhar-table3": chandra}


PRESETS = {
    "nlse-table1": "NLSE, omega = 8, square, 10 solutions",
    "henon-table2": "Henon, ell = 6, square, 12 solutions",
    "chandrasekhar-table3": "Chandrasekhar on the dumbbell, 7 solutions",
}


def preset_names() -> list[str]:
    return list(PRESETS)


def preset_config(name: str) -> ConfigFile:
    docs = _preset_docs()
    if name not in docs:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(docs)}")
    cfg = _build(docs[name], {}, source=f"preset:{name}")
    cfg.preset = name
    return cfg


# -- parsing -----------------------------------------------------------------


def _line_map(text: str) -> dict:
    """``path tuple -> 1-based line`` for every mapping key and list item."""
    out: dict = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = k.value
                out[path + (key,)] = k.start_mark.line + 1
                walk(v, path + (key,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                out[path + (i,)] = v.start_mark.line + 1
                walk(v, path + (i,))

    if root is not None:
        walk(root, ())
    return out


def _err(msg, path, lines):
    where = ".".join(str(p) for p in path)
    line = lines.get(tuple(path))
    loc = f" (line {line})" if line else ""
    return ConfigError(f"{where}{loc}: {msg}" if where else msg)


def _check_keys(section: dict, allowed: set, path: tuple, lines: dict):
    if not isinstance(section, dict):
        raise _err("expected a mapping", path, lines)
    for key in section:
        if key not in allowed:
            raise _err(f"unknown key {key!r}; allowed: {', '.join(sorted(allowed))}", path + (key,), lines)


def _num(value, path, lines, kind=float, positive=False):
    # YAML 1.1 reads exponent forms without a dot (1e-9) as strings
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            raise _err(f"expected a number, got {value!r}", path, lines) from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _err(f"expected a number, got {value!r}", path, lines)
    if kind is int and (float(value) != int(value)):
        raise _err(f"expected an integer, got {value!r}", path, lines)
    value = kind(value)
    if positive and not value > 0:
        raise _err("must be positive", path, lines)
    return value


def _resolve_method(raw: dict, path: tuple, lines: dict) -> dict:
    m = dict(_DEFAULTS["method"])
    name = raw.get("preset")
    if name is not None:
        key = str(name).lower()
        if key not in METHOD_PRESETS:
            raise _err(f"unknown method preset {name!r}; choose from {', '.join(METHOD_PRESETS)}", path + ("preset",), lines)
        p = METHOD_PRESETS[key]
        m["direction"] = p["direction"]
        for k, v in p["rule"].items():
            m["lambda" if k == "lam" else k] = v
        m["preset"] = key
    for k, v in raw.items():
        if k != "preset":
            m[k] = v
    for k in ("sigma1", "sigma2", "delta", "lambda", "rho", "alpha_init", "alpha_max", "safeguard"):
        m[k] = _num(m[k], path + (k,), lines)
    if m["sigma"] is not None:
        m["sigma"] = _num(m["sigma"], path + ("sigma",), lines)
    m["max_evals"] = _num(m["max_evals"], path + ("max_evals",), lines, int, positive=True)
    if m["direction"] not in ("sd", "psd", "cg-fr"):
        raise _err(f"unknown direction {m['direction']!r}; choose sd, psd or cg-fr", path + ("direction",), lines)
    if m["preconditioner"] not in ("identity", "diagonal"):
        raise _err(f"unknown preconditioner {m['preconditioner']!r}", path + ("preconditioner",), lines)
    try:
        rp = RuleParams(
            rule=m["rule"], sigma1=m["sigma1"], sigma2=m["sigma2"], sigma=m["sigma"], delta=m["delta"],
            lam=m["lambda"], rho=m["rho"], alpha_init=m["alpha_init"], alpha_max=m["alpha_max"],
            max_evals=m["max_evals"], safeguard=m["safeguard"],
        )
        rp.validate(for_cg=m["direction"] == "cg-fr")
    except ConfigError as exc:
        bad = "sigma2" if "sigma2" in str(exc) else ("rule" if "rule" in str(exc) else None)
        raise _err(str(exc), path + ((bad,) if bad else ()), lines) from None
    m["sigma"] = rp.sigma
    return m


def _build(doc: Any, lines: dict, source=None) -> ConfigFile:
    if doc is None or (isinstance(doc, dict) and not doc):
        raise ConfigError("missing problem: the configuration is empty")
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping at top level")
    _check_keys(doc, _TOP_KEYS, (), lines)
    base: dict = {}
    preset = doc.get("preset")
    if preset is not None:
        docs = _preset_docs()
        if preset not in docs:
            raise _err(f"unknown preset {preset!r}; available: {', '.join(docs)}", ("preset",), lines)
        base = copy.deepcopy(docs[preset])
    elif "problem" not in doc:
        raise ConfigError("missing problem: add a 'problem' section or a 'preset'")

    sections = {}
    for name, allowed in _SCHEMA.items():
        raw = doc.get(name)
        if raw is not None:
            _check_keys(raw, allowed, (name,), lines)
        merged = {**base.get(name, {}), **(raw or {})}
        if name == "method" and raw and "preset" not in raw and base.get("method"):
            merged = {**base["method"], **raw}
        sections[name] = merged

    prob = sections["problem"]
    case = prob.get("case")
    if case not in _PROBLEM_DEFAULTS:
        raise _err(f"unknown problem case {case!r}; choose from {', '.join(_PROBLEM_DEFAULTS)}", ("problem", "case"), lines)
    problem = {"case": case, **_PROBLEM_DEFAULTS[case]}
    for k, v in prob.items():
        if k == "case":
            continue
        if k in ("omega", "ell"):
            if case != {"omega": "nlse", "ell": "henon"}[k]:
                raise _err(f"{k} does not apply to case {case!r}", ("problem", k), lines)
            v = _num(v, ("problem", k), lines, positive=(k == "omega"))
        elif k in ("f", "a"):
            if case != "custom":
                raise _err(f"{k} is only used by the custom case", ("problem", k), lines)
            v = str(v)
        problem[k] = v
    if case == "custom" and "f" not in problem:
        raise _err("custom problems need an expression f", ("problem",), lines)

    domain = {**_DEFAULTS["domain"], **sections["domain"]}
    if domain["kind"] not in ("square", "dumbbell", "mask"):
        raise _err(f"unknown domain kind {domain['kind']!r}", ("domain", "kind"), lines)
    domain["resolution"] = _num(domain["resolution"], ("domain", "resolution"), lines, int)
    if domain["resolution"] < 3:
        raise _err("resolution must be at least 3", ("domain", "resolution"), lines)
    if domain["kind"] == "mask" and not domain.get("mask_file"):
        raise _err("mask domains need mask_file", ("domain",), lines)

    method = _resolve_method(sections["method"], ("method",), lines)

    tol = {**_DEFAULTS["tolerances"], **sections["tolerances"]}
    for k in ("grad_tol", "sup_res_tol", "inner_tol", "t_min"):
        tol[k] = _num(tol[k], ("tolerances", k), lines, positive=True)
    tol["max_outer_iters"] = _num(tol["max_outer_iters"], ("tolerances", "max_outer_iters"), lines, int)

    solver = {**_DEFAULTS["solver"], **sections["solver"]}
    if solver["linear"] not in ("direct", "pcg"):
        raise _err(f"unknown linear solver {solver['linear']!r}", ("solver", "linear"), lines)
    solver["rel_tol"] = _num(solver["rel_tol"], ("solver", "rel_tol"), lines, positive=True)
    if solver["rel_tol"] > 1e-6:
        raise _err("rel_tol must not exceed 1e-6", ("solver", "rel_tol"), lines)

    raw_runs = doc.get("runs", base.get("runs"))
    if raw_runs is None:
        raw_runs = [{"label": "u1", "omega1": "Omega", "omega2": "empty"}]
    if not isinstance(raw_runs, list):
        raise _err("runs must be a list", ("runs",), lines)
    runs, labels = [], []
    for i, run in enumerate(raw_runs):
        path = ("runs", i)
        _check_keys(run, _RUN_KEYS, path, lines)
        label = str(run.get("label", f"u{i + 1}"))
        if label in labels:
            raise _err(f"duplicate label {label!r}", path + ("label",), lines)
        support = run.get("support") or []
        if not isinstance(support, list):
            raise _err("support must be a list of labels", path + ("support",), lines)
        support = [str(s) for s in support]
        for s in support:
            if s not in labels:
                raise _err(f"support {s!r} is not an earlier run label", path + ("support",), lines)
        files = [str(p) for p in (run.get("support_files") or [])]
        if support and files:
            raise _err("give either support or support_files, not both", path, lines)
        from .regions import RegionSyntaxError, parse_region

        om1 = str(run.get("omega1", "Omega"))
        om2 = str(run.get("omega2", "empty"))
        for key, text in (("omega1", om1), ("omega2", om2)):
            if key == "omega2" and text.strip().lower() == "complement":
                continue
            try:
                parse_region(text)
            except RegionSyntaxError as exc:
                raise _err(str(exc), path + (key,), lines) from None
        entry = {"label": label, "support": support, "omega1": om1, "omega2": om2}
        if files:
            entry["support_files"] = files
        ov = run.get("overrides") or {}
        if ov:
            _check_keys(ov, {"method", "tolerances"}, path + ("overrides",), lines)
            clean = {}
            if ov.get("method"):
                _check_keys(ov["method"], _SCHEMA["method"], path + ("overrides", "method"), lines)
                _resolve_method({**_strip_derived(method), **ov["method"]}, path + ("overrides", "method"), lines)
                clean["method"] = dict(ov["method"])
            if ov.get("tolerances"):
                _check_keys(ov["tolerances"], _SCHEMA["tolerances"], path + ("overrides", "tolerances"), lines)
                clean["tolerances"] = {
                    k: _num(v, path + ("overrides", "tolerances", k), lines, int if k == "max_outer_iters" else float,
                            positive=k != "max_outer_iters")
                    for k, v in ov["tolerances"].items()
                }
            if clean:
                entry["overrides"] = clean
        runs.append(entry)
        labels.append(label)

    return ConfigFile(
        problem=problem,
        domain=domain,
        method=method,
        tolerances=tol,
        solver=solver,
        runs=runs,
        preset=preset,
        source=source,
    )


def parse_config_text(text: str, source: str | None = None) -> ConfigFile:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source or 'config'}: not valid YAML: {exc}") from None
    return _build(doc, _line_map(text), source=source)


def parse_config(path) -> ConfigFile:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), source=str(path))


def load_config(name_or_path) -> ConfigFile:
    """A preset name or a path to a YAML file."""
    if str(name_or_path) in PRESETS and not Path(str(name_or_path)).exists():
        return preset_config(str(name_or_path))
    return parse_config(name_or_path)


def serialize_config(cfg: ConfigFile) -> str:
    """Fully resolved YAML; ``parse_config_text(serialize_config(c)) == c``."""
    doc = cfg.to_dict()
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)
