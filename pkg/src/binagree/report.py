"""Configuration files, key-value reports, fit-state files and CSV output.

Configuration is flat ``key = value`` text with ``#`` comments.  Reports use
the same shape, grouped into ``[SECTION]`` blocks.

The fit state is a line-oriented text file::

    binagree-fit-state 1
    fixed.beta_1 = 1.5659
    fixed.cov = [[0.0387, ...], ...]
    data.subject = [0, 0, 0, ...]
    ...

Each line is ``key = <JSON value>``; floats are written with round-trip
precision, so ``load_fit_state(dump_fit_state(...))`` restores the fit and its
dataset exactly.  The first line names the format and its version.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .data import LongDataset
from .glmm import FitOptions, FitResult, FixedEffects, ModelSpec, VarianceComponents

__all__ = [
    "ConfigError",
    "FIT_STATE_MAGIC",
    "FIT_STATE_VERSION",
    "parse_config",
    "read_config",
    "typed_section",
    "config_fields",
    "format_value",
    "format_report",
    "dump_fit_state",
    "load_fit_state",
    "write_csv",
]

FIT_STATE_MAGIC = "binagree-fit-state"
FIT_STATE_VERSION = 1


class ConfigError(ValueError):
    """Malformed configuration or fit-state text."""


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_config(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _coerce(raw: str, target: type, key: str):
    try:
        if target is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {target.__name__}") from None
    return raw


def config_fields(cls) -> list[str]:
    """Fields of dataclass ``cls`` settable from a config file (scalar defaults)."""
    return [
        f.name
        for f in dataclasses.fields(cls)
        if isinstance(f.default, (bool, int, float, str))
    ]


def typed_section(cls, config: Mapping[str, str], **overrides):
    """Build dataclass ``cls`` from the config keys matching its field names.

    Values are coerced to the type of each field's default; ``overrides``
    (already typed, ``None`` meaning "not given") win over the file.
    """
    kwargs: dict[str, Any] = {}
    configurable = set(config_fields(cls))
    for f in dataclasses.fields(cls):
        if f.name in config and f.name in configurable:
            target = type(f.default)
            kwargs[f.name] = _coerce(config[f.name], target, f.name)
        if overrides.get(f.name) is not None:
            kwargs[f.name] = overrides[f.name]
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return f"{v:.10g}"
    if v is None:
        return "none"
    return str(v)


def format_report(
    sections: Sequence[tuple[str, Mapping[str, Any]]], header: str | None = None
) -> str:
    """Render ``[SECTION]`` blocks of ``key = value`` lines.

    ``header`` (e.g. a timestamp) is emitted as a leading ``#`` comment.
    """
    lines = []
    if header:
        lines.append(f"# {header}")
    for name, values in sections:
        if lines:
            lines.append("")
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {format_value(v)}" for k, v in values.items())
    return "\n".join(lines) + "\n"


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, tuple):
        return list(v)
    return v


def dump_fit_state(fit: FitResult, ds: LongDataset) -> str:
    """Serialize a fit together with the dataset it was fitted to."""
    entries: list[tuple[str, Any]] = [
        ("spec." + f.name, getattr(fit.spec, f.name)) for f in dataclasses.fields(ModelSpec)
    ]
    entries += [
        ("fixed.beta_1", fit.fixed.beta_1),
        ("fixed.beta_2", fit.fixed.beta_2),
        ("fixed.theta", fit.fixed.theta),
        ("fixed.cov", fit.fixed.cov),
    ]
    entries += [("vc." + f.name, getattr(fit.vc, f.name)) for f in dataclasses.fields(VarianceComponents)]
    entries += [
        ("eblup.gamma", fit.eblup_gamma),
        ("eblup.alpha", fit.eblup_alpha),
        ("fit.converged", fit.converged),
        ("fit.n_outer_iterations", fit.n_outer_iterations),
        ("fit.final_change", fit.final_change),
        ("fit.reml_criterion", fit.reml_criterion),
        ("fit.warnings", fit.warnings),
        ("fit.tol", fit.tol),
        ("data.subject_labels", ds.subject_labels),
        ("data.rater_labels", ds.rater_labels),
        ("data.subject", ds.subject),
        ("data.rater", ds.rater),
        ("data.method", ds.method),
        ("data.time", ds.time),
        ("data.y", ds.y),
    ]
    lines = [f"{FIT_STATE_MAGIC} {FIT_STATE_VERSION}"]
    lines += [f"{k} = {json.dumps(_jsonable(v))}" for k, v in entries]
    return "\n".join(lines) + "\n"


def load_fit_state(text: str) -> tuple[FitResult, LongDataset]:
    """Inverse of :func:`dump_fit_state`.

    Raises:
        ConfigError: Wrong magic line, unsupported version or malformed entries.
    """
    lines = text.splitlines()
    if not lines or not lines[0].startswith(FIT_STATE_MAGIC):
        raise ConfigError("not a fit-state file")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise ConfigError("fit-state header lacks a version") from None
    if version != FIT_STATE_VERSION:
        raise ConfigError(f"unsupported fit-state version {version}")
    kv: dict[str, Any] = {}
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise ConfigError(f"fit-state line {lineno}: expected 'key = value'")
        try:
            kv[key] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"fit-state line {lineno}: {exc}") from None

    def section(prefix: str) -> dict[str, Any]:
        return {k[len(prefix) + 1 :]: v for k, v in kv.items() if k.startswith(prefix + ".")}

    try:
        spec = ModelSpec(**section("spec"))
        fx = section("fixed")
        fixed = FixedEffects(fx["beta_1"], fx["beta_2"], fx["theta"], np.array(fx["cov"], dtype=float))
        vc = VarianceComponents(**section("vc"))
        d = section("data")
        ds = LongDataset.from_arrays(
            d["subject"], d["rater"], d["method"], d["time"], d["y"], d["subject_labels"], d["rater_labels"]
        )
        f = section("fit")
        eb = section("eblup")
        fit = FitResult(
            spec=spec,
            fixed=fixed,
            vc=vc,
            eblup_gamma=np.array(eb["gamma"], dtype=float),
            eblup_alpha=np.array(eb["alpha"], dtype=float).reshape(-1, 2),
            converged=bool(f["converged"]),
            n_outer_iterations=int(f["n_outer_iterations"]),
            final_change=float(f["final_change"]),
            reml_criterion=float(f["reml_criterion"]),
            warnings=tuple(f["warnings"]),
            tol=float(f["tol"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"incomplete fit state: {exc}") from None
    return fit, ds


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Write an RFC 4180 CSV (CRLF line ends, minimal quoting)."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    for row in rows:
        w.writerow([format_value(v) if not isinstance(v, str) else v for v in row])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def fit_options_from(config: Mapping[str, str], **overrides) -> FitOptions:
    return typed_section(FitOptions, config, **overrides)
