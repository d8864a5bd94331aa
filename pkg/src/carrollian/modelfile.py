"""TOML model files.

Layout::

    [chart]       coords, lo, hi
    [algebroid]   rank, anchor (n x k), structure (1-based {lower, upper, expr}),
                  metric (k x k, upper triangle authoritative), sigma (k)
    [connection]  gamma: list of {a, b, c, expr} for Gamma^c_ab (1-based, optional)
    [meta]        free-form provenance

Indices in files are 1-based; everything in memory is 0-based.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import tomlkit

from .algebroid import ModelError, build_model
from .connection import ExprConnection
from .fields import Chart, FieldError


class ModelFileError(ValueError):
    pass


def _get(table, key, where):
    if key not in table:
        raise ModelFileError(f"missing key {where}.{key}")
    return table[key]


def _plain(value):
    """tomlkit items to plain python containers."""
    if hasattr(value, "unwrap"):
        return value.unwrap()
    return value


def _index(value, k, what):
    i = int(value)
    if not 1 <= i <= k:
        raise ModelFileError(f"{what} index {i} out of range 1..{k}")
    return i - 1


def model_from_dict(doc, name=""):
    doc = _plain(doc)
    chart_t = _get(doc, "chart", "")
    alg = _get(doc, "algebroid", "")
    coords = [str(c) for c in _get(chart_t, "coords", "chart")]
    lo = [float(v) for v in _get(chart_t, "lo", "chart")]
    hi = [float(v) for v in _get(chart_t, "hi", "chart")]
    try:
        chart = Chart(tuple(coords), tuple(lo), tuple(hi))
    except (ValueError, TypeError) as exc:
        raise ModelFileError(f"bad chart: {exc}") from None
    k = int(_get(alg, "rank", "algebroid"))
    anchor = [[str(e) for e in row] for row in alg.get("anchor", [])]
    structure = {}
    for entry in alg.get("structure", []):
        a, b = (_index(v, k, "structure lower") for v in _get(entry, "lower", "algebroid.structure"))
        c = _index(_get(entry, "upper", "algebroid.structure"), k, "structure upper")
        if a >= b:
            raise ModelFileError(f"structure entry needs lower a < b, got [{a + 1}, {b + 1}]")
        structure[(c, a, b)] = str(_get(entry, "expr", "algebroid.structure"))
    metric = [[str(e) for e in row] for row in _get(alg, "metric", "algebroid")]
    sigma = alg.get("sigma")
    sigma = [str(e) for e in sigma] if sigma is not None else None
    if sigma is not None and len(sigma) != k:
        raise ModelFileError(f"sigma has {len(sigma)} entries, rank is {k}")
    meta = dict(doc.get("meta", {}))
    try:
        model = build_model(chart, anchor, structure, metric, sigma, name=name or meta.get("preset", ""), meta=meta)
    except (ModelError, FieldError) as exc:
        raise ModelFileError(str(exc)) from None
    if model.rank != k:
        raise ModelFileError(f"declared rank {k} but metric/sigma give {model.rank}")
    conn = None
    if "connection" in doc:
        entries = {}
        for entry in doc["connection"].get("gamma", []):
            idx = tuple(_index(_get(entry, key, "connection.gamma"), k, f"gamma {key}") for key in ("c", "a", "b"))
            entries[idx] = str(_get(entry, "expr", "connection.gamma"))
        try:
            conn = ExprConnection.build(model, entries, label="file")
        except (ModelError, FieldError) as exc:
            raise ModelFileError(str(exc)) from None
    return model, conn


def load_model(path):
    """Returns (model, connection or None)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ModelFileError(f"cannot read {path}: {exc.strerror or exc}") from None
    return loads(text, name=path.stem)


def loads(text, name=""):
    try:
        doc = tomlkit.parse(text)
    except tomlkit.exceptions.ParseError as exc:
        raise ModelFileError(f"TOML syntax error: {exc}") from None
    return model_from_dict(doc, name)


def _array(rows):
    arr = tomlkit.array()
    for row in rows:
        arr.append(row)
    if rows and isinstance(rows[0], list):
        arr.multiline(True)
    return arr


def _meta_value(v):
    if isinstance(v, dict):
        t = tomlkit.table()
        for key in sorted(v):
            t.add(key, _meta_value(v[key]))
        return t
    if isinstance(v, (list, tuple)):
        return [_meta_value(x) for x in v]
    return v


def to_document(model, connection=None):
    n, k = model.n, model.rank
    doc = tomlkit.document()
    if model.name:
        doc.add(tomlkit.comment(f"model: {model.name}"))
    chart = tomlkit.table()
    chart.add("coords", list(model.chart.coord_names))
    chart.add("lo", [float(v) for v in model.chart.lo])
    chart.add("hi", [float(v) for v in model.chart.hi])
    doc.add("chart", chart)
    alg = tomlkit.table()
    alg.add("rank", k)
    alg.add("anchor", _array([[model.anchor[i][a].text for a in range(k)] for i in range(n)]))
    structure = tomlkit.aot()
    for (c, a, b) in sorted(model.structure):
        t = tomlkit.table()
        t.add("lower", [a + 1, b + 1])
        t.add("upper", c + 1)
        t.add("expr", model.structure[(c, a, b)].text)
        structure.append(t)
    alg.add("metric", _array([[model.metric[a][b].text for b in range(k)] for a in range(k)]))
    if model.sigma is not None:
        alg.add("sigma", [s.text for s in model.sigma])
    if len(structure):
        alg.add("structure", structure)
    doc.add("algebroid", alg)
    if connection is not None:
        conn = tomlkit.table()
        gamma = tomlkit.aot()
        for (c, a, b) in sorted(connection.entries):
            t = tomlkit.table()
            t.add("a", a + 1)
            t.add("b", b + 1)
            t.add("c", c + 1)
            t.add("expr", connection.entries[(c, a, b)].text)
            gamma.append(t)
        conn.add("gamma", gamma)
        doc.add("connection", conn)
    if model.meta:
        doc.add("meta", _meta_value(model.meta))
    return doc


def dumps(model, connection=None):
    return tomlkit.dumps(to_document(model, connection))


def dump_model(model, path, connection=None):
    Path(path).write_text(dumps(model, connection), encoding="utf-8")


def model_hash(model):
    """Digest of the canonical model text without provenance."""
    bare = model.__class__(model.chart, model.rank, model.anchor, model.structure, model.metric, model.sigma, "", {})
    return hashlib.sha256(dumps(bare).encode("utf-8")).hexdigest()[:16]
