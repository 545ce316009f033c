"""Canonical text format for models crossing the site boundary.

Sites exchange fitted effect functions, never subject rows. The envelope
is line-oriented JSON with a fixed key order, shortest round-trip decimal
rendering of reals, LF endings, and a SHA-256 digest over the canonical
payload bytes. Honesty metadata carries index counts only; per-subject
indices never leave a site. Re-exporting an imported envelope reproduces
it byte for byte.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from . import tree_core as tc
from .causal_local import HonestySplit, LocalCateModel
from .ensemble import EnsembleModel
from .errors import DigestMismatch, SchemaError, UnsupportedVersion

FORMAT_VERSION = 1


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, ensure_ascii=True, allow_nan=False,
                      indent=1).encode("utf-8")


def _node_record(nd: tc.TreeNode) -> dict:
    rec = {"node_id": nd.node_id, "kind": nd.kind}
    if nd.kind == "internal":
        rec["feature"] = nd.feature
        if nd.left_levels is not None:
            rec["left_levels"] = list(nd.left_levels)
        else:
            rec["threshold"] = nd.threshold
        rec["left"] = nd.left
        rec["right"] = nd.right
    rec["leaf_value"] = nd.leaf_value
    rec["n_node"] = nd.n_node
    return rec


def _tree_record(tree: tc.FittedTree) -> dict:
    return {"complexity_alpha": tree.complexity_alpha,
            "nodes": [_node_record(nd) for nd in tree.nodes]}


def _column_kind_records(kinds) -> list[dict]:
    out = []
    for ck in kinds:
        if ck.kind == "categorical":
            out.append({"kind": "categorical", "levels": ck.levels})
        else:
            out.append({"kind": "numeric"})
    return out


def envelope_payload(model) -> dict:
    """The ordered, digest-free envelope body for a fitted model."""
    if isinstance(model, LocalCateModel):
        honesty = None
        if model.honesty is not None:
            honesty = {"structure_count": model.honesty.structure_count,
                       "estimate_count": model.honesty.estimate_count}
        return {
            "format_version": FORMAT_VERSION,
            "model_class": "local",
            "kind": model.kind,
            "site_id": model.site_id,
            "n_features": model.trees[0].n_features,
            "column_kinds": _column_kind_records(model.trees[0].column_kinds),
            "honesty": honesty,
            "trees": [_tree_record(t) for t in model.trees],
        }
    if isinstance(model, EnsembleModel):
        return {
            "format_version": FORMAT_VERSION,
            "model_class": "ensemble",
            "kind": model.kind,
            "b": model.b,
            "n_subjects": model.n_subjects,
            "n_sites": model.n_sites,
            "n_features": model.n_features,
            "column_kinds": _column_kind_records(model.trees[0].column_kinds),
            "trees": [_tree_record(t) for t in model.trees],
        }
    raise TypeError(f"cannot export model of type {type(model).__name__}")


def export_model_bytes(model) -> bytes:
    payload = envelope_payload(model)
    digest = hashlib.sha256(_json_bytes(payload)).hexdigest()
    return _json_bytes({**payload, "digest": digest}) + b"\n"


def export_model(model, path: str) -> None:
    """Write a model envelope; see the module docstring for the format."""
    data = export_model_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)


def _require(cond: bool, message: str):
    if not cond:
        raise SchemaError(message)


def _parse_column_kinds(records) -> tuple[tc.ColumnKind, ...]:
    _require(isinstance(records, list) and records, "column_kinds missing")
    kinds = []
    for rec in records:
        if rec.get("kind") == "categorical":
            kinds.append(tc.categorical(int(rec["levels"])))
        elif rec.get("kind") == "numeric":
            kinds.append(tc.numeric())
        else:
            raise SchemaError(f"unknown column kind {rec.get('kind')!r}")
    return tuple(kinds)


def _parse_tree(rec: dict, n_features: int,
                kinds: tuple[tc.ColumnKind, ...]) -> tc.FittedTree:
    _require(isinstance(rec.get("nodes"), list) and rec["nodes"],
             "tree has no nodes")
    raw = rec["nodes"]
    nodes = []
    seen_children = set()
    for i, nd in enumerate(raw):
        _require(nd.get("node_id") == i,
                 f"node_id {nd.get('node_id')}: ids must be contiguous")
        kind = nd.get("kind")
        value = nd.get("leaf_value")
        _require(isinstance(value, (int, float)) and np.isfinite(value),
                 f"node_id {i}: leaf_value must be a finite real")
        n_node = int(nd.get("n_node", 0))
        if kind == "leaf":
            nodes.append(tc.TreeNode(i, "leaf", None, None, None, None, None,
                                     float(value), n_node, None))
            continue
        _require(kind == "internal", f"node_id {i}: unknown kind {kind!r}")
        feature = nd.get("feature")
        _require(isinstance(feature, int) and 0 <= feature < n_features,
                 f"node_id {i}: bad split feature {feature!r}")
        left, right = nd.get("left"), nd.get("right")
        for child in (left, right):
            _require(isinstance(child, int) and i < child < len(raw),
                     f"node_id {i}: internal node missing a valid child")
            _require(child not in seen_children,
                     f"node_id {i}: child {child} claimed twice")
            seen_children.add(child)
        threshold = nd.get("threshold")
        left_levels = nd.get("left_levels")
        if kinds[feature].kind == "categorical":
            _require(isinstance(left_levels, list) and left_levels,
                     f"node_id {i}: categorical split needs left_levels")
            _require(all(isinstance(l, int) and 0 <= l < kinds[feature].levels
                         for l in left_levels),
                     f"node_id {i}: left_levels out of range")
            rule_levels = tuple(sorted(left_levels))
            rule_threshold = None
        else:
            _require(isinstance(threshold, (int, float))
                     and np.isfinite(threshold),
                     f"node_id {i}: numeric split needs a finite threshold")
            rule_levels = None
            rule_threshold = float(threshold)
        nodes.append(tc.TreeNode(i, "internal", feature, rule_threshold,
                                 rule_levels, left, right, float(value),
                                 n_node, None))
    _require(len(seen_children) == len(raw) - 1,
             "every non-root node needs exactly one parent")
    return tc.FittedTree(nodes, n_features, kinds,
                         complexity_alpha=float(rec.get("complexity_alpha", 0.0)))


def import_model_bytes(data: bytes):
    """Parse, verify, and reconstruct a model from envelope bytes."""
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"envelope is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaError("envelope must be a JSON object")
    version = obj.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"format_version {version!r} is not supported")
    digest = obj.pop("digest", None)
    if digest is None:
        raise SchemaError("envelope has no digest")
    actual = hashlib.sha256(_json_bytes(obj)).hexdigest()
    if actual != digest:
        raise DigestMismatch("envelope digest does not match its payload")

    model_class = obj.get("model_class")
    kinds = _parse_column_kinds(obj.get("column_kinds"))
    n_features = obj.get("n_features")
    _require(isinstance(n_features, int) and n_features >= 1,
             "n_features must be a positive integer")
    trees_raw = obj.get("trees")
    _require(isinstance(trees_raw, list) and trees_raw, "envelope has no trees")

    if model_class == "local":
        _require(len(kinds) == n_features,
                 "column_kinds must cover every feature")
        trees = [_parse_tree(t, n_features, kinds) for t in trees_raw]
        honesty = None
        if obj.get("honesty") is not None:
            h = obj["honesty"]
            honesty = HonestySplit(None, None,
                                   int(h.get("structure_count", 0)),
                                   int(h.get("estimate_count", 0)))
        kind = obj.get("kind")
        _require(kind in ("causal_tree", "causal_forest"),
                 f"unknown local model kind {kind!r}")
        return LocalCateModel(int(obj.get("site_id", 0)), kind, trees, honesty)

    if model_class == "ensemble":
        _require(len(kinds) == n_features + 1,
                 "ensemble column_kinds must cover features plus the site column")
        trees = [_parse_tree(t, n_features + 1, kinds) for t in trees_raw]
        kind = obj.get("kind")
        _require(kind in ("ET", "EF"), f"unknown ensemble kind {kind!r}")
        return EnsembleModel(kind, trees, int(obj.get("b", len(trees))),
                             int(obj.get("n_subjects", 0)),
                             int(obj.get("n_sites", 0)), n_features,
                             tree_records=None)
    raise SchemaError(f"unknown model_class {model_class!r}")


def import_model(path: str):
    """Read and verify a model envelope from disk."""
    with open(path, "rb") as fh:
        return import_model_bytes(fh.read())
