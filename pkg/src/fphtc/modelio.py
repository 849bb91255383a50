"""Versioned JSON persistence for teacher ensembles and student trees.

Layout (``format`` is always ``"fphtc-model"``)::

    {"format": "fphtc-model", "version": 1, "kind": "gbdt" | "cart", ...}

A ``gbdt`` document carries ``config``, ``base_score``, ``n_features``,
``schema`` ({name, version}), ``train_loss`` and ``trees``: one list per
round, each holding one node table per class. A ``cart`` document carries
``config``, ``class_weight`` and a single node table. Node tables store
parallel arrays (``feature``, ``threshold``, ``left``, ``right`` plus
``value`` or ``label``/``class_counts``), with -1 marking leaves.

Floats are written with ``repr`` precision, so a load reproduces every
threshold and leaf value bit for bit. Keys are sorted and separators fixed,
so saving the same model twice yields the same bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .gbdt import GbdtConfig, GbdtModel, RegressionTree
from .policy import CartConfig, DecisionTree

FORMAT = "fphtc-model"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def _ints(a) -> list[int]:
    return [int(v) for v in a]


def _floats(a) -> list[float]:
    return [float(v) for v in a]


def _regression_tree_doc(t: RegressionTree) -> dict:
    return {"feature": _ints(t.feature), "threshold": _floats(t.threshold),
            "left": _ints(t.left), "right": _ints(t.right), "value": _floats(t.value)}


def _regression_tree(doc: dict) -> RegressionTree:
    return RegressionTree(
        feature=np.asarray(doc["feature"], dtype=np.int64),
        threshold=np.asarray(doc["threshold"], dtype=np.float64),
        left=np.asarray(doc["left"], dtype=np.int64),
        right=np.asarray(doc["right"], dtype=np.int64),
        value=np.asarray(doc["value"], dtype=np.float64),
    )


def gbdt_to_dict(m: GbdtModel) -> dict:
    return {
        "format": FORMAT, "version": VERSION, "kind": "gbdt",
        "config": asdict(m.config),
        "base_score": float(m.base_score),
        "n_features": m.n_features,
        "schema": {"name": m.schema_name, "version": m.schema_version},
        "train_loss": _floats(m.train_loss),
        "trees": [[_regression_tree_doc(t) for t in rnd] for rnd in m.trees],
    }


def cart_to_dict(t: DecisionTree, config: CartConfig | None = None) -> dict:
    return {
        "format": FORMAT, "version": VERSION, "kind": "cart",
        "config": asdict(config or CartConfig()),
        "class_weight": _floats(t.class_weight),
        "tree": {"feature": _ints(t.feature), "threshold": _floats(t.threshold),
                 "left": _ints(t.left), "right": _ints(t.right), "label": _ints(t.label),
                 "class_counts": [_ints(row) for row in t.class_counts]},
    }


def _check_tables(nodes: dict, keys: tuple[str, ...]) -> None:
    sizes = {k: len(nodes[k]) for k in keys}
    if len(set(sizes.values())) != 1 or not sizes[keys[0]]:
        raise ModelFormatError(f"node arrays disagree in length: {sizes}")
    n = sizes[keys[0]]
    for i, f in enumerate(nodes["feature"]):
        if f >= 0 and not (0 < nodes["left"][i] < n and 0 < nodes["right"][i] < n):
            raise ModelFormatError(f"node {i} has children outside the table")


def model_from_dict(doc: dict):
    """Rebuild a GbdtModel or DecisionTree from its document."""
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ModelFormatError(f"not a {FORMAT} document")
    if doc.get("version") != VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')!r}")
    try:
        kind = doc["kind"]
        if kind == "gbdt":
            for rnd in doc["trees"]:
                for t in rnd:
                    _check_tables(t, ("feature", "threshold", "left", "right", "value"))
            return GbdtModel(
                trees=[[_regression_tree(t) for t in rnd] for rnd in doc["trees"]],
                config=GbdtConfig(**doc["config"]),
                base_score=float(doc["base_score"]),
                n_features=doc["n_features"],
                schema_name=doc["schema"]["name"],
                schema_version=int(doc["schema"]["version"]),
                train_loss=list(doc["train_loss"]),
            )
        if kind == "cart":
            t = doc["tree"]
            _check_tables(t, ("feature", "threshold", "left", "right", "label", "class_counts"))
            CartConfig(**doc["config"])
            return DecisionTree(
                feature=np.asarray(t["feature"], dtype=np.int64),
                threshold=np.asarray(t["threshold"], dtype=np.float64),
                left=np.asarray(t["left"], dtype=np.int64),
                right=np.asarray(t["right"], dtype=np.int64),
                label=np.asarray(t["label"], dtype=np.int64),
                class_counts=np.asarray(t["class_counts"], dtype=np.int64).reshape(-1, 3),
                class_weight=np.asarray(doc["class_weight"], dtype=np.float64),
            )
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed model document: {exc!r}") from None
    raise ModelFormatError(f"unknown model kind {doc.get('kind')!r}")


def dumps(model, cart_config: CartConfig | None = None) -> str:
    if isinstance(model, GbdtModel):
        doc = gbdt_to_dict(model)
    elif isinstance(model, DecisionTree):
        doc = cart_to_dict(model, cart_config)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def loads(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"invalid JSON: {exc}") from None
    return model_from_dict(doc)


def save_model(model, path, cart_config: CartConfig | None = None) -> None:
    Path(path).write_text(dumps(model, cart_config), encoding="utf-8")


def load_model(path):
    return loads(Path(path).read_text(encoding="utf-8"))
