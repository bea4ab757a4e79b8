"""Canonical JSON emission shared by every versioned file format."""

import base64
import json
import math

import numpy as np

from .errors import SchemaVersionMismatchError


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1)) if indent else ""
    end = " " * (indent * level) if indent else ""
    sep = ",\n" if indent else ","
    nl = "\n" if indent else ""
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"cannot serialize non-finite float {x}")
        text = format(x, ".17g")
        if not any(c in text for c in ".en"):
            text += ".0"
        return text
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}:{' ' if indent else ''}{_encode(v, indent, level + 1)}"
                 for k, v in obj.items()]
        return "{" + nl + sep.join(items) + nl + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if not seq:
            return "[]"
        # numeric leaves stay on one line to keep files readable
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_encode(v, 0, 0) for v in seq) + "]"
        items = [pad + _encode(v, indent, level + 1) for v in seq]
        return "[" + nl + sep.join(items) + nl + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent=1):
    """Serialize with insertion-ordered keys and 17 significant digits per float."""
    return _encode(obj, indent, 0) + "\n"


def check_schema(doc, expected):
    """Reject documents whose ``schema`` major version differs from ``expected``."""
    found = doc.get("schema") if isinstance(doc, dict) else None
    if found is None:
        raise SchemaVersionMismatchError(expected, None)
    name, _, major = str(found).partition("/")
    exp_name, _, exp_major = expected.partition("/")
    if name != exp_name or major.split(".")[0] != exp_major.split(".")[0]:
        raise SchemaVersionMismatchError(expected, found)


def encode_array(arr):
    data = np.ascontiguousarray(arr, dtype="<f8")
    return base64.b64encode(data.tobytes()).decode("ascii")


def decode_array(text, shape):
    raw = base64.b64decode(text.encode("ascii"))
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
