"""JSON-friendly encoding of float64 matrices (base64, little endian)."""
import base64

import numpy as np


def encode_array(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "f64le",
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d):
    if d["dtype"] != "f64le":
        raise ValueError(f"unsupported array dtype {d['dtype']!r}")
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)
