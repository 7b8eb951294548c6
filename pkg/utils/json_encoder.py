import json
import math

import numpy as np
from pydantic import BaseModel


class NumpyJSONEncoder(json.JSONEncoder):
    """JSONEncoder for NumPy scalars/arrays, complex numbers and pydantic models."""

    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, (complex, np.complexfloating)):
            return {"re": float(obj.real), "im": float(obj.imag)}
        elif isinstance(obj, np.ndarray):
            if np.iscomplexobj(obj):
                return {"re": obj.real.tolist(), "im": obj.imag.tolist()}
            return obj.tolist()
        elif isinstance(obj, BaseModel):
            return obj.model_dump(mode="json")
        return super().default(obj)


def finite_or_none(value):
    """Replace NaN/inf floats (not representable in strict JSON) with None, recursively."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {key: finite_or_none(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [finite_or_none(item) for item in value]
    return value


def numpy_safe_dumps(obj, **kwargs):
    """json.dumps with NumpyJSONEncoder."""
    kwargs.setdefault('cls', NumpyJSONEncoder)
    kwargs.setdefault('ensure_ascii', False)
    return json.dumps(obj, **kwargs)
