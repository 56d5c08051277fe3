"""Codecs for the integration wire format.

Images travel as base64 PNG strings.  The coarse appearance feature
travels as {"shape", "dtype", "data"} with little-endian row-major
float32 bytes in "data".  Every decoder raises ValueError (or OSError
from the PNG reader) on malformed input so the route handlers can turn
failures into structured error responses.
"""

import base64
import io
import math
from typing import Any, Dict

import numpy as np
from PIL import Image

# Token grid emitted by the frozen image encoder: 256 patches + class
# token, 1536 channels each.
COARSE_SHAPE = (257, 1536)


def decode_image(payload: str, channels: int = 3) -> np.ndarray:
    """Decode a base64 PNG into uint8 pixels.

    channels=3 yields (H, W, 3) RGB, channels=1 a (H, W) grayscale
    plane.
    """
    if not isinstance(payload, str):
        raise ValueError(f"expected base64 string, got {type(payload).__name__}")
    raw = base64.b64decode(payload.encode("ascii"), validate=True)
    with Image.open(io.BytesIO(raw)) as img:
        converted = img.convert("RGB" if channels == 3 else "L")
    return np.asarray(converted, dtype=np.uint8)


def encode_image(pixels: np.ndarray) -> str:
    """Encode uint8 pixels ((H, W) or (H, W, 3)) as a base64 PNG string."""
    mode = "RGB" if pixels.ndim == 3 else "L"
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels), mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_tensor(obj: Dict[str, Any]) -> np.ndarray:
    """Decode a {"shape", "dtype", "data"} object into a float32 array."""
    if not isinstance(obj, dict):
        raise ValueError(f"expected tensor object, got {type(obj).__name__}")
    dtype = obj["dtype"]
    if dtype != "float32":
        raise ValueError(f"unsupported tensor dtype '{dtype}'")
    shape = tuple(int(n) for n in obj["shape"])
    if any(n < 0 for n in shape):
        raise ValueError(f"negative dimension in shape {list(shape)}")
    raw = base64.b64decode(str(obj["data"]).encode("ascii"), validate=True)
    values = np.frombuffer(raw, dtype="<f4")
    if values.size != math.prod(shape):
        raise ValueError(
            f"payload holds {values.size} values, shape {list(shape)} "
            f"needs {math.prod(shape)}"
        )
    return values.reshape(shape).astype(np.float32, copy=False)


def encode_tensor(values: np.ndarray) -> Dict[str, Any]:
    """Encode a float array as a {"shape", "dtype", "data"} object."""
    flat = np.ascontiguousarray(values, dtype="<f4")
    return {
        "shape": list(values.shape),
        "dtype": "float32",
        "data": base64.b64encode(flat.tobytes()).decode("ascii"),
    }
