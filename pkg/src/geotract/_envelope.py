"""Shared single-file JSON envelope for binary payloads.

Every artifact the package writes (tensor fields, signal volumes, tracks,
ground truth) is one JSON document; numeric payloads travel as base64-encoded
little-endian float64, which round-trips bit-exactly. Writes are atomic
(temp file + rename) so a failed command never leaves a partial file behind.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile

import numpy as np


def encode_f64(arr):
    """Base64-encode an ndarray as little-endian float64, C-order."""
    data = np.ascontiguousarray(arr, dtype="<f8")
    return base64.b64encode(data.tobytes()).decode("ascii")


def decode_f64(text, shape):
    raw = base64.b64decode(text.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64, copy=True)
    return arr.reshape(shape)


def dump_json(obj):
    """Canonical JSON text: sorted keys, stable float repr, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_json_atomic(path, obj):
    path = os.fspath(path)
    text = dump_json(obj)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path, text):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
