"""On-disk formats.

Flat binary file: one line of JSON text (the header, terminated by ``\\n``)
followed by little-endian float64 values in row-major order. The header
always carries ``rows`` and ``cols``; other keys are format-specific.

Network checkpoints are a JSON manifest next to a flat binary weight file
holding every layer's weight then bias, concatenated.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .numcore import Layer, Network

_DTYPE = np.dtype("<f8")


def write_flat(path, array: np.ndarray, header: dict) -> None:
    array = np.ascontiguousarray(array, dtype=_DTYPE)
    if array.ndim == 1:
        array = array[:, None]
    head = dict(header, rows=int(array.shape[0]), cols=int(array.shape[1]))
    with open(path, "wb") as fh:
        fh.write(json.dumps(head, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(array.tobytes(order="C"))


def read_flat(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype=_DTYPE)
    rows, cols = header["rows"], header["cols"]
    if data.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, found {data.size}")
    return data.reshape(rows, cols).astype(np.float64), header


def save_network(net: Network, manifest_path, step: int = 0, extra: dict | None = None) -> Path:
    manifest_path = Path(manifest_path)
    weights_path = manifest_path.with_suffix(".bin")
    flat = np.concatenate([p.ravel() for p in net.parameters()])
    write_flat(weights_path, flat, {"kind": "network-weights"})
    manifest = {
        "dims": net.dims,
        "activations": [l.activation for l in net.layers],
        "seed": net.seed,
        "step": int(step),
        "weights": weights_path.name,
    }
    if extra:
        manifest["extra"] = extra
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_network(manifest_path) -> tuple[Network, dict]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    flat, _ = read_flat(manifest_path.parent / manifest["weights"])
    flat = flat.ravel()
    dims, acts = manifest["dims"], manifest["activations"]
    layers, pos = [], 0
    for n_in, n_out, act in zip(dims[:-1], dims[1:], acts):
        w = flat[pos:pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        b = flat[pos:pos + n_out]
        pos += n_out
        layers.append(Layer(w.copy(), b.copy(), act))
    if pos != flat.size:
        raise ValueError(f"{manifest_path}: weight file size does not match manifest dims")
    return Network(layers, seed=manifest.get("seed")), manifest
