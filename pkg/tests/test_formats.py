import json

import numpy as np

from lapobench.formats import load_network, read_flat, save_network, write_flat
from lapobench.numcore import Network


def test_flat_roundtrip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(7, 3))
    write_flat(tmp_path / "a.bin", arr, {"kind": "test"})
    back, header = read_flat(tmp_path / "a.bin")
    assert np.array_equal(arr, back)
    assert header == {"kind": "test", "rows": 7, "cols": 3}


def test_flat_layout_is_little_endian_row_major(tmp_path):
    arr = np.array([[1.0, 2.0], [3.0, 4.0]])
    write_flat(tmp_path / "a.bin", arr, {})
    raw = (tmp_path / "a.bin").read_bytes()
    head, body = raw.split(b"\n", 1)
    assert json.loads(head)["rows"] == 2
    assert np.array_equal(np.frombuffer(body, dtype="<f8"), [1.0, 2.0, 3.0, 4.0])


def test_network_checkpoint_roundtrip(tmp_path):
    net = Network.mlp(3, [5], 2, seed=4, out_act="sigmoid")
    save_network(net, tmp_path / "net.json", step=12, extra={"note": 1})
    back, manifest = load_network(tmp_path / "net.json")
    assert manifest["step"] == 12 and manifest["dims"] == [3, 5, 2]
    assert manifest["activations"] == ["tanh", "sigmoid"]
    x = np.random.default_rng(1).uniform(size=(4, 3))
    assert np.array_equal(net.predict(x), back.predict(x))
