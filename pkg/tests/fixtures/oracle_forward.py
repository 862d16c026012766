"""Writes two_layer.json: a fixed dense-relu-dense-softmax net, three inputs
and their class probabilities computed with plain Python loops (no numpy).

Run once; the output is checked in and compared against the engine.
"""

import json
import math
import random
from pathlib import Path

rng = random.Random(20240611)
n_in, n_hidden, n_out = 5, 4, 3
W1 = [[round(rng.uniform(-1, 1), 6) for _ in range(n_in)] for _ in range(n_hidden)]
b1 = [round(rng.uniform(-0.5, 0.5), 6) for _ in range(n_hidden)]
W2 = [[round(rng.uniform(-1, 1), 6) for _ in range(n_hidden)] for _ in range(n_out)]
b2 = [round(rng.uniform(-0.5, 0.5), 6) for _ in range(n_out)]
inputs = [[round(rng.uniform(0, 1), 6) for _ in range(n_in)] for _ in range(3)]


def oracle(x):
    h = [max(0.0, sum(W1[j][i] * x[i] for i in range(n_in)) + b1[j]) for j in range(n_hidden)]
    z = [sum(W2[k][j] * h[j] for j in range(n_hidden)) + b2[k] for k in range(n_out)]
    top = max(z)
    e = [math.exp(v - top) for v in z]
    s = sum(e)
    return [v / s for v in e]


doc = {
    "layers": {"W1": W1, "b1": b1, "W2": W2, "b2": b2},
    "inputs": inputs,
    "probabilities": [oracle(x) for x in inputs],
}
Path(__file__).with_name("two_layer.json").write_text(json.dumps(doc, indent=1) + "\n")
