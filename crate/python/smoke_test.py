"""Smoke test for the Python bindings; build them first with `maturin develop` in crates/py."""

import json
import math
import random

import abdesign


def rows(n, p, seed):
    rng = random.Random(seed)
    return [[rng.gauss(0.0, 1.0) for _ in range(p)] for _ in range(n)]


def _det3(m):
    return (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]))


def test_offline():
    data = rows(40, 3, 1)
    bw = abdesign.Bandwidth.from_data(data)
    assert bw.dim == 3
    gram = abdesign.KernelGram(data, bw)
    assert len(gram) == 40
    det = abs(_det3(bw.matrix))
    assert math.isclose(gram.entry(0, 0), math.pi ** 1.5 / math.sqrt(det), rel_tol=1e-9)
    assert gram.entry(0, 1) == gram.entry(1, 0)
    assert 0.0 < gram.entry(0, 1) < gram.entry(0, 0)

    result = gram.optimize(2, max_iters=50, seed=3)
    assert sorted(set(result.labels)) == [0, 1]
    assert result.labels.count(0) == 20
    assert len(result.trace) == 51
    assert math.isclose(gram.criterion(result.labels, 2), result.value)
    assert result.trace[-1] <= result.trace[0]

    again = abdesign.design_offline(data, 2, max_iters=50, seed=3)
    assert again.labels == result.labels
    assert abdesign.mahalanobis(data, result.labels, 2) >= 0.0


def test_online():
    online = abdesign.OnlineDesign(rows(20, 2, 2), 2, max_iters=20, seed=5)
    out = online.assign(rows(10, 2, 3))
    assert len(out) == 10
    assert all(g in (0, 1) for _, g, _ in out)
    assert abs(online.sizes[0] - online.sizes[1]) <= 1
    snapshot = online.to_json()
    restored = abdesign.OnlineDesign.from_json(snapshot)
    batch = rows(8, 2, 4)
    assert online.assign(batch) == restored.assign(batch)
    try:
        abdesign.OnlineDesign.from_json(snapshot.replace('"batches": 2', '"batches": 3'))
    except RuntimeError as e:
        assert "checksum" in str(e)
    else:
        raise AssertionError("tampered state accepted")


def test_simulate():
    summary = json.loads(abdesign.simulate("case1", n=40, replicates=2, max_iters=10))
    assert set(summary["summary"]) == {"randomized", "discrepancy"}
    try:
        abdesign.simulate("nope")
    except ValueError as e:
        assert "case1" in str(e)
    else:
        raise AssertionError("unknown scenario accepted")


if __name__ == "__main__":
    test_offline()
    test_online()
    test_simulate()
    print("smoke test passed")
