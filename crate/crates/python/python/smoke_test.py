"""Quick end-to-end check of the extension module."""

import math
import os
import tempfile

import aglp


def main():
    data = aglp.Dataset.gaussian_shift(seed=1, n_test=200)
    print(data)
    x, y = data.split("target_test")
    assert len(x) == len(y) == 200 and data.classes == 4

    assert abs(aglp.ramp_weight(0, 100) - math.exp(-5)) < 1e-12
    p = aglp.normalized_propagation([[0.2, 0.9], [0.4, 0.1], [0.7, 0.7]])
    assert all(abs(p[i][j] - p[j][i]) < 1e-15 for i in range(3) for j in range(3))
    s = aglp.pairwise_labels([[0.9, 0.1, 0.0], [0.8, 0.0, 0.1], [0.0, 0.1, 0.9]], 1)
    assert s == [[1, 1, 0], [1, 1, 0], [0, 0, 1]]
    q = aglp.prototype_predict([[0.0, 0.0], [2.0, 2.0]], [0, 1], 2, [[0.1, 0.0]])
    assert q[0][0] > q[0][1]

    cfg = aglp.Config("[trainer]\nsteps = 300\nwarmup = 60\n").with_preset("full")
    cfg.seed = 1
    result = aglp.train(cfg, data)
    print(f"target {result.target_accuracy:.3f} source {result.source_accuracy:.3f}")
    assert len(result.log) == 300 and result.log[-1]["step"] == 299

    model = result.model
    report = model.evaluate(x, y)
    assert abs(report["accuracy"] - result.target_accuracy) < 1e-12
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        again = aglp.Model.load(path)
        assert again.predict(x[:5]) == model.predict(x[:5])

    try:
        aglp.Config("[trainer]\nsteps = 0\n")
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("invalid config accepted")
    print("ok")


if __name__ == "__main__":
    main()
