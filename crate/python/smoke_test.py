"""Smoke test for the fdx extension module.

Build and install first, e.g. ``pip install --no-build-isolation ./crates/py``.
"""

import math

import fdx


def main():
    pipe = fdx.Pipeline(seed=0)
    lam = pipe.lambdas()
    assert abs(lam[0] + 1.0) < 1e-10, lam[0]
    assert 2.99 < lam[1] < 3.01, lam[1]

    st = pipe.stationary()
    assert st["schema_version"] == fdx.SCHEMA_VERSION
    assert st["residual"] <= 1e-10

    gap = pipe.gap()
    assert gap["k_contr"] < 1.0 and gap["eps_gap"] > 0.0

    x = pipe.x()
    h0 = [1e-3 * math.sin(2 * math.pi * xi) for xi in x]
    traj = pipe.evolve(h0, 2.0)
    assert traj["norm_p1"][-1] < traj["norm_p1"][0]

    h1 = pipe.time_map(h0)
    assert len(h1) == len(x)

    rep = pipe.shadow()
    assert rep["fitted_rate"] >= rep["lambda_minus"] - 0.05 * abs(rep["lambda_minus"])

    crit = pipe.criterion(1)
    assert crit["passed"], crit

    try:
        fdx.Pipeline("[domain]\nnodes = 4\n")
    except fdx.FdxError as e:
        assert "n >= 16" in str(e)
    else:
        raise AssertionError("malformed config accepted")

    print("lambda_2 = %.6f, shadow rate = %.4f" % (lam[1], rep["fitted_rate"]))
    print("smoke test passed")


if __name__ == "__main__":
    main()
