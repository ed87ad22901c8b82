"""Quick end-to-end check of the compiled extension."""

import math

import mhclite


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    alpha = 1e-13
    adverse = [[0.5, alpha, alpha], [0.5, alpha, alpha], [alpha, 1.0, 1.0]]
    rep = mhclite.sk_normalize(adverse, 20)
    assert rep.iterations_run == 20 and len(rep.l1_trace) == 20
    col0 = sum(row[0] for row in rep.result)
    assert close(col0, 1.82, 0.01), col0
    row_l1, col_l1, total = mhclite.ds_error(rep.result)
    assert row_l1 < 1e-12 and close(col_l1, 1.64, 0.05)

    perms = mhclite.permutations(4)
    assert len(perms) == 24 and perms[0] == [0, 1, 2, 3]
    w = [1.0 / 24] * 24
    m = mhclite.birkhoff_combine(4, w)
    assert all(close(v, 0.25, 1e-15) for row in m for v in row)
    back = mhclite.birkhoff_combine(4, mhclite.birkhoff_decomposition(m))
    assert max(abs(a - b) for ra, rb in zip(m, back) for a, b in zip(ra, rb)) < 1e-12

    p = mhclite.BlockParams.init("mhc-lite", 4, 8)
    x = [[math.sin(i + 4 * j) for i in range(8)] for j in range(4)]
    maps = p.compute_maps(x)
    assert close(maps.a_weights[0], 1 / (1 + 23 * math.exp(-8)), 1e-12)
    assert mhclite.ds_error(maps.h_res)[2] <= 1e-13
    assert maps.pre_sk is None
    assert mhclite.BlockParams.from_json(p.to_json()).groups() == p.groups()

    mhc = mhclite.BlockParams.init("mhc", 4, 8)
    assert mhc.compute_maps(x).pre_sk is not None
    out = mhc.forward(x)
    assert len(out) == 4 and len(out[0]) == 8

    errs = mhclite.BlockParams.random("mhc-lite", 4, 8, seed=3).grad_check(seed=3)
    assert max(errs.values()) <= 1e-4, errs
    assert mhclite.grad_check("unconstrained", 4, 4, seed=1) <= 1e-4

    log = mhclite.train("mhc-lite", layers=2, c=8, steps=30, lr=1e-2, samples=32)
    assert len(log["loss"]) == 30 and log["loss"][-1] < log["loss"][0]
    assert max(log["max_ds_error"]) <= 1e-12

    try:
        mhclite.sk_normalize([[1.0, 2.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("non-square input accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()
