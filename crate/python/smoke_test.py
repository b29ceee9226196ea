"""Smoke test for the Python extension.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/scalemix-*.whl
"""

import math

import scalemix


def close(a, b, tol):
    assert abs(a - b) <= tol, (a, b)


def main():
    mix = scalemix.Mixture.reference(normalized=False)
    for got, want in zip(mix.moments(5), [0.9986, 1.0766, 1.3856, 2.6163, 8.0863]):
        close(got, want, 5e-4)
    cums = scalemix.moments_to_cumulants(mix.moments(5))
    back = scalemix.cumulants_to_moments(cums)
    for a, b in zip(back, mix.moments(5)):
        close(a, b, 1e-12)

    unit = scalemix.Mixture.reference()
    close(unit.mean(), 1.0, 1e-12)

    model = scalemix.Model.grid(4, 4, range=20.0, mixture=unit)
    assert model.dim == 16
    rows, v = model.simulate(50, seed=3)
    assert len(rows) == 50 and len(rows[0]) == 16 and len(v) == 50
    rows2, _ = model.simulate(50, seed=3)
    assert rows == rows2
    g_rows, g_v = model.simulate(50, seed=3, field="gaussian")
    assert g_v is None
    # Shared latent draws: the scale-mixture row is the Gaussian row times sqrt(V).
    close(rows[0][0], g_rows[0][0] * math.sqrt(v[0]), 1e-12)

    c2 = unit.cumulants(2)[1]
    close(model.joint_cumulant([0, 0, 0, 0]), 3.0 * c2, 1e-12)

    gauss = scalemix.Model.grid(4, 4, range=20.0)
    interp = scalemix.Interpolator(gauss, [0, 5, 10], [0.3, -0.4, 1.0], (1.5, 1.5))
    m, s = interp.kriging()
    for a in [m - 2 * s, m + 0.5 * s, m + 3 * s]:
        close(interp.cdf(a), interp.gaussian_cdf(a), 1e-6)

    heavy = scalemix.Interpolator(model, [0, 5, 10], [0.3, -0.4, 1.0], (1.5, 1.5))
    q = heavy.quantile(0.99)
    close(heavy.cdf(q), 0.99, 1e-6)
    assert heavy.detail(q)["newton_iters"][0] >= 1

    ens = scalemix.conditional_simulate(model, [0, 5], [0.3, -0.4], [(0.0, 0.0), (2.5, 2.5)], b=200, seed=1)
    assert len(ens["samples"]) == 200
    assert all(abs(r[0] - 0.3) < 1e-12 for r in ens["samples"])

    counts = scalemix.threshold_counts(rows, 1.0)
    assert counts == [sum(x > 1.0 for x in r) for r in rows]
    h = scalemix.congregation_entropy(rows, [0, 1, 2], 0.8)
    assert 0.0 <= h <= 3 * math.log(2)

    try:
        scalemix.Mixture([0.5, 0.5], [2.0, 2.0], [1.0, 1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("a mixture with mean 2 must be rejected")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
