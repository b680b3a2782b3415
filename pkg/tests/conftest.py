import numpy as np
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

settings.register_profile('default', deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile('default')

finite = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)


@st.composite
def vectors(draw, rmin=1e-2, rmax=1e2):
    """Nonzero 3-vectors with norm in [rmin, rmax]."""
    d = np.array([draw(finite) for _ in range(3)])
    n = np.linalg.norm(d)
    if n < 1e-3:
        d = np.array([1.0, 0.0, 0.0])
        n = 1.0
    r = np.exp(draw(st.floats(np.log(rmin), np.log(rmax))))
    return d / n * r


@st.composite
def rotations(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@st.composite
def orientations(draw, nmin=1.0 + 1e-6, nmax=50.0):
    """Pair orientations xi with |xi| in (1, nmax]."""
    return draw(vectors(1.0, 1.0)) * draw(st.floats(nmin, nmax))
