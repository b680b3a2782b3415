"""Cloud builders shared by several test modules."""
import numpy as np

from pairsed.densities import UniformBall
from pairsed.micro import make_cloud
from pairsed.reflections import Cloud

G = np.array([0.0, 0.0, -1.0])
BALL = UniformBall(1.0)


def r0_for(dilution, rho=BALL):
    """r0 with r0 * sup(rho)^(1/3) = dilution."""
    return dilution / rho.sup ** (1.0 / 3.0)


def ball_cloud(n, seed=0, dilution=0.05, d_factor=0.5, **kw):
    spacing = (1.0 / (n * BALL.sup)) ** (1.0 / 3.0)
    return make_cloud(BALL, n, r0_for(dilution), G, seed, d_floor=d_factor * spacing, **kw)


def stacked_pairs(sep=0.5, xi=(0.0, 0.0, 2.0), r0=0.1):
    x = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, sep]])
    return Cloud(x, np.tile(xi, (2, 1)), r0, G)
