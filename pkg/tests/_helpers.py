import numpy as np

from ctmlo import so3
from ctmlo.trajectory import STATE_DIM, GpState


def random_rotation(rng):
    phi = rng.normal(size=3)
    phi *= rng.uniform(0, np.pi * 0.999) / np.linalg.norm(phi)
    return so3.exp(phi)


def random_psd(rng, n=STATE_DIM, scale=1.0, floor=1e-3):
    A = rng.normal(size=(n, n)) * scale
    return A @ A.T / n + floor * np.eye(n)


def random_state(rng, *, t_ref=0.0, w_max=5.0, a_max=20.0, cov=None):
    mean = np.zeros(STATE_DIM)
    mean[0:3] = rng.normal(size=3) * 3
    mean[3:6] = so3.log(random_rotation(rng))
    mean[6:9] = rng.normal(size=3) * 2
    w = rng.normal(size=3)
    mean[9:12] = w / np.linalg.norm(w) * rng.uniform(0, w_max)
    a = rng.normal(size=3)
    mean[12:15] = a / np.linalg.norm(a) * rng.uniform(0, a_max)
    if cov is None:
        cov = random_psd(rng)
    return GpState(t_ref, mean, cov)

