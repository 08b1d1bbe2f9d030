"""Counter-based random streams.

Every stochastic quantity in the package is drawn from a generator keyed
by ``(seed, *key)``.  A replicate's stream therefore depends only on its
own key, never on how many replicates ran before it or on which worker ran
it.
"""

import numpy as np

# Domain-separation tags for the first element of a stream key.
SIMULATE = 0
BOOTSTRAP = 1
DOUBLE_INNER = 2
CELL = 3
CELL_BOOT = 4
SEGMENT = 5
BENCH = 6


def stream(seed, *key):
    """Return an independent generator for ``seed`` and an integer key path."""
    if seed is None:
        raise ValueError("a seed is required for reproducible sampling")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed, *key):
    """Derive a 64-bit integer seed from a parent seed and key path."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def as_generator(seed_or_rng, *key):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return stream(seed_or_rng, *key)


# Rates at or above this use rejection sampling; below it inversion keeps
# one uniform per bin so datasets drawn from nearby rates stay coupled.
INVERSION_MAX_RATE = 30.0


def _invert(u, lam):
    """Smallest ``k`` with ``F(k; lam) >= u``, vectorized over entries."""
    k = np.zeros(lam.shape, dtype=np.int64)
    p = np.exp(-lam)
    cdf = p.copy()
    limit = lam + 40.0 * np.sqrt(lam) + 40.0
    active = np.flatnonzero(u > cdf)
    while active.size:
        k[active] += 1
        p[active] *= lam[active] / k[active]
        cdf[active] += p[active]
        keep = (u[active] > cdf[active]) & (k[active] < limit[active])
        active = active[keep]
    return k


def poisson(rng, rates):
    """Draw independent Poisson variates, one per entry of ``rates``.

    Small rates are sampled by sequential-search inversion of a single
    uniform per bin.  Large rates fall back to numpy's PTRS sampler, drawn
    after the uniforms so the consumption order is fixed.
    """
    return poisson_rows([rng], np.asarray(rates, dtype=float)[None, :])[0]


def poisson_rows(rngs, rates):
    """Draw one row of Poisson variates per generator.

    ``rates`` has shape ``(m, n)`` (or ``(n,)``, shared by all rows).  Row
    ``r`` consumes only ``rngs[r]``, exactly as ``poisson(rngs[r], rates[r])``
    would, so batching never changes the result.
    """
    m = len(rngs)
    lam = np.broadcast_to(np.asarray(rates, dtype=float), (m, np.shape(rates)[-1]))
    u = np.empty(lam.shape)
    for r, g in enumerate(rngs):
        u[r] = g.random(lam.shape[1])
    out = np.zeros(lam.shape, dtype=np.int64)
    small = lam < INVERSION_MAX_RATE
    if small.all():
        return _invert(u.ravel(), lam.ravel().copy()).reshape(lam.shape)
    if small.any():
        out[small] = _invert(u[small], lam[small])
    for r, g in enumerate(rngs):
        big = ~small[r]
        if big.any():
            out[r, big] = g.poisson(lam[r, big])
    return out
