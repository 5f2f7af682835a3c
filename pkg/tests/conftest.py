import numpy as np
import pytest


def make_hurwitz(n, rng, min_decay=0.2, max_decay=2.0, max_freq=8.0):
    """Random Hurwitz matrix with oscillatory structure.

    Built from 2x2 spiral blocks (and one real block for odd n) conjugated by
    a random well-conditioned similarity, so the spectrum is known by
    construction.
    """
    blocks = []
    k = n
    while k >= 2:
        decay = rng.uniform(min_decay, max_decay)
        freq = rng.uniform(0.3, max_freq)
        blocks.append(np.array([[-decay, freq], [-freq, -decay]]))
        k -= 2
    if k == 1:
        blocks.append(np.array([[-rng.uniform(min_decay, max_decay)]]))
    core = np.zeros((n, n))
    i = 0
    for blk in blocks:
        m = blk.shape[0]
        core[i : i + m, i : i + m] = blk
        i += m
    # well-conditioned random similarity: orthogonal times mild diagonal
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    d = np.diag(rng.uniform(0.5, 2.0, size=n))
    s = q @ d
    return s @ core @ np.linalg.inv(s)


def rel_fro(x, y):
    """Frobenius-norm relative error of x against reference y."""
    return np.linalg.norm(x - y) / np.linalg.norm(y)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def impedance_branch(f, t, r, x, b_shunt=0.0):
    """Branch from series impedance r + jx."""
    from wadc.network import Branch

    den = r * r + x * x
    return Branch(f, t, r / den, -x / den, b_shunt)


def twin_machine_case(load_g=0.8, p_mech=0.8):
    """Two identical machines, identical colocated loads, one symmetric tie.

    By symmetry the equilibrium has both rotor angles at the reference.
    """
    from wadc.network import Bus, GeneratorParams, Load, NetworkCase

    return NetworkCase(
        name="twin",
        base_mva=100.0,
        omega0=2 * np.pi * 60,
        buses=(Bus(1, "generator"), Bus(2, "generator")),
        branches=(impedance_branch(1, 2, 0.02, 0.2),),
        generators=(
            GeneratorParams(bus=1, inertia=10.0, damping=2.0, emf=1.05, p_mech=p_mech, xd_t=0.25),
            GeneratorParams(bus=2, inertia=10.0, damping=2.0, emf=1.05, p_mech=p_mech, xd_t=0.25),
        ),
        loads=(Load(1, load_g, -0.1), Load(2, load_g, -0.1)),
    )


def gen_vsc_case():
    """Smallest mixed case: one machine feeding a converter bus with load."""
    from wadc.network import Bus, GeneratorParams, Load, NetworkCase, VscTerminal

    return NetworkCase(
        name="gen-vsc",
        base_mva=100.0,
        omega0=2 * np.pi * 60,
        buses=(Bus(1, "generator"), Bus(2, "vsc")),
        branches=(impedance_branch(1, 2, 0.03, 0.3),),
        generators=(
            GeneratorParams(bus=1, inertia=8.0, damping=1.5, emf=1.08, p_mech=0.5, xd_t=0.3),
        ),
        vscs=(VscTerminal(bus=2, p_ref=0.3, q_ref=0.05, p_mod_limit=1.0),),
        loads=(Load(2, 0.8, -0.2),),
    )


def random_mesh_case(rng, ng=3, nv=2, n_passive=2):
    """Randomized connected case for finite-difference property tests."""
    from wadc.network import Bus, GeneratorParams, Load, NetworkCase, VscTerminal

    n_bus = ng + nv + n_passive
    buses = []
    for i in range(n_bus):
        kind = "generator" if i < ng else ("vsc" if i < ng + nv else "passive")
        buses.append(Bus(i + 1, kind))
    # spanning tree plus a few chords keeps the mesh connected
    branches = []
    for i in range(2, n_bus + 1):
        j = int(rng.integers(1, i))
        branches.append(impedance_branch(j, i, 0.02 * rng.uniform(0.5, 1.5), rng.uniform(0.2, 0.5)))
    for _ in range(2):
        i, j = rng.choice(np.arange(1, n_bus + 1), size=2, replace=False)
        branches.append(impedance_branch(int(i), int(j), 0.02, rng.uniform(0.3, 0.6)))
    gens = tuple(
        GeneratorParams(
            bus=i + 1,
            inertia=rng.uniform(6.0, 14.0),
            damping=rng.uniform(1.0, 4.0),
            emf=rng.uniform(1.0, 1.1),
            p_mech=rng.uniform(0.3, 0.7),
            xd_t=rng.uniform(0.2, 0.35),
        )
        for i in range(ng)
    )
    vscs = tuple(
        VscTerminal(
            bus=ng + i + 1,
            p_ref=rng.uniform(0.1, 0.4),
            q_ref=rng.uniform(-0.1, 0.1),
            p_mod_limit=1.0,
        )
        for i in range(nv)
    )
    total_gen = sum(g.p_mech for g in gens) + sum(v.p_ref for v in vscs)
    load_buses = list(range(ng + nv + 1, n_bus + 1)) or [1]
    per_bus = total_gen / len(load_buses)
    loads = tuple(Load(b, per_bus * rng.uniform(0.8, 1.1), -0.1) for b in load_buses)
    return NetworkCase(
        name="mesh",
        base_mva=100.0,
        omega0=2 * np.pi * 60,
        buses=tuple(buses),
        branches=tuple(branches),
        generators=gens,
        vscs=vscs,
        loads=loads,
    )
