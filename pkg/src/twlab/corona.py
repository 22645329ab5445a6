"""Calderon-Zygmund / kappa-pivotal stopping cubes and their coronas.

Starting from the root, the stopping children of a stopping cube F are the
maximal strict subcubes I of F with either

    E_I^sigma |f| >= Gamma * E_F^sigma |f|            (average trigger)
    P_kappa^alpha(I, 1_F sigma)^2 |I|_omega >= Gamma |I|_sigma   (pivotal trigger)

Cubes of zero sigma mass are never stopping candidates.  When f vanishes
on F the average trigger is off below F (otherwise every subcube would
satisfy 0 >= 0).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .constants import _subtree_levels, jsonable, pivotal, poisson_matrix
from .grid import GoodnessConfig, Grid
from .measure import Measure


class CoronaError(ValueError):
    pass


@dataclass(frozen=True)
class CoronaConfig:
    gamma: float = 4.0
    kappa: int = 2
    alpha: float = 0.0

    def __post_init__(self):
        if not self.gamma > 1.0:
            raise CoronaError("Gamma must exceed 1")
        if self.kappa < 1:
            raise CoronaError("kappa must be >= 1")


@dataclass
class CoronaTree:
    grid: Grid
    config: CoronaConfig
    stopping: list[int]  # stopping cube ids in generation order
    generations: list[list[int]]
    parent: dict[int, int | None]  # stopping parent of each stopping cube
    children: dict[int, list[int]]
    alpha_f: dict[int, float]  # sup of E|f| over stopping ancestors-or-self
    average: dict[int, float]  # E_F^sigma |f|
    corona_of: np.ndarray  # cube id -> owning stopping cube id
    trigger: dict[int, str]  # "root", "average", "pivotal" or "both"

    def corona(self, F: int) -> np.ndarray:
        return np.nonzero(self.corona_of == F)[0]

    def descendants(self, F: int) -> list[int]:
        """Stopping cubes F' contained in F (including F)."""
        out, stack = [], [F]
        while stack:
            x = stack.pop()
            out.append(x)
            stack.extend(self.children[x])
        return sorted(out)

    def to_dict(self) -> dict:
        g = self.grid
        return {
            "config": {"gamma": self.config.gamma, "kappa": self.config.kappa, "alpha": self.config.alpha},
            "grid": g.to_dict(),
            "generations": [[jsonable(g.cube_list[c]) for c in gen] for gen in self.generations],
            "edges": [[jsonable(g.cube_list[p]), jsonable(g.cube_list[c])]
                      for c, p in sorted(self.parent.items()) if p is not None],
            "stopping": [
                {"cube": jsonable(g.cube_list[F]), "trigger": self.trigger[F], "alpha_F": self.alpha_f[F],
                 "average": self.average[F], "corona_size": int(np.sum(self.corona_of == F))}
                for F in self.stopping
            ],
        }

    def to_json(self) -> str:
        return json.dumps(jsonable(self.to_dict()), indent=2, sort_keys=True)


def _abs_averages(f: np.ndarray, sigma: Measure) -> tuple[np.ndarray, np.ndarray]:
    """Per cube: integral of |f| d sigma, and its average (0 on null cubes)."""
    g = sigma.grid
    leaf = np.abs(f) * sigma.leaf_masses
    tot = np.zeros(g.n_cubes)
    lo = g.level_offsets[g.depth]
    tot[lo:] = leaf
    for level in range(g.depth - 1, -1, -1):
        a, b = g.level_offsets[level], g.level_offsets[level + 1]
        tot[a:b] = tot[g.child_ids[a:b]].sum(axis=1)
    m = sigma.cube_masses
    avg = np.divide(tot, m, out=np.zeros_like(tot), where=m > 0)
    return tot, avg


def _leaf_values(f, grid: Grid) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != (grid.n_leaves,):
        raise CoronaError(f"shape mismatch: f must have {grid.n_leaves} leaf values, got {f.shape}")
    return f


def triggers(f, sigma: Measure, omega: Measure, F: int, cfg: CoronaConfig) -> tuple[np.ndarray, np.ndarray]:
    """Boolean arrays (over all cube ids) of the average and pivotal triggers relative to F."""
    g = sigma.grid
    _, avg = _abs_averages(_leaf_values(f, g), sigma)
    levels = _subtree_levels(g, F)
    ids = np.concatenate(levels[1:]) if len(levels) > 1 else np.zeros(0, dtype=np.int64)
    m = sigma.cube_masses
    av = np.zeros(g.n_cubes, dtype=bool)
    pv = np.zeros(g.n_cubes, dtype=bool)
    live = ids[m[ids] > 0]
    if avg[F] > 0:
        av[live] = avg[live] >= cfg.gamma * avg[F]
    W = poisson_matrix(g, cfg.kappa, float(cfg.alpha))
    leaves = g.leaf_ids(g.cube_list[F])
    P = W[np.ix_(live, leaves)] @ sigma.densities[leaves]
    pv[live] = P * P * omega.cube_masses[live] >= cfg.gamma * m[live]
    return av, pv


def build_corona(f, sigma: Measure, omega: Measure, cfg: CoronaConfig = CoronaConfig()) -> CoronaTree:
    g = sigma.grid
    f = _leaf_values(f, g)
    if sigma.cube_masses[0] <= 0:
        raise CoronaError("root has zero sigma mass")
    _, avg = _abs_averages(f, sigma)
    corona_of = np.full(g.n_cubes, -1, dtype=np.int64)
    parent: dict[int, int | None] = {0: None}
    children: dict[int, list[int]] = {}
    trig = {0: "root"}
    alpha_f = {0: float(avg[0])}
    generations = [[0]]
    while generations[-1]:
        nxt = []
        for F in generations[-1]:
            av, pv = triggers(f, sigma, omega, F, cfg)
            hit = av | pv
            levels = _subtree_levels(g, F)
            covered = np.zeros(g.n_cubes, dtype=bool)
            stop = np.zeros(g.n_cubes, dtype=bool)
            corona_of[F] = F
            for ids in levels[1:]:
                par = g.parent_ids[ids]
                covered[ids] = covered[par] | stop[par]
                stop[ids] = hit[ids] & ~covered[ids]
                free = ids[~covered[ids] & ~stop[ids]]
                corona_of[free] = F
            kids = [int(c) for c in np.nonzero(stop)[0]]
            children[F] = kids
            for c in kids:
                parent[c] = F
                trig[c] = "both" if av[c] and pv[c] else ("average" if av[c] else "pivotal")
                alpha_f[c] = max(alpha_f[F], float(avg[c]))
            nxt.extend(kids)
        generations.append(sorted(nxt))
    generations.pop()
    stopping = [c for gen in generations for c in gen]
    return CoronaTree(g, cfg, stopping, generations, parent, children, alpha_f,
                      {F: float(avg[F]) for F in stopping}, corona_of, trig)


# ---------------------------------------------------------------- shifted
@dataclass
class ShiftedCorona:
    tau: int
    members: dict[int, np.ndarray]  # F -> sorted cube ids of the shifted corona
    overlap: np.ndarray  # per cube id, number of shifted coronas containing it

    def owner(self) -> np.ndarray:
        """Cube id -> the (unique) F whose shifted corona holds it, or -1."""
        out = np.full(self.overlap.shape, -1, dtype=np.int64)
        for F, ids in self.members.items():
            out[ids] = F
        return out


def top_levels(grid: Grid, F: int, tau: int) -> np.ndarray:
    """N^tau(F): subcubes J of F with l(J) > 2^-tau l(F)."""
    levels = _subtree_levels(grid, F)
    return np.concatenate(levels[:tau])


def shifted(tree: CoronaTree, tau: int) -> ShiftedCorona:
    g = tree.grid
    if tau < 1:
        raise CoronaError("tau must be >= 1")
    members = {}
    overlap = np.zeros(g.n_cubes, dtype=np.int64)
    for F in tree.stopping:
        top = set(top_levels(g, F, tau).tolist())
        ids = set(tree.corona(F).tolist()) - top
        for c in tree.children[F]:
            ids |= set(top_levels(g, c, tau).tolist()) - top
        arr = np.array(sorted(ids), dtype=np.int64)
        members[F] = arr
        overlap[arr] += 1
    if overlap.max(initial=0) > tau:
        raise CoronaError(f"shifted corona overlap {overlap.max()} exceeds tau={tau}")
    return ShiftedCorona(tau, members, overlap)


# ------------------------------------------------------------ diagnostics
@dataclass
class CoronaDiagnostics:
    carleson: float  # max_F sum_{F' <= F} |F'|_sigma / |F|_sigma
    first_step: float  # max_F sum_{children} |F'|_sigma / ((V2^2 + 1) |F|_sigma / Gamma)
    quasi_orthogonality: float  # sum alpha^2 |F|_sigma / ||f||^2
    average_control: bool
    pivotal_control: bool
    maximal: bool
    partition: bool
    v2: float
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.average_control and self.pivotal_control and self.maximal and self.partition \
            and self.first_step <= 1.0 + 1e-12


def verify_corona(tree: CoronaTree, f, sigma: Measure, omega: Measure, v2: float | None = None) -> CoronaDiagnostics:
    g = tree.grid
    cfg = tree.config
    f = _leaf_values(f, g)
    m = sigma.cube_masses
    _, avg = _abs_averages(f, sigma)
    if v2 is None:
        v2 = pivotal(sigma, omega, cfg.alpha, cfg.kappa).value
    carleson, first = 0.0, 0.0
    for F in tree.stopping:
        if m[F] <= 0:
            continue
        carleson = max(carleson, sum(m[c] for c in tree.descendants(F)) / m[F])
        kids = sum(m[c] for c in tree.children[F])
        first = max(first, kids / ((v2**2 + 1.0) * m[F] / cfg.gamma))
    norm2 = float(np.sum(f * f * sigma.leaf_masses))
    quasi = sum(tree.alpha_f[F] ** 2 * m[F] for F in tree.stopping) / norm2 if norm2 > 0 else 0.0
    W = poisson_matrix(g, cfg.kappa, float(cfg.alpha))
    avg_ok = piv_ok = maximal = True
    for F in tree.stopping:
        ids = tree.corona(F)
        ids = ids[(ids != F) & (m[ids] > 0)]
        a = tree.alpha_f[F]
        if np.any((avg[ids] >= cfg.gamma * a) & (avg[ids] > 0)):
            avg_ok = False
        leaves = g.leaf_ids(g.cube_list[F])
        P = W[np.ix_(ids, leaves)] @ sigma.densities[leaves]
        if np.any(P * P * omega.cube_masses[ids] >= cfg.gamma * m[ids]):
            piv_ok = False
        # maximality: strict ancestors of a stopping child inside F never trigger
        av, pv = triggers(f, sigma, omega, F, cfg)
        for c in tree.children[F]:
            q = g.cube_list[c]
            for anc in g.ancestors(q):
                if anc.level <= g.cube_list[F].level:
                    break
                if av[g.cube_id(anc)] or pv[g.cube_id(anc)]:
                    maximal = False
    partition = bool(np.all(tree.corona_of >= 0))
    return CoronaDiagnostics(carleson, first, quasi, avg_ok, piv_ok, maximal, partition, v2,
                             {"n_stopping": len(tree.stopping), "n_generations": len(tree.generations)})


def default_goodness(kappa: int) -> GoodnessConfig:
    """r=1, tau=2, rho=4 with eps below kappa/(n+kappa) for n = 1."""
    return GoodnessConfig(r=1, eps=0.6 if kappa >= 2 else 0.45, tau=2, rho=4)

