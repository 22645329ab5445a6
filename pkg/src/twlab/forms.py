"""The bilinear form <T_sigma f, g>_omega and its splittings.

Everything is evaluated from one moment-Galerkin matrix: rows carry omega
leaf monomials of degree < 2 kappa - 1 (so products M * Delta_J g can be
paired against T_sigma 1_X exactly), columns carry sigma leaf monomials of
degree < kappa.  The wavelet block matrix

    B[J, I] = <T_sigma (Delta_I f), Delta_J g>_omega

is the common input of every splitting.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .alpert import AlpertSystem
from .constants import jsonable
from .corona import CoronaTree, ShiftedCorona
from .grid import GoodnessConfig, Grid
from .operator import DiscreteOperator
from . import poly


def relative_residual(parts, whole: float) -> float:
    """|sum(parts) - whole| / max(sum |parts|, |whole|), 0 when everything vanishes."""
    parts = np.asarray(list(parts), dtype=float)
    scale = max(float(np.abs(parts).sum()), abs(whole))
    return 0.0 if scale == 0 else abs(float(parts.sum()) - whole) / scale


# ------------------------------------------------------------ geometry
def containment(grid: Grid, inner: np.ndarray, outer: np.ndarray) -> np.ndarray:
    """M[j, i] = cube inner[j] is contained in cube outer[i]."""
    li = grid.levels[outer][None, :]
    lj = grid.levels[inner][:, None]
    shift = np.maximum(lj - li, 0)
    ok = lj >= li
    for d in range(grid.dim):
        ki = _index(grid, outer)[:, d][None, :]
        kj = _index(grid, inner)[:, d][:, None]
        ok &= (kj >> shift) == ki
    return ok


def _index(grid: Grid, ids: np.ndarray) -> np.ndarray:
    return np.array([grid.cube_list[i].index for i in ids], dtype=np.int64).reshape(len(ids), grid.dim)


def deep_embedding(grid: Grid, inner: np.ndarray, outer: np.ndarray, rho: int, eps: float) -> np.ndarray:
    """M[j, i] = inner[j] is (rho, eps)-deeply embedded in outer[i]."""
    ok = containment(grid, inner, outer)
    li = grid.levels[outer][None, :]
    lj = grid.levels[inner][:, None]
    ok &= (lj - li) >= rho
    side_i = grid.side / 2.0**li
    side_j = grid.side / 2.0**lj
    lo_i = np.array([grid.lower(grid.cube_list[i]) for i in outer]).reshape(len(outer), grid.dim)
    lo_j = np.array([grid.lower(grid.cube_list[j]) for j in inner]).reshape(len(inner), grid.dim)
    dist = np.full(ok.shape, np.inf)
    for d in range(grid.dim):
        for frac in (0.0, 0.5, 1.0):
            c = lo_i[:, d][None, :] + frac * side_i
            b = lo_j[:, d][:, None]
            dist = np.minimum(dist, np.maximum(0.0, np.maximum(b - c, c - (b + side_j))))
    return ok & (dist >= 2.0 * side_j**eps * side_i ** (1.0 - eps))


# ------------------------------------------------------------- context
@dataclass
class FormData:
    """Alpert expansions of f and g and the wavelet block matrix."""

    op: DiscreteOperator
    kappa: int
    sys_s: AlpertSystem
    sys_w: AlpertSystem
    f: np.ndarray  # (N, p) leaf polynomials
    g: np.ndarray
    I_ids: np.ndarray  # sigma cubes with wavelets
    J_ids: np.ndarray  # omega cubes with wavelets
    DF: np.ndarray  # (N p, nI) columns vec(Delta_I f)
    DG: np.ndarray  # (N p, nJ)
    Ef: np.ndarray  # (N p,) root expectation of f
    Eg: np.ndarray
    Gk: np.ndarray  # Galerkin rows/cols of degree < kappa
    G2: np.ndarray  # rows of degree < 2 kappa - 1, columns of degree < kappa
    B: np.ndarray = field(repr=False)  # (nJ, nI)

    @property
    def grid(self) -> Grid:
        return self.op.grid

    @property
    def p(self) -> int:
        return self.sys_s.p


def prepare(op: DiscreteOperator, f, g, kappa: int) -> FormData:
    grid = op.grid
    q2 = 2 * kappa - 1
    if op.q_src < kappa or op.q_tgt < q2:
        raise ValueError(f"operator needs source degree bound >= {kappa} and target >= {q2}")
    sys_s = AlpertSystem(op.sigma, kappa)
    sys_w = AlpertSystem(op.omega, kappa)
    fp, gp = sys_s.as_leafpoly(f), sys_w.as_leafpoly(g)
    N, p = grid.n_leaves, sys_s.p
    ms, ms2 = sys_s.ms, poly.monomials(grid.dim, q2)
    rows = op.stencil.rows
    cols = op.stencil.cols
    csel = [cols.index[b] for b in ms.betas]
    G = op.G.reshape(N, len(rows), N, len(cols))[:, :, :, csel]
    G2 = G[:, [rows.index[b] for b in ms2.betas]].reshape(N * len(ms2), N * p)
    Gk = G[:, [rows.index[b] for b in ms.betas]].reshape(N * p, N * p)
    cf, cg = sys_s.transform(fp), sys_w.transform(gp)
    I_ids = np.array(sorted(c for c, H in sys_s.bases.items() if H.shape[1]), dtype=np.int64)
    J_ids = np.array(sorted(c for c, H in sys_w.bases.items() if H.shape[1]), dtype=np.int64)
    DF = np.stack([sys_s.delta(int(i), cf.wavelet[int(i)]).ravel() for i in I_ids], axis=1) if I_ids.size \
        else np.zeros((N * p, 0))
    DG = np.stack([sys_w.delta(int(j), cg.wavelet[int(j)]).ravel() for j in J_ids], axis=1) if J_ids.size \
        else np.zeros((N * p, 0))
    Ef = sys_s.expectation(0, sys_s.leaf_moments(fp)[0]).ravel()
    Eg = sys_w.expectation(0, sys_w.leaf_moments(gp)[0]).ravel()
    B = DG.T @ (Gk @ DF)
    return FormData(op, kappa, sys_s, sys_w, fp, gp, I_ids, J_ids, DF, DG, Ef, Eg, Gk, G2, B)


def pairing(data: FormData) -> dict:
    """Direct matrix pairing and its double Alpert expansion with root terms."""
    direct = float(data.g.ravel() @ data.Gk @ data.f.ravel())
    GF = data.Gk @ data.DF
    terms = {
        "wavelet": float(data.B.sum()),
        "coarse_f": float((data.DG.T @ (data.Gk @ data.Ef)).sum()),
        "coarse_g": float((data.Eg @ GF).sum()),
        "coarse_both": float(data.Eg @ data.Gk @ data.Ef),
    }
    return {"direct": direct, "terms": terms, "residual": relative_residual(terms.values(), direct)}


# ----------------------------------------------------------- size split
SIZE_PARTS = ("below", "above", "disjoint", "comparable", "remainder")


def size_labels(grid: Grid, I_ids: np.ndarray, J_ids: np.ndarray, cfg: GoodnessConfig) -> np.ndarray:
    """Label matrix over (J, I): 0 J deep in I, 1 I deep in J, 2 disjoint far, 3 comparable, 4 other."""
    below = deep_embedding(grid, J_ids, I_ids, cfg.rho, cfg.eps)
    above = deep_embedding(grid, I_ids, J_ids, cfg.rho, cfg.eps).T
    nested = containment(grid, J_ids, I_ids) | containment(grid, I_ids, J_ids).T
    dl = np.abs(grid.levels[J_ids][:, None] - grid.levels[I_ids][None, :])
    lab = np.full(below.shape, 4, dtype=np.int8)
    lab[(dl <= cfg.rho)] = 3
    lab[~nested & (dl > cfg.rho)] = 2
    lab[above] = 1
    lab[below] = 0
    return lab


def size_split(data: FormData, cfg: GoodnessConfig, good_only: bool = False) -> dict:
    lab = size_labels(data.grid, data.I_ids, data.J_ids, cfg)
    B = _good_masked(data, cfg) if good_only else data.B
    parts = {name: float(B[lab == k].sum()) for k, name in enumerate(SIZE_PARTS)}
    whole = float(B.sum())
    return {"parts": parts, "whole": whole, "residual": relative_residual(parts.values(), whole)}


def _good_masked(data: FormData, cfg: GoodnessConfig) -> np.ndarray:
    good = data.grid.good_mask(cfg)
    return data.B * good[data.J_ids][:, None] * good[data.I_ids][None, :]


# ------------------------------------------------------ canonical split
CANONICAL_PARTS = ("diagonal", "farbelow", "farabove", "disjoint")


def canonical_split(data: FormData, tree: CoronaTree, sh: ShiftedCorona, cfg: GoodnessConfig,
                    good_only: bool = False) -> dict:
    g = data.grid
    if tree.grid != g:
        raise ValueError("corona tree and form live on different grids")
    B = _good_masked(data, cfg) if good_only else data.B
    I_ids, J_ids = data.I_ids, data.J_ids
    below = deep_embedding(g, J_ids, I_ids, cfg.rho, cfg.eps)
    nested = containment(g, J_ids, I_ids)
    F_of_I = tree.corona_of[I_ids]
    G_of_J = sh.owner()[J_ids]
    stop = np.array(tree.stopping, dtype=np.int64)
    Fcont = containment(g, stop, stop)  # [a, b]: stop[a] inside stop[b]
    pos = {int(F): k for k, F in enumerate(stop)}
    fi = np.array([pos[int(F)] for F in F_of_I])
    gj = np.array([pos.get(int(G), -1) for G in G_of_J])
    has = (gj >= 0)[:, None]
    gsafe = np.where(gj >= 0, gj, 0)
    G_in_F = Fcont[gsafe][:, fi] & has
    F_in_G = Fcont[fi][:, gsafe].T & has
    same = (gsafe[:, None] == fi[None, :]) & has
    diag = below & same
    farbelow = below & G_in_F & ~same
    farabove = below & F_in_G & ~same
    disjoint = below & has & ~G_in_F & ~F_in_G
    parts = {"diagonal": float(B[diag].sum()), "farbelow": float(B[farbelow].sum()),
             "farabove": float(B[farabove].sum()), "disjoint": float(B[disjoint].sum())}
    t1 = nested & G_in_F & ~same
    t2 = t1 & ~below
    far1, far2 = float(B[t1].sum()), float(B[t2].sum())
    blocks = {int(F): float(B[below & same & (fi[None, :] == k)].sum()) for k, F in enumerate(stop)}
    whole = float(B[below].sum())
    return {
        "parts": parts,
        "farbelow_1": far1,
        "farbelow_2": far2,
        "counts": {"farabove": int(farabove.sum()), "disjoint": int(disjoint.sum()),
                   "unassigned": int((below & ~has).sum())},
        "blocks": blocks,
        "below": whole,
        "residual": relative_residual(parts.values(), whole),
        "farbelow_residual": relative_residual([far1, -far2], parts["farbelow"]),
        "blocks_residual": relative_residual(list(blocks.values()) + [parts["farbelow"]], whole),
        "blocks_only_residual": relative_residual(blocks.values(), whole),
    }


# ------------------------------------------------------------ NTV split
NTV_PARTS = ("paraproduct_corona", "paraproduct_stopping", "stop", "neighbour", "commutator")


def _child_columns(data: FormData) -> tuple[np.ndarray, np.ndarray]:
    """Columns vec(1_{I'} Delta_I f) for every (I, child I'), and the child ids."""
    g = data.grid
    p = data.p
    nch = 1 << g.dim
    N = g.n_leaves
    cols = np.zeros((N * p, len(data.I_ids) * nch))
    kids = np.zeros((len(data.I_ids), nch), dtype=np.int64)
    D = data.DF.reshape(N, p, -1)
    for k, I in enumerate(data.I_ids):
        for o, c in enumerate(g.child_ids[I]):
            leaves = g.leaf_ids(g.cube_list[c])
            v = np.zeros((N, p))
            v[leaves] = D[leaves, :, k]
            cols[:, k * nch + o] = v.ravel()
            kids[k, o] = c
    return cols, kids


def indicator_moments(data: FormData) -> np.ndarray:
    """Y[(leaf, beta), Q] = omega-side leaf moments of T_sigma 1_Q, degrees < 2 kappa - 1."""
    g = data.grid
    N, p = g.n_leaves, data.p
    G0 = data.G2.reshape(-1, N, p)[:, :, 0]
    member = np.zeros((N, g.n_cubes))
    for cid in range(g.n_cubes):
        member[g.leaf_ids(g.cube_list[cid]), cid] = 1.0
    return G0 @ member


def ntv_split(data: FormData, tree: CoronaTree, sh: ShiftedCorona, cfg: GoodnessConfig) -> dict:
    """Paraproduct / stop / neighbour / commutator parts of every F-block."""
    g = data.grid
    N, p = g.n_leaves, data.p
    ms, ms2 = data.sys_s.ms, poly.monomials(g.dim, 2 * data.kappa - 1)
    q2 = len(ms2)
    nch = 1 << g.dim
    below = deep_embedding(g, data.J_ids, data.I_ids, cfg.rho, cfg.eps)
    F_of_I = tree.corona_of[data.I_ids]
    owner = sh.owner()
    G_of_J = owner[data.J_ids]
    cols, kids = _child_columns(data)
    H = data.DG.T @ (data.Gk @ cols)  # (nJ, nI * nch)
    Y = indicator_moments(data)
    DF = data.DF.reshape(N, p, -1)
    DG = data.DG.reshape(N, p, -1)
    in_corona = {}
    out = {}
    for F in tree.stopping:
        parts = dict.fromkeys(NTV_PARTS, 0.0)
        block = 0.0
        corona_set = set(tree.corona(F).tolist())
        in_corona[F] = corona_set
        jj, ii = np.nonzero(below & (G_of_J[:, None] == F) & (F_of_I[None, :] == F))
        event = {}
        for j, i in zip(jj, ii):
            J = int(data.J_ids[j])
            if J not in event:
                event[J] = _flat_event(g, J, corona_set, cfg)
            Jc = g.cube_list[J]
            leaves = g.leaf_ids(Jc)
            o = next(o for o in range(nch) if g.contains(g.cube_list[kids[i, o]], Jc))
            home = H[j, i * nch + o]
            neigh = sum(H[j, i * nch + t] for t in range(nch) if t != o)
            v = poly.multiply(DF[leaves, :, i], ms, DG[leaves, :, j], ms, ms2)  # (L, q2)
            rows = (leaves[:, None] * q2 + np.arange(q2)[None, :]).ravel()
            vY_F = float(v.ravel() @ Y[rows, F])
            vY_home = float(v.ravel() @ Y[rows, kids[i, o]])
            key = "paraproduct_corona" if event[J] == "corona" else "paraproduct_stopping"
            parts[key] += vY_F
            parts["stop"] += -(vY_F - vY_home)
            parts["commutator"] += home - vY_home
            parts["neighbour"] += neigh
            block += data.B[j, i]
        out[F] = {"parts": parts, "block": block, "residual": relative_residual(parts.values(), block),
                  "n_pairs": int(len(jj))}
    return out


def _flat_event(grid: Grid, J: int, corona: set, cfg: GoodnessConfig) -> str:
    """'corona' if the child of I_J-natural containing J lies in the corona, else 'stopping'."""
    Jc = grid.cube_list[J]
    for anc in grid.ancestors(Jc):  # nearest first: the first hit is the smallest K
        k = grid.cube_id(anc)
        if k in corona and grid.is_deeply_embedded(Jc, anc, cfg.rho, cfg.eps):
            flat = grid.cube_id(grid.ancestor(Jc, anc.level + 1))
            return "corona" if flat in corona else "stopping"
    return "none"


def natural_and_flat(grid: Grid, J: int, corona: set, cfg: GoodnessConfig) -> tuple[int, int] | None:
    """(I_J natural, I_J flat) ids or None when no corona cube deeply contains J."""
    Jc = grid.cube_list[J]
    for anc in grid.ancestors(Jc):
        k = grid.cube_id(anc)
        if k in corona and grid.is_deeply_embedded(Jc, anc, cfg.rho, cfg.eps):
            return k, grid.cube_id(grid.ancestor(Jc, anc.level + 1))
    return None


# ------------------------------------------------------- bound ratios
def projection_norms(data: FormData, tree: CoronaTree, sh: ShiftedCorona) -> tuple[dict, dict]:
    """||P_{C_F} f||_sigma and ||P_{C_F shifted} g||_omega per F, from wavelet coefficients."""
    cf = data.sys_s.transform(data.f)
    cg = data.sys_w.transform(data.g)
    nf = {F: 0.0 for F in tree.stopping}
    ng = {F: 0.0 for F in tree.stopping}
    for I, c in cf.wavelet.items():
        nf[int(tree.corona_of[I])] += float(c @ c)
    owner = sh.owner()
    for J, c in cg.wavelet.items():
        if owner[J] >= 0:
            ng[int(owner[J])] += float(c @ c)
    return {k: np.sqrt(v) for k, v in nf.items()}, {k: np.sqrt(v) for k, v in ng.items()}


def almost_orthogonality(data: FormData, tree: CoronaTree, sh: ShiftedCorona, cfg: GoodnessConfig) -> dict[int, float]:
    """Per F: ||sum_J R_J Delta_J g||^2 / sum_J ||Delta_J g||^2 with R_J = (E_flat f - E_F f) / alpha_F."""
    g = data.grid
    N, p = g.n_leaves, data.p
    ms, ms2 = data.sys_s.ms, poly.monomials(g.dim, 2 * data.kappa - 1)
    gram2 = poly.leaf_gram(ms2, ms2)
    Ff = data.sys_s.leaf_moments(data.f)
    cg = data.sys_w.transform(data.g)
    DG = data.DG.reshape(N, p, -1)
    jpos = {int(J): k for k, J in enumerate(data.J_ids)}
    out = {}
    for F, members in sh.members.items():
        aF = tree.alpha_f[F]
        if aF <= 0:
            continue
        corona = set(tree.corona(F).tolist())
        EF = data.sys_s.expectation(F, Ff[F])
        acc = np.zeros((N, len(ms2)))
        den = 0.0
        for J in members.tolist():
            if J not in jpos:
                continue
            c = cg.wavelet[J]
            den += float(c @ c)
            nf = natural_and_flat(g, J, corona, cfg)
            if nf is None or nf[1] not in corona:
                continue
            leaves = g.leaf_ids(g.cube_list[J])
            R = (data.sys_s.expectation(nf[1], Ff[nf[1]]) - EF)[leaves] / aF
            acc[leaves] += poly.multiply(R, ms, DG[leaves, :, jpos[J]], ms, ms2)
        num = float(np.einsum("l,li,ij,lj->", data.op.omega.leaf_masses, acc, gram2, acc))
        if den > 0:
            out[F] = num / den
    return out


@dataclass
class FormLedger:
    pairing: dict
    size: dict
    canonical: dict | None = None
    ntv: dict | None = None
    ratios: dict = field(default_factory=dict)

    def residuals(self) -> dict[str, float]:
        out = {"pairing_expansion": self.pairing["residual"], "size_split": self.size["residual"]}
        whole = self.pairing["terms"]["wavelet"]
        out["size_vs_pairing"] = relative_residual(self.size["parts"].values(), whole)
        if self.canonical is not None:
            out["canonical_split"] = self.canonical["residual"]
            out["farbelow_split"] = self.canonical["farbelow_residual"]
            out["below_vs_blocks_and_farbelow"] = self.canonical["blocks_residual"]
            out["below_vs_size"] = relative_residual([self.canonical["below"]], self.size["parts"]["below"])
        if self.ntv is not None:
            out["ntv"] = max((b["residual"] for b in self.ntv.values()), default=0.0)
            out["ntv_block_vs_canonical"] = max(
                (relative_residual([b["block"]], self.canonical["blocks"][F]) for F, b in self.ntv.items()),
                default=0.0) if self.canonical is not None else 0.0
        return out

    def commutator_max(self) -> float:
        if not self.ntv:
            return 0.0
        return max(abs(b["parts"]["commutator"]) for b in self.ntv.values())

    def to_dict(self) -> dict:
        return jsonable({"pairing": self.pairing, "size": self.size, "canonical": self.canonical,
                         "ntv": self.ntv, "ratios": self.ratios, "residuals": self.residuals()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "name", "value"])
        for k, v in sorted(self.residuals().items()):
            w.writerow(["residual", k, repr(float(v))])
        for k, v in sorted(self.ratios.items()):
            w.writerow(["ratio", k, repr(float(v))])
        return buf.getvalue()


def decompose(op: DiscreteOperator, f, g, kappa: int, tree: CoronaTree, sh: ShiftedCorona, cfg: GoodnessConfig,
              constants: dict | None = None) -> FormLedger:
    """Full ledger; ``constants`` (T, T_kappa, A2, V2) enables the bound ratios."""
    data = prepare(op, f, g, kappa)
    led = FormLedger(pairing(data), size_split(data, cfg), canonical_split(data, tree, sh, cfg),
                     ntv_split(data, tree, sh, cfg))
    if constants:
        led.ratios = bound_ratios(data, tree, sh, cfg, led, constants)
    return led


def bound_ratios(data: FormData, tree: CoronaTree, sh: ShiftedCorona, cfg: GoodnessConfig, led: FormLedger,
                 c: dict) -> dict[str, float]:
    """Largest ratio of each form to the right-hand side of its estimate (0/0 counts as 0)."""
    nf, ng = projection_norms(data, tree, sh)
    msig = data.op.sigma.cube_masses
    sq = np.sqrt(c["A2"])
    norm_f = np.sqrt(data.sys_s.inner(data.f, data.f))
    norm_g = np.sqrt(data.sys_w.inner(data.g, data.g))

    def ratio(x, y):
        return 0.0 if abs(x) == 0 else (abs(x) / y if y > 0 else float("inf"))

    out = {"below_form": 0.0, "paraproduct": 0.0, "stop": 0.0, "neighbour": 0.0, "commutator": 0.0}
    for F, blk in led.ntv.items():
        aF = tree.alpha_f[F] * np.sqrt(msig[F])
        P = blk["parts"]
        out["below_form"] = max(out["below_form"], ratio(blk["block"], (c["T"] + sq) * (aF + nf[F]) * ng[F]))
        para = P["paraproduct_corona"] + P["paraproduct_stopping"]
        out["paraproduct"] = max(out["paraproduct"], ratio(para, c["T"] * aF * ng[F]))
        out["stop"] = max(out["stop"], ratio(P["stop"], c["V2"] * nf[F] * ng[F]))
        out["neighbour"] = max(out["neighbour"], ratio(P["neighbour"], sq * nf[F] * ng[F]))
        out["commutator"] = max(out["commutator"], ratio(P["commutator"], sq * nf[F] * ng[F]))
    out["intertwining"] = ratio(led.canonical["farbelow_1"], (c["V2"] + sq + c["T_kappa"]) * norm_f * norm_g)
    ao = almost_orthogonality(data, tree, sh, cfg)
    out["almost_orthogonality"] = max(ao.values(), default=0.0)
    return out
