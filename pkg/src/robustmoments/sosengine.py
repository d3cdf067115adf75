"""Moment relaxations of polynomial constraint systems and SoS certificates.

Compiles a constraint system into a moment-matrix SDP (one PSD block for the
main moment matrix, one localizing block per inequality, one linear equality
per equality-times-multiplier pair), extracts pseudo-distributions from the
solution, searches for sum-of-squares certificates by Gram-matrix SDP, and
verifies certificates by explicit polynomial expansion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .polycore import (
    DEFAULT_MONOMIAL_CAP,
    MonomialCapError,
    Polynomial,
    enumerate_monomials,
    index_multiplicity,
    monomial_degree,
    monomial_mul,
)
from .sdp import DEFAULT_CONSTRAINT_CAP, SdpConfig, SdpProblem
from .sdp import solve as sdp_solve


class RelaxationSizeError(ValueError):
    """A relaxation block or constraint family exceeded its sizing cap."""


def _grlex_key(mono):
    return (sum(mono), tuple(-e for e in mono))


def _zero_mono(nv):
    return (0,) * nv


# ---------------------------------------------------------------------------
# constraint systems


@dataclass(frozen=True)
class PsdVarBlock:
    """Auxiliary PSD matrix variable (e.g. a Gram matrix) of a given size."""

    name: str
    size: int


class AffineEquality:
    """Scalar equality  E~[poly] + sum(free) + sum(psd entries) = 0.

    `free` maps free-variable index -> coefficient; `psd` maps
    (block name, i, j) with i <= j -> coefficient on that single unordered
    matrix entry.  Unlike plain polynomial equalities these are imposed once
    (no multiplier expansion): they couple pseudo-moments to auxiliary
    variables that carry no moments of their own.
    """

    def __init__(self, poly, free=None, psd=None):
        self.poly = poly
        self.free = dict(free or {})
        self.psd = {}
        for (name, i, j), coef in (psd or {}).items():
            if i > j:
                i, j = j, i
            self.psd[(name, i, j)] = self.psd.get((name, i, j), 0.0) + float(coef)


@dataclass
class ConstraintSystem:
    num_vars: int
    relaxation_degree: int
    equalities: list = field(default_factory=list)
    inequalities: list = field(default_factory=list)
    affine_equalities: list = field(default_factory=list)
    psd_blocks: list = field(default_factory=list)
    num_free: int = 0
    variable_names: list | None = None

    def __post_init__(self):
        ell = self.relaxation_degree
        if ell % 2 != 0 or ell < 2:
            raise ValueError("relaxation degree must be even and >= 2")
        for poly in list(self.equalities) + list(self.inequalities):
            self._check(poly)
        for aff in self.affine_equalities:
            self._check(aff.poly)
        names = {b.name for b in self.psd_blocks}
        if len(names) != len(self.psd_blocks):
            raise ValueError("duplicate psd block name")

    def _check(self, poly):
        if poly.dimension != self.num_vars:
            raise ValueError(
                f"polynomial over {poly.dimension} variables in a "
                f"{self.num_vars}-variable system"
            )
        if poly.degree() > self.relaxation_degree:
            raise ValueError("constraint degree exceeds the relaxation degree")


# ---------------------------------------------------------------------------
# pseudo-distributions


class PseudoDistribution:
    """Level-ell pseudo-moments with their (Hankel-exact) moment matrix."""

    def __init__(self, num_vars, degree, pseudo_moments, basis):
        self.num_vars = num_vars
        self.degree = degree
        self.pseudo_moments = dict(pseudo_moments)
        self.basis = list(basis)
        size = len(self.basis)
        M = np.empty((size, size))
        for i in range(size):
            for j in range(i, size):
                val = self.pseudo_moments[monomial_mul(self.basis[i], self.basis[j])]
                M[i, j] = M[j, i] = val
        self.moment_matrix = M

    @classmethod
    def from_support(cls, points, weights=None, degree=2, basis=None):
        """Embed a true finitely-supported distribution (exact moments)."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        npts, nv = pts.shape
        if weights is None:
            w = np.full(npts, 1.0 / npts)
        else:
            w = np.asarray(weights, dtype=float)
            w = w / math.fsum(w)
        if basis is None:
            basis = enumerate_monomials(nv, degree // 2)
        moments = {}
        for i in range(len(basis)):
            for j in range(i, len(basis)):
                mono = monomial_mul(basis[i], basis[j])
                if mono in moments:
                    continue
                vals = np.prod(pts ** np.array(mono), axis=1)
                moments[mono] = float(np.dot(w, vals))
        return cls(nv, degree, moments, basis)

    def pseudo_expectation(self, f):
        if f.degree() > self.degree:
            raise ValueError(
                f"degree {f.degree()} exceeds pseudo-distribution level {self.degree}"
            )
        total = 0.0
        for mono, coef in f.terms.items():
            if mono not in self.pseudo_moments:
                raise ValueError(f"monomial {mono} not represented at this level")
            total += coef * self.pseudo_moments[mono]
        return total

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.moment_matrix).min())


def pseudo_expectation(pd, f):
    return pd.pseudo_expectation(f)


# ---------------------------------------------------------------------------
# the relaxation compiler


class MomentRelaxation:
    """A compiled system: the SDP plus the maps needed to read answers back."""

    def __init__(self, system, basis, problem, positions, aux_index, free_split,
                 trivially_infeasible=None):
        self.system = system
        self.basis = basis
        self.problem = problem
        self.moment_positions = positions
        self.aux_block_index = aux_index
        self.free_split = free_split
        self.trivially_infeasible = trivially_infeasible

    def extract(self, solution):
        X0 = solution.primal_blocks[0]
        moments = {
            mono: float(X0[i, j]) for mono, (i, j) in self.moment_positions.items()
        }
        pd = PseudoDistribution(
            self.system.num_vars, self.system.relaxation_degree, moments, self.basis
        )
        aux = {
            name: np.array(solution.primal_blocks[idx])
            for name, idx in self.aux_block_index.items()
        }
        free = [
            float(solution.primal_blocks[bp][0, 0] - solution.primal_blocks[bm][0, 0])
            for bp, bm in self.free_split
        ]
        return pd, aux, free


def _objective_terms(objective, nv):
    if objective is None:
        return {}
    if isinstance(objective, Polynomial):
        if objective.dimension != nv:
            raise ValueError("objective dimension mismatch")
        return dict(objective.terms)
    return {tuple(m): float(c) for m, c in objective.items()}


def relax(system, objective=None, sense="min", basis=None,
          monomial_cap=DEFAULT_MONOMIAL_CAP, constraint_cap=DEFAULT_CONSTRAINT_CAP):
    """Compile a constraint system into a moment-matrix SDP.

    `basis` overrides the default full monomial basis of degree ell/2; a
    reduced basis relaxes further (only multipliers whose products remain
    representable are imposed).  Feasible X of the returned problem are the
    moment matrices of degree-ell pseudo-distributions satisfying the system.
    """
    nv = system.num_vars
    ell = system.relaxation_degree
    if basis is None:
        try:
            basis = enumerate_monomials(nv, ell // 2, cap=monomial_cap)
        except MonomialCapError as exc:
            raise RelaxationSizeError(f"moment-matrix basis: {exc}") from exc
    else:
        basis = [tuple(b) for b in basis]
        if len(set(basis)) != len(basis):
            raise ValueError("duplicate basis monomials")
        if basis[0] != _zero_mono(nv):
            raise ValueError("basis must start with the constant monomial")
    bsize = len(basis)
    if bsize * (bsize + 1) // 2 > monomial_cap:
        raise RelaxationSizeError(
            f"moment matrix over {bsize} basis monomials exceeds the cap "
            f"({monomial_cap} entries)"
        )

    positions_all = {}
    for i in range(bsize):
        for j in range(i, bsize):
            mono = monomial_mul(basis[i], basis[j])
            positions_all.setdefault(mono, []).append((i, j))
    positions = {mono: plist[0] for mono, plist in positions_all.items()}
    representable = set(positions)

    def moment_entries(terms, scale=1.0, block=0):
        entries = []
        for mono, coef in terms.items():
            i, j = positions[mono]
            entries.append((block, i, j, scale * coef))
        return entries

    rows = []
    rows.append(([(0, 0, 0, 1.0)], 1.0))
    for mono, plist in positions_all.items():
        i0, j0 = plist[0]
        for i, j in plist[1:]:
            rows.append(([(0, i0, j0, 1.0), (0, i, j, -1.0)], 0.0))

    block_sizes = [bsize]
    loc_blocks = []
    for g in system.inequalities:
        dg = g.degree()
        half_deg = (ell - dg) // 2
        sel = []
        for b in basis:
            if monomial_degree(b) > half_deg:
                continue
            ok = True
            for other in sel + [b]:
                prod = monomial_mul(b, other)
                for gamma in g.terms:
                    if monomial_mul(prod, gamma) not in representable:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                sel.append(b)
        if not sel:
            raise ValueError(
                "inequality cannot be localized in the supplied basis"
            )
        idx = len(block_sizes)
        block_sizes.append(len(sel))
        loc_blocks.append((idx, sel, g))

    aux_index = {}
    for blk in system.psd_blocks:
        aux_index[blk.name] = len(block_sizes)
        block_sizes.append(blk.size)

    free_split = []
    for _ in range(system.num_free):
        bp = len(block_sizes)
        block_sizes.append(1)
        bm = len(block_sizes)
        block_sizes.append(1)
        free_split.append((bp, bm))

    mult_cache = {}
    for e in system.equalities:
        de = e.degree()
        max_deg = ell - de
        if max_deg not in mult_cache:
            try:
                mult_cache[max_deg] = enumerate_monomials(
                    nv, max_deg, cap=monomial_cap
                )
            except MonomialCapError as exc:
                raise RelaxationSizeError(f"multiplier basis: {exc}") from exc
        for mult in mult_cache[max_deg]:
            shifted = {}
            ok = True
            for gamma, coef in e.terms.items():
                prod = monomial_mul(mult, gamma)
                if prod not in representable:
                    ok = False
                    break
                shifted[prod] = shifted.get(prod, 0.0) + coef
            if not ok:
                continue
            rows.append((moment_entries(shifted), 0.0))

    for aff in system.affine_equalities:
        entries = []
        for mono, coef in aff.poly.terms.items():
            if mono not in representable:
                raise ValueError(
                    f"affine equality references unrepresentable monomial {mono}"
                )
            i, j = positions[mono]
            entries.append((0, i, j, coef))
        for fi, coef in aff.free.items():
            bp, bm = free_split[fi]
            entries.append((bp, 0, 0, coef))
            entries.append((bm, 0, 0, -coef))
        for (name, i, j), coef in aff.psd.items():
            entries.append((aux_index[name], i, j, coef))
        rows.append((entries, 0.0))

    for idx, sel, g in loc_blocks:
        for a in range(len(sel)):
            for b in range(a, len(sel)):
                pair = monomial_mul(sel[a], sel[b])
                entries = [(idx, a, b, 1.0)]
                for gamma, coef in g.terms.items():
                    mono = monomial_mul(pair, gamma)
                    i, j = positions[mono]
                    entries.append((0, i, j, -coef))
                rows.append((entries, 0.0))

    # merge duplicate entries within a row, drop negligible ones, dedup rows;
    # identical rows with clashing right-hand sides mean the system contains
    # a contradiction visible before any SDP runs
    trivially_infeasible = None
    seen = {}
    clean_rows = []
    for entries, rhs in rows:
        acc = {}
        for blk, i, j, val in entries:
            if i > j:
                i, j = j, i
            key = (blk, i, j)
            acc[key] = acc.get(key, 0.0) + val
        acc = {k: v for k, v in acc.items() if abs(v) > 1e-15}
        if not acc:
            if abs(rhs) > 1e-12 and trivially_infeasible is None:
                trivially_infeasible = "an equality reduced to 0 = %r" % rhs
            continue
        sig = tuple(sorted((k, v) for k, v in acc.items()))
        if sig in seen:
            if abs(seen[sig] - rhs) > 1e-9 and trivially_infeasible is None:
                trivially_infeasible = (
                    "identical constraint rows demand %r and %r" % (seen[sig], rhs)
                )
            continue
        seen[sig] = rhs
        clean_rows.append(([(b, i, j, v) for (b, i, j), v in acc.items()], rhs))

    if len(clean_rows) > constraint_cap:
        raise RelaxationSizeError(
            f"{len(clean_rows)} linear constraints exceed the cap {constraint_cap} "
            f"(moment block of size {bsize})"
        )

    obj_terms = _objective_terms(objective, nv)
    obj_main = None
    if obj_terms:
        sign = -1.0 if sense == "max" else 1.0
        obj_main = np.zeros((bsize, bsize))
        for mono, coef in obj_terms.items():
            if mono not in representable:
                raise ValueError(f"objective monomial {mono} not representable")
            i, j = positions[mono]
            if i == j:
                obj_main[i, i] += sign * coef
            else:
                obj_main[i, j] += sign * coef / 2.0
                obj_main[j, i] += sign * coef / 2.0
    objective_mats = [obj_main] + [None] * (len(block_sizes) - 1)

    problem = SdpProblem(block_sizes, objective=objective_mats)
    for entries, rhs in clean_rows:
        problem.add_constraint_entries(entries, rhs)

    return MomentRelaxation(
        system, basis, problem, positions, aux_index, free_split,
        trivially_infeasible,
    )


@dataclass
class SystemSolution:
    status: str  # Optimal | Infeasible | MaxIterations
    pseudo: PseudoDistribution | None
    aux: dict
    free_values: list
    objective_value: float | None
    sdp: object
    relaxation: MomentRelaxation
    detail: str = ""


def solve_system(system, objective=None, sense="min", basis=None, config=None,
                 monomial_cap=DEFAULT_MONOMIAL_CAP,
                 constraint_cap=DEFAULT_CONSTRAINT_CAP):
    relaxation = relax(
        system, objective=objective, sense=sense, basis=basis,
        monomial_cap=monomial_cap, constraint_cap=constraint_cap,
    )
    if relaxation.trivially_infeasible is not None:
        return SystemSolution(
            status="Infeasible", pseudo=None, aux={}, free_values=[],
            objective_value=None, sdp=None, relaxation=relaxation,
            detail=relaxation.trivially_infeasible,
        )
    solution = sdp_solve(relaxation.problem, config)
    if solution.status == "Infeasible":
        return SystemSolution(
            status="Infeasible", pseudo=None, aux={}, free_values=[],
            objective_value=None, sdp=solution, relaxation=relaxation,
            detail=solution.detail,
        )
    pd, aux, free = relaxation.extract(solution)
    obj_val = None
    if objective is not None:
        terms = _objective_terms(objective, system.num_vars)
        obj_val = math.fsum(c * pd.pseudo_moments[m] for m, c in terms.items())
    return SystemSolution(
        status=solution.status, pseudo=pd, aux=aux, free_values=free,
        objective_value=obj_val, sdp=solution, relaxation=relaxation,
        detail=solution.detail,
    )


# ---------------------------------------------------------------------------
# certificates


@dataclass
class CertPremise:
    """One term of a general certificate: (sum of squares) * constraint_product."""

    constraint_product: Polynomial
    multiplier_sos: list


@dataclass
class SosCertificate:
    """Witness of a polynomial inequality.

    Sphere form: base = sphere_multiplier*(|u|^2 - 1) + sum r_i^2.
    General form: base = sum over premises of (sum r^2) * product(constraints).
    """

    num_vars: int
    base_polynomial: Polynomial
    sphere_multiplier: Polynomial | None = None
    sos_part: list = field(default_factory=list)
    general_premises: list | None = None

    def to_json(self):
        def poly_terms(p):
            return [[list(m), c] for m, c in sorted(p.terms.items())]

        payload = {
            "num_vars": self.num_vars,
            "base_polynomial": poly_terms(self.base_polynomial),
            "sphere_multiplier": (
                None if self.sphere_multiplier is None
                else poly_terms(self.sphere_multiplier)
            ),
            "sos_part": [poly_terms(r) for r in self.sos_part],
            "general_premises": (
                None if self.general_premises is None
                else [
                    {
                        "constraint_product": poly_terms(p.constraint_product),
                        "multiplier_sos": [poly_terms(r) for r in p.multiplier_sos],
                    }
                    for p in self.general_premises
                ]
            ),
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        nv = payload["num_vars"]

        def poly(terms):
            return Polynomial(nv, {tuple(m): c for m, c in terms})

        return cls(
            num_vars=nv,
            base_polynomial=poly(payload["base_polynomial"]),
            sphere_multiplier=(
                None if payload["sphere_multiplier"] is None
                else poly(payload["sphere_multiplier"])
            ),
            sos_part=[poly(t) for t in payload["sos_part"]],
            general_premises=(
                None if payload["general_premises"] is None
                else [
                    CertPremise(
                        constraint_product=poly(p["constraint_product"]),
                        multiplier_sos=[poly(t) for t in p["multiplier_sos"]],
                    )
                    for p in payload["general_premises"]
                ]
            ),
        )


@dataclass
class VerifyResult:
    valid: bool
    residual: float
    detail: str = ""

    @property
    def label(self):
        return "Valid" if self.valid else "Invalid"


def _sos_sum(nv, parts):
    total = Polynomial.constant(nv, 0.0)
    for r in parts:
        total = total + r * r
    return total


def _max_coef(poly):
    return max((abs(c) for c in poly.terms.values()), default=0.0)


def _gram_min_eig(parts, nv):
    """Min eigenvalue of the Gram matrix assembled from explicit square roots."""
    if not parts:
        return 0.0
    monos = sorted({m for r in parts for m in r.terms}, key=_grlex_key)
    pos = {m: i for i, m in enumerate(monos)}
    R = np.zeros((len(parts), len(monos)))
    for k, r in enumerate(parts):
        for m, c in r.terms.items():
            R[k, pos[m]] = c
    G = R.T @ R
    return float(np.linalg.eigvalsh(G).min())


def verify_certificate(cert, tolerance=1e-8):
    """Valid iff the defining identity holds coefficientwise and every SOS part
    has a PSD Gram matrix."""
    nv = cert.num_vars
    min_eig = 0.0
    if cert.general_premises is not None:
        total = Polynomial.constant(nv, 0.0)
        for prem in cert.general_premises:
            total = total + _sos_sum(nv, prem.multiplier_sos) * prem.constraint_product
            min_eig = min(min_eig, _gram_min_eig(prem.multiplier_sos, nv))
        diff = cert.base_polynomial - total
    else:
        total = _sos_sum(nv, cert.sos_part)
        if cert.sphere_multiplier is not None:
            sphere = Polynomial(
                nv, {tuple(2 if i == j else 0 for j in range(nv)): 1.0
                     for i in range(nv)}
            ) - 1.0
            total = total + cert.sphere_multiplier * sphere
        min_eig = _gram_min_eig(cert.sos_part, nv)
        diff = cert.base_polynomial - total
    residual = _max_coef(diff)
    ok = residual <= tolerance and min_eig >= -tolerance
    detail = "" if ok else f"identity residual {residual:.3e}, gram min eig {min_eig:.3e}"
    return VerifyResult(valid=ok, residual=residual, detail=detail)


# ---------------------------------------------------------------------------
# certificate search


@dataclass
class SosSearchResult:
    status: str
    margin_value: float | None
    grams: list  # (basis monomials, matrix) per sos premise
    free_polys: list  # one Polynomial per equality premise
    residual: float
    detail: str = ""


def _gram_basis(nv, bound, homogeneous):
    if homogeneous:
        return [m for m in enumerate_monomials(nv, bound) if sum(m) == bound]
    return enumerate_monomials(nv, bound)


def find_sos_combination(target, sos_premises, equality_premises=(), degree=None,
                         margin=None, homogeneous=False, config=None, refine=True):
    """Search for target = sum_S p_S*premise_S + sum_j q_j*eq_j (+ t*margin).

    p_S are SOS (Gram PSD blocks), q_j are free polynomials, and t is
    maximized when a margin polynomial is given.  Returns the raw pieces; the
    caller assembles a certificate.
    """
    nv = target.dimension
    if degree is None:
        degree = target.degree()
    if degree % 2 != 0:
        raise ValueError("identity degree must be even")

    gram_meta = []
    block_sizes = []
    for p in sos_premises:
        bound = (degree - p.degree()) // 2
        if bound < 0 or (homogeneous and (degree - p.degree()) % 2 != 0):
            raise ValueError("premise degree incompatible with identity degree")
        bas = _gram_basis(nv, bound, homogeneous)
        if not bas:
            raise ValueError("empty Gram basis for a premise")
        gram_meta.append((len(block_sizes), bas, p))
        block_sizes.append(len(bas))

    free_meta = []
    for e in equality_premises:
        bound = degree - e.degree()
        monos = [m for m in enumerate_monomials(nv, max(bound, 0))
                 if not homogeneous or sum(m) == bound]
        coeffs = []
        for m in monos:
            bp = len(block_sizes)
            block_sizes.append(1)
            bm = len(block_sizes)
            block_sizes.append(1)
            coeffs.append((m, bp, bm))
        free_meta.append((coeffs, e))

    margin_blocks = None
    if margin is not None:
        bp = len(block_sizes)
        block_sizes.append(1)
        bm = len(block_sizes)
        block_sizes.append(1)
        margin_blocks = (bp, bm)

    rows = {}

    def bump(gamma, key, val):
        rows.setdefault(gamma, {})
        rows[gamma][key] = rows[gamma].get(key, 0.0) + val

    for blk, bas, p in gram_meta:
        for i in range(len(bas)):
            for j in range(i, len(bas)):
                pair = monomial_mul(bas[i], bas[j])
                weight = 1.0 if i == j else 2.0
                for tau, c in p.terms.items():
                    bump(monomial_mul(pair, tau), (blk, i, j), weight * c)
    for coeffs, e in free_meta:
        for m, bp, bm in coeffs:
            for tau, c in e.terms.items():
                gamma = monomial_mul(m, tau)
                bump(gamma, (bp, 0, 0), c)
                bump(gamma, (bm, 0, 0), -c)
    if margin is not None:
        bp, bm = margin_blocks
        for tau, c in margin.terms.items():
            bump(tau, (bp, 0, 0), c)
            bump(tau, (bm, 0, 0), -c)

    gammas = set(rows) | set(target.terms)
    for gamma in gammas:
        if gamma not in rows:
            if abs(target.terms.get(gamma, 0.0)) > 1e-12:
                return SosSearchResult(
                    status="Infeasible", margin_value=None, grams=[],
                    free_polys=[], residual=float("inf"),
                    detail=f"coefficient of {gamma} cannot be matched",
                )

    objective = [None] * len(block_sizes)
    if margin is not None:
        bp, bm = margin_blocks
        objective[bp] = np.array([[-1.0]])
        objective[bm] = np.array([[1.0]])
    problem = SdpProblem(block_sizes, objective=objective)
    for gamma in sorted(rows, key=_grlex_key):
        entries = [(blk, i, j, v) for (blk, i, j), v in rows[gamma].items()]
        problem.add_constraint_entries(entries, target.terms.get(gamma, 0.0))

    cfg = config or SdpConfig(tol=1e-9, max_iters=300)
    solution = sdp_solve(problem, cfg)
    if solution.status == "Infeasible":
        return SosSearchResult(
            status="Infeasible", margin_value=None, grams=[], free_polys=[],
            residual=float("inf"), detail=solution.detail,
        )

    grams = [
        (bas, np.array(solution.primal_blocks[blk])) for blk, bas, _ in gram_meta
    ]
    free_vals = []
    for coeffs, _ in free_meta:
        terms = {}
        for m, bp, bm in coeffs:
            terms[m] = float(
                solution.primal_blocks[bp][0, 0] - solution.primal_blocks[bm][0, 0]
            )
        free_vals.append(Polynomial(nv, terms))
    margin_value = None
    if margin is not None:
        bp, bm = margin_blocks
        margin_value = float(
            solution.primal_blocks[bp][0, 0] - solution.primal_blocks[bm][0, 0]
        )

    if refine and solution.status in ("Optimal", "MaxIterations"):
        grams, free_vals, margin_value = _refine_identity(
            target, gram_meta, grams, free_meta, free_vals,
            margin, margin_value, rows,
        )

    residual = _identity_residual(
        target, gram_meta, grams, free_meta, free_vals, margin, margin_value
    )
    return SosSearchResult(
        status=solution.status, margin_value=margin_value, grams=grams,
        free_polys=free_vals, residual=residual, detail=solution.detail,
    )


def _identity_residual(target, gram_meta, grams, free_meta, free_vals,
                       margin, margin_value):
    nv = target.dimension
    total = Polynomial.constant(nv, 0.0)
    for (blk, bas, p), (_, G) in zip(gram_meta, grams):
        acc = {}
        for i in range(len(bas)):
            for j in range(len(bas)):
                pair = monomial_mul(bas[i], bas[j])
                acc[pair] = acc.get(pair, 0.0) + G[i, j]
        total = total + Polynomial(nv, acc) * p
    for (_, e), q in zip(free_meta, free_vals):
        total = total + q * e
    if margin is not None and margin_value is not None:
        total = total + margin * margin_value
    return _max_coef(target - total)


def _refine_identity(target, gram_meta, grams, free_meta, free_vals,
                     margin, margin_value, rows):
    """Least-squares polish of the solved identity, re-projecting Grams PSD."""
    ncols = sum(len(bas) * (len(bas) + 1) // 2 for _, bas, _ in gram_meta)
    ncols += sum(len(coeffs) for coeffs, _ in free_meta)
    if margin is not None:
        ncols += 1

    gammas = sorted(set(rows) | set(target.terms), key=_grlex_key)
    A = np.zeros((len(gammas), ncols))
    gi = {g: i for i, g in enumerate(gammas)}
    ci = 0
    for (blk, bas, p), (_, G) in zip(gram_meta, grams):
        for i in range(len(bas)):
            for j in range(i, len(bas)):
                pair = monomial_mul(bas[i], bas[j])
                weight = 1.0 if i == j else 2.0
                for tau, c in p.terms.items():
                    A[gi[monomial_mul(pair, tau)], ci] += weight * c
                ci += 1
    for (coeffs, e), q in zip(free_meta, free_vals):
        for m, _, _ in coeffs:
            for tau, c in e.terms.items():
                A[gi[monomial_mul(m, tau)], ci] += c
            ci += 1
    if margin is not None:
        for tau, c in margin.terms.items():
            A[gi[tau], ci] += c
        ci += 1

    def current_vector():
        vec = []
        for (_, bas, _), (_, G) in zip(gram_meta, grams):
            for i in range(len(bas)):
                for j in range(i, len(bas)):
                    vec.append(G[i, j])
        for (coeffs, _), q in zip(free_meta, free_vals):
            for m, _, _ in coeffs:
                vec.append(q.terms.get(m, 0.0))
        if margin is not None:
            vec.append(margin_value if margin_value is not None else 0.0)
        return np.array(vec)

    target_vec = np.array([target.terms.get(g, 0.0) for g in gammas])
    vec = current_vector()
    for _ in range(3):
        resid = target_vec - A @ vec
        if np.max(np.abs(resid), initial=0.0) < 1e-14:
            break
        delta, *_ = np.linalg.lstsq(A, resid, rcond=None)
        vec = vec + delta
        # unpack, project grams to the PSD cone, repack
        k = 0
        new_grams = []
        for (_, bas, _), (_, G) in zip(gram_meta, grams):
            n = len(bas)
            H = np.zeros((n, n))
            for i in range(n):
                for j in range(i, n):
                    H[i, j] = H[j, i] = vec[k]
                    k += 1
            w, V = np.linalg.eigh(H)
            H = (V * np.clip(w, 0.0, None)) @ V.T
            new_grams.append(H)
        new_free = []
        for (coeffs, _), _ in zip(free_meta, free_vals):
            terms = {}
            for m, _, _ in coeffs:
                terms[m] = vec[k]
                k += 1
            new_free.append(Polynomial(target.dimension, terms))
        if margin is not None:
            margin_value = float(vec[k])
        grams = [(bas, H) for ((_, bas, _), H) in zip(gram_meta, new_grams)]
        free_vals = new_free
        vec = current_vector()
    return grams, free_vals, margin_value


def gram_to_sos(basis, G, drop_tol=1e-12):
    """Split a PSD Gram matrix into explicit square polynomials."""
    nv = len(basis[0])
    G = 0.5 * (np.asarray(G) + np.asarray(G).T)
    w, V = np.linalg.eigh(G)
    top = max(float(w.max(initial=0.0)), 1.0)
    parts = []
    for lam, vec in zip(w, V.T):
        if lam <= drop_tol * top:
            continue
        coef = math.sqrt(lam)
        terms = {m: coef * float(c) for m, c in zip(basis, vec) if abs(c) > 1e-15}
        if terms:
            parts.append(Polynomial(nv, terms))
    return parts


# ---------------------------------------------------------------------------
# the certificate toolkit


def _toolkit_check_k(k):
    if k % 2 != 0 or not 2 <= k <= 8:
        raise ValueError("toolkit certificates support even k with 2 <= k <= 8")


def build_toolkit_certificate(kind, k, delta=None):
    """Construct and pre-verify a library certificate.

    Kinds: "Binomial" (2^{k-1}(a^k+b^k) >= (a+b)^k), "AmGm"
    (product <= mean of k-th powers), "PowerReduction" ({f^k<=1} |- {f<=1}),
    "IntervalFromPower" ({(f-1)^k <= d^k (f+1)^k} |- {f <= 1+100d}; the
    companion lower bound comes from build_interval_certificates).
    """
    _toolkit_check_k(k)
    if kind == "Binomial":
        cert = _binomial_certificate(k)
    elif kind == "AmGm":
        cert = _amgm_certificate(k)
    elif kind == "PowerReduction":
        cert = _power_reduction_certificate(k)
    elif kind == "IntervalFromPower":
        if delta is None:
            raise ValueError("IntervalFromPower needs delta")
        cert, _ = build_interval_certificates(k, delta)
    else:
        raise ValueError(f"unknown certificate kind {kind!r}")
    check = verify_certificate(cert, tolerance=1e-8)
    if not check.valid:
        raise RuntimeError(
            f"certificate search for {kind}(k={k}) produced an invalid "
            f"certificate ({check.detail}); this is a bug signal"
        )
    return cert


def _binomial_certificate(k):
    a = Polynomial.variable(2, 0)
    b = Polynomial.variable(2, 1)
    target = (2 ** (k - 1)) * (a ** k + b ** k) - (a + b) ** k
    if k == 2:
        return SosCertificate(2, target, sos_part=[a - b])
    result = find_sos_combination(
        target, sos_premises=[Polynomial.constant(2, 1.0)],
        degree=k, homogeneous=True,
    )
    if result.status != "Optimal":
        raise RuntimeError(f"binomial certificate search failed: {result.detail}")
    return SosCertificate(2, target, sos_part=gram_to_sos(*result.grams[0]))


def _amgm_certificate(k):
    nv = k
    power_sum = Polynomial.constant(nv, 0.0)
    product = Polynomial.constant(nv, 1.0)
    for i in range(nv):
        w = Polynomial.variable(nv, i)
        power_sum = power_sum + w ** k
        product = product * w
    target = power_sum * (1.0 / k) - product
    if k == 2:
        w0 = Polynomial.variable(2, 0)
        w1 = Polynomial.variable(2, 1)
        return SosCertificate(2, target, sos_part=[(w0 - w1) * (1 / math.sqrt(2))])
    result = find_sos_combination(
        target, sos_premises=[Polynomial.constant(nv, 1.0)],
        degree=k, homogeneous=True,
    )
    if result.status != "Optimal":
        raise RuntimeError(f"am-gm certificate search failed: {result.detail}")
    return SosCertificate(nv, target, sos_part=gram_to_sos(*result.grams[0]))


def _power_reduction_certificate(k):
    f = Polynomial.variable(1, 0)
    one = Polynomial.constant(1, 1.0)
    if k == 2:
        # 2 - 2f = (1 - f^2) + (1 - f)^2, exactly
        return SosCertificate(
            1,
            2.0 - 2.0 * f,
            general_premises=[
                CertPremise(one - f * f, [one]),
                CertPremise(one, [one - f]),
            ],
        )
    power_premise = one - f ** k
    target = one - f
    result = find_sos_combination(
        target, sos_premises=[one, power_premise], degree=k,
    )
    if result.status != "Optimal":
        raise RuntimeError(
            f"power reduction certificate search failed: {result.detail}"
        )
    plain = gram_to_sos(*result.grams[0])
    scale = gram_to_sos(*result.grams[1])
    return SosCertificate(
        1, target,
        general_premises=[
            CertPremise(one, plain),
            CertPremise(power_premise, scale),
        ],
    )


def build_interval_certificates(k, delta):
    """Certs for {(f-1)^k <= delta^k (f+1)^k} |- {1-100delta <= f <= 1+100delta}."""
    _toolkit_check_k(k)
    if not 0 < delta < 0.01:
        raise ValueError("delta must lie in (0, 0.01) so that 100*delta < 1")
    f = Polynomial.variable(1, 0)
    one = Polynomial.constant(1, 1.0)
    premise = (delta ** k) * (f + 1.0) ** k - (f - 1.0) ** k
    dprime = 100.0 * delta
    out = []
    for target in [(1.0 + dprime) - f, f - (1.0 - dprime)]:
        cert = None
        last = ""
        for degree in (k, k + 2, k + 4):
            result = find_sos_combination(
                target, sos_premises=[one, premise], degree=degree,
            )
            last = result.detail
            if result.status == "Optimal" and result.residual <= 1e-7:
                cert = SosCertificate(
                    1, target,
                    general_premises=[
                        CertPremise(one, gram_to_sos(*result.grams[0])),
                        CertPremise(premise, gram_to_sos(*result.grams[1])),
                    ],
                )
                break
        if cert is None:
            raise RuntimeError(
                f"interval certificate search failed for k={k}, delta={delta}: {last}"
            )
        out.append(cert)
    return tuple(out)


# ---------------------------------------------------------------------------
# sos norm


def tensor_form(tensor):
    """The polynomial u -> <T, u^{x order}> of a symmetric tensor."""
    d = tensor.dimension
    poly_terms = {}
    for idx in tensor.indices():
        mono = [0] * d
        for i in idx:
            mono[i] += 1
        poly_terms[tuple(mono)] = tensor.get(idx) * index_multiplicity(idx)
    return Polynomial(d, poly_terms)


def sos_norm(tensor, degree=None):
    """Degree-2t relaxation of the injective norm: the 2t-th root of the
    maximum of E~<T, u^{x 2t}> over degree-2t pseudo-distributions on the
    sphere."""
    order = tensor.order
    if order % 2 != 0:
        raise ValueError("sos_norm needs an even-order tensor")
    if degree is None:
        degree = order
    if degree < order or degree % 2 != 0:
        raise ValueError("relaxation degree must be even and >= tensor order")
    d = tensor.dimension
    sphere = Polynomial(
        d, {tuple(2 if i == j else 0 for j in range(d)): 1.0 for i in range(d)}
    ) - 1.0
    system = ConstraintSystem(
        num_vars=d, relaxation_degree=degree, equalities=[sphere],
    )
    form = tensor_form(tensor)
    result = solve_system(system, objective=form, sense="max")
    if result.status != "Optimal":
        raise RuntimeError(f"sos_norm relaxation did not converge: {result.detail}")
    value = result.objective_value
    if value <= 0.0:
        return 0.0
    return value ** (1.0 / order)
