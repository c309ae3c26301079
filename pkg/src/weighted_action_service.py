# src/weighted_action_service.py
# Aufbau der quadratischen Form (Q, r) der gewichteten Wirkung für ein beliebiges Polynom P(x)
# Enthält den Einzel-lambda-Weg und den faktorisierten lambda-Sweep mit Spurencache

from __future__ import annotations

import itertools
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial

from . import config
from . import pauli_core as pc
from .errors import ConfigError, DimensionError, HermiticityError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ActionPolynomial:
    """
    P(x) = sum_k p_k(lambda) x^k.

    Hinweis:
        - `coefficient_fn` liefert (p_0, ..., p_K) als Array
        - Der Grad ist exakt: p_K != 0 wird bei jeder Auswertung geprüft
        - Grad 0 (konstantes P) ist erlaubt und ergibt Q = 0, r = 0
    """
    degree: int
    coefficient_fn: Callable[[float], np.ndarray]

    def coefficients(self, lam):
        p = np.asarray(self.coefficient_fn(lam), dtype=float)
        if p.shape != (self.degree + 1,):
            raise ValueError(f"Expected {self.degree + 1} coefficients, got {p.shape}")
        if self.degree >= 1 and p[-1] == 0.0:
            raise ValueError(f"Leading coefficient vanishes at lambda={lam}")
        return p

    def __call__(self, x, lam=0.0):
        return Polynomial(self.coefficients(lam))(x)


def constant_polynomial(coeffs):
    """ActionPolynomial mit lambda-unabhängigen Koeffizienten (p_0, ..., p_K)."""
    p = np.array(coeffs, dtype=float)
    return ActionPolynomial(len(p) - 1, lambda lam: p)


@dataclass
class QuadraticForm:
    """Q (M x M, symmetrisch, PSD) und r (Länge M) bei festem lambda; Spuren 2^-N-normiert."""
    Q: np.ndarray
    r: np.ndarray
    lam: float
    metadata: dict = field(default_factory=dict)


@dataclass
class FactorizedTraces:
    """
    lambda-unabhängige Daten des faktorisierten Sweeps.

    Hinweis:
        - exponents[g] ist der Exponentenvektor des Monoms g, d_g = sum(exponents[g])
        - Qt[g, g', mu, nu] = tr([F_g, A_mu][F_g', A_nu]) / 2^N, gefüllt für mu >= nu
        - rt[g, g', mu] = tr(F_g [F_g', A_mu]) / 2^N
        - omega_single[g] = tr(F_g) / 2^N, omega_pair[g, g'] = tr(F_g F_g') / 2^N
          für d_g = degree und 1 <= d_g' < degree
        - `operators` (die F_g) fehlen nach dem Laden aus dem Cache
    """
    degree: int
    exponents: list
    functions: tuple
    nspins: int
    Qt: np.ndarray
    rt: np.ndarray
    omega_single: np.ndarray
    omega_pair: np.ndarray
    operators: list = None
    metadata: dict = field(default_factory=dict)

    @property
    def orders(self):
        return np.array([sum(e) for e in self.exponents], dtype=int)


def monomials(gamma, K):
    """
    Alle Exponentenvektoren e mit |e| <= K.

    Returns:
        list: Nach Grad absteigend, innerhalb eines Grades absteigend lexikographisch;
        für Gamma = 2, K = 2: (2,0), (1,1), (0,2), (1,0), (0,1), (0,0)
    """
    if gamma < 1 or K < 0:
        raise ValueError("Need gamma >= 1 and K >= 0")
    out = []
    for d in range(K, -1, -1):
        level = set()
        for combo in itertools.combinations_with_replacement(range(gamma), d):
            e = [0] * gamma
            for i in combo:
                e[i] += 1
            level.add(tuple(e))
        out.extend(sorted(level, reverse=True))
    return out


def monomial_values(functions, exponents, lam):
    """
    f~_g(lambda) und d f~_g / d lambda für alle Monome.

    Returns:
        tuple: (values, derivatives) als Arrays der Länge |g|
    """
    f = np.array([float(fn(lam)) for fn in functions])
    df = np.array([float(fn.deriv()(lam)) for fn in functions])
    values = np.empty(len(exponents))
    derivs = np.empty(len(exponents))
    for g, e in enumerate(exponents):
        values[g] = np.prod([f[i] ** k for i, k in enumerate(e)])
        total = 0.0
        for i, k in enumerate(e):
            if k == 0:
                continue
            term = k * f[i] ** (k - 1) * df[i]
            for j, kj in enumerate(e):
                if j != i:
                    term *= f[j] ** kj
            total += term
        derivs[g] = total
    return values, derivs


def hamiltonian_powers(H, dH, K):
    """
    Potenzen H^1..H^K und ihre lambda-Ableitungen.

    Args:
        H: Hamiltonoperator bei festem lambda
        dH: d H / d lambda
        K (int): Höchste Potenz (>= 1)

    Returns:
        tuple: (powers, derivatives), jeweils Listen der Länge K (Index k-1 für H^k)

    Hinweis:
        - Leibniz-Regel rekursiv: d[H^k] = d[H^{k-1}] H + H^{k-1} dH
    """
    if K < 1:
        raise ValueError(f"Power K must be >= 1, got {K}")
    if H.nspins != dH.nspins:
        raise DimensionError(f"Operand nspins mismatch: {H.nspins} != {dH.nspins}")
    powers = [H]
    derivs = [dH]
    for _ in range(2, K + 1):
        derivs.append(pc.add(pc.multiply(derivs[-1], H), pc.multiply(powers[-1], dH)))
        powers.append(pc.multiply(powers[-1], H))
    logger.debug("Hamiltonian powers built", extra={"term_counts": [len(p) for p in powers]})
    return powers, derivs


def _real_part(values, what, tol=config.HERMITICITY_TOL):
    values = np.asarray(values)
    scale = np.max(np.abs(values)) if values.size else 0.0
    if scale > 0 and np.max(np.abs(values.imag)) > tol * scale:
        raise HermiticityError(f"Imaginary residue in {what} exceeds {tol:g} relative")
    return np.ascontiguousarray(values.real)


def _mirror_lower(Q):
    return np.tril(Q) + np.tril(Q, -1).T


def quadratic_form_from_operators(P, Dp, ansatz, lam, metadata=None):
    """
    Q und r aus dem fiktiven Hamiltonoperator P und seiner Ableitung Dp.

    Hinweis:
        - Q_{mu nu} = tr(P * [[P, A_mu], A_nu]) / 2^N für mu >= nu, dann gespiegelt
        - r_mu = i tr(Dp * [P, A_mu]) / 2^N
        - Spuren iterieren stets über den kleineren Operator
    """
    ops = list(ansatz.operators)
    M = len(ops)
    idx = pc.build_site_index(ops)
    C = pc.batched_commutator(P, ops, idx)
    Q = np.zeros((M, M), dtype=complex)
    r = np.zeros(M, dtype=complex)
    for mu in range(M):
        if not C[mu].terms:
            continue
        D = pc.batched_commutator(C[mu], ops, idx, upto=mu)
        for nu in range(mu + 1):
            if D[nu].terms:
                Q[mu, nu] = pc.trace_product_normalized(P, D[nu])
        r[mu] = 1j * pc.trace_product_normalized(Dp, C[mu])
    Q = _mirror_lower(_real_part(Q, "Q"))
    r = _real_part(r, "r")
    meta = dict(metadata or {})
    meta.setdefault("term_counts", {"P": len(P), "dP": len(Dp)})
    return QuadraticForm(Q, r, float(lam), meta)


def build_quadratic_form(H, dH, poly, ansatz, lam):
    """
    Quadratische Form der gewichteten Wirkung bei einem lambda (Einzelweg).

    Args:
        H: H(lambda) als SparseOperator
        dH: d H / d lambda
        poly (ActionPolynomial): P(x) vom Grad K
        ansatz (Ansatz): Treiberoperatoren
        lam (float): Parameterwert

    Returns:
        QuadraticForm

    Raises:
        DimensionError: H, dH und Ansatz passen nicht zusammen
    """
    if H.nspins != ansatz.nspins:
        raise DimensionError(f"Operand nspins mismatch: {H.nspins} != {ansatz.nspins}")
    started = time.perf_counter()
    p = poly.coefficients(lam)
    K = poly.degree
    P = pc.identity(H.nspins, p[0])
    Dp = pc.zero(H.nspins)
    if K >= 1:
        powers, derivs = hamiltonian_powers(H, dH, K)
        P = pc.linear_combination(H.nspins, [(p[0], pc.identity(H.nspins))]
                                  + [(p[k], powers[k - 1]) for k in range(1, K + 1)])
        Dp = pc.linear_combination(H.nspins, [(p[k], derivs[k - 1]) for k in range(1, K + 1)])
    qf = quadratic_form_from_operators(P, Dp, ansatz, lam, {"K": K})
    qf.metadata["seconds"] = time.perf_counter() - started
    return qf


def factorized_operators(Hf, K):
    """
    F~_g für alle Monome bis Grad K.

    Hinweis:
        - H^d = H^{d-1} H, daher F~_e = sum_{gamma: e_gamma > 0} F~_{e - 1_gamma} F_gamma
    """
    exponents = monomials(Hf.gamma, K)
    table = {tuple([0] * Hf.gamma): pc.identity(Hf.nspins)}
    for d in range(1, K + 1):
        for e in [e for e in exponents if sum(e) == d]:
            pairs = []
            for gamma, k in enumerate(e):
                if k == 0:
                    continue
                lower = list(e)
                lower[gamma] -= 1
                pairs.append(pc.multiply(table[tuple(lower)], Hf.operators[gamma]))
            acc = pairs[0]
            for extra in pairs[1:]:
                acc = pc.add(acc, extra)
            table[e] = acc
    return exponents, [table[e] for e in exponents]


def precompute_factorized(Hf, K, ansatz):
    """
    Stufe 1 des faktorisierten Sweeps: alle lambda-unabhängigen Spuren.

    Args:
        Hf (FactorizedHamiltonian): H(lambda) = sum f_gamma F_gamma
        K (int): Höchster Polynomgrad, der später ausgewertet wird
        ansatz (Ansatz): Treiberoperatoren

    Returns:
        FactorizedTraces

    Hinweis:
        - Doppelkommutatoren werden je (g, mu) einmal gebildet und gegen alle F~_g'
          gespurt; Paare (mu, nu) ohne überlappende Terme fallen dabei von selbst weg
        - Enthält zusätzlich die Momentenspuren für die Energieverschiebung
    """
    if K < 1:
        raise ValueError(f"Degree K must be >= 1, got {K}")
    if Hf.nspins != ansatz.nspins:
        raise DimensionError(f"Operand nspins mismatch: {Hf.nspins} != {ansatz.nspins}")
    started = time.perf_counter()
    exponents, Ft = factorized_operators(Hf, K)
    t_ops = time.perf_counter()
    ops = list(ansatz.operators)
    G, M = len(Ft), len(ops)
    idx = pc.build_site_index(ops)
    Qt = np.zeros((G, G, M, M), dtype=complex)
    rt = np.zeros((G, G, M), dtype=complex)
    for g in range(G):
        C = pc.batched_commutator(Ft[g], ops, idx)
        for mu in range(M):
            if not C[mu].terms:
                continue
            D = pc.batched_commutator(C[mu], ops, idx, upto=mu)
            for nu in range(mu + 1):
                if not D[nu].terms:
                    continue
                for g2 in range(G):
                    Qt[g, g2, mu, nu] = -pc.trace_product_normalized(Ft[g2], D[nu])
            for g2 in range(G):
                rt[g2, g, mu] = pc.trace_product_normalized(Ft[g2], C[mu])
    orders = [sum(e) for e in exponents]
    omega_single = np.array([pc.trace_normalized(F) for F in Ft])
    omega_pair = np.zeros((G, G), dtype=complex)
    for g in range(G):
        if orders[g] != K:
            continue
        for g2 in range(G):
            if 1 <= orders[g2] < K:
                omega_pair[g, g2] = pc.trace_product_normalized(Ft[g], Ft[g2])
    finished = time.perf_counter()
    ft = FactorizedTraces(
        degree=K, exponents=exponents, functions=tuple(Hf.functions), nspins=Hf.nspins,
        Qt=_real_part(Qt, "Q~"),
        rt=rt,
        omega_single=_real_part(omega_single, "omega~"),
        omega_pair=_real_part(omega_pair, "omega~"),
        operators=Ft,
        metadata={
            "term_counts": [len(F) for F in Ft],
            "seconds_operators": t_ops - started,
            "seconds_traces": finished - t_ops,
            "seconds_total": finished - started,
            "ansatz_size": M,
        },
    )
    logger.info("Stage 1 finished", extra={"K": K, "monomials": G, "seconds": finished - started})
    return ft


def assemble_at_lambda(ft, poly, lam):
    """
    Stufe 2: Q(lambda) und r(lambda) nur durch skalare Kontraktion.

    Raises:
        ConfigError: Polynomgrad größer als der Grad der vorberechneten Spuren
    """
    if poly.degree > ft.degree:
        raise ConfigError(f"Polynomial degree {poly.degree} exceeds precomputed degree {ft.degree}")
    p = poly.coefficients(lam)
    p_full = np.zeros(ft.degree + 1)
    p_full[:p.size] = p
    values, derivs = monomial_values(ft.functions, ft.exponents, lam)
    weights = p_full[ft.orders]
    a = weights * values
    b = weights * derivs
    Q = -np.einsum("g,h,ghmn->mn", a, a, ft.Qt)
    r = 1j * np.einsum("g,h,ghm->m", b, a, ft.rt)
    Q = _mirror_lower(Q)
    return QuadraticForm(Q, _real_part(r, "r"), float(lam), {"K": poly.degree, "factorized": True})


def factorized_moments(ft, lam, kmax):
    """
    omega_k(lambda) = tr(H^k) / 2^N für k = 0..kmax aus den Momentenspuren.

    Hinweis:
        - k <= degree: sum_{d_g = k} f~_g omega~_g
        - k > degree: sum_{d_g = degree, d_g' = k - degree} f~_g f~_g' omega~_{g g'}
    """
    D = ft.degree
    if kmax > 2 * D - 1:
        raise ConfigError(f"Moments up to {kmax} need precomputed degree >= {(kmax + 2) // 2}")
    values, _ = monomial_values(ft.functions, ft.exponents, lam)
    orders = ft.orders
    omega = np.zeros(kmax + 1)
    for k in range(kmax + 1):
        if k <= D:
            mask = orders == k
            omega[k] = np.sum(values[mask] * ft.omega_single[mask])
        else:
            top = orders == D
            rest = orders == k - D
            omega[k] = values[top] @ ft.omega_pair[np.ix_(top, rest)] @ values[rest]
    return omega


def action_value(qf, alpha):
    """alpha-abhängiger Teil der Wirkung: -2 r.alpha + alpha^T Q alpha (2^-N-normiert)."""
    alpha = np.asarray(alpha, dtype=float)
    return float(alpha @ qf.Q @ alpha - 2.0 * qf.r @ alpha)


def save_traces(ft, file_path, key):
    """
    Speichert FactorizedTraces (ohne Operatoren) als komprimierte .npz-Datei.

    Args:
        ft (FactorizedTraces): Spuren
        file_path (str): Zielpfad
        key (dict): Cache-Schlüssel (Instanz-Hash, K, Ansatz-ID)
    """
    os.makedirs(os.path.dirname(file_path) or ".", exist_ok=True)
    meta = {
        "version": config.TRACES_CACHE_VERSION,
        "key": key,
        "degree": ft.degree,
        "nspins": ft.nspins,
        "exponents": [list(e) for e in ft.exponents],
        "functions": [list(map(float, f.coef)) for f in ft.functions],
        "metadata": ft.metadata,
    }
    with open(file_path, "wb") as f:
        np.savez_compressed(f, Qt=ft.Qt, rt=ft.rt, omega_single=ft.omega_single,
                            omega_pair=ft.omega_pair, meta=np.array(json.dumps(meta)))
    logger.info(f"Trace cache written: {file_path}")


def load_traces(file_path, key):
    """
    Lädt FactorizedTraces aus dem Cache.

    Returns:
        FactorizedTraces/None: None bei fehlender Datei, anderer Version oder anderem Schlüssel
    """
    if not os.path.exists(file_path):
        return None
    try:
        with np.load(file_path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("version") != config.TRACES_CACHE_VERSION or meta.get("key") != key:
                logger.info(f"Trace cache ignored (version/key mismatch): {file_path}")
                return None
            return FactorizedTraces(
                degree=int(meta["degree"]),
                exponents=[tuple(e) for e in meta["exponents"]],
                functions=tuple(Polynomial(c) for c in meta["functions"]),
                nspins=int(meta["nspins"]),
                Qt=data["Qt"], rt=data["rt"],
                omega_single=data["omega_single"], omega_pair=data["omega_pair"],
                operators=None, metadata=meta.get("metadata", {}),
            )
    except (OSError, ValueError, KeyError) as e:
        logger.warning(f"Trace cache unreadable, recomputing: {file_path} ({e})")
        return None
