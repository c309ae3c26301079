# src/gs_protocol_service.py
# Grundzustands-Spezialisierung der gewichteten Wirkung mit P(x) = (x - E)^K
# Enthält Momente, Energieverschiebung, Gewichtsfunktionen und die Protokoll-Pipelines
# (Einzel-lambda und faktorisierter Sweep) samt Speicherung der Protokolltabellen

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numpy.polynomial import Polynomial

from . import config
from . import linalg
from . import pauli_core as pc
from .errors import ConfigError, MissingArtifactError, NumericalError, OptimizationFailedError, SolverError
from .utils import load_json, save_csv, save_json
from .weighted_action_service import (
    FactorizedTraces,
    assemble_at_lambda,
    constant_polynomial,
    factorized_moments,
    precompute_factorized,
    quadratic_form_from_operators,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnergyShiftProblem:
    """Momente omega_k = tr(H^k) / 2^N für k = 0..2K-1 bei festem lambda."""
    K: int
    omega: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"Energy shift needs K >= 2, got {self.K}")
        if len(self.omega) < 2 * self.K:
            raise ValueError(f"Need moments up to order {2 * self.K - 1}")


@dataclass
class ProtocolTable:
    """
    Treiberkoeffizienten alpha^(K)(lambda) auf einem lambda-Gitter.

    Hinweis:
        - energy_shifts ist NaN für K = 1
        - Fehlgeschlagene Gitterpunkte haben NaN-Zeilen in alphas und einen Eintrag in failures
    """
    lambdas: np.ndarray
    alphas: np.ndarray
    energy_shifts: np.ndarray
    residuals: np.ndarray
    iterations: np.ndarray
    failures: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def K(self):
        return self.metadata.get("K")

    @property
    def valid(self):
        return np.all(np.isfinite(self.alphas), axis=1)


def default_grid(points=config.DEFAULT_GRID_POINTS):
    return np.linspace(0.0, 1.0, points)


def _check_grid(grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ConfigError("lambda grid must be a nonempty 1-D sequence")
    if np.any(np.diff(grid) <= 0):
        raise ConfigError("lambda grid must be strictly increasing")
    if grid[0] < 0.0 or grid[-1] > 1.0:
        raise ConfigError("lambda grid must lie within [0, 1]")
    return grid


# --- Momente und Energieverschiebung ---

def _powers(H, K):
    powers = [H]
    for _ in range(2, K + 1):
        powers.append(pc.multiply(powers[-1], H))
    return powers


def moments(source, K, lam=0.0, powers=None):
    """
    Momente omega_0..omega_{2K-1} für die Energieverschiebung.

    Args:
        source: SparseOperator H(lambda), FactorizedHamiltonian oder FactorizedTraces
        K (int): Polynomgrad (>= 2)
        lam (float): Parameterwert (für faktorisierte Quellen)
        powers (list): Bereits berechnete H^1..H^K (optional)

    Returns:
        EnergyShiftProblem

    Hinweis:
        - Es werden nur Potenzen bis K gebildet; für k > K gilt
          tr(H^k) = tr(H^K * H^{k-K}) als Spur eines Produkts ohne es zu bilden
    """
    if K < 2:
        raise ValueError(f"Moments for the energy shift need K >= 2, got {K}")
    if isinstance(source, FactorizedTraces):
        return EnergyShiftProblem(K, factorized_moments(source, lam, 2 * K - 1), float(lam))
    H = source if isinstance(source, pc.SparseOperator) else source.eval(lam)
    if powers is None:
        powers = _powers(H, K)
    omega = np.zeros(2 * K)
    omega[0] = 1.0
    for k in range(1, 2 * K):
        if k <= K:
            value = pc.trace_normalized(powers[k - 1])
        else:
            value = pc.trace_product_normalized(powers[K - 1], powers[k - K - 1])
        omega[k] = value.real
    return EnergyShiftProblem(K, omega, float(lam))


def omega_polynomials(prob):
    """
    Zähler A(E) und Nenner B(E) von Omega(E) = A(E) / B(E).

    Hinweis:
        - A(E) = sum_k (-1)^k C(2K-2, k) omega_{2K-1-k} E^k
        - B(E) = sum_k (-1)^k C(2K-2, k) omega_{2K-2-k} E^k = tr((H-E)^{2K-2}) / 2^N > 0
    """
    n = 2 * prob.K - 2
    w = prob.omega
    a = [(-1) ** k * math.comb(n, k) * w[n + 1 - k] for k in range(n + 1)]
    b = [(-1) ** k * math.comb(n, k) * w[n - k] for k in range(n + 1)]
    return Polynomial(a), Polynomial(b)


def omega(prob, E):
    A, B = omega_polynomials(prob)
    return A(E) / B(E)


def _derivative_numerator(prob):
    A, B = omega_polynomials(prob)
    return A.deriv() * B - A * B.deriv(), B


def omega_derivative(prob, E):
    num, B = _derivative_numerator(prob)
    return num(E) / B(E) ** 2


def _quadratic_shift(prob):
    """Geschlossene Lösung für K = 2: größere Nullstelle des quadratischen Zählers."""
    w = prob.omega
    a0, a1, a2 = w[3], -2.0 * w[2], w[1]
    b0, b1, b2 = w[2], -2.0 * w[1], w[0]
    c2 = a2 * b1 - a1 * b2
    c1 = 2.0 * (a2 * b0 - a0 * b2)
    c0 = a1 * b0 - a0 * b1
    disc = c1 * c1 - 4.0 * c2 * c0
    if c2 <= 0.0 or disc < 0.0:
        raise OptimizationFailedError(
            "Omega(E) has no interior minimum for K=2",
            {"moments": list(map(float, w[:4])), "discriminant": disc, "c2": c2, "lambda": prob.lam},
        )
    q = -0.5 * (c1 + math.copysign(math.sqrt(disc), c1))
    roots = [q / c2] + ([c0 / q] if q != 0.0 else [])
    return max(roots)


def _scan_minimum_brackets(num, center, sigma):
    half = config.BRACKET_WIDTH_SIGMAS * sigma
    for _ in range(config.BRACKET_EXPANSIONS + 1):
        grid = np.linspace(center - half, center + half, config.BRACKET_SCAN_POINTS)
        values = num(grid)
        brackets = [(grid[i], grid[i + 1]) for i in range(grid.size - 1)
                    if values[i] < 0.0 <= values[i + 1]]
        if brackets:
            return brackets, (center - half, center + half)
        half *= 2.0
    return [], (center - half, center + half)


def energy_shift(prob):
    """
    Minimierer von Omega(E) für P(x) = (x - E)^K.

    Args:
        prob (EnergyShiftProblem): Momente bei festem lambda

    Returns:
        float: Energieverschiebung E

    Raises:
        OptimizationFailedError: Kein inneres Minimum (Diagnosen im Fehlerobjekt)

    Hinweis:
        - K = 2: exakte Lösung des quadratischen Zählers von dOmega/dE, größere Wurzel
        - K >= 3: Vorzeichen-Scan von dOmega/dE auf omega_1 +- 10 sigma (bis zu 8
          Verdopplungen), dann Newton ab der K=2-Lösung mit Bisektions-Absicherung
          im Minimum-Intervall, das der K=2-Lösung am nächsten liegt
    """
    w = prob.omega
    variance = w[2] - w[1] ** 2
    if not variance > 0.0:
        raise OptimizationFailedError(
            "Spectrum has zero variance, Omega(E) is constant",
            {"moments": list(map(float, w)), "lambda": prob.lam},
        )
    start = _quadratic_shift(EnergyShiftProblem(2, w[:4], prob.lam))
    if prob.K == 2:
        return start
    num, B = _derivative_numerator(prob)
    brackets, window = _scan_minimum_brackets(num, w[1], math.sqrt(variance))
    if not brackets:
        raise OptimizationFailedError(
            f"No interior minimum of Omega(E) found for K={prob.K}",
            {"moments": list(map(float, w)), "window": window, "lambda": prob.lam},
        )
    bracket = min(brackets, key=lambda ab: 0.0 if ab[0] <= start <= ab[1]
                  else min(abs(start - ab[0]), abs(start - ab[1])))
    dnum = num.deriv()
    dB = B.deriv()

    def df(E):
        return num(E) / B(E) ** 2

    def d2f(E):
        return (dnum(E) * B(E) - 2.0 * num(E) * dB(E)) / B(E) ** 3

    return linalg.minimize_scalar(lambda E: omega(prob, E), df, start, bracket, d2f=d2f)


def omega_shape(prob, window=None, points=config.BRACKET_SCAN_POINTS):
    """
    Anzahl innerer Maxima und Minima von Omega(E) im Suchfenster.

    Returns:
        tuple: (n_max, n_min); die typische Form ist (1, 1)
    """
    w = prob.omega
    sigma = math.sqrt(max(w[2] - w[1] ** 2, 0.0))
    if window is None:
        half = config.BRACKET_WIDTH_SIGMAS * sigma
        window = (w[1] - half, w[1] + half)
    num, _ = _derivative_numerator(prob)
    values = num(np.linspace(window[0], window[1], points))
    signs = np.sign(values)
    signs = signs[signs != 0]
    n_max = int(np.sum((signs[:-1] > 0) & (signs[1:] < 0)))
    n_min = int(np.sum((signs[:-1] < 0) & (signs[1:] > 0)))
    return n_max, n_min


def gs_polynomial(K, E=None):
    """
    (x - E)^K als ActionPolynomial mit p_k = C(K, k) (-E)^{K-k}.

    Hinweis:
        - Für K = 1 ist p = (-E, 1); die konstante Verschiebung ändert Q und r nicht
        - E = None wird als 0 behandelt
    """
    if K < 1:
        raise ConfigError(f"Polynomial degree K must be >= 1, got {K}")
    E = 0.0 if E is None else float(E)
    return constant_polynomial([math.comb(K, k) * (-E) ** (K - k) for k in range(K + 1)])


# --- Gewichte ---

def state_weight(eps, E, K):
    """w_n = K^2 (eps_n - E)^{2K-2}."""
    return K ** 2 * (np.asarray(eps, dtype=float) - E) ** (2 * K - 2)


def pair_weight(eps_m, eps_n, E, K):
    """
    Geschlossene Form w_mn = sum_{s=-(K-1)}^{K-1} (K - |s|) (eps_n - E)^{K-1-s} (eps_m - E)^{K-1+s}.
    """
    xm = np.asarray(eps_m, dtype=float) - E
    xn = np.asarray(eps_n, dtype=float) - E
    total = np.zeros(np.broadcast(xm, xn).shape)
    for s in range(-(K - 1), K):
        total = total + (K - abs(s)) * xn ** (K - 1 - s) * xm ** (K - 1 + s)
    return total


def pair_weight_ratio(eps_m, eps_n, E, K):
    """Definition [P(eps_m) - P(eps_n)]^2 / (eps_m - eps_n)^2; Diagonale als Grenzwert w_n."""
    eps_m = np.asarray(eps_m, dtype=float)
    eps_n = np.asarray(eps_n, dtype=float)
    diff = eps_m - eps_n
    same = diff == 0.0
    safe = np.where(same, 1.0, diff)
    ratio = ((eps_m - E) ** K - (eps_n - E) ** K) ** 2 / safe ** 2
    return np.where(same, state_weight(eps_n, E, K), ratio)


# --- Lineares Gleichungssystem ---

def solve_linear_system(Q, r, solver="auto"):
    """
    Löst Q alpha = r mit Tikhonov-Verschiebung eps * tr(Q) / M.

    Args:
        Q: Symmetrische PSD-Matrix
        r: Rechte Seite
        solver (str): 'auto' (QR bis M = 512, sonst CG), 'qr' oder 'cg'

    Returns:
        dict: alpha, residual (relativ, ohne Verschiebung), iterations, condition
    """
    Q = linalg.as_sym_matrix(Q)
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r)):
        raise SolverError("Right-hand side has non-finite entries")
    M = r.size
    trace = float(np.trace(Q))
    shift = config.TIKHONOV_EPS * trace / M if trace > 0.0 else 0.0
    Qs = Q + shift * np.eye(M)
    if solver == "auto":
        solver = "qr" if M <= config.QR_MAX_ORDER else "cg"
    if solver == "qr":
        alpha, iterations = linalg.solve_qr(Qs, r), 0
    elif solver == "cg":
        alpha, iterations = linalg.solve_cg(Qs, r)
    else:
        raise ConfigError(f"Unknown solver '{solver}'")
    rnorm = np.linalg.norm(r)
    residual = float(np.linalg.norm(Q @ alpha - r) / rnorm) if rnorm > 0 else 0.0
    condition = None
    if M <= config.QR_MAX_ORDER:
        eig = np.linalg.eigvalsh(Qs)
        condition = float(eig[-1] / eig[0]) if eig[0] > 0 else float("inf")
    if residual > 1e-8:
        logger.warning("Linear solve residual above 1e-8", extra={"residual": residual, "solver": solver})
    return {"alpha": alpha, "residual": residual, "iterations": iterations,
            "condition": condition, "solver": solver}


# --- Pipelines ---

def solve_single(H, dH, ansatz, K, lam, solver="auto"):
    """
    Koeffizienten alpha^(K) bei einem lambda (Einzelweg).

    Args:
        H: H(lambda)
        dH: d H / d lambda
        ansatz (Ansatz): Treiberoperatoren
        K (int): Polynomgrad
        lam (float): Parameterwert

    Returns:
        tuple: (alpha, E, diagnostics); E ist None für K = 1

    Hinweis:
        - Schritte: Potenzen, Momente, Energieverschiebung, verschobene Potenzen
          (H - E)^l per Binomialentwicklung, Ableitung
          sum_l (H-E)^l dH (H-E)^{K-1-l}, Kommutatoren, Q und r, Lösung
    """
    if K < 1:
        raise ConfigError(f"Polynomial degree K must be >= 1, got {K}")
    started = time.perf_counter()
    n = H.nspins
    diagnostics = {"K": K, "lambda": float(lam)}
    if K == 1:
        E = None
        P, Dp = H, dH
    else:
        powers = _powers(H, K)
        prob = moments(H, K, lam, powers=powers)
        E = energy_shift(prob)
        diagnostics["omega_shape"] = omega_shape(prob)
        full = [pc.identity(n)] + powers
        shifted = [pc.identity(n)]
        for k in range(1, K + 1):
            shifted.append(pc.linear_combination(
                n, [(math.comb(k, j) * (-E) ** (k - j), full[j]) for j in range(k + 1)]))
        P = shifted[K]
        Dp = pc.zero(n)
        for l in range(K):
            Dp = pc.add(Dp, pc.multiply(pc.multiply(shifted[l], dH), shifted[K - 1 - l]))
    qf = quadratic_form_from_operators(P, Dp, ansatz, lam, {"K": K})
    sol = solve_linear_system(qf.Q, qf.r, solver)
    diagnostics.update({k: v for k, v in sol.items() if k != "alpha"})
    diagnostics["E"] = E
    diagnostics["seconds"] = time.perf_counter() - started
    return sol["alpha"], E, diagnostics


def solve_protocol(Hf, ansatz, K, grid=None, traces=None, solver="auto", traces_cached=False):
    """
    Protokolltabelle alpha^(K)(lambda) über den faktorisierten Sweep.

    Args:
        Hf (FactorizedHamiltonian): Hamiltonoperator in faktorisierter Form
        ansatz (Ansatz): Treiberoperatoren
        K (int): Polynomgrad
        grid: lambda-Gitter (Standard 100 Punkte auf [0, 1])
        traces (FactorizedTraces): Vorberechnete Spuren vom Grad >= K (z.B. aus dem Cache)
        traces_cached (bool): `traces` stammen aus dem Spur-Cache (nur für die Metadaten)

    Returns:
        ProtocolTable

    Hinweis:
        - Stufe 1 (Spuren) läuft nur, wenn `traces` fehlt
        - Numerische Fehler einzelner Gitterpunkte werden in `failures` vermerkt,
          die Tabelle wird trotzdem erstellt
    """
    if K < 1:
        raise ConfigError(f"Polynomial degree K must be >= 1, got {K}")
    grid = _check_grid(default_grid() if grid is None else grid)
    started = time.perf_counter()
    ft = traces
    if ft is None or ft.degree < K:
        ft = precompute_factorized(Hf, K, ansatz)
    t_stage1 = time.perf_counter()
    G, M = grid.size, ansatz.size
    alphas = np.full((G, M), np.nan)
    shifts = np.full(G, np.nan)
    residuals = np.full(G, np.nan)
    iterations = np.zeros(G, dtype=int)
    failures = []
    shape_flags = []
    for i, lam in enumerate(grid):
        try:
            E = None
            if K >= 2:
                prob = moments(ft, K, lam)
                E = energy_shift(prob)
                shape = omega_shape(prob)
                if shape != (1, 1):
                    shape_flags.append({"lambda": float(lam), "shape": shape})
            qf = assemble_at_lambda(ft, gs_polynomial(K, E), lam)
            sol = solve_linear_system(qf.Q, qf.r, solver)
        except NumericalError as e:
            logger.warning(f"Warning: protocol point failed at lambda={lam:.6g}: {e}")
            failures.append({"lambda": float(lam), "error": type(e).__name__, "message": str(e),
                             "diagnostics": getattr(e, "diagnostics", {})})
            continue
        alphas[i] = sol["alpha"]
        shifts[i] = np.nan if E is None else E
        residuals[i] = sol["residual"]
        iterations[i] = sol["iterations"]
    finished = time.perf_counter()
    metadata = {
        "K": K,
        "ansatz_id": ansatz.kind,
        "ansatz_labels": list(ansatz.labels),
        "omega_shape_flags": shape_flags,
        "seconds_stage1": t_stage1 - started,
        "seconds_stage2": finished - t_stage1,
        "stage1_cached": bool(traces_cached and ft is traces),
    }
    logger.info("Protocol computed", extra={"K": K, "points": G, "failures": len(failures),
                                            "seconds_stage2": finished - t_stage1})
    return ProtocolTable(grid, alphas, shifts, residuals, iterations, failures, metadata)


def alpha_at(table, lam):
    """alpha(lambda) durch lineare Interpolation zwischen gültigen Gitterpunkten."""
    valid = table.valid
    if not np.any(valid):
        raise NumericalError("Protocol table has no valid grid points")
    lams = table.lambdas[valid]
    alphas = table.alphas[valid]
    return np.array([np.interp(lam, lams, alphas[:, mu]) for mu in range(alphas.shape[1])])


# --- Speicherung ---

def save_protocol_table(table, stem, extra_metadata=None):
    """
    Schreibt <stem>.csv (lambda,E_shift,alpha_1..alpha_M,residual) und <stem>.json.

    Returns:
        tuple: (csv_path, json_path)
    """
    M = table.alphas.shape[1]
    frame = pd.DataFrame({"lambda": table.lambdas, "E_shift": table.energy_shifts})
    for mu in range(M):
        frame[f"alpha_{mu + 1}"] = table.alphas[:, mu]
    frame["residual"] = table.residuals
    csv_path, json_path = f"{stem}.csv", f"{stem}.json"
    save_csv(csv_path, frame)
    sidecar = {"schema_version": config.PROTOCOL_SCHEMA_VERSION}
    sidecar.update(table.metadata)
    sidecar.update(extra_metadata or {})
    sidecar["iterations"] = table.iterations.tolist()
    sidecar["failures"] = table.failures
    save_json(json_path, sidecar)
    logger.info(f"Protocol table written: {csv_path}")
    return csv_path, json_path


def load_protocol_table(stem):
    """
    Lädt eine Protokolltabelle aus <stem>.csv und <stem>.json.

    Raises:
        MissingArtifactError: Eine der beiden Dateien fehlt
    """
    csv_path, json_path = f"{stem}.csv", f"{stem}.json"
    meta = load_json(json_path)
    if meta is None or not os.path.exists(csv_path):
        raise MissingArtifactError(f"Protocol table not found: {csv_path}")
    if meta.get("schema_version") != config.PROTOCOL_SCHEMA_VERSION:
        raise ConfigError(f"Unsupported protocol schema version {meta.get('schema_version')!r}")
    frame = pd.read_csv(csv_path)
    alpha_cols = [c for c in frame.columns if c.startswith("alpha_")]
    iterations = np.asarray(meta.pop("iterations", [0] * len(frame)), dtype=int)
    failures = meta.pop("failures", [])
    meta.pop("schema_version", None)
    return ProtocolTable(
        frame["lambda"].to_numpy(dtype=float),
        frame[alpha_cols].to_numpy(dtype=float),
        frame["E_shift"].to_numpy(dtype=float),
        frame["residual"].to_numpy(dtype=float),
        iterations, failures, meta,
    )
