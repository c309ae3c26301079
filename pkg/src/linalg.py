# src/linalg.py
# Dichte symmetrische Gleichungslöser und eindimensionale Minimierung
# Gemeinsame Grundlage für die Protokoll-Pipelines (Q alpha = r, Energieverschiebung)

import logging

import numpy as np
import scipy.linalg

from . import config
from .errors import OptimizationFailedError, SolverError

logger = logging.getLogger(__name__)


def as_sym_matrix(Q, tol=1e-10):
    """
    Prüft eine Matrix auf Symmetrie und liefert sie als float-Array.

    Args:
        Q: Quadratische Matrix
        tol (float): Relative Symmetrietoleranz

    Returns:
        np.ndarray: Symmetrisierte Matrix (Q + Q^T) / 2

    Raises:
        SolverError: Nicht quadratisch, nicht endlich oder nicht symmetrisch
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise SolverError(f"Expected a square matrix, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise SolverError("Matrix has non-finite entries")
    scale = max(np.max(np.abs(Q)), np.finfo(float).tiny) if Q.size else 1.0
    if Q.size and np.max(np.abs(Q - Q.T)) > tol * scale:
        raise SolverError("Matrix is not symmetric within tolerance")
    return 0.5 * (Q + Q.T)


def solve_qr(Q, r, rank_tol=config.QR_RANK_TOL):
    """
    Kleinste-Quadrate-Lösung von Q alpha = r über Householder-QR mit Spaltenpivotisierung.

    Args:
        Q: Symmetrische Matrix der Ordnung M
        r: Vektor der Länge M
        rank_tol (float): Relative Schranke für den numerischen Rang (|R_ii| / |R_00|)

    Returns:
        np.ndarray: Lösung alpha

    Hinweis:
        - Bei Rangdefekt wird die Basislösung auf den ersten `rank` Pivotspalten
          zurückgegeben; für konsistentes r ist das Residuum dann ~0
        - Deterministisch (LAPACK geqp3)
    """
    Q = np.asarray(Q, dtype=float)
    r = np.asarray(r, dtype=float)
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(r))):
        raise SolverError("Non-finite input to solve_qr")
    m = Q.shape[0]
    if m == 0:
        return np.zeros(0)
    q_mat, r_mat, perm = scipy.linalg.qr(Q, pivoting=True)
    diag = np.abs(np.diag(r_mat))
    if diag[0] == 0.0:
        return np.zeros(m)
    rank = int(np.sum(diag > rank_tol * diag[0]))
    rhs = q_mat.T @ r
    y = scipy.linalg.solve_triangular(r_mat[:rank, :rank], rhs[:rank])
    alpha = np.zeros(m)
    alpha[perm[:rank]] = y
    return alpha


def solve_cg(Q, r, tol=config.CG_TOL, max_iter=None):
    """
    Konjugierte Gradienten für symmetrisch positiv (semi)definites Q.

    Args:
        Q: Matrix der Ordnung M
        r: Rechte Seite
        tol (float): Abbruch bei ||Q alpha - r|| <= tol * ||r||
        max_iter (int): Standard 50 * M

    Returns:
        tuple: (alpha, iterations)

    Raises:
        SolverError: NaN/Inf während der Iteration
    """
    Q = np.asarray(Q, dtype=float)
    r = np.asarray(r, dtype=float)
    m = r.shape[0]
    if max_iter is None:
        max_iter = config.CG_MAX_ITER_FACTOR * max(m, 1)
    x = np.zeros(m)
    rnorm = np.linalg.norm(r)
    if rnorm == 0.0:
        return x, 0
    res = r.copy()
    p = res.copy()
    rs_old = res @ res
    iterations = 0
    while iterations < max_iter:
        Ap = Q @ p
        denom = p @ Ap
        if denom <= 0.0:
            # Richtung ohne Krümmung (PSD-Nullraum)
            break
        step = rs_old / denom
        x += step * p
        res -= step * Ap
        iterations += 1
        rs_new = res @ res
        if not np.isfinite(rs_new):
            raise SolverError(f"CG diverged after {iterations} iterations")
        if np.sqrt(rs_new) <= tol * rnorm:
            break
        p = res + (rs_new / rs_old) * p
        rs_old = rs_new
    if iterations >= max_iter:
        logger.warning("CG reached the iteration limit", extra={"iterations": iterations})
    return x, iterations


def _expand_bracket(df, a, b, expansions):
    for _ in range(expansions + 1):
        if df(a) < 0.0 < df(b):
            return a, b
        center = 0.5 * (a + b)
        half = b - center
        a, b = center - 2.0 * half, center + 2.0 * half
    raise OptimizationFailedError(
        "No sign change of the derivative found after bracket expansion",
        {"bracket": (a, b)},
    )


def minimize_scalar(f, df, init, bracket, d2f=None, tol=config.NEWTON_TOL,
                    max_iter=config.NEWTON_MAX_ITER, expansions=config.BRACKET_EXPANSIONS):
    """
    Lokales Minimum einer glatten Funktion: Newton auf df mit Bisektions-Absicherung.

    Args:
        f: Zielfunktion (nur für Diagnosen verwendet)
        df: Erste Ableitung
        init (float): Startwert
        bracket (tuple): Intervall (a, b) mit df(a) < 0 < df(b); wird bei Bedarf
            bis zu `expansions` Mal um den Mittelpunkt verdoppelt
        d2f: Zweite Ableitung; sonst zentraler Differenzenquotient von df

    Returns:
        float: Minimierer

    Raises:
        OptimizationFailedError: Kein Vorzeichenwechsel nach Intervallerweiterung

    Hinweis:
        - Bei mehreren Minima im Intervall bestimmt der Startwert das Becken:
          Newton bleibt im Becken des Startwerts, solange die Schritte im
          Intervall bleiben; sonst übernimmt die Bisektion
    """
    a, b = _expand_bracket(df, float(bracket[0]), float(bracket[1]), expansions)
    x = min(max(float(init), a), b)
    for _ in range(max_iter):
        g = df(x)
        if g == 0.0:
            return x
        if g < 0.0:
            a = x
        else:
            b = x
        if d2f is not None:
            h = d2f(x)
        else:
            eps = 1e-6 * (1.0 + abs(x))
            h = (df(x + eps) - df(x - eps)) / (2.0 * eps)
        x_new = x - g / h if h > 0.0 else None
        if x_new is None or not (a < x_new < b):
            x_new = 0.5 * (a + b)
        if abs(x_new - x) <= tol * (1.0 + abs(x)):
            return x_new
        x = x_new
    # reine Bisektion, falls Newton nicht konvergiert ist
    while b - a > tol * (1.0 + abs(x)):
        x = 0.5 * (a + b)
        if df(x) < 0.0:
            a = x
        else:
            b = x
    logger.debug("minimize_scalar finished by bisection", extra={"x": x, "f": float(f(x))})
    return 0.5 * (a + b)
