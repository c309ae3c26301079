# src/oracle_service.py
# Dichte Referenzrechnungen für kleine N: exakte Diagonalisierung, exakte AGP,
# Zeitentwicklung mit RK4, Fidelität und Gewinn sowie die Analysen
# (Geschwindigkeitsschranke, Partialwirkungen, Response-Funktion)
#
# Konvention: Platz 1 ist der linke Kronecker-Faktor, d.h. Platz i gehört zu
# Bit (N - i) des Basisindex

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.integrate import trapezoid

from . import config
from . import linalg
from .errors import DegeneracyError, NonConvergentIntegrationError, NumericalError, ResourceGuardError
from .gs_protocol_service import ProtocolTable, pair_weight, solve_single, state_weight
from .model_service import build_ansatz, ising_hamiltonian, linear_schedule, with_field
from .pauli_core import coefficient_norm
from .utils import save_csv, save_json

logger = logging.getLogger(__name__)

# Markierung für die Treiberwahl "exakte AGP" in evolve()
EXACT_AGP = "exact-agp"


# --- Matrixdarstellung ---

def _check_guard(nspins, max_spins):
    if nspins > max_spins:
        raise ResourceGuardError(
            f"N={nspins} exceeds the dense-matrix guard N<={max_spins}; "
            "use a smaller lattice or raise DENSE_MAX_SPINS")


def _reverse_bits(mask, nspins):
    return int(format(mask, f"0{nspins}b")[::-1], 2) if nspins else 0


def to_sparse(A, max_spins=config.DENSE_MAX_SPINS):
    """
    CSR-Matrix eines SparseOperator (2^N x 2^N, komplex).

    Hinweis:
        - Jeder Term wirkt auf |b> als i^{n_Y} (-1)^{popcount(b & z)} |b ^ x>
          mit den auf die Basisordnung gespiegelten Masken x, z
    """
    n = A.nspins
    _check_guard(n, max_spins)
    dim = 1 << n
    cols = np.arange(dim, dtype=np.int64)
    rows_all, cols_all, data_all = [], [], []
    for term, coeff in A.terms.items():
        flip = _reverse_bits(term.x, n)
        zbits = _reverse_bits(term.z, n)
        phase = 1j ** (bin(term.x & term.z).count("1") % 4)
        parity = np.zeros(dim, dtype=np.int64)
        bit = 0
        while zbits >> bit:
            if (zbits >> bit) & 1:
                parity ^= (cols >> bit) & 1
            bit += 1
        rows_all.append(cols ^ flip)
        cols_all.append(cols)
        data_all.append(coeff * phase * (1.0 - 2.0 * parity))
    if not data_all:
        return scipy.sparse.csr_matrix((dim, dim), dtype=complex)
    return scipy.sparse.csr_matrix(
        (np.concatenate(data_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(dim, dim), dtype=complex)


def to_dense(A, max_spins=config.DENSE_MAX_SPINS):
    """Dichte Matrix eines SparseOperator; ResourceGuardError für N > max_spins."""
    return to_sparse(A, max_spins).toarray()


def ansatz_matrices(ansatz, max_spins=config.DENSE_MAX_SPINS):
    return [to_dense(A, max_spins) for A in ansatz.operators]


# --- Exakte Diagonalisierung ---

@dataclass(frozen=True)
class DenseSystem:
    """
    H(lambda) als dichte Matrix mit aufsteigend sortierten Eigenwerten.

    Hinweis:
        - Eigenvektor-Phasen sind fixiert: größte Komponente reell positiv
    """
    lam: float
    H: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    dH: np.ndarray = None

    @property
    def dimension(self):
        return self.H.shape[0]

    @property
    def norm(self):
        return float(np.max(np.abs(self.eigenvalues)))


def fix_phases(vectors):
    """Multipliziert jede Spalte so, dass ihre betragsgrößte Komponente reell positiv ist."""
    idx = np.argmax(np.abs(vectors), axis=0)
    lead = vectors[idx, np.arange(vectors.shape[1])]
    return vectors * (np.abs(lead) / lead)[None, :]


def diagonalize(H, lam=0.0, dH=None):
    H = np.asarray(H)
    eigenvalues, eigenvectors = scipy.linalg.eigh(H)
    return DenseSystem(float(lam), H, eigenvalues, fix_phases(eigenvectors), dH)


def build_dense_system(Hf, lam, max_spins=config.DENSE_MAX_SPINS):
    """DenseSystem für H(lambda) eines FactorizedHamiltonian, inklusive dH/dlambda."""
    H = to_dense(Hf.eval(lam), max_spins)
    dH = to_dense(Hf.derivative(lam), max_spins)
    return diagonalize(H, lam, dH)


def _ground_state(H_sparse):
    """(Energie, Vektor) des Grundzustands; eigsh ab SPARSE_EIGSH_MIN_DIM."""
    if H_sparse.shape[0] <= config.SPARSE_EIGSH_MIN_DIM:
        vals, vecs = scipy.linalg.eigh(H_sparse.toarray(), subset_by_index=[0, 0])
    else:
        vals, vecs = scipy.sparse.linalg.eigsh(H_sparse, k=1, which="SA", tol=1e-12)
    return float(vals[0]), vecs[:, 0]


def exact_agp(ds, dH_dense=None, on_degenerate="raise"):
    """
    Exakte AGP Phi mit <n|Phi|m> = i <n|dH|m> / (eps_m - eps_n).

    Args:
        ds (DenseSystem): Diagonalisiertes System
        dH_dense: dH/dlambda als dichte Matrix (Standard: ds.dH)
        on_degenerate (str): 'raise' oder 'zero' für entartete Paare mit Kopplung

    Returns:
        np.ndarray: Hermitesche Matrix in der Rechenbasis, Diagonale im Eigenbasis null

    Raises:
        DegeneracyError: Entartetes Paar (|gap| <= 1e-10 ||H||) mit |<n|dH|m>| > 1e-10 ||dH||

    Hinweis:
        - Entartete Paare ohne Kopplung werden stets auf null gesetzt
    """
    dH = ds.dH if dH_dense is None else np.asarray(dH_dense)
    if dH is None:
        raise ValueError("exact_agp needs dH/dlambda")
    U = ds.eigenvectors
    eps = ds.eigenvalues
    dH_eig = U.conj().T @ dH @ U
    gaps = eps[None, :] - eps[:, None]
    degenerate = np.abs(gaps) <= config.DEGENERACY_TOL * max(ds.norm, np.finfo(float).tiny)
    off = degenerate & ~np.eye(eps.size, dtype=bool)
    if np.any(off):
        d_norm = max(np.linalg.norm(dH_eig, ord=np.inf), np.finfo(float).tiny)
        coupled = off & (np.abs(dH_eig) > config.DEGENERACY_TOL * d_norm)
        if np.any(coupled):
            n, m = (int(v) for v in np.argwhere(coupled)[0])
            if on_degenerate == "raise":
                raise DegeneracyError(
                    f"Degenerate eigenpair ({n}, {m}) at lambda={ds.lam:.6g} is coupled by dH", (n, m))
            logger.debug("Coupled degenerate pair set to zero", extra={"pair": (n, m), "lambda": ds.lam})
    safe = np.where(degenerate, 1.0, gaps)
    phi_eig = np.where(degenerate, 0.0, 1j * dH_eig / safe)
    return U @ phi_eig @ U.conj().T


def to_eigenbasis(ds, M):
    U = ds.eigenvectors
    return U.conj().T @ M @ U


# --- Wirkung im Eigenbasis ---

def action_eigenbasis(ds, poly, V_dense, Phi_dense):
    """sum_{nm} [P(eps_m) - P(eps_n)]^2 |[V - Phi]_{mn}|^2 (hbar = 1)."""
    P = poly(ds.eigenvalues, ds.lam)
    W = to_eigenbasis(ds, V_dense - Phi_dense)
    diff = P[None, :] - P[:, None]
    return float(np.sum(diff ** 2 * np.abs(W) ** 2))


def quadratic_form_dense(H, dH, coeffs, ansatz_dense):
    """
    Q und r direkt aus den Definitionen mit dichten Matrizen (2^-N-normierte Spuren).

    Args:
        H, dH: Dichte Matrizen
        coeffs: (p_0, ..., p_K) des Polynoms P
        ansatz_dense (list): Dichte Matrizen A_mu

    Returns:
        tuple: (Q, r)

    Hinweis:
        - Für p = (0, 1) ist das die konventionelle Wirkung
    """
    H = np.asarray(H)
    dim = H.shape[0]
    ident = np.eye(dim, dtype=complex)
    powers = [ident]
    for _ in range(1, len(coeffs)):
        powers.append(powers[-1] @ H)
    P = sum(c * Hk for c, Hk in zip(coeffs, powers))
    Dp = np.zeros_like(ident)
    for k in range(1, len(coeffs)):
        for l in range(k):
            Dp = Dp + coeffs[k] * powers[l] @ dH @ powers[k - 1 - l]
    C = [P @ A - A @ P for A in ansatz_dense]
    M = len(ansatz_dense)
    Q = np.zeros((M, M))
    r = np.zeros(M)
    for mu in range(M):
        for nu in range(M):
            Q[mu, nu] = (-np.trace(C[mu] @ C[nu]) / dim).real
        r[mu] = (1j * np.trace(Dp @ C[mu]) / dim).real
    return Q, r


# --- Zeitentwicklung ---

@dataclass
class EvolutionResult:
    """
    Trajektorie psi(t) an den Speicherpunkten mit Grundzustandsfidelität F(t).

    Hinweis:
        - settings enthält t_d, Treiberbezeichnung und RK4-Parameter
    """
    times: np.ndarray
    lambdas: np.ndarray
    states: np.ndarray
    fidelities: np.ndarray
    settings: dict = field(default_factory=dict)

    @property
    def final_fidelity(self):
        return float(self.fidelities[-1])

    @property
    def norm_drift(self):
        return float(np.max(np.abs(np.linalg.norm(self.states, axis=1) - 1.0)))


def driving_label(driving):
    if driving is None:
        return "bare"
    if isinstance(driving, str) and driving == EXACT_AGP:
        return EXACT_AGP
    return f"K={driving.K}"


def _alpha_interpolator(table):
    valid = table.valid
    lams = table.lambdas[valid]
    alphas = table.alphas[valid]
    if lams.size == 0:
        raise NumericalError("Protocol table has no valid grid points")
    if lams.size == 1:
        return lambda lam: alphas[0]

    def alpha(lam):
        i = int(np.clip(np.searchsorted(lams, lam, side="right") - 1, 0, lams.size - 2))
        w = (lam - lams[i]) / (lams[i + 1] - lams[i])
        w = min(max(w, 0.0), 1.0)
        return (1.0 - w) * alphas[i] + w * alphas[i + 1]

    return alpha


class _Generator:
    """Wendet t_d H(lambda) + dlambda/ds V(lambda) auf einen Zustand an (sparse)."""

    def __init__(self, Hf, driving, t_d, schedule, ansatz, max_spins):
        self.Hf = Hf
        self.t_d = float(t_d)
        self.schedule = schedule
        self.F = [to_sparse(F, max_spins) for F in Hf.operators]
        self.dim = self.F[0].shape[0]
        self.alpha = None
        self.stacked = None
        self.agp = None
        self.offset = None
        if isinstance(driving, ProtocolTable):
            if ansatz is None:
                raise ValueError("Driving with a protocol table needs its ansatz")
            ansatz_ops = ansatz.operators
            if driving.alphas.shape[1] != len(ansatz_ops):
                raise ValueError("Protocol table and ansatz sizes differ")
            self.stacked = scipy.sparse.vstack([to_sparse(A, max_spins) for A in ansatz_ops]).tocsr()
            self.M = len(ansatz_ops)
            self.alpha = _alpha_interpolator(driving)
            self.v_norms = np.array([coefficient_norm(A) for A in ansatz_ops])
        elif driving == EXACT_AGP:
            self.agp = lru_cache(maxsize=4)(self._agp_at)
        elif driving is not None:
            raise ValueError(f"Unknown driving {driving!r}")

    def _agp_at(self, lam):
        return exact_agp(build_dense_system(self.Hf, lam), on_degenerate="zero")

    def H_matrix(self, lam):
        coeffs = self.Hf.coefficients(lam)
        out = coeffs[0] * self.F[0]
        for c, F in zip(coeffs[1:], self.F[1:]):
            out = out + c * F
        return out.tocsr()

    def apply_H(self, lam, psi):
        coeffs = self.Hf.coefficients(lam)
        out = coeffs[0] * (self.F[0] @ psi)
        for c, F in zip(coeffs[1:], self.F[1:]):
            out = out + c * (F @ psi)
        return out

    def apply_V(self, lam, psi):
        if self.alpha is not None:
            blocks = (self.stacked @ psi).reshape(self.M, self.dim)
            return self.alpha(lam) @ blocks
        if self.agp is not None:
            return self.agp(float(lam)) @ psi
        return None

    def __call__(self, s, psi):
        lam = self.schedule.value(s)
        out = self.t_d * self.apply_H(lam, psi)
        if self.offset is not None:
            out = out - (self.t_d * self.offset(s)) * psi
        if self.alpha is not None or self.agp is not None:
            out = out + self.schedule.rate(s) * self.apply_V(lam, psi)
        return -1j * out

    def norm_bound(self, probe=11):
        """Obere Schranke von ||Generator|| auf Probepunkten in s."""
        f_norms = [coefficient_norm(F) for F in self.Hf.operators]
        best = 0.0
        for s in np.linspace(0.0, 1.0, probe):
            lam = self.schedule.value(s)
            h = self.t_d * float(np.abs(self.Hf.coefficients(lam)) @ f_norms)
            v = 0.0
            if self.alpha is not None:
                v = float(np.abs(self.alpha(lam)) @ self.v_norms)
            elif self.agp is not None:
                v = float(np.linalg.norm(self.agp(float(lam)), 2))
            best = max(best, h + abs(self.schedule.rate(s)) * v)
        return best


def _rk4(gen, psi0, steps, store_every):
    h = 1.0 / steps
    psi = psi0.copy()
    stored = [psi.copy()]
    for k in range(steps):
        s = k * h
        k1 = gen(s, psi)
        k2 = gen(s + 0.5 * h, psi + 0.5 * h * k1)
        k3 = gen(s + 0.5 * h, psi + 0.5 * h * k2)
        k4 = gen(s + h, psi + h * k3)
        psi = psi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if (k + 1) % store_every == 0:
            stored.append(psi.copy())
    return np.array(stored)


def evolve(Hf, driving, t_d, ansatz=None, schedule=None, store_points=config.STORE_POINTS,
           max_spins=config.DENSE_MAX_SPINS):
    """
    Löst i dpsi/dt = [H(lambda_t) + dlambda/dt V(lambda_t)] psi mit psi(0) = Grundzustand von H(0).

    Args:
        Hf (FactorizedHamiltonian): Hamiltonoperator
        driving: None (ohne CD), ProtocolTable (alpha linear interpoliert) oder EXACT_AGP
        t_d (float): Protokolldauer
        ansatz (Ansatz): Treiberoperatoren der Tabelle
        schedule (Schedule): lambda(s) mit s = t / t_d (Standard linear)
        store_points (int): Anzahl gespeicherter Zeitpunkte

    Returns:
        EvolutionResult

    Raises:
        ResourceGuardError: N über dem Speicherschutz
        NonConvergentIntegrationError: Keine stabile Endfidelität nach allen Verdopplungen

    Hinweis:
        - Integration in s mit festem RK4-Schritt; die Schrittzahl startet bei
          max(200, ||Generator|| / 0.1) und wird verdoppelt, bis sich die
          Endfidelität um <= 1e-6 ändert und die Normabweichung <= 1e-8 ist
        - Die exakte AGP setzt gekoppelte entartete Paare auf null (Grundzustand nicht betroffen)
    """
    if t_d <= 0.0:
        raise ValueError(f"t_d must be positive, got {t_d}")
    schedule = schedule or linear_schedule()
    started = time.perf_counter()
    gen = _Generator(Hf, driving, t_d, schedule, ansatz, max_spins)
    intervals = store_points - 1
    s_store = np.linspace(0.0, 1.0, store_points)
    lam_store = np.array([schedule.value(s) for s in s_store])
    pairs = [_ground_state(gen.H_matrix(lam)) for lam in lam_store]
    ground = np.array([vec for _, vec in pairs])
    energies = np.array([energy for energy, _ in pairs])
    # nur globale Phase: Grundzustandsenergie abziehen
    gen.offset = lambda s: float(np.interp(s, s_store, energies))
    psi0 = ground[0].astype(complex)

    steps = max(config.RK4_MIN_STEPS, math.ceil(gen.norm_bound() / config.RK4_MAX_STEP_NORM))
    steps = intervals * math.ceil(steps / intervals)

    def run(n):
        states = _rk4(gen, psi0, n, n // intervals)
        fid = np.abs(np.sum(ground.conj() * states, axis=1)) ** 2
        return states, fid

    states, fid = run(steps)
    for doubling in range(1, config.RK4_MAX_DOUBLINGS + 1):
        steps *= 2
        new_states, new_fid = run(steps)
        drift = float(np.max(np.abs(np.linalg.norm(new_states, axis=1) - 1.0)))
        change = abs(new_fid[-1] - fid[-1])
        states, fid = new_states, new_fid
        if change <= config.FIDELITY_CONVERGENCE_TOL and drift <= config.NORM_TOL:
            break
        logger.debug("Doubling RK4 steps", extra={"steps": steps, "change": change, "drift": drift})
    else:
        raise NonConvergentIntegrationError(
            f"RK4 did not converge after {config.RK4_MAX_DOUBLINGS} doublings "
            f"(steps={steps}, change={change:.3g}, drift={drift:.3g})")
    settings = {
        "t_d": float(t_d),
        "driving": driving_label(driving),
        "steps": steps,
        "doublings": doubling,
        "fidelity_change": change,
        "linear_schedule": bool(schedule.is_linear),
        "seconds": time.perf_counter() - started,
    }
    logger.debug("Evolution finished", extra=settings)
    return EvolutionResult(s_store * t_d, lam_store, states, fid, settings)


def fidelity_gain(final_fidelities, baseline=1):
    """
    G_f = F_f / F_f(baseline) für jede Bezeichnung; +inf bei F_f(baseline) = 0.

    Args:
        final_fidelities (dict): Bezeichnung (z.B. K) -> F_f
        baseline: Schlüssel der konventionellen Methode (K = 1)
    """
    base = final_fidelities[baseline]
    gains = {}
    for key, value in final_fidelities.items():
        if key == baseline:
            gains[key] = 1.0
        elif base == 0.0:
            gains[key] = math.inf
        else:
            gains[key] = float(value) / float(base)
    return gains


def save_evolution(result, stem, extra_metadata=None):
    """
    Schreibt <stem>.csv (t,lambda,fidelity) und <stem>.json (F_f, settings, ...).

    Returns:
        tuple: (csv_path, json_path)
    """
    frame = pd.DataFrame({"t": result.times, "lambda": result.lambdas, "fidelity": result.fidelities})
    csv_path, json_path = f"{stem}.csv", f"{stem}.json"
    save_csv(csv_path, frame)
    summary = {"schema_version": config.EVOLUTION_SCHEMA_VERSION,
               "F_f": result.final_fidelity,
               "norm_drift": result.norm_drift,
               "settings": result.settings}
    summary.update(extra_metadata or {})
    save_json(json_path, summary)
    return csv_path, json_path


# --- Analysen ---

def driving_matrix(ansatz_dense, alpha):
    return sum(a * A for a, A in zip(alpha, ansatz_dense))


def speed_limit_bound(Hf, ansatz, table=None, points=401, max_spins=config.DENSE_MAX_SPINS):
    """
    Rechte Seite der Geschwindigkeitsschranke: int_0^1 sqrt(sum_{n != 1} |[V - Phi]_{1n}|^2) dlambda.

    Args:
        Hf: Hamiltonoperator
        ansatz (Ansatz): Treiberoperatoren der Tabelle (ignoriert ohne Tabelle)
        table (ProtocolTable): Treiberkoeffizienten; None für V = 0
        points (int): Quadraturpunkte in lambda

    Hinweis:
        - |dlambda/dt| dt = dlambda für monotone Fahrpläne, der Wert hängt also
          weder von t_d noch vom Fahrplan ab
    """
    lams = np.linspace(0.0, 1.0, points)
    dense_ops = ansatz_matrices(ansatz, max_spins) if table is not None else None
    alpha = _alpha_interpolator(table) if table is not None else None
    values = np.zeros(points)
    for i, lam in enumerate(lams):
        ds = build_dense_system(Hf, lam, max_spins)
        Phi = exact_agp(ds, on_degenerate="zero")
        V = driving_matrix(dense_ops, alpha(lam)) if table is not None else np.zeros_like(Phi)
        W = to_eigenbasis(ds, V - Phi)
        values[i] = math.sqrt(float(np.sum(np.abs(W[0, 1:]) ** 2)))
    return float(trapezoid(values, lams))


def speed_limit_lhs(result):
    """arccos |c_1(t_d)| = arccos sqrt(F_f)."""
    return float(math.acos(min(1.0, math.sqrt(max(result.final_fidelity, 0.0)))))


def _weight_ties(w_m, w_n):
    return np.isclose(w_m, w_n, rtol=1e-12, atol=0.0)


def partial_action_weights(eps, E, K, n):
    """
    Zeile n der Gewichte von T^(K,n): (eps_n - eps_m)^2 chi_mn w_mn / w_n für w_m <= w_n.

    Returns:
        np.ndarray: Länge D; null für ausgeschlossene m oder w_n = 0
    """
    eps = np.asarray(eps, dtype=float)
    w = state_weight(eps, E, K)
    row = np.zeros(eps.size)
    if w[n] == 0.0:
        return row
    ties = _weight_ties(w, w[n])
    included = (w <= w[n]) | ties
    chi = np.where(ties, 0.5, 1.0)
    wmn = pair_weight(eps, eps[n], E, K)
    row[included] = ((eps[n] - eps) ** 2 * chi * wmn / w[n])[included]
    return row


def partial_actions(ds, K, E, V_dense, Phi_dense):
    """
    Partialwirkungen T^(K,n) für alle Eigenzustände n.

    Hinweis:
        - 2 sum_n w_n T^(K,n) ergibt action_eigenbasis mit P(x) = (x - E)^K
    """
    W2 = np.abs(to_eigenbasis(ds, V_dense - Phi_dense)) ** 2
    eps = ds.eigenvalues
    return np.array([partial_action_weights(eps, E, K, n) @ W2[n] for n in range(eps.size)])


def ideal_action(ds, V_dense, Phi_dense):
    """S^(inf)[V] = 2 sum_{n != 1} |[V - Phi]_{1n}|^2."""
    W = to_eigenbasis(ds, V_dense - Phi_dense)
    return float(2.0 * np.sum(np.abs(W[0, 1:]) ** 2))


def ideal_weights(dimension):
    c = np.zeros((dimension, dimension))
    c[0, 1:] = 1.0
    c[1:, 0] = 1.0
    return c


def minimize_weighted_deviation(ds, ansatz_dense, Phi_dense, weights):
    """
    Minimierer von sum_{mn} c_mn |[V(alpha) - Phi]_{mn}|^2 (Eigenbasis).

    Args:
        weights: Nichtnegative D x D Matrix c (z.B. ideal_weights)

    Returns:
        np.ndarray: alpha
    """
    c = np.asarray(weights, dtype=float)
    a = [to_eigenbasis(ds, A) for A in ansatz_dense]
    phi = to_eigenbasis(ds, Phi_dense)
    M = len(a)
    G = np.zeros((M, M))
    b = np.zeros(M)
    for mu in range(M):
        weighted = c * a[mu].conj()
        b[mu] = float(np.sum(weighted * phi).real)
        for nu in range(mu + 1):
            G[mu, nu] = G[nu, mu] = float(np.sum(weighted * a[nu]).real)
    return linalg.solve_qr(G, b)


def partial_action_minimizers(ds, ansatz_dense, Phi_dense, K, E):
    """alpha^(K,n) für alle n als Array D x M (NaN-Zeilen für w_n = 0)."""
    rows = []
    for n in range(ds.dimension):
        row = partial_action_weights(ds.eigenvalues, E, K, n)
        if not np.any(row):
            rows.append(np.full(len(ansatz_dense), np.nan))
            continue
        c = np.zeros((ds.dimension, ds.dimension))
        c[n] = row
        rows.append(minimize_weighted_deviation(ds, ansatz_dense, Phi_dense, c))
    return np.array(rows)


def eigen_ordering_check(Hf, grid, max_spins=config.DENSE_MAX_SPINS):
    """
    Markiert Intervalle, in denen |<phi_1(lambda_i)|phi_1(lambda_{i+1})>| < 0.5.

    Returns:
        list: [{"lambda_start", "lambda_end", "overlap"}, ...]
    """
    grid = np.asarray(grid, dtype=float)
    states = [_ground_state(to_sparse(Hf.eval(lam), max_spins))[1] for lam in grid]
    flagged = []
    for i in range(grid.size - 1):
        overlap = float(abs(np.vdot(states[i], states[i + 1])))
        if overlap < config.OVERLAP_CONTINUITY_MIN:
            flagged.append({"lambda_start": float(grid[i]), "lambda_end": float(grid[i + 1]),
                            "overlap": overlap})
    if flagged:
        logger.warning(f"Warning: ground-state overlap dropped below {config.OVERLAP_CONTINUITY_MIN}",
                       extra={"intervals": len(flagged)})
    return flagged


def response_function(instance, ansatz_kind, K, lam=config.ANALYSIS_LAMBDA, site=1,
                      delta=config.RESPONSE_DELTA, solver="auto"):
    """
    R_mu = d ln|alpha_mu| / d ln h_site als zentrale Differenz.

    Args:
        instance (IsingInstance): Ausgangsinstanz
        ansatz_kind (str): 'one-body' oder 'two-body'
        K (int): Polynomgrad
        lam (float): Parameterwert
        site (int): Gestörter Platz
        delta (float): Relative Schrittweite, d ln h = ln(1 + delta)

    Returns:
        np.ndarray: R_mu; null, wo alpha_mu auf beiden Seiten verschwindet

    Hinweis:
        - h_site wird mit exp(+- d ln h / 2) skaliert
    """
    step = math.log1p(delta)
    h0 = instance.h[site - 1]
    alphas = []
    for sign in (1.0, -1.0):
        inst = with_field(instance, site, h0 * math.exp(sign * step / 2.0))
        Hf = ising_hamiltonian(inst)
        ansatz = build_ansatz(ansatz_kind, inst)
        alpha, _, _ = solve_single(Hf.eval(lam), Hf.derivative(lam), ansatz, K, lam, solver)
        alphas.append(np.abs(alpha))
    up, down = alphas
    both_zero = (up == 0.0) & (down == 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        R = (np.log(np.where(both_zero, 1.0, up)) - np.log(np.where(both_zero, 1.0, down))) / step
    return np.where(both_zero, 0.0, R)


def coefficient_deviation(Hf, ansatz, K, lam=config.ANALYSIS_LAMBDA, solver="auto",
                          max_spins=config.DENSE_MAX_SPINS):
    """
    ||alpha^(K) - alpha^(inf)||^2 bei festem lambda.

    Returns:
        dict: deviation, alpha_K, alpha_ideal, E
    """
    ds = build_dense_system(Hf, lam, max_spins)
    Phi = exact_agp(ds, on_degenerate="zero")
    dense_ops = ansatz_matrices(ansatz, max_spins)
    alpha_ideal = minimize_weighted_deviation(ds, dense_ops, Phi, ideal_weights(ds.dimension))
    alpha_k, E, _ = solve_single(Hf.eval(lam), Hf.derivative(lam), ansatz, K, lam, solver)
    return {"deviation": float(np.sum((alpha_k - alpha_ideal) ** 2)),
            "alpha_K": alpha_k, "alpha_ideal": alpha_ideal, "E": E}
