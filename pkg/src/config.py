# src/config.py
# Konfigurationsdatei für das cdweight Toolkit (gewichtete variationelle CD-Protokolle)
# Enthält alle globalen Einstellungen, Pfade und numerischen Toleranzen
# Zentrale Stelle für alle Systemparameter und Verzeichnispfade

import os

# --- Projektstruktur und Verzeichnispfade ---
# __file__ ist der Pfad zu config.py (z.B. .../cdweight/src/config.py)
# os.path.dirname(os.path.dirname(__file__)) ist der Pfad zum Projektstamm
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# --- Verzeichniskonfiguration ---
# Die Umgebungsvariable überschreibt das Standard-Ausgabeverzeichnis
OUTPUT_ROOT_ENV = "CDWEIGHT_OUTPUT_ROOT"  # Name der Umgebungsvariable für das Ausgabeverzeichnis
DATA_DIR = os.environ.get(OUTPUT_ROOT_ENV, os.path.join(PROJECT_ROOT, "data"))  # Hauptdatenverzeichnis
INSTANCES_SUBDIR = "instances"  # Ising-Instanzen (JSON-Dateien pro Instanz)
PROTOCOLS_SUBDIR = "protocols"  # Protokolltabellen (CSV + JSON pro Instanz und K)
CACHE_SUBDIR = "cache"  # Spurencache der faktorisierten Sweeps (.npz)
RESULTS_SUBDIR = "results"  # Zeitentwicklungen, Zusammenfassungen, Benchmarks

# --- Schema-Versionen ---
# Jede geschriebene Datei trägt ihre Schema-Version
INSTANCE_SCHEMA_VERSION = 1
PROTOCOL_SCHEMA_VERSION = 1
EVOLUTION_SCHEMA_VERSION = 1
TRACES_CACHE_VERSION = 1
ENSEMBLE_SCHEMA_VERSION = 1

# --- Pauli-Algebra ---
PRUNE_TOL = 1e-12  # Koeffizienten mit |z| <= PRUNE_TOL werden nach jeder Operation entfernt
HERMITICITY_TOL = 1e-9  # Relative Toleranz für imaginäre Reste in Q und r

# --- Modell ---
GAMMA_SHAPE = 4.0  # Gamma-Verteilung mit Mittelwert 1.0 ...
GAMMA_SCALE = 0.25  # ... und Standardabweichung 0.5
ISING_CLASSES = ("ferro", "antiferro", "spin-glass")
ANSATZ_KINDS = ("one-body", "two-body")

# --- Lineare Algebra ---
TIKHONOV_EPS = 1e-12  # Regularisierung eps * tr(Q) / M
QR_MAX_ORDER = 512  # Bis zu dieser Ordnung QR, darüber CG
CG_TOL = 1e-10  # Relative Residuen-Toleranz für CG
CG_MAX_ITER_FACTOR = 50  # Maximale CG-Iterationen = 50 * M
QR_RANK_TOL = 1e-13  # Relative Schranke für numerischen Rang in der QR-Zerlegung

# --- Energieverschiebung ---
NEWTON_MAX_ITER = 100  # Obergrenze für Newton-Schritte
NEWTON_TOL = 1e-10  # Konvergenz |dE| <= NEWTON_TOL * (1 + |E|)
BRACKET_WIDTH_SIGMAS = 10.0  # Suchfenster omega_1 +- 10 * sigma
BRACKET_EXPANSIONS = 8  # Maximal 8 Verdopplungen des Suchfensters
BRACKET_SCAN_POINTS = 2001  # Stützstellen für den Vorzeichen-Scan von dOmega/dE

# --- Protokolltabellen ---
DEFAULT_GRID_POINTS = 100  # lambda-Gitter mit 100 Punkten auf [0, 1]
DEFAULT_K_VALUES = (1, 2, 3, 4, 5)

# --- Orakel (dichte Matrizen) ---
DENSE_MAX_SPINS = 14  # Speicherschutz für dichte Matrizen (2^14 Zustände)
DEGENERACY_TOL = 1e-10  # Entartungsschwelle relativ zu ||H|| bzw. ||dH||
RK4_MAX_STEP_NORM = 0.1  # Startschrittweite: h * ||Generator|| <= 0.1
RK4_MIN_STEPS = 200  # Mindestanzahl RK4-Schritte
RK4_MAX_DOUBLINGS = 10  # Maximale Anzahl an Schrittverdopplungen
FIDELITY_CONVERGENCE_TOL = 1e-6  # Endfidelität stabil unter Verdopplung
NORM_TOL = 1e-8  # Erlaubte Normabweichung des Zustands
STORE_POINTS = 101  # Gespeicherte Zeitpunkte je Trajektorie
OVERLAP_CONTINUITY_MIN = 0.5  # Grundzustandsüberlapp zwischen Nachbarpunkten
SPARSE_EIGSH_MIN_DIM = 256  # Ab dieser Dimension Grundzustand per eigsh statt eigh
DEFAULT_TD_VALUES = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0)

# --- Analysen ---
RESPONSE_DELTA = 0.02  # delta ln h_1 = ln(1.02)
ANALYSIS_LAMBDA = 0.25  # lambda für Partialwirkungen und Response-Funktion

# --- Benchmark ---
BENCH_LADDERS = {2: (64, 128, 256, 512), 3: (16, 32, 64, 128)}
BENCH_SLOPE_BAND = 0.7  # PASS wenn Steigung in [K - 0.7, K + 0.7]


def data_subdir(name, root=None):
    """Pfad eines Unterverzeichnisses im (ggf. überschriebenen) Datenverzeichnis."""
    return os.path.join(root or DATA_DIR, name)
