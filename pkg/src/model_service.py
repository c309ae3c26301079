# src/model_service.py
# Modellverwaltung: faktorisierte Hamiltonoperatoren, Treiber-Ansätze und zufällige Ising-Instanzen
# Enthält Funktionen zur Erstellung, Speicherung und zum Laden von Instanzen

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial import Polynomial

from . import config
from . import pauli_core as pc
from .errors import ConfigError, MissingArtifactError
from .utils import canonical_hash, load_json, save_json

logger = logging.getLogger(__name__)

# Vorzeichen vor sum J_ij Z_i Z_j je Instanzklasse
COUPLING_SIGN = {"ferro": -1.0, "antiferro": 1.0, "spin-glass": 1.0}


@dataclass(frozen=True)
class FactorizedHamiltonian:
    """
    H(lambda) = sum_gamma f_gamma(lambda) F_gamma.

    Hinweis:
        - Die Koeffizientenfunktionen sind Polynome in lambda (numpy Polynomial),
          damit Ableitungen analytisch sind und sich im Cache-Schlüssel beschreiben lassen
    """
    operators: tuple
    functions: tuple
    nspins: int

    def __post_init__(self):
        if len(self.operators) != len(self.functions) or not self.operators:
            raise ValueError("FactorizedHamiltonian needs matching, nonempty operator/function lists")
        for F in self.operators:
            if F.nspins != self.nspins:
                raise ValueError("All F_gamma must share nspins")

    @property
    def gamma(self):
        return len(self.operators)

    def coefficients(self, lam):
        return np.array([float(f(lam)) for f in self.functions])

    def coefficient_derivatives(self, lam):
        return np.array([float(f.deriv()(lam)) for f in self.functions])

    def eval(self, lam):
        return pc.linear_combination(self.nspins, zip(self.coefficients(lam), self.operators))

    def derivative(self, lam):
        return pc.linear_combination(self.nspins, zip(self.coefficient_derivatives(lam), self.operators))

    def describe(self):
        """JSON-fähige Beschreibung (für Hashes und Cache-Schlüssel)."""
        return {
            "nspins": self.nspins,
            "functions": [list(map(float, f.coef)) for f in self.functions],
            "operators": [pc.format_operator(F) for F in self.operators],
        }


@dataclass(frozen=True)
class IsingInstance:
    """
    Zufällige Ising-Instanz auf einem offenen N_w x N_h Gitter.

    Hinweis:
        - Plätze zeilenweise nummeriert: Platz(x, y) = y * N_w + x + 1
        - J ist ein dict {(i, j): J_ij} mit i < j, ein Eintrag je Kante
    """
    ising_class: str
    width: int
    height: int
    seed: int
    h: tuple
    J: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ising_class not in config.ISING_CLASSES:
            raise ConfigError(f"Unknown Ising class '{self.ising_class}'")
        if len(self.h) != self.nspins:
            raise ValueError(f"Expected {self.nspins} fields, got {len(self.h)}")
        if set(self.J) != set(lattice_edges(self.width, self.height)):
            raise ValueError("Coupling keys do not match the lattice edge set")

    @property
    def nspins(self):
        return self.width * self.height

    @property
    def edges(self):
        return lattice_edges(self.width, self.height)


@dataclass(frozen=True)
class Ansatz:
    """Geordnete Liste hermitescher Treiberoperatoren A_1..A_M mit Bezeichnungen."""
    operators: tuple
    labels: tuple
    kind: str = "custom"

    def __post_init__(self):
        if not self.operators:
            raise ValueError("Ansatz needs at least one operator")
        if len(self.labels) != len(self.operators):
            raise ValueError("One label per operator required")
        nspins = self.operators[0].nspins
        for A in self.operators:
            if A.nspins != nspins:
                raise ValueError("All ansatz operators must share nspins")
            if not pc.is_hermitian(A):
                raise ValueError("Ansatz operators must be Hermitian")

    @property
    def size(self):
        return len(self.operators)

    @property
    def nspins(self):
        return self.operators[0].nspins


@dataclass(frozen=True)
class Schedule:
    """
    lambda als Funktion von s = t / t_d auf [0, 1], tabelliert.

    Hinweis:
        - Der Standard ist der lineare Fahrplan lambda = s
        - dlam_ds wird stückweise konstant aus der Tabelle berechnet
    """
    s: tuple = (0.0, 1.0)
    lam: tuple = (0.0, 1.0)

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        lam = np.asarray(self.lam, dtype=float)
        if s.shape != lam.shape or s.size < 2:
            raise ValueError("Schedule needs matching s/lambda tables with >= 2 points")
        if s[0] != 0.0 or s[-1] != 1.0 or np.any(np.diff(s) <= 0):
            raise ValueError("Schedule s grid must increase strictly from 0 to 1")
        if lam[0] != 0.0 or lam[-1] != 1.0 or np.any(np.diff(lam) < 0):
            raise ValueError("Schedule lambda values must rise monotonically from 0 to 1")

    def value(self, s):
        return float(np.interp(s, self.s, self.lam))

    def rate(self, s):
        s_grid = np.asarray(self.s)
        slopes = np.diff(self.lam) / np.diff(s_grid)
        i = int(np.clip(np.searchsorted(s_grid, s, side="right") - 1, 0, slopes.size - 1))
        return float(slopes[i])

    @property
    def is_linear(self):
        return np.allclose(self.s, self.lam)


def linear_schedule():
    return Schedule()


def tabulated_schedule(s_grid, lambda_values):
    return Schedule(tuple(map(float, s_grid)), tuple(map(float, lambda_values)))


def lattice_edges(width, height):
    """
    Kanten des offenen Gitters in fester Reihenfolge.

    Returns:
        list: [(i, j), ...] mit i < j; zeilenweiser Durchlauf, an jeder Position
        zuerst die horizontale, dann die vertikale Kante
    """
    edges = []
    for y in range(height):
        for x in range(width):
            site = y * width + x + 1
            if x + 1 < width:
                edges.append((site, site + 1))
            if y + 1 < height:
                edges.append((site, site + width))
    return edges


def make_rng(seed):
    """PCG64-Generator von numpy; gamma() nutzt das Verfahren von Marsaglia und Tsang."""
    return np.random.Generator(np.random.PCG64(seed))


def sample_ising(ising_class, width, height, seed):
    """
    Zieht eine zufällige Ising-Instanz.

    Args:
        ising_class (str): 'ferro', 'antiferro' oder 'spin-glass'
        width (int): N_w >= 1
        height (int): N_h >= 1
        seed (int): Startwert des Zufallsgenerators

    Returns:
        IsingInstance: Instanz mit h_i ~ Gamma(4, 0.25) und J_ij je nach Klasse

    Raises:
        ConfigError: Unbekannte Klasse oder Gittermaße < 1

    Hinweis:
        - Ziehreihenfolge: zuerst alle h_i (Platzreihenfolge), dann alle J_ij
          (Kantenreihenfolge von lattice_edges)
        - ferro/antiferro: J_ij ~ Gamma(4, 0.25); spin-glass: J_ij ~ N(0, 1)
    """
    if ising_class not in config.ISING_CLASSES:
        raise ConfigError(f"Unknown Ising class '{ising_class}' (expected one of {', '.join(config.ISING_CLASSES)})")
    if width < 1 or height < 1:
        raise ConfigError(f"Lattice dimensions must be >= 1, got {width}x{height}")
    rng = make_rng(seed)
    n = width * height
    edges = lattice_edges(width, height)
    h = rng.gamma(config.GAMMA_SHAPE, config.GAMMA_SCALE, size=n)
    if ising_class == "spin-glass":
        couplings = rng.normal(0.0, 1.0, size=len(edges))
    else:
        couplings = rng.gamma(config.GAMMA_SHAPE, config.GAMMA_SCALE, size=len(edges))
    J = {edge: float(value) for edge, value in zip(edges, couplings)}
    return IsingInstance(ising_class, width, height, int(seed), tuple(float(v) for v in h), J)


def with_field(inst, site, value):
    """Kopie der Instanz mit geändertem Feld h_site."""
    h = list(inst.h)
    h[site - 1] = float(value)
    return replace(inst, h=tuple(h))


def ising_hamiltonian(inst):
    """
    H(lambda) = (1 - lambda) sum X_i + lambda (sum h_i Z_i +- sum J_ij Z_i Z_j).

    Returns:
        FactorizedHamiltonian: Gamma = 2 mit f_1 = 1 - lambda und f_2 = lambda
    """
    n = inst.nspins
    driver = {pc.pauli_term([("X", i)]): 1.0 for i in range(1, n + 1)}
    problem = {pc.pauli_term([("Z", i)]): hi for i, hi in enumerate(inst.h, start=1)}
    sign = COUPLING_SIGN[inst.ising_class]
    for (i, j), value in inst.J.items():
        problem[pc.pauli_term([("Z", i), ("Z", j)])] = sign * value
    F1 = pc.operator_from_terms(n, driver)
    F2 = pc.operator_from_terms(n, problem)
    return FactorizedHamiltonian((F1, F2), (Polynomial([1.0, -1.0]), Polynomial([0.0, 1.0])), n)


def one_body_ansatz(nspins):
    """A_i = Y_i für i = 1..N."""
    ops = tuple(pc.pauli_operator(nspins, [("Y", i)]) for i in range(1, nspins + 1))
    labels = tuple(f"Y{i}" for i in range(1, nspins + 1))
    return Ansatz(ops, labels, "one-body")


def two_body_ansatz(inst):
    """
    Ein-Körper-Terme Y_i, danach Y_i Z_j + Z_i Y_j je Kante (Reihenfolge von lattice_edges).
    """
    n = inst.nspins
    base = one_body_ansatz(n)
    ops = list(base.operators)
    labels = list(base.labels)
    for i, j in inst.edges:
        term = pc.operator_from_terms(n, {
            pc.pauli_term([("Y", i), ("Z", j)]): 1.0,
            pc.pauli_term([("Z", i), ("Y", j)]): 1.0,
        })
        ops.append(term)
        labels.append(f"Y{i}Z{j}+Z{i}Y{j}")
    return Ansatz(tuple(ops), tuple(labels), "two-body")


def build_ansatz(kind, inst):
    if kind == "one-body":
        return one_body_ansatz(inst.nspins)
    if kind == "two-body":
        return two_body_ansatz(inst)
    raise ConfigError(f"Unknown ansatz kind '{kind}' (expected one of {', '.join(config.ANSATZ_KINDS)})")


def instance_to_dict(inst):
    return {
        "schema_version": config.INSTANCE_SCHEMA_VERSION,
        "ising_class": inst.ising_class,
        "width": inst.width,
        "height": inst.height,
        "seed": inst.seed,
        "h": list(inst.h),
        "J": {f"({i},{j})": value for (i, j), value in inst.J.items()},
    }


def instance_from_dict(data):
    version = data.get("schema_version")
    if version != config.INSTANCE_SCHEMA_VERSION:
        raise ConfigError(f"Unsupported instance schema version {version!r}")
    J = {}
    for key, value in data["J"].items():
        i, j = key.strip("()").split(",")
        J[(int(i), int(j))] = float(value)
    return IsingInstance(data["ising_class"], int(data["width"]), int(data["height"]),
                         int(data["seed"]), tuple(float(v) for v in data["h"]), J)


def instance_hash(inst):
    payload = instance_to_dict(inst)
    return canonical_hash(payload)


def save_instance(inst, file_path, config_hash=None):
    """
    Speichert eine Instanz als JSON-Datei.

    Args:
        inst (IsingInstance): Zu speichernde Instanz
        file_path (str): Zielpfad
        config_hash (str): Hash der erzeugenden Konfiguration (optional)
    """
    data = instance_to_dict(inst)
    data["config_hash"] = config_hash
    save_json(file_path, data)
    logger.info(f"Instance written: {file_path}")
    return file_path


def load_instance(file_path):
    """
    Lädt eine Instanz aus einer JSON-Datei.

    Raises:
        MissingArtifactError: Datei fehlt oder ist kein gültiges JSON
    """
    data = load_json(file_path)
    if not data:
        raise MissingArtifactError(f"Instance file not found or unreadable: {file_path}")
    return instance_from_dict(data)


def instance_file_name(inst):
    return f"{inst.ising_class}_{inst.width}x{inst.height}_seed{inst.seed}.json"


def instance_path(inst, root=None):
    return os.path.join(config.data_subdir(config.INSTANCES_SUBDIR, root), instance_file_name(inst))
