# tests/conftest.py
# Gemeinsame Fixtures: Zufallsgenerator, Zufallsoperatoren, kleine Instanzen,
# temporäres Datenverzeichnis

import numpy as np
import pytest

from src import config
from src import pauli_core as pc
from src.model_service import sample_ising

AXES = ("X", "Y", "Z")


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(20240611))


def random_term(rng, nspins, max_weight=None):
    max_weight = max_weight or nspins
    weight = int(rng.integers(0, max_weight + 1))
    sites = rng.choice(np.arange(1, nspins + 1), size=weight, replace=False)
    return pc.pauli_term([(AXES[int(rng.integers(3))], int(s)) for s in sites])


def random_operator(rng, nspins, nterms=6, hermitian=False):
    mapping = {}
    for _ in range(nterms):
        term = random_term(rng, nspins)
        coeff = rng.normal() if hermitian else complex(rng.normal(), rng.normal())
        mapping[term] = mapping.get(term, 0.0) + coeff
    return pc.operator_from_terms(nspins, mapping)


@pytest.fixture
def make_operator(rng):
    def factory(nspins, nterms=6, hermitian=False):
        return random_operator(rng, nspins, nterms, hermitian)
    return factory


@pytest.fixture
def ferro_2x2():
    return sample_ising("ferro", 2, 2, 11)


@pytest.fixture
def glass_3x1():
    return sample_ising("spin-glass", 3, 1, 5)


@pytest.fixture
def data_root(tmp_path, monkeypatch):
    """Leitet alle Ausgaben in ein temporäres Verzeichnis um."""
    monkeypatch.setattr(config, "DATA_DIR", str(tmp_path))
    return str(tmp_path)
