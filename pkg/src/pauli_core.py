# src/pauli_core.py
# Dünnbesetzte Computeralgebra für Pauli-String-Operatoren auf N Spins
# Operatoren sind Hashtabellen PauliTerm -> komplexer Koeffizient
# Spuren und Kommutatoren nutzen Größen- und Platzindex, um unnötige Paare zu überspringen

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from . import config
from .errors import DimensionError

logger = logging.getLogger(__name__)

_AXES = ("X", "Y", "Z")
_I_POWERS = (1.0 + 0.0j, 1.0j, -1.0 + 0.0j, -1.0j)
_new_tuple = tuple.__new__


class PauliTerm(NamedTuple):
    """
    Ein Pauli-String in gepackter Form.

    Bit (i-1) von `x` ist gesetzt, wenn auf Platz i ein X oder Y wirkt, Bit (i-1)
    von `z`, wenn dort ein Z oder Y wirkt. Die Kodierung ist bijektiv zur
    aufsteigend sortierten Faktorliste [(Achse, Platz), ...]; Gleichheit und Hash
    sind daher strukturell. PauliTerm(0, 0) ist die Identität.
    """
    x: int
    z: int

    @property
    def factors(self):
        """Sortierte Liste der (Achse, Platz)-Paare."""
        out = []
        for site in _sites_of_mask(self.x | self.z):
            bit = 1 << (site - 1)
            has_x = bool(self.x & bit)
            has_z = bool(self.z & bit)
            out.append(("Y" if has_x and has_z else "X" if has_x else "Z", site))
        return out

    @property
    def sites(self):
        return tuple(_sites_of_mask(self.x | self.z))

    @property
    def weight(self):
        return (self.x | self.z).bit_count()

    def is_identity(self):
        return self.x == 0 and self.z == 0

    def __str__(self):
        if self.is_identity():
            return "I"
        return " ".join(f"{axis}{site}" for axis, site in self.factors)


IDENTITY_TERM = PauliTerm(0, 0)


def _sites_of_mask(mask):
    while mask:
        low = mask & -mask
        yield low.bit_length()
        mask ^= low


def pauli_term(factors: Iterable[tuple[str, int]]) -> PauliTerm:
    """
    Erstellt einen PauliTerm aus (Achse, Platz)-Paaren.

    Args:
        factors: Paare wie [("X", 1), ("Z", 3)]; Reihenfolge beliebig

    Returns:
        PauliTerm: Kanonischer Term

    Raises:
        ValueError: Unbekannte Achse, Platz < 1 oder doppelter Platz
    """
    x = z = 0
    for axis, site in factors:
        if axis not in _AXES:
            raise ValueError(f"Unknown Pauli axis '{axis}'")
        if site < 1:
            raise ValueError(f"Site index must be >= 1, got {site}")
        bit = 1 << (site - 1)
        if (x | z) & bit:
            raise ValueError(f"Site {site} appears twice in Pauli term")
        if axis in ("X", "Y"):
            x |= bit
        if axis in ("Z", "Y"):
            z |= bit
    return _new_tuple(PauliTerm, (x, z))


def parse_term(text: str) -> PauliTerm:
    """Liest einen Term wie 'X1 Z3' oder 'I'."""
    tokens = text.split()
    if tokens == ["I"] or not tokens:
        return IDENTITY_TERM
    factors = []
    for token in tokens:
        axis, site = token[0], token[1:]
        if not site.isdigit():
            raise ValueError(f"Malformed Pauli factor '{token}'")
        factors.append((axis, int(site)))
    return pauli_term(factors)


def term_product(s: PauliTerm, t: PauliTerm) -> tuple[complex, PauliTerm]:
    """
    Produkt zweier Pauli-Strings: s * t = phase * u.

    Hinweis:
        - Mit Y = i X Z gilt s = i^{|x&z|} X^x Z^z; das Vertauschen von Z^z1 mit X^x2
          liefert (-1)^{|z1&x2|}. Daraus folgt die Phase i^k mit
          k = |x1&z1| + |x2&z2| - |x&z| + 2|z1&x2| (mod 4).
    """
    x1, z1 = s
    x2, z2 = t
    x = x1 ^ x2
    z = z1 ^ z2
    k = ((x1 & z1).bit_count() + (x2 & z2).bit_count() - (x & z).bit_count()
         + 2 * (z1 & x2).bit_count()) & 3
    return _I_POWERS[k], _new_tuple(PauliTerm, (x, z))


def terms_anticommute(s: PauliTerm, t: PauliTerm) -> bool:
    return (((s[0] & t[1]).bit_count() + (s[1] & t[0]).bit_count()) & 1) == 1


@dataclass(frozen=True)
class SparseOperator:
    """
    Operator als Hashtabelle PauliTerm -> komplexer Koeffizient.

    Hinweis:
        - Wird nach der Konstruktion nicht mehr verändert; alle Funktionen dieses
          Moduls liefern neue Operatoren
        - Hermitizität (reelle Koeffizienten) ist prüfbar, wird aber nicht erzwungen
    """
    nspins: int
    terms: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.nspins, int) or self.nspins < 1:
            raise ValueError(f"nspins must be a positive integer, got {self.nspins!r}")

    def __len__(self):
        return len(self.terms)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, SparseOperator):
            return multiply(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def coefficient(self, term):
        return self.terms.get(term, 0.0j)

    def __str__(self):
        return format_operator(self)


def _check_dims(a, b):
    if a.nspins != b.nspins:
        raise DimensionError(f"Operand nspins mismatch: {a.nspins} != {b.nspins}")


def zero(nspins: int) -> SparseOperator:
    return SparseOperator(nspins, {})


def identity(nspins: int, coeff=1.0) -> SparseOperator:
    return SparseOperator(nspins, {IDENTITY_TERM: complex(coeff)})


def pauli_operator(nspins: int, factors, coeff=1.0) -> SparseOperator:
    """Operator aus einem einzelnen Term, z.B. pauli_operator(3, [("X", 1), ("Z", 3)], 1.5)."""
    term = pauli_term(factors)
    if term.x | term.z and (term.x | term.z).bit_length() > nspins:
        raise DimensionError(f"Term {term} does not fit on {nspins} spins")
    return SparseOperator(nspins, {term: complex(coeff)})


def operator_from_terms(nspins: int, mapping, tol=0.0) -> SparseOperator:
    """Operator aus einer Abbildung PauliTerm -> Koeffizient (gleiche Terme werden addiert)."""
    terms = {}
    for term, coeff in mapping.items() if hasattr(mapping, "items") else mapping:
        if (term.x | term.z).bit_length() > nspins:
            raise DimensionError(f"Term {term} does not fit on {nspins} spins")
        terms[term] = terms.get(term, 0.0j) + complex(coeff)
    return prune(SparseOperator(nspins, terms), tol)


def prune(A: SparseOperator, tol=config.PRUNE_TOL) -> SparseOperator:
    """
    Entfernt Terme mit |Koeffizient| <= tol.

    Hinweis:
        - Mit tol = 0 werden nur exakte Nullen entfernt
        - Idempotent: prune(prune(A, t), t) == prune(A, t)
    """
    if tol < 0:
        raise ValueError("Prune tolerance must be nonnegative")
    return SparseOperator(A.nspins, {k: v for k, v in A.terms.items() if abs(v) > tol})


def scale(A: SparseOperator, c) -> SparseOperator:
    c = complex(c)
    if c == 0:
        return zero(A.nspins)
    return SparseOperator(A.nspins, {k: c * v for k, v in A.terms.items()})


def add(A: SparseOperator, B: SparseOperator, tol=config.PRUNE_TOL) -> SparseOperator:
    """
    Summe A + B in O(|A| + |B|).

    Raises:
        DimensionError: Unterschiedliche Spinzahl
    """
    _check_dims(A, B)
    if len(A.terms) < len(B.terms):
        A, B = B, A
    terms = dict(A.terms)
    touched = []
    for k, v in B.terms.items():
        if k in terms:
            terms[k] += v
            touched.append(k)
        else:
            terms[k] = v
    # nur gemeinsame Terme können sich aufheben
    for k in touched:
        if abs(terms[k]) <= tol:
            del terms[k]
    return SparseOperator(A.nspins, terms)


def subtract(A: SparseOperator, B: SparseOperator, tol=config.PRUNE_TOL) -> SparseOperator:
    return add(A, scale(B, -1.0), tol)


def linear_combination(nspins: int, pairs, tol=config.PRUNE_TOL) -> SparseOperator:
    """Summe c_j * A_j über (c_j, A_j)-Paare in einem Durchlauf."""
    terms = {}
    get = terms.get
    for c, A in pairs:
        if A.nspins != nspins:
            raise DimensionError(f"Operand nspins mismatch: {A.nspins} != {nspins}")
        c = complex(c)
        if c == 0:
            continue
        for k, v in A.terms.items():
            terms[k] = get(k, 0.0j) + c * v
    return prune(SparseOperator(nspins, terms), tol)


def multiply(A: SparseOperator, B: SparseOperator, tol=config.PRUNE_TOL) -> SparseOperator:
    """
    Operatorprodukt A * B in O(|A||B|).

    Hinweis:
        - Kanonisierung platzweise über die Bitmasken, die Phase landet im Koeffizienten
        - Ergebnis wird mit `tol` bereinigt
    """
    _check_dims(A, B)
    out = {}
    get = out.get
    right = [(x2, z2, (x2 & z2).bit_count(), c2) for (x2, z2), c2 in B.terms.items()]
    powers = _I_POWERS
    for (x1, z1), c1 in A.terms.items():
        a1 = (x1 & z1).bit_count()
        for x2, z2, a2, c2 in right:
            x = x1 ^ x2
            z = z1 ^ z2
            k = (a1 + a2 - (x & z).bit_count() + 2 * (z1 & x2).bit_count()) & 3
            key = _new_tuple(PauliTerm, (x, z))
            out[key] = get(key, 0.0j) + powers[k] * c1 * c2
    return prune(SparseOperator(A.nspins, out), tol)


def trace_product_normalized(A: SparseOperator, B: SparseOperator) -> complex:
    """
    tr(AB) / 2^N ohne das Produkt zu bilden.

    Hinweis:
        - Iteriert über den kleineren Operator und sucht im größeren nach
        - Pauli-Strings sind spurorthogonal: tr(s t)/2^N = 1 für s == t, sonst 0
    """
    _check_dims(A, B)
    if len(A.terms) > len(B.terms):
        A, B = B, A
    get = B.terms.get
    total = 0.0j
    for k, v in A.terms.items():
        w = get(k)
        if w is not None:
            total += v * w
    return total


def trace_product(A: SparseOperator, B: SparseOperator) -> complex:
    """tr(AB); für große N (ab etwa 1024 Spins) die normierte Variante verwenden."""
    return math.ldexp(1.0, A.nspins) * trace_product_normalized(A, B)


def trace_normalized(A: SparseOperator) -> complex:
    """tr(A) / 2^N, also der Koeffizient der Identität."""
    return A.terms.get(IDENTITY_TERM, 0.0j)


@dataclass(frozen=True)
class SiteIndex:
    """
    Platzindex über eine Liste von Operatoren.

    buckets[i] enthält die Eintrags-IDs aller Terme, die auf Platz i wirken;
    entries[eid] = (Operator-ID, x, z, |x&z|, Koeffizient).
    Identitätsterme landen in keinem Bucket (sie kommutieren mit allem).
    """
    nspins: int
    buckets: dict
    entries: list
    nops: int

    def sites_of(self, eid):
        return tuple(_sites_of_mask(self.entries[eid][1] | self.entries[eid][2]))


def build_site_index(ops) -> SiteIndex:
    ops = list(ops)
    if not ops:
        raise ValueError("Cannot index an empty operator list")
    nspins = ops[0].nspins
    buckets = {}
    entries = []
    for op_id, A in enumerate(ops):
        if A.nspins != nspins:
            raise DimensionError(f"Operand nspins mismatch: {A.nspins} != {nspins}")
        for (x, z), c in A.terms.items():
            eid = len(entries)
            entries.append((op_id, x, z, (x & z).bit_count(), c))
            for site in _sites_of_mask(x | z):
                buckets.setdefault(site, []).append(eid)
    return SiteIndex(nspins, buckets, entries, len(ops))


def _commutators_indexed(B, idx, upto, tol):
    """Kern von commutator/batched_commutator: [B, A_mu] für mu <= upto."""
    if B.nspins != idx.nspins:
        raise DimensionError(f"Operand nspins mismatch: {B.nspins} != {idx.nspins}")
    results = [dict() for _ in range(upto + 1)]
    buckets = idx.buckets
    entries = idx.entries
    powers = _I_POWERS
    for (x1, z1), c1 in B.terms.items():
        mask = x1 | z1
        if not mask:
            continue
        a1 = (x1 & z1).bit_count()
        candidates = set()
        while mask:
            low = mask & -mask
            bucket = buckets.get(low.bit_length())
            if bucket:
                candidates.update(bucket)
            mask ^= low
        for eid in candidates:
            op_id, x2, z2, a2, c2 = entries[eid]
            if op_id > upto:
                continue
            if not (((x1 & z2).bit_count() + (z1 & x2).bit_count()) & 1):
                continue
            x = x1 ^ x2
            z = z1 ^ z2
            k = (a1 + a2 - (x & z).bit_count() + 2 * (z1 & x2).bit_count()) & 3
            key = _new_tuple(PauliTerm, (x, z))
            out = results[op_id]
            out[key] = out.get(key, 0.0j) + 2.0 * powers[k] * c1 * c2
    return [prune(SparseOperator(B.nspins, terms), tol) for terms in results]


def commutator(B: SparseOperator, A: SparseOperator, idx: SiteIndex = None,
               tol=config.PRUNE_TOL) -> SparseOperator:
    """
    Kommutator [B, A] mit Platzindex über A.

    Args:
        B: Linker Operand
        A: Rechter Operand
        idx: Platzindex über [A]; wird gebaut, wenn None

    Hinweis:
        - Für jeden Term von B werden nur Terme von A besucht, die mindestens einen
          Platz teilen; nicht überlappende Pauli-Strings kommutieren
        - Antikommutierende Paare liefern 2*s*t, kommutierende 0
        - Ein veralteter Index (nicht zu A passend) wird nicht erkannt
    """
    _check_dims(B, A)
    if idx is None:
        idx = build_site_index([A])
    return _commutators_indexed(B, idx, 0, tol)[0]


def batched_commutator(B: SparseOperator, ansatz, idx: SiteIndex = None, upto=None,
                       tol=config.PRUNE_TOL) -> list[SparseOperator]:
    """
    Alle Kommutatoren [B, A_mu] in einem Durchlauf über die Terme von B.

    Args:
        B: Linker Operand
        ansatz: Liste der Operatoren A_1..A_M
        idx: Gemeinsamer Platzindex über `ansatz` (wird sonst intern gebaut)
        upto: Nur mu = 0..upto berechnen (0-basiert); Ergebnisliste hat dann upto+1 Einträge

    Returns:
        list: [B, A_mu] in Ansatz-Reihenfolge
    """
    ansatz = list(ansatz)
    if idx is None:
        idx = build_site_index(ansatz)
    if upto is None:
        upto = len(ansatz) - 1
    return _commutators_indexed(B, idx, upto, tol)


def term_count(A: SparseOperator) -> int:
    return len(A.terms)


def coefficient_norm(A: SparseOperator) -> float:
    """Summe der Beträge der Koeffizienten; obere Schranke der Operatornorm."""
    return float(sum(abs(v) for v in A.terms.values()))


def is_hermitian(A: SparseOperator, tol=1e-12) -> bool:
    return all(abs(v.imag) <= tol * max(1.0, abs(v)) for v in A.terms.values())


def format_operator(A: SparseOperator) -> str:
    """
    Textform: eine Zeile je Term, '<re> <im> X1 Z3', Identität als '<re> <im> I'.

    Hinweis:
        - Terme in kanonischer Reihenfolge (nach Plätzen, dann Achsen), damit
          Ausgaben als Golden Files vergleichbar bleiben
        - repr() der Floats, damit das Zurücklesen bitgenau ist
    """
    lines = []
    for term in sorted(A.terms, key=lambda t: [(site, axis) for axis, site in t.factors]):
        c = complex(A.terms[term])
        lines.append(f"{c.real!r} {c.imag!r} {term}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_operator(text: str, nspins: int) -> SparseOperator:
    """Liest die Textform von format_operator; Leerzeilen und '#'-Kommentare werden übersprungen."""
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 2)
        if len(parts) < 3:
            raise ValueError(f"Line {lineno}: expected '<re> <im> <term>'")
        term = parse_term(parts[2])
        mapping[term] = mapping.get(term, 0.0j) + complex(float(parts[0]), float(parts[1]))
    return operator_from_terms(nspins, mapping)
