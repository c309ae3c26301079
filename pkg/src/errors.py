# src/errors.py
# Fehlerklassen für das cdweight Toolkit
# Jede Klasse trägt den Exit-Code, den die Kommandozeile bei diesem Fehler liefert

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_RESOURCE = 4


class CdWeightError(Exception):
    """Basisklasse aller Fehler des Toolkits."""
    exit_code = EXIT_NUMERICAL


class ConfigError(CdWeightError):
    """Ungültige Konfiguration (unbekannte Schlüssel, K < 1, unbekannte Klasse, ...)."""
    exit_code = EXIT_CONFIG


class MissingArtifactError(CdWeightError):
    """Eine benötigte Datei (Instanz, Protokolltabelle) fehlt."""
    exit_code = EXIT_CONFIG


class ResourceGuardError(CdWeightError):
    """Die Systemgröße überschreitet den Speicherschutz der dichten Matrizen."""
    exit_code = EXIT_RESOURCE


class DimensionError(CdWeightError, ValueError):
    """Operanden mit unterschiedlicher Spinzahl."""


class NumericalError(CdWeightError):
    """Basisklasse numerischer Fehlschläge."""


class OptimizationFailedError(NumericalError):
    """
    Die Energieverschiebung hat kein inneres Minimum von Omega(E).

    Hinweis:
        - `diagnostics` enthält Momente, Suchfenster und Vorzeichenwechsel
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SolverError(NumericalError):
    """Nicht-endliche Eingaben oder Divergenz im linearen Löser."""


class DegeneracyError(NumericalError):
    """Entartetes Eigenpaar mit Kopplung durch dH; `pair` nennt die Indizes (n, m)."""

    def __init__(self, message, pair):
        super().__init__(message)
        self.pair = pair


class HermiticityError(NumericalError):
    """Imaginärer Rest in Q oder r über der Toleranz."""


class NonConvergentIntegrationError(NumericalError):
    """RK4-Schrittverdopplung hat keine stabile Endfidelität erreicht."""
