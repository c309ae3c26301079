# src/utils.py
# Allgemeine Hilfsfunktionen für das cdweight Toolkit
# Enthält Funktionen für Dateioperationen, Hashing und die Einrichtung des Loggings
# Stellt sicher, dass numpy-Werte und komplexe Zahlen verlustfrei als JSON gespeichert werden

import hashlib
import json
import logging
import os
import sys

import numpy as np
from pythonjsonlogger.json import JsonFormatter

from . import config

logger = logging.getLogger(__name__)


class NumpyEncoder(json.JSONEncoder):
    """
    Benutzerdefinierter JSON-Encoder für numpy-Werte und komplexe Zahlen.

    Hinweis:
        - numpy-Skalare werden zu Python-Zahlen, Arrays zu Listen
        - Komplexe Zahlen werden als [re, im] gespeichert
        - float-Werte werden mit repr() geschrieben, die Rundreise ist also bitgenau
    """
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, (complex, np.complexfloating)):
            return [float(obj.real), float(obj.imag)]
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        return super(NumpyEncoder, self).default(obj)


def setup_directories(root=None):
    """
    Erstellt die notwendigen Datenverzeichnisse, falls sie nicht existieren.

    Args:
        root (str): Ausgabeverzeichnis, Standard ist config.DATA_DIR

    Returns:
        dict: Name des Unterverzeichnisses -> absoluter Pfad
    """
    dirs = {}
    for name in (config.INSTANCES_SUBDIR, config.PROTOCOLS_SUBDIR,
                 config.CACHE_SUBDIR, config.RESULTS_SUBDIR):
        path = config.data_subdir(name, root)
        os.makedirs(path, exist_ok=True)
        dirs[name] = path
    logger.debug("Directories checked/created.", extra={"root": root or config.DATA_DIR})
    return dirs


def load_json(file_path):
    """
    Lädt Daten aus einer JSON-Datei.

    Args:
        file_path (str): Pfad zur JSON-Datei

    Returns:
        dict/None: Geladene Daten oder None bei Fehler

    Hinweis:
        - Fehlende Dateien sind kein Fehler, der Aufrufer entscheidet
        - Ungültiges JSON wird als Warnung protokolliert
    """
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        return None
    except json.JSONDecodeError:
        logger.warning(f"Error decoding JSON from {file_path}")
        return None


def save_json(file_path, data):
    """
    Speichert Daten in einer JSON-Datei (UTF-8, Einrückung 2).

    Args:
        file_path (str): Pfad zur JSON-Datei
        data (dict): Zu speichernde Daten
    """
    directory = os.path.dirname(file_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(file_path, 'w', encoding='utf-8') as f:
        json.dump(data, f, cls=NumpyEncoder, indent=2, ensure_ascii=False)


def save_csv(file_path, frame):
    """Schreibt einen pandas DataFrame als CSV; NaN wird als leeres Feld geschrieben."""
    directory = os.path.dirname(file_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(file_path, index=False, na_rep="", float_format="%.17g")


def canonical_hash(payload, length=16):
    """
    Hash über die kanonische JSON-Form eines Objekts.

    Args:
        payload: JSON-serialisierbares Objekt
        length (int): Anzahl der zurückgegebenen Hex-Zeichen

    Returns:
        str: SHA-256 Präfix

    Hinweis:
        - Schlüssel werden sortiert, damit gleiche Inhalte gleiche Hashes ergeben
    """
    text = json.dumps(payload, cls=NumpyEncoder, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


def setup_logging(level="INFO", json_format=False):
    """
    Richtet den Root-Logger einmalig ein (Ausgabe auf stderr).

    Args:
        level (str): Log-Level
        json_format (bool): Strukturierte JSON-Zeilen statt Klartext
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_cdweight", False):
            root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler._cdweight = True
    if json_format:
        handler.setFormatter(JsonFormatter("{asctime}{levelname}{name}{message}", style="{"))
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(level.upper() if isinstance(level, str) else level)
