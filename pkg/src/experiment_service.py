# src/experiment_service.py
# Ablaufsteuerung hinter den Kommandos der Kommandozeile
# Erzeugt Instanzen, berechnet Protokolltabellen (mit Spurencache), simuliert,
# wertet Ensembles aus, misst die Skalierung der Stufe 1 und führt die Analysen aus

import logging
import math
import os
import time

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from . import config
from . import oracle_service as oracle
from .errors import ConfigError, MissingArtifactError, ResourceGuardError
from .gs_protocol_service import default_grid, load_protocol_table, save_protocol_table, solve_protocol
from .model_service import (
    build_ansatz,
    instance_file_name,
    instance_hash,
    instance_path,
    ising_hamiltonian,
    load_instance,
    sample_ising,
    save_instance,
)
from .utils import load_json, save_csv, save_json, setup_directories
from .weighted_action_service import load_traces, precompute_factorized, save_traces

logger = logging.getLogger(__name__)


def _stem(inst):
    return os.path.splitext(instance_file_name(inst))[0]


def _check_k_values(K_values):
    K_values = sorted(set(int(K) for K in K_values))
    if not K_values or K_values[0] < 1:
        raise ConfigError(f"K values must be >= 1, got {K_values}")
    return K_values


# --- Instanzen ---

def generate_instances(ising_class, width, height, seed, count=1, root=None, config_hash=None):
    """
    Erzeugt `count` Instanzen mit den Startwerten seed, seed + 1, ...

    Returns:
        list: Pfade der geschriebenen Instanzdateien
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    setup_directories(root)
    paths = []
    for i in range(count):
        inst = sample_ising(ising_class, width, height, seed + i)
        paths.append(save_instance(inst, instance_path(inst, root), config_hash))
    return paths


def resolve_instance(source):
    """IsingInstance aus einem Objekt oder einem Dateipfad."""
    if isinstance(source, (str, os.PathLike)):
        return load_instance(source)
    return source


# --- Protokolltabellen ---

def protocol_stem(inst, K, ansatz_kind, root=None):
    directory = config.data_subdir(config.PROTOCOLS_SUBDIR, root)
    return os.path.join(directory, f"{_stem(inst)}_{ansatz_kind}_K{K}")


def traces_cache_path(inst, ansatz_kind, root=None):
    directory = config.data_subdir(config.CACHE_SUBDIR, root)
    return os.path.join(directory, f"{_stem(inst)}_{ansatz_kind}.npz")


def traces_cache_key(inst, ansatz_kind):
    return {"instance": instance_hash(inst), "ansatz": ansatz_kind}


def obtain_traces(inst, Hf, ansatz, K_max, root=None, use_cache=True):
    """
    Spuren vom Grad >= K_max aus dem Cache oder neu berechnet (und gespeichert).

    Returns:
        tuple: (FactorizedTraces, cache_hit)
    """
    path = traces_cache_path(inst, ansatz.kind, root)
    key = traces_cache_key(inst, ansatz.kind)
    if use_cache:
        ft = load_traces(path, key)
        if ft is not None and ft.degree >= K_max:
            logger.info(f"Trace cache hit, skipping stage 1: {path}", extra={"K_max": K_max})
            return ft, True
    ft = precompute_factorized(Hf, K_max, ansatz)
    if use_cache:
        save_traces(ft, path, key)
    return ft, False


def compute_protocols(inst, K_values, ansatz_kind="one-body", grid_points=config.DEFAULT_GRID_POINTS,
                      root=None, use_cache=True, config_hash=None, solver="auto"):
    """
    Protokolltabellen für alle K über einen gemeinsamen faktorisierten Sweep.

    Returns:
        dict: K -> {"csv", "json", "failures", "stage1_cached", "seconds_stage1", "seconds_stage2"}

    Hinweis:
        - Stufe 1 läuft einmal für K_max; alle kleineren K nutzen dieselben Spuren
    """
    K_values = _check_k_values(K_values)
    inst = resolve_instance(inst)
    Hf = ising_hamiltonian(inst)
    ansatz = build_ansatz(ansatz_kind, inst)
    grid = default_grid(grid_points)
    started = time.perf_counter()
    ft, hit = obtain_traces(inst, Hf, ansatz, K_values[-1], root, use_cache)
    seconds_stage1 = 0.0 if hit else time.perf_counter() - started
    outputs = {}
    for K in K_values:
        table = solve_protocol(Hf, ansatz, K, grid=grid, traces=ft, solver=solver, traces_cached=hit)
        extra = {"config_hash": config_hash, "instance_hash": instance_hash(inst),
                 "instance": instance_file_name(inst), "stage1_cached": hit,
                 "seconds_stage1": seconds_stage1}
        csv_path, json_path = save_protocol_table(table, protocol_stem(inst, K, ansatz_kind, root), extra)
        outputs[K] = {"csv": csv_path, "json": json_path, "failures": len(table.failures),
                      "stage1_cached": hit, "seconds_stage1": seconds_stage1,
                      "seconds_stage2": table.metadata["seconds_stage2"]}
    return outputs


# --- Simulation ---

def _check_dense(inst):
    if inst.nspins > config.DENSE_MAX_SPINS:
        raise ResourceGuardError(
            f"Simulation needs dense matrices; N={inst.nspins} exceeds the guard "
            f"N<={config.DENSE_MAX_SPINS}. Use a smaller lattice.")


def simulate_instance(inst, K_values, ansatz_kind="one-body", td_values=config.DEFAULT_TD_VALUES,
                      root=None, exact_agp=False, config_hash=None, bare=True, save_runs=True):
    """
    Zeitentwicklungen ohne CD, mit alpha^(K) für jedes K und optional mit der exakten AGP.

    Returns:
        pd.DataFrame: Zeilen instance, N, t_d, driving, K, F_f, G_f

    Raises:
        ResourceGuardError: N über dem Speicherschutz
        MissingArtifactError: Protokolltabelle fehlt (erst `coeffs` ausführen)
    """
    K_values = _check_k_values(K_values)
    inst = resolve_instance(inst)
    _check_dense(inst)
    Hf = ising_hamiltonian(inst)
    ansatz = build_ansatz(ansatz_kind, inst)
    tables = {}
    for K in K_values:
        stem = protocol_stem(inst, K, ansatz_kind, root)
        try:
            tables[K] = load_protocol_table(stem)
        except MissingArtifactError:
            raise MissingArtifactError(
                f"Protocol table not found: {stem}.csv (run 'coeffs' for K={K} first)") from None
    drivings = ([("bare", None, None)] if bare else []) + [(f"K={K}", K, tables[K]) for K in K_values]
    if exact_agp:
        drivings.append((oracle.EXACT_AGP, None, oracle.EXACT_AGP))
    results_dir = config.data_subdir(config.RESULTS_SUBDIR, root)
    rows = []
    for t_d in td_values:
        finals = {}
        for label, K, driving in drivings:
            result = oracle.evolve(Hf, driving, t_d, ansatz=ansatz)
            finals[label] = result.final_fidelity
            if save_runs:
                stem = os.path.join(results_dir, f"{_stem(inst)}_{ansatz_kind}_{label.replace('=', '')}_td{t_d:g}")
                oracle.save_evolution(result, stem, {"config_hash": config_hash,
                                                     "instance_hash": instance_hash(inst)})
            rows.append({"instance": _stem(inst), "N": inst.nspins, "t_d": float(t_d),
                         "driving": label, "K": K, "F_f": result.final_fidelity})
        gains = oracle.fidelity_gain(finals, baseline="K=1") if "K=1" in finals else {}
        for row in rows:
            if row["t_d"] == float(t_d):
                row["G_f"] = gains.get(row["driving"], np.nan)
    frame = pd.DataFrame(rows, columns=["instance", "N", "t_d", "driving", "K", "F_f", "G_f"])
    logger.info("Simulation finished", extra={"instance": _stem(inst), "runs": len(rows)})
    return frame


def write_summary(frame, file_path, config_hash=None):
    """Zusammenfassung als CSV plus JSON-Begleitdatei mit Schema-Version und Konfigurations-Hash."""
    save_csv(file_path, frame)
    save_json(os.path.splitext(file_path)[0] + ".json",
              {"schema_version": config.EVOLUTION_SCHEMA_VERSION, "config_hash": config_hash,
               "rows": len(frame)})
    return file_path


# --- Ensemble ---

def _member_path(inst_name, ansatz_kind, root):
    directory = os.path.join(config.data_subdir(config.RESULTS_SUBDIR, root), "ensemble")
    return os.path.join(directory, f"{inst_name}_{ansatz_kind}.json")


def _ensemble_member(ising_class, width, height, seed, K_values, ansatz_kind, td_values,
                     grid_points, root, use_cache, config_hash):
    inst = sample_ising(ising_class, width, height, seed)
    path = _member_path(_stem(inst), ansatz_kind, root)
    done = load_json(path)
    if done and done.get("config_hash") == config_hash:
        return done["rows"], True
    save_instance(inst, instance_path(inst, root), config_hash)
    compute_protocols(inst, K_values, ansatz_kind, grid_points, root, use_cache, config_hash)
    frame = simulate_instance(inst, K_values, ansatz_kind, td_values, root,
                              config_hash=config_hash, save_runs=False)
    rows = frame.replace({np.nan: None}).to_dict(orient="records")
    save_json(path, {"schema_version": config.ENSEMBLE_SCHEMA_VERSION, "config_hash": config_hash,
                     "rows": rows})
    return rows, False


def ensemble_statistics(frame):
    """
    Median und Quartile von F_f und G_f je (N, t_d, driving).

    Returns:
        pd.DataFrame: Spalten N, t_d, driving, count, F_f_median, F_f_q1, F_f_q3,
        G_f_median, G_f_q1, G_f_q3, frac_gain_above_1
    """
    grouped = frame.groupby(["N", "t_d", "driving"], sort=True)
    stats = grouped.agg(
        count=("F_f", "size"),
        F_f_median=("F_f", "median"),
        F_f_q1=("F_f", lambda s: s.quantile(0.25)),
        F_f_q3=("F_f", lambda s: s.quantile(0.75)),
        G_f_median=("G_f", "median"),
        G_f_q1=("G_f", lambda s: s.quantile(0.25)),
        G_f_q3=("G_f", lambda s: s.quantile(0.75)),
        frac_gain_above_1=("G_f", lambda s: float((s > 1.0).mean()) if s.notna().any() else np.nan),
    )
    return stats.reset_index()


def k1_versus_bare(frame):
    """Anteil der Instanzen mit F_f^(1) > F_f^(ohne CD) je (N, t_d)."""
    wide = frame.pivot_table(index=["N", "t_d", "instance"], columns="driving", values="F_f")
    if "K=1" not in wide.columns or "bare" not in wide.columns:
        return pd.DataFrame({"N": pd.Series(dtype="int64"), "t_d": pd.Series(dtype=float),
                             "frac_k1_beats_bare": pd.Series(dtype=float)})
    beats = (wide["K=1"] > wide["bare"]).groupby(level=["N", "t_d"]).mean()
    return beats.rename("frac_k1_beats_bare").reset_index()


def run_ensemble(ising_class, width, height, seed, count, K_values, ansatz_kind="one-body",
                 td_values=(0.01,), grid_points=config.DEFAULT_GRID_POINTS, root=None,
                 threads=1, use_cache=True, config_hash=None, progress=True):
    """
    gen + coeffs + simulate über ein Ensemble; setzt unterbrochene Läufe fort.

    Returns:
        dict: Pfade der Ausgabedateien und die Statistik als DataFrame

    Hinweis:
        - Jede Instanz schreibt ihr Ergebnis in results/ensemble/; vorhandene
          Ergebnisse mit gleichem Konfigurations-Hash werden übersprungen
        - Parallelisierung über Instanzen mit joblib (threads Worker)
    """
    K_values = _check_k_values(K_values)
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    setup_directories(root)
    seeds = [seed + i for i in range(count)]
    jobs = (delayed(_ensemble_member)(ising_class, width, height, s, K_values, ansatz_kind, td_values,
                                      grid_points, root, use_cache, config_hash) for s in seeds)
    outcomes = Parallel(n_jobs=threads, return_as="generator")(jobs)
    rows, resumed = [], 0
    for member_rows, skipped in tqdm(outcomes, total=count, desc="ensemble", disable=not progress):
        rows.extend(member_rows)
        resumed += int(skipped)
    if resumed:
        logger.info(f"Resumed ensemble: {resumed} of {count} instances already complete")
    frame = pd.DataFrame(rows).astype({"G_f": float})
    stats = ensemble_statistics(frame)
    comparison = k1_versus_bare(frame)
    stats = stats.merge(comparison, on=["N", "t_d"], how="left")
    out_dir = config.data_subdir(config.RESULTS_SUBDIR, root)
    base = f"ensemble_{ising_class}_{width}x{height}_{ansatz_kind}"
    members_csv = os.path.join(out_dir, base + "_members.csv")
    stats_csv = os.path.join(out_dir, base + "_stats.csv")
    save_csv(members_csv, frame)
    save_csv(stats_csv, stats)
    save_json(os.path.join(out_dir, base + "_stats.json"),
              {"schema_version": config.ENSEMBLE_SCHEMA_VERSION, "config_hash": config_hash,
               "count": count, "resumed": resumed, "statistics": stats.replace({np.nan: None})
               .to_dict(orient="records")})
    logger.info(f"Ensemble statistics written: {stats_csv}")
    return {"members": members_csv, "stats": stats_csv, "statistics": stats, "resumed": resumed}


# --- Benchmark ---

def chain_hamiltonian(nspins, seed=0):
    """Ferromagnetische 1D-Kette (N_h = 1) für die Skalierungsmessung."""
    inst = sample_ising("ferro", nspins, 1, seed)
    return inst, ising_hamiltonian(inst)


def fit_slope(sizes, seconds):
    """Steigung der Ausgleichsgeraden von log(seconds) über log(N)."""
    return float(np.polyfit(np.log(sizes), np.log(seconds), 1)[0])


def run_bench(K_values=(2, 3), ladders=None, root=None, config_hash=None, repeats=1):
    """
    Misst Stufe 1 auf 1D-Ketten entlang einer N-Leiter je K.

    Returns:
        dict: Zeilen (K, N, seconds, terms), Steigung und Urteil PASS/FLAG je K

    Hinweis:
        - PASS, wenn die Steigung in [K - 0.7, K + 0.7] liegt
        - Die kürzeste von `repeats` Messungen zählt
    """
    ladders = ladders or config.BENCH_LADDERS
    rows, verdicts = [], {}
    for K in K_values:
        if K not in ladders:
            raise ConfigError(f"No benchmark ladder configured for K={K}")
        for n in ladders[K]:
            inst, Hf = chain_hamiltonian(n)
            ansatz = build_ansatz("one-body", inst)
            best = math.inf
            for _ in range(repeats):
                started = time.perf_counter()
                ft = precompute_factorized(Hf, K, ansatz)
                best = min(best, time.perf_counter() - started)
            rows.append({"K": K, "N": n, "seconds": best, "terms": int(sum(ft.metadata["term_counts"]))})
            logger.info("Benchmark point", extra={"K": K, "N": n, "seconds": best})
        sizes = [r["N"] for r in rows if r["K"] == K]
        secs = [r["seconds"] for r in rows if r["K"] == K]
        slope = fit_slope(sizes, secs)
        verdict = "PASS" if abs(slope - K) <= config.BENCH_SLOPE_BAND else "FLAG"
        verdicts[K] = {"slope": slope, "verdict": verdict}
    frame = pd.DataFrame(rows, columns=["K", "N", "seconds", "terms"])
    out_dir = config.data_subdir(config.RESULTS_SUBDIR, root)
    csv_path = os.path.join(out_dir, "bench.csv")
    save_csv(csv_path, frame)
    save_json(os.path.join(out_dir, "bench.json"),
              {"schema_version": config.ENSEMBLE_SCHEMA_VERSION, "config_hash": config_hash,
               "fits": {str(K): v for K, v in verdicts.items()}})
    return {"rows": frame, "fits": verdicts, "csv": csv_path}


# --- Analysen ---

def run_analysis(inst, K_values, ansatz_kind="one-body", lam=config.ANALYSIS_LAMBDA, site=1,
                 delta=config.RESPONSE_DELTA, t_d=0.01, grid_points=config.DEFAULT_GRID_POINTS,
                 root=None, config_hash=None):
    """
    Geschwindigkeitsschranke, Abstand zu alpha^(inf) und Response-Funktion je K.

    Returns:
        dict: JSON-fähiger Bericht (auch als Datei geschrieben)
    """
    K_values = _check_k_values(K_values)
    inst = resolve_instance(inst)
    _check_dense(inst)
    Hf = ising_hamiltonian(inst)
    ansatz = build_ansatz(ansatz_kind, inst)
    grid = default_grid(grid_points)
    ft = precompute_factorized(Hf, K_values[-1], ansatz)
    bare = oracle.evolve(Hf, None, t_d)
    report = {
        "schema_version": config.EVOLUTION_SCHEMA_VERSION,
        "config_hash": config_hash,
        "instance": _stem(inst),
        "instance_hash": instance_hash(inst),
        "ansatz": ansatz_kind,
        "lambda": lam,
        "site": site,
        "t_d": t_d,
        "bare": {"F_f": bare.final_fidelity,
                 "speed_limit_lhs": oracle.speed_limit_lhs(bare),
                 "speed_limit_bound": oracle.speed_limit_bound(Hf, ansatz, None)},
        "ordering_flags": oracle.eigen_ordering_check(Hf, grid),
        "K": {},
    }
    for K in K_values:
        table = solve_protocol(Hf, ansatz, K, grid=grid, traces=ft)
        result = oracle.evolve(Hf, table, t_d, ansatz=ansatz)
        deviation = oracle.coefficient_deviation(Hf, ansatz, K, lam)
        response = oracle.response_function(inst, ansatz_kind, K, lam, site, delta)
        report["K"][str(K)] = {
            "F_f": result.final_fidelity,
            "speed_limit_lhs": oracle.speed_limit_lhs(result),
            "speed_limit_bound": oracle.speed_limit_bound(Hf, ansatz, table),
            "alpha_deviation": deviation["deviation"],
            "E": deviation["E"],
            "response": response.tolist(),
        }
    path = os.path.join(config.data_subdir(config.RESULTS_SUBDIR, root),
                        f"analysis_{_stem(inst)}_{ansatz_kind}.json")
    save_json(path, report)
    logger.info(f"Analysis written: {path}")
    report["path"] = path
    return report
