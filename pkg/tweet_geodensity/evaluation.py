"""
Prediction over test corpora and the statistics reported on it

Distances are Vincenty errors in kilometres. Every exported file starts with
a ``# config_hash=... seed=...`` comment line (CSV) or a ``meta`` object
(JSON) so results can be traced back to the run that produced them.
"""

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union
import json

import numpy as np
import pandas as pd
from loguru import logger

from .data_models import EncodedCorpus, GeoPoint, PredictionRecord, SweepRow, Summary
from .exceptions import ConfigError, DataError
from .geo import GeodesicResult, vincenty_inverse
from .mixture import Gmm2D, mixture_density, mode_approx

DEFAULT_RESAMPLES = 1000
DEFAULT_LEVEL = 0.95
LOG_DISTANCE_FLOOR_KM = 1e-3
OUTLIER_KM = 500.0
SHARD_SIZE = 256
RECORD_COLUMNS = ['index', 'pred_lat', 'pred_lon', 'true_lat', 'true_lon', 'error_km',
                  'likelihood', 'geodesic_fallback', 'tag']

Distances = Union[Sequence[PredictionRecord], Sequence[float], np.ndarray]


def _geodesics(pairs: List[Tuple[GeoPoint, GeoPoint]]) -> List[GeodesicResult]:
    return [vincenty_inverse(a, b) for a, b in pairs]


def _shards(count: int, size: Optional[int] = None) -> List[slice]:
    size = size or SHARD_SIZE
    return [slice(start, min(start + size, count)) for start in range(0, count, size)]


def geodesics(predicted: np.ndarray, truth: np.ndarray, workers: int = 1) -> List[GeodesicResult]:
    """Vincenty results for row-aligned (N, 2) degree arrays, sharded over threads"""
    pairs = [(GeoPoint.wrapped(*p), GeoPoint.wrapped(*t)) for p, t in zip(predicted, truth)]
    shards = [pairs[s] for s in _shards(len(pairs))]
    if workers <= 1 or len(shards) <= 1:
        return [r for shard in shards for r in _geodesics(shard)]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return [r for part in executor.map(_geodesics, shards) for r in part]


def distances_km(predicted: np.ndarray, truth: np.ndarray, workers: int = 1) -> np.ndarray:
    return np.array([r.distance_km for r in geodesics(predicted, truth, workers)])


def placed_mode(mixture: Gmm2D) -> Tuple[GeoPoint, float]:
    """Mode approximation as a valid point, with the mixture density at that point

    A mode outside the lat/lon ranges is clamped or wrapped first; its
    likelihood is then re-read at the point that is actually reported.
    """
    mode = mode_approx(mixture)
    point = GeoPoint.wrapped(*mode.point)
    if point.as_tuple() == (float(mode.point[0]), float(mode.point[1])):
        return point, mode.likelihood
    return point, float(mixture_density(np.array(point.as_tuple()), mixture))


def _predict_shard(model, corpus: EncodedCorpus, rows: slice, tags: Sequence[str]) -> List[PredictionRecord]:
    ids, lengths = corpus.ids[rows], corpus.lengths[rows]
    if model.is_density:
        placed = [placed_mode(m) for m in model.predict_mixtures(ids, lengths)]
    else:
        placed = [(GeoPoint.wrapped(*p), None) for p in model.predict_points(ids, lengths)]

    records = []
    for offset, (predicted, likelihood) in enumerate(placed):
        index = rows.start + offset
        truth = GeoPoint(*corpus.points[index])
        result = vincenty_inverse(predicted, truth)
        records.append(PredictionRecord(
            predicted=predicted,
            truth=truth,
            error_km=result.distance_km,
            likelihood=likelihood,
            geodesic_fallback=not result.converged,
            tag=tags[index] if tags else "",
            index=index,
        ))
    return records


def predict_corpus(model, corpus: EncodedCorpus, workers: int = 1,
                   tags: Optional[Sequence[str]] = None) -> List[PredictionRecord]:
    """One PredictionRecord per corpus row, in corpus order

    Regression models emit y_hat directly; density models emit the mode
    approximation and the mixture density there.
    """
    tags = list(tags) if tags else []
    shards = _shards(len(corpus))
    if workers <= 1 or len(shards) <= 1:
        parts = [_predict_shard(model, corpus, s, tags) for s in shards]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(lambda s: _predict_shard(model, corpus, s, tags), shards))
    records = [r for part in parts for r in part]
    fallbacks = sum(r.geodesic_fallback for r in records)
    if fallbacks:
        logger.warning(f"{fallbacks} predictions used the haversine fallback distance")
    logger.info(f"Predicted {len(records)} records with {model.kind.value}")
    return records


def predict_densities(model, corpus: EncodedCorpus) -> List[Gmm2D]:
    """Full degree-space mixtures per record (density models only)"""
    return model.predict_mixtures(corpus.ids, corpus.lengths)


def _as_distances(data: Distances) -> np.ndarray:
    if len(data) and isinstance(data[0], PredictionRecord):
        return np.array([r.error_km for r in data], dtype=np.float64)
    return np.asarray(data, dtype=np.float64).reshape(-1)


def summarize(data: Distances) -> Summary:
    """Arithmetic mean and median (even counts average the middle pair)"""
    distances = _as_distances(data)
    if distances.size == 0:
        raise DataError("cannot summarize an empty set of predictions")
    return Summary(int(distances.size), float(np.mean(distances)), float(np.median(distances)))


STATISTICS = {'mean': np.mean, 'median': np.median}


def bootstrap_ci(data: Distances, statistic: str = 'median', resamples: int = DEFAULT_RESAMPLES,
                 level: float = DEFAULT_LEVEL, seed: int = 0) -> Tuple[float, float]:
    """Percentile interval of a statistic over resamples drawn with replacement

    Resampling indexes a sorted copy, so the interval does not depend on
    record order.
    """
    if statistic not in STATISTICS:
        raise ConfigError(f"unknown bootstrap statistic '{statistic}' (mean or median)")
    if resamples < 100:
        raise ConfigError(f"bootstrap needs at least 100 resamples, got {resamples}")
    if not 0.0 < level < 1.0:
        raise ConfigError(f"confidence level must be in (0, 1), got {level}")
    values = np.sort(_as_distances(data))
    if values.size == 0:
        raise DataError("cannot bootstrap an empty set of predictions")

    rng = np.random.default_rng(seed)
    func = STATISTICS[statistic]
    stats = np.empty(resamples)
    block = 100
    for start in range(0, resamples, block):
        count = min(block, resamples - start)
        draws = rng.integers(0, values.size, size=(count, values.size))
        stats[start:start + count] = func(values[draws], axis=1)
    tail = (1.0 - level) / 2.0
    low, high = np.percentile(stats, [100.0 * tail, 100.0 * (1.0 - tail)])
    return float(low), float(high)


def _likelihoods(records: Sequence[PredictionRecord]) -> np.ndarray:
    missing = sum(r.likelihood is None for r in records)
    if missing:
        raise DataError(f"{missing} of {len(records)} records have no likelihood; "
                        f"likelihood filtering needs a density model (cmdn or mdn)")
    return np.array([r.likelihood for r in records], dtype=np.float64)


def default_bounds(records: Sequence[PredictionRecord], count: int = 10) -> List[float]:
    """Log-spaced grid over the empirical likelihood range"""
    likelihoods = _likelihoods(records)
    positive = likelihoods[likelihoods > 0]
    if positive.size == 0:
        return [0.0] * count
    return np.geomspace(positive.min(), positive.max(), count).tolist()


def likelihood_sweep(records: Sequence[PredictionRecord], bounds: Sequence[float],
                     resamples: int = DEFAULT_RESAMPLES, level: float = DEFAULT_LEVEL,
                     seed: int = 0) -> List[SweepRow]:
    """Statistics of the records whose likelihood is at least each bound"""
    likelihoods = _likelihoods(records)
    bounds = [float(b) for b in bounds]
    if any(b2 < b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise ConfigError("likelihood bounds must be ascending")
    distances = _as_distances(records)

    rows = []
    for bound in bounds:
        kept = distances[likelihoods >= bound]
        if kept.size == 0:
            rows.append(SweepRow(bound, 0))
            continue
        summary = summarize(kept)
        rows.append(SweepRow(
            bound=bound,
            retained=int(kept.size),
            mean_km=summary.mean_km,
            median_km=summary.median_km,
            mean_ci=bootstrap_ci(kept, 'mean', resamples, level, seed),
            median_ci=bootstrap_ci(kept, 'median', resamples, level, seed),
        ))
    return rows


def _transformed(distances: np.ndarray, transform: str) -> np.ndarray:
    if transform == 'log10':
        return np.log10(np.maximum(distances, LOG_DISTANCE_FLOOR_KM))
    if transform == 'linear':
        return distances
    raise ConfigError(f"unknown histogram transform '{transform}' (log10 or linear)")


def export_histogram(data: Distances, bins: int = 20, transform: str = 'log10') -> pd.DataFrame:
    """Counts of (optionally log10) error distances; zero distances land in the lowest bin"""
    if bins < 1:
        raise ConfigError(f"histogram needs at least one bin, got {bins}")
    values = _transformed(_as_distances(data), transform)
    counts, edges = np.histogram(values, bins=bins)
    return pd.DataFrame({'bin_low': edges[:-1], 'bin_high': edges[1:], 'count': counts})


def compare_histograms(named: Mapping[str, Distances], bins: int = 20,
                       transform: str = 'log10') -> pd.DataFrame:
    """One count column per model on a shared bin grid"""
    if bins < 1:
        raise ConfigError(f"histogram needs at least one bin, got {bins}")
    if not named:
        raise DataError("no models to compare")
    values = {name: _transformed(_as_distances(data), transform) for name, data in named.items()}
    everything = np.concatenate(list(values.values()))
    edges = np.histogram_bin_edges(everything, bins=bins)
    table = pd.DataFrame({'bin_low': edges[:-1], 'bin_high': edges[1:]})
    for name, column in values.items():
        table[name] = np.histogram(column, bins=edges)[0]
    return table


def outlier_ratio(data: Distances, cut_km: float = OUTLIER_KM) -> float:
    distances = _as_distances(data)
    if distances.size == 0:
        raise DataError("cannot compute an outlier ratio without predictions")
    return float(np.mean(distances > cut_km))


def summary_by_tag(records: Sequence[PredictionRecord]) -> Dict[str, Summary]:
    groups: Dict[str, List[float]] = {}
    for record in records:
        if record.tag:
            groups.setdefault(record.tag, []).append(record.error_km)
    return {tag: summarize(values) for tag, values in sorted(groups.items())}


def build_summary(records: Sequence[PredictionRecord], resamples: int = DEFAULT_RESAMPLES,
                  level: float = DEFAULT_LEVEL, seed: int = 0,
                  outlier_km: float = OUTLIER_KM) -> Summary:
    """Overall statistics with bootstrap intervals, outlier ratio and per-tag breakdown"""
    summary = summarize(records)
    summary.extras = {
        'mean_ci': list(bootstrap_ci(records, 'mean', resamples, level, seed)),
        'median_ci': list(bootstrap_ci(records, 'median', resamples, level, seed)),
        'ci_level': level,
        'outlier_km': outlier_km,
        'outlier_ratio': outlier_ratio(records, outlier_km),
        'geodesic_fallbacks': int(sum(r.geodesic_fallback for r in records)),
        'by_tag': {tag: s.to_dict() for tag, s in summary_by_tag(records).items()},
    }
    return summary


# ----- writers --------------------------------------------------------------

def header_line(meta: Mapping[str, object]) -> str:
    return "# " + " ".join(f"{key}={value}" for key, value in meta.items()) + "\n"


def write_table(table: pd.DataFrame, path: Path, meta: Mapping[str, object]) -> Path:
    path = Path(path)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(header_line(meta))
        table.to_csv(f, index=False)
    logger.info(f"Wrote {len(table)} rows to {path}")
    return path


def read_table(path: Path) -> pd.DataFrame:
    """Load a CSV written by ``write_table`` (the header comment is skipped)"""
    return pd.read_csv(path, comment='#')


def records_table(records: Sequence[PredictionRecord]) -> pd.DataFrame:
    rows = [r.to_row() for r in records]
    return pd.DataFrame(rows) if rows else pd.DataFrame(columns=RECORD_COLUMNS)


def sweep_table(rows: Sequence[SweepRow]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in rows])


def write_json(data: Mapping[str, object], path: Path, meta: Mapping[str, object]) -> Path:
    path = Path(path)
    payload = {'meta': dict(meta), **data}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding='utf-8')
    logger.info(f"Wrote {path}")
    return path


def write_densities(mixtures: Sequence[Gmm2D], path: Path, meta: Mapping[str, object]) -> Path:
    """One JSON object per record: index and its degree-space mixture"""
    path = Path(path)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps({'meta': dict(meta)}) + "\n")
        for index, mixture in enumerate(mixtures):
            f.write(json.dumps({'index': index, **mixture.to_dict()}) + "\n")
    logger.info(f"Wrote {len(mixtures)} densities to {path}")
    return path
