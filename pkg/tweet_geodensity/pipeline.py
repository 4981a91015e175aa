"""
Geolocation Pipeline - wires corpora, vocabulary, models and evaluation
One method per CLI command; each writes into its own run directory
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from .config import Config, RunConfig
from .corpus import (GeneratorSpec, classify_text, default_generator_spec, generate_splits,
                     read_corpus, write_corpus)
from .data_models import CorpusRecord, EncodedCorpus, ModelKind, PredictionRecord
from .diffcore import GradCheckReport, Graph, gradient_check_report
from .evaluation import (build_summary, compare_histograms, default_bounds, export_histogram,
                         likelihood_sweep, placed_mode, predict_corpus, predict_densities, records_table,
                         sweep_table, write_densities, write_json, write_table)
from .exceptions import ConfigError, DataError, NumericalError
from .models import (Checkpoint, ConstantModel, EnetModel, GeoModel, ModelHyperParams,
                     NeuralGeoModel, load_checkpoint, save_checkpoint)
from .text import Vocab, build_vocab, encode_texts, load_vocab, percentile_length, save_vocab, tokenize
from .training import TrainConfig, TrainResult, loss_node, train

SPLITS = ('train', 'dev', 'test')
SPEC_FILE = 'generator_spec.json'
CONFIG_FILE = 'config.env'
CHECKPOINT_FILE = 'model.npz'
VOCAB_FILE = 'vocab.tsv'
HISTORY_FILE = 'history.csv'
GRAD_CHECK_KINDS = (ModelKind.CNN_L2, ModelKind.CNN_L1, ModelKind.MLP_L2, ModelKind.MLP_L1,
                    ModelKind.CMDN, ModelKind.MDN)


@dataclass
class LoadedModel:
    model: GeoModel
    vocab: Vocab
    config: RunConfig


def fresh_run_dir(path: Optional[Path], command: str, config: RunConfig) -> Path:
    """Use ``path`` if it is new or empty, otherwise the next unused RUNS_DIR/<command>-<hash>-<n>"""
    if path is not None:
        path = Path(path)
        if path.exists() and any(path.iterdir()):
            raise ConfigError(f"output directory {path} is not empty")
        path.mkdir(parents=True, exist_ok=True)
        return path
    n = 1
    while True:
        candidate = Config.RUNS_DIR / f"{command}-{config.config_hash()}-{n}"
        if not candidate.exists():
            candidate.mkdir(parents=True)
            return candidate
        n += 1


class GeolocationPipeline:
    """Run-level orchestration for a single RunConfig"""

    def __init__(self, config: RunConfig):
        self.config = config.validate()
        self.kind = config.kind
        logger.info(f"GeolocationPipeline initialized (model={self.kind.value}, "
                    f"config_hash={config.config_hash()})")

    # ----- data -----

    def generator_spec(self) -> GeneratorSpec:
        if self.config.generator_spec:
            return GeneratorSpec.load(Path(self.config.generator_spec))
        return default_generator_spec(self.config.generator_seed)

    def gen_data(self, out_dir: Path) -> Dict[str, Path]:
        """Write train/dev/test JSON-lines splits plus the generator spec used"""
        spec = self.generator_spec()
        sizes = (self.config.train_size, self.config.dev_size, self.config.test_size)
        splits = generate_splits(spec, sizes, seed=self.config.seed)
        paths = {}
        for name in SPLITS:
            paths[name] = out_dir / f"{name}.jsonl"
            write_corpus(paths[name], splits[name])
        spec.save(out_dir / SPEC_FILE)
        self.config.write(out_dir / CONFIG_FILE)
        logger.info(f"Generated {sum(sizes)} tweets into {out_dir}")
        return paths

    def load_split(self, name: str) -> List[CorpusRecord]:
        path = Path(self.config.data_dir) / f"{name}.jsonl"
        if not path.exists():
            raise ConfigError(f"missing {name} split: {path}")
        records = read_corpus(path)
        if not records:
            raise DataError(f"{path} contains no records")
        return records

    def build_vocab(self, records: Sequence[CorpusRecord]) -> Vocab:
        tokens = [tokenize(r.text) for r in records]
        vocab = build_vocab(tokens, self.config.min_count)
        length = self.config.max_length or percentile_length(tokens, 95.0, max(self.config.windows))
        logger.info(f"Vocabulary of {len(vocab)} entries, sequence length {length}")
        return vocab.with_length(length)

    @staticmethod
    def encode(records: Sequence[CorpusRecord], vocab: Vocab) -> EncodedCorpus:
        texts = tuple(r.text for r in records)
        ids, lengths = encode_texts(texts, vocab, vocab.max_length)
        points = np.array([r.point.as_tuple() for r in records], dtype=np.float64).reshape(-1, 2)
        return EncodedCorpus(ids, lengths, points, texts)

    # ----- training -----

    def hyper_params(self, vocab_size: int) -> ModelHyperParams:
        c = self.config
        return ModelHyperParams(vocab_size=vocab_size, embed_dim=c.embed_dim, windows=tuple(c.windows),
                                filters=c.filters, hidden=c.hidden, mixtures=c.mixtures, dropout=c.dropout)

    def train_config(self) -> TrainConfig:
        c = self.config
        return TrainConfig(epochs=c.epochs, batch_size=c.batch_size, learning_rate=c.learning_rate,
                           dropout=c.dropout, seed=c.seed, patience=c.patience, workers=c.workers)

    def train(self, out_dir: Path) -> GeoModel:
        """Fit the configured model; writes model.npz, vocab.tsv, config.env and history.csv"""
        train_records = self.load_split('train')
        vocab = self.build_vocab(train_records)
        train_set = self.encode(train_records, vocab)
        checkpoint_path = out_dir / CHECKPOINT_FILE
        save_vocab(vocab, out_dir / VOCAB_FILE)
        self.config.write(out_dir / CONFIG_FILE)
        echo, vocab_hash = self.config.to_dict(), vocab.content_hash()

        if self.kind.is_neural:
            dev_set = self.encode(self.load_split('dev'), vocab)
            model = NeuralGeoModel.build(self.kind, self.hyper_params(len(vocab)), self.config.seed)
            try:
                result = train(model, train_set, dev_set, self.train_config(),
                               on_improve=lambda m, _: save_checkpoint(m, checkpoint_path, echo, vocab_hash))
            except NumericalError as e:
                if e.partial is not None:
                    self._write_history(e.partial, out_dir)
                raise
            self._write_history(result, out_dir)
            model = result.model
        elif self.kind == ModelKind.ENET:
            model = EnetModel.fit(train_set.ids, train_set.lengths, train_set.points, len(vocab),
                                  self.config.enet_l1, self.config.enet_l2, self.config.enet_steps)
        else:
            model = ConstantModel.fit(self.kind, train_set.points)

        save_checkpoint(model, checkpoint_path, echo, vocab_hash)
        return model

    def _write_history(self, result: TrainResult, out_dir: Path) -> None:
        table = pd.DataFrame([r.to_row() for r in result.history],
                             columns=['epoch', 'train_loss', 'dev_loss', 'dev_median_km', 'dev_mean_km'])
        write_table(table, out_dir / HISTORY_FILE, self.config.header())

    # ----- loading -----

    @staticmethod
    def load(checkpoint_path: Path) -> LoadedModel:
        """Checkpoint plus the vocabulary stored beside it, hash-checked"""
        checkpoint_path = Path(checkpoint_path)
        if not checkpoint_path.exists():
            raise ConfigError(f"checkpoint not found: {checkpoint_path}")
        checkpoint: Checkpoint = load_checkpoint(checkpoint_path)
        vocab = load_vocab(checkpoint_path.parent / VOCAB_FILE)
        if vocab.content_hash() != checkpoint.vocab_hash:
            raise DataError(f"vocabulary beside {checkpoint_path} does not match the checkpoint "
                            f"({vocab.content_hash()} != {checkpoint.vocab_hash})")
        return LoadedModel(checkpoint.model, vocab, RunConfig.from_dict(checkpoint.config))

    # ----- evaluation -----

    def _tags(self, corpus_path: Path, records: Sequence[CorpusRecord]) -> List[str]:
        spec_path = corpus_path.parent / SPEC_FILE
        if not spec_path.exists():
            return []
        spec = GeneratorSpec.load(spec_path)
        return [classify_text(spec, r.text) for r in records]

    def evaluate(self, loaded: LoadedModel, corpus_path: Path, out_dir: Path, sweep: bool = False,
                 hist: bool = False, densities: bool = False,
                 compare: Sequence[LoadedModel] = ()) -> List[PredictionRecord]:
        """records.csv and summary.json, plus optional sweep.csv, hist.csv, densities.jsonl"""
        if sweep and not loaded.model.is_density:
            raise DataError(f"--sweep needs a density checkpoint (cmdn or mdn); "
                            f"{loaded.model.kind.value} predicts points without a likelihood")
        if densities and not loaded.model.is_density:
            raise DataError(f"--densities needs a density checkpoint; {loaded.model.kind.value} has none")

        c = self.config
        meta = loaded.config.header()
        corpus_records = read_corpus(corpus_path)
        if not corpus_records:
            raise DataError(f"{corpus_path} contains no records")
        corpus = self.encode(corpus_records, loaded.vocab)
        tags = self._tags(Path(corpus_path), corpus_records)

        records = predict_corpus(loaded.model, corpus, workers=c.workers, tags=tags)
        write_table(records_table(records), out_dir / 'records.csv', meta)
        summary = build_summary(records, c.bootstrap_resamples, c.ci_level, loaded.config.seed, c.outlier_km)
        write_json({'model': loaded.model.kind.value, 'summary': summary.to_dict()},
                   out_dir / 'summary.json', meta)
        logger.info(f"{loaded.model.kind.value}: mean {summary.mean_km:.1f} km, median {summary.median_km:.1f} km")

        if sweep:
            bounds = list(c.sweep_bounds) or default_bounds(records, c.sweep_points)
            rows = likelihood_sweep(records, bounds, c.bootstrap_resamples, c.ci_level, loaded.config.seed)
            write_table(sweep_table(rows), out_dir / 'sweep.csv', meta)
        if hist:
            if compare:
                named = {loaded.model.kind.value: records}
                for other in compare:
                    name = other.model.kind.value
                    if name in named:
                        name = f"{name}-{len(named)}"
                    named[name] = predict_corpus(other.model, self.encode(corpus_records, other.vocab),
                                                 workers=c.workers)
                table = compare_histograms(named, c.hist_bins, c.hist_transform)
            else:
                table = export_histogram(records, c.hist_bins, c.hist_transform)
            write_table(table, out_dir / 'hist.csv', meta)
        if densities:
            write_densities(predict_densities(loaded.model, corpus), out_dir / 'densities.jsonl', meta)
        self.config.write(out_dir / CONFIG_FILE)
        return records

    # ----- prediction -----

    @staticmethod
    def predict(loaded: LoadedModel, texts: Iterable[str], emit_density: bool = False) -> List[dict]:
        """Point (and likelihood, optionally the full density) per text line"""
        model = loaded.model
        if emit_density and not model.is_density:
            raise DataError(f"--emit-density needs a density checkpoint; {model.kind.value} has none")
        texts = list(texts)
        if not texts:
            return []
        ids, lengths = encode_texts(texts, loaded.vocab, loaded.vocab.max_length)
        outputs = []
        if model.is_density:
            for text, mixture in zip(texts, model.predict_mixtures(ids, lengths)):
                point, likelihood = placed_mode(mixture)
                row = {'text': text, 'lat': point.lat, 'lon': point.lon, 'likelihood': likelihood}
                if emit_density:
                    row['density'] = mixture.to_dict()
                outputs.append(row)
        else:
            for text, point in zip(texts, model.predict_points(ids, lengths)):
                outputs.append({'text': text, 'lat': float(point[0]), 'lon': float(point[1])})
        return outputs

    # ----- verification -----

    def grad_check(self, kinds: Optional[Sequence[ModelKind]] = None,
                   step: float = 1e-5) -> Dict[str, GradCheckReport]:
        """Finite-difference check of every loss on a tiny model per kind"""
        kinds = list(kinds or GRAD_CHECK_KINDS)
        hyper = ModelHyperParams(vocab_size=10, embed_dim=3, windows=(2, 3), filters=2, hidden=4,
                                 mixtures=3, dropout=0.2)
        rng = np.random.default_rng(self.config.seed)
        lengths = np.array([5, 3, 1, 0])
        ids = rng.integers(2, hyper.vocab_size, size=(4, 5))
        ids[np.arange(5)[None, :] >= lengths[:, None]] = 0
        targets = rng.normal(size=(4, 2))

        reports = {}
        for kind in kinds:
            if not kind.is_neural:
                raise ConfigError(f"{kind.value} has no gradient to check")
            model = NeuralGeoModel.build(kind, hyper, self.config.seed)
            g = Graph()
            output = model.forward(g, ids, lengths, training=True, rng=np.random.default_rng(self.config.seed))
            loss = loss_node(g, output, targets, kind.loss_kind)
            reports[kind.value] = gradient_check_report(g, loss, step)
            logger.info(f"Gradient check {kind.value}: max relative error {reports[kind.value].max_error:.3e}")
        return reports
