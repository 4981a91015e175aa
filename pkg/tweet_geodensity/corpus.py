"""
Corpus files and the synthetic geotagged-tweet generator

A tweet mentions 0, 1 or 2 place words. Its location is drawn from the
uniform combination of the mentioned words' densities (or from a broad
prior when none is mentioned). For a two-site word, the tweet carries the
disambiguating word of the sampled site with probability
``disambiguation_prob``. Because text and location are drawn from known
distributions, the exact conditional density of every text is available
(``true_density``), which gives an NLL floor for trained models.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import json

import numpy as np
from loguru import logger

from .data_models import CorpusRecord, GeoPoint
from .exceptions import ConfigError, DataError
from .geo import vincenty_distance
from .mixture import Gmm2D, mixture_log_density, sample
from .text import tokenize

UNINFORMATIVE = "uninformative"
INFORMATIVE = "informative"
AMBIGUOUS = "ambiguous"
RESOLVED = "resolved"
MIXED = "mixed"  # two place words, at least one two-site word left unresolved
TAGS = (UNINFORMATIVE, INFORMATIVE, AMBIGUOUS, RESOLVED, MIXED)

# Desk-scale region: roughly the Japanese archipelago
REGION_LAT = (31.0, 43.0)
REGION_LON = (130.0, 145.0)
KM_PER_DEGREE = 111.2


# ----- JSON-lines files -----------------------------------------------------

def write_corpus(path: Path, records: Iterable[CorpusRecord]) -> int:
    path = Path(path)
    count = 0
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(record.to_json() + "\n")
            count += 1
    logger.info(f"Wrote {count} records to {path}")
    return count


def _parse_line(line: str, path: Path, number: int) -> CorpusRecord:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}:{number}: invalid JSON ({e.msg})") from None
    if not isinstance(data, dict):
        raise DataError(f"{path}:{number}: expected an object with text/lat/lon")
    for key in ('text', 'lat', 'lon'):
        if key not in data:
            raise DataError(f"{path}:{number}: missing field '{key}'")
    if not isinstance(data['text'], str):
        raise DataError(f"{path}:{number}: 'text' must be a string")
    if any(isinstance(data[k], bool) or not isinstance(data[k], (int, float)) for k in ('lat', 'lon')):
        raise DataError(f"{path}:{number}: 'lat' and 'lon' must be numbers")
    try:
        return CorpusRecord(data['text'], float(data['lat']), float(data['lon']))
    except DataError as e:
        raise DataError(f"{path}:{number}: {e}") from None


def read_corpus(path: Path) -> List[CorpusRecord]:
    """Read a JSON-lines corpus; blank lines are skipped, errors name the line"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    records = []
    with open(path, encoding='utf-8') as f:
        for number, line in enumerate(f, start=1):
            if line.strip():
                records.append(_parse_line(line, path, number))
    logger.debug(f"Read {len(records)} records from {path}")
    return records


# ----- generator spec -------------------------------------------------------

@dataclass
class PlaceWord:
    """A word tied to one or two sites; two-site words carry one disambiguator per site"""
    word: str
    density: Gmm2D
    disambiguators: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.density.k not in (1, 2):
            raise ConfigError(f"place word '{self.word}' needs 1 or 2 components, got {self.density.k}")
        if self.disambiguators and len(self.disambiguators) != self.density.k:
            raise ConfigError(f"place word '{self.word}' needs one disambiguator per component")

    @property
    def is_bimodal(self) -> bool:
        return self.density.k == 2

    def separation_km(self) -> float:
        if not self.is_bimodal:
            return 0.0
        a, b = self.density.mu
        return vincenty_distance(GeoPoint(*a), GeoPoint(*b))

    def to_dict(self) -> dict:
        return {'word': self.word, 'density': self.density.to_dict(),
                'disambiguators': list(self.disambiguators)}

    @classmethod
    def from_dict(cls, data: dict) -> "PlaceWord":
        return cls(data['word'], Gmm2D.from_dict(data['density']), tuple(data.get('disambiguators', ())))


@dataclass
class GeneratorSpec:
    places: List[PlaceWord]
    fillers: List[str]
    prior: Gmm2D
    length_range: Tuple[int, int] = (5, 15)            # total tokens, inclusive
    mention_probs: Tuple[float, float, float] = (0.3, 0.65, 0.05)
    disambiguation_prob: float = 0.5
    seed: int = 0
    _lookup: Dict[str, PlaceWord] = field(init=False, repr=False, compare=False)
    _owners: Dict[str, Tuple[PlaceWord, int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.validate()
        self._lookup = {p.word: p for p in self.places}
        self._owners = {d: (p, k) for p in self.places for k, d in enumerate(p.disambiguators)}

    def validate(self) -> None:
        probs = np.asarray(self.mention_probs, dtype=np.float64)
        if probs.shape != (3,) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ConfigError(f"mention probabilities must be three non-negative values summing to 1, "
                              f"got {self.mention_probs}")
        if probs[2] > 0 and len(self.places) < 2:
            raise ConfigError("two-word mentions need at least two place words")
        if probs[1] > 0 and not self.places:
            raise ConfigError("mention probabilities need at least one place word")
        low, high = self.length_range
        if not 1 <= low <= high:
            raise ConfigError(f"invalid tweet length range {self.length_range}")
        if not 0.0 <= self.disambiguation_prob <= 1.0:
            raise ConfigError(f"disambiguation_prob must be in [0, 1], got {self.disambiguation_prob}")
        if not self.fillers:
            raise ConfigError("generator needs at least one filler word")

        words = [p.word for p in self.places]
        special = words + [d for p in self.places for d in p.disambiguators]
        if len(set(special)) != len(special):
            raise ConfigError("place words and disambiguators must be distinct")
        overlap = set(special) & set(self.fillers)
        if overlap:
            raise ConfigError(f"filler words overlap place vocabulary: {sorted(overlap)[:5]}")
        if any(tokenize(w) != [w] for w in special + list(self.fillers)):
            raise ConfigError("generator words must be single lowercase tokens")

    def place(self, word: str) -> Optional[PlaceWord]:
        return self._lookup.get(word)

    def disambiguator_owner(self, word: str) -> Optional[Tuple[PlaceWord, int]]:
        return self._owners.get(word)

    def to_dict(self) -> dict:
        return {
            'places': [p.to_dict() for p in self.places],
            'fillers': list(self.fillers),
            'prior': self.prior.to_dict(),
            'length_range': list(self.length_range),
            'mention_probs': list(self.mention_probs),
            'disambiguation_prob': self.disambiguation_prob,
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorSpec":
        try:
            return cls(
                places=[PlaceWord.from_dict(p) for p in data['places']],
                fillers=list(data['fillers']),
                prior=Gmm2D.from_dict(data['prior']),
                length_range=tuple(data.get('length_range', (5, 15))),
                mention_probs=tuple(data.get('mention_probs', (0.3, 0.65, 0.05))),
                disambiguation_prob=float(data.get('disambiguation_prob', 0.5)),
                seed=int(data.get('seed', 0)),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"invalid generator spec: {e}") from None
        except DataError as e:
            raise ConfigError(f"invalid generator spec: {e}") from None

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding='utf-8')
        return path

    @classmethod
    def load(cls, path: Path) -> "GeneratorSpec":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"generator spec not found: {path}")
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg}, line {e.lineno})") from None
        return cls.from_dict(data)


def _offset(center: np.ndarray, distance_km: float, bearing: float) -> np.ndarray:
    """Approximate point at a distance and bearing, on a local flat projection"""
    dlat = distance_km * np.cos(bearing) / KM_PER_DEGREE
    dlon = distance_km * np.sin(bearing) / (KM_PER_DEGREE * np.cos(np.radians(center[0])))
    return center + np.array([dlat, dlon])


def default_generator_spec(seed: int = 0, unimodal: int = 40, bimodal: int = 8, fillers: int = 200,
                           min_separation_km: float = 200.0,
                           bimodal_weights: Tuple[float, float] = (0.6, 0.4)) -> GeneratorSpec:
    """Desk-scale spec: single-site words, far-apart two-site words and plain fillers"""
    rng = np.random.default_rng(seed)
    low = np.array([REGION_LAT[0], REGION_LON[0]])
    high = np.array([REGION_LAT[1], REGION_LON[1]])

    places = []
    for i in range(unimodal):
        center = rng.uniform(low, high)
        sigma = rng.uniform(0.05, 0.15, size=2)
        places.append(PlaceWord(f"place{i:02d}", Gmm2D.single(center, sigma, rng.uniform(-0.3, 0.3))))

    for i in range(bimodal):
        while True:
            first = rng.uniform(low + 1.5, high - 1.5)
            second = _offset(first, rng.uniform(250.0, 450.0), rng.uniform(0.0, 2.0 * np.pi))
            if np.all(second >= low) and np.all(second <= high) and \
                    vincenty_distance(GeoPoint(*first), GeoPoint(*second)) >= min_separation_km:
                break
        density = Gmm2D(
            pi=np.asarray(bimodal_weights, dtype=np.float64),
            mu=np.stack([first, second]),
            sigma=np.tile(rng.uniform(0.05, 0.15, size=2), (2, 1)),  # equal spread: the heavier site is the mode
            rho=np.zeros(2),
        )
        word = f"twin{i:02d}"
        places.append(PlaceWord(word, density, (f"{word}north", f"{word}south")
                                if first[0] >= second[0] else (f"{word}south", f"{word}north")))

    prior = Gmm2D(
        pi=np.array([0.5, 0.3, 0.2]),
        mu=np.array([[35.7, 139.7], [34.7, 135.5], [33.6, 130.4]]),
        sigma=np.array([[1.0, 1.2], [0.8, 1.0], [0.8, 0.8]]),
        rho=np.zeros(3),
    )
    filler_words = [f"w{i:03d}" for i in range(fillers)]
    return GeneratorSpec(places, filler_words, prior, seed=seed)


# ----- generation -----------------------------------------------------------

def generate(spec: GeneratorSpec, count: int, seed: Optional[int] = None) -> List[CorpusRecord]:
    """Draw ``count`` tweets from one seeded stream"""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    low, high = spec.length_range
    records = []
    for _ in range(count):
        mentions = int(rng.choice(3, p=spec.mention_probs))
        chosen = [spec.places[i] for i in rng.choice(len(spec.places), size=mentions, replace=False)] \
            if mentions else []

        words = [p.word for p in chosen]
        if chosen:
            source = chosen[int(rng.integers(len(chosen)))]
            component = int(rng.choice(source.density.k, p=source.density.pi))
            site = Gmm2D.single(source.density.mu[component], source.density.sigma[component],
                                source.density.rho[component])
            point = sample(site, 1, rng)[0]
            if source.is_bimodal and source.disambiguators and rng.random() < spec.disambiguation_prob:
                words.append(source.disambiguators[component])
        else:
            point = sample(spec.prior, 1, rng)[0]

        length = max(int(rng.integers(low, high + 1)), len(words))
        words.extend(spec.fillers[i] for i in rng.integers(len(spec.fillers), size=length - len(words)))
        text = " ".join(words[i] for i in rng.permutation(len(words)))
        location = GeoPoint.wrapped(*point)
        records.append(CorpusRecord(text, location.lat, location.lon))
    return records


def generate_splits(spec: GeneratorSpec, sizes: Sequence[int], seed: Optional[int] = None,
                    names: Sequence[str] = ('train', 'dev', 'test')) -> Dict[str, List[CorpusRecord]]:
    """Consecutive slices of one generated stream"""
    if len(sizes) != len(names) or any(s < 0 for s in sizes):
        raise ConfigError(f"need {len(names)} non-negative split sizes, got {list(sizes)}")
    records = generate(spec, int(sum(sizes)), seed)
    bounds = np.cumsum([0, *sizes])
    return {name: records[bounds[i]:bounds[i + 1]] for i, name in enumerate(names)}


# ----- ground truth ---------------------------------------------------------

def _mentions(spec: GeneratorSpec, text: str) -> Tuple[List[PlaceWord], Optional[Tuple[PlaceWord, int]]]:
    places, resolved = [], None
    for token in tokenize(text):
        place = spec.place(token)
        if place is not None and place not in places:
            places.append(place)
        owner = spec.disambiguator_owner(token)
        if owner is not None:
            resolved = owner
    return places, resolved


def true_density(spec: GeneratorSpec, text: str) -> Gmm2D:
    """Exact conditional density of a tweet's location given its text"""
    places, resolved = _mentions(spec, text)
    if resolved is not None:
        place, k = resolved
        return Gmm2D.single(place.density.mu[k], place.density.sigma[k], place.density.rho[k])
    if not places:
        return spec.prior
    # A missing disambiguator lowers the odds that a two-site word was the source
    weights = np.array([1.0 - spec.disambiguation_prob if p.is_bimodal and p.disambiguators else 1.0
                        for p in places])
    if weights.sum() <= 0.0:
        weights = np.ones(len(places))
    return Gmm2D.combine([p.density for p in places], weights / weights.sum())


def entropy_floor(spec: GeneratorSpec, records: Sequence[CorpusRecord]) -> float:
    """Summed negative log density of the records under the generator (degree space)"""
    return -float(sum(mixture_log_density(np.array(r.point.as_tuple()), true_density(spec, r.text))
                      for r in records))


def classify_text(spec: GeneratorSpec, text: str) -> str:
    places, resolved = _mentions(spec, text)
    if not places:
        return UNINFORMATIVE
    if resolved is not None:
        return RESOLVED
    if any(p.is_bimodal for p in places):
        return AMBIGUOUS if len(places) == 1 else MIXED
    return INFORMATIVE


def ambiguous_separation(spec: GeneratorSpec, text: str) -> Optional[float]:
    """Site separation of the single unresolved two-site word in an ambiguous tweet"""
    if classify_text(spec, text) != AMBIGUOUS:
        return None
    places, _ = _mentions(spec, text)
    return places[0].separation_km()
