"""Built-in archetype and scenario definitions for the default world.

Three signal channels are kept deliberately orthogonal so that targeting and
ablation behavior is attributable: behavioral sequences carry archetype
identity (gold buyers, 3c siblings, ...), the tabular row carries a latent
that drives credit-product adoption, and search text carries a latent that
drives used-car interest. A sibling archetype pair (device enthusiasts vs
device repairers) shares most past behavior but diverges in future purchases,
providing hard negatives for few-shot tuning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..errors import ConfigError
from .demands import DemandSpec


@dataclass
class Archetype:
    id: str
    items: list[dict[str, float]]        # per phase: item -> weight
    merchants: list[dict[str, float]]
    pages: list[dict[str, float]]
    programs: list[dict[str, float]]
    channels: dict[str, float]
    cycle: int = 2
    drift_prob: float = 0.04

    def __post_init__(self):
        if self.cycle < 1:
            raise ConfigError(f"archetype {self.id}: cycle must be >= 1")
        if not 0.0 <= self.drift_prob <= 1.0:
            raise ConfigError(f"archetype {self.id}: drift probability outside [0,1]")
        for dist_list in (self.items, self.merchants, self.pages, self.programs):
            for dist in dist_list:
                _normalize(dist)
        _normalize(self.channels)


def _normalize(dist: dict[str, float]):
    total = sum(dist.values())
    if total <= 0:
        raise ConfigError("distribution has no mass")
    for k in dist:
        dist[k] /= total
    assert abs(sum(dist.values()) - 1.0) < 1e-9


# item -> category, and category -> lognormal amount parameters
ITEM_CATEGORIES = {
    "gold": "gold", "gold bars": "gold", "gold coin": "gold",
    "household kit": "home", "cleaning set": "home", "kitchen tool": "home",
    "house plant": "home", "throw blanket": "home", "lamp": "home",
    "smart phone": "3c-device", "tablet": "3c-device", "earbuds": "3c-device",
    "smart watch": "3c-device",
    "phone screen": "3c-part", "phone battery": "3c-part", "repair kit": "3c-part",
    "soldering iron": "3c-part",
    "phone case": "3c-accessory", "charger": "3c-accessory", "data cable": "3c-accessory",
    "noodle bowl": "food", "hotpot set": "food", "fruit box": "food",
    "coffee beans": "food", "dessert box": "food",
    "flight ticket": "travel", "hotel night": "travel", "city tour": "travel",
    "rail pass": "travel",
    "game points": "gaming", "season pass": "gaming", "skin pack": "gaming",
    "board game": "gaming", "comic book": "gaming",
    "sneakers": "fashion", "handbag": "fashion", "jacket": "fashion",
    "skincare set": "beauty", "perfume": "beauty",
    "paperback": "books", "puzzle set": "books",
    "groceries": "daily", "snack": "daily", "bus ticket": "daily", "movie ticket": "leisure",
}

AMOUNT_PARAMS = {
    "gold": (math.log(900), 0.7), "home": (math.log(80), 0.6),
    "3c-device": (math.log(500), 0.6), "3c-part": (math.log(60), 0.6),
    "3c-accessory": (math.log(25), 0.5), "food": (math.log(30), 0.6),
    "travel": (math.log(220), 0.8), "gaming": (math.log(45), 0.7),
    "fashion": (math.log(130), 0.6), "beauty": (math.log(90), 0.6),
    "books": (math.log(35), 0.5), "daily": (math.log(15), 0.5), "leisure": (math.log(25), 0.5),
}

BACKGROUND_ITEMS = {"groceries": 0.4, "snack": 0.25, "bus ticket": 0.2, "movie ticket": 0.15}
BACKGROUND_MERCHANTS = {"corner shop": 0.55, "super mart": 0.45}
BACKGROUND_PAGES = {"home page": 0.4, "feed page": 0.35, "search page": 0.25}
BACKGROUND_PROGRAMS = {"weather": 0.4, "mobility": 0.35, "utilities": 0.25}

GENERIC_QUERIES = [
    "weather forecast", "bus ticket", "food delivery", "movie times",
    "train schedule",
]
CAR_QUERIES = ["used car", "used car price", "second hand used car"]
CREDIT_PROGRAM = "credit loan"


def default_archetypes() -> list[Archetype]:
    return [
        Archetype(
            id="gold_investor",
            items=[{"gold": 0.5, "gold bars": 0.3, "gold coin": 0.2},
                   {"household kit": 0.5, "cleaning set": 0.3, "kitchen tool": 0.2}],
            merchants=[{"gold house": 0.6, "jewelry mart": 0.4}, {"home mart": 1.0}],
            pages=[{"wealth page": 0.5, "market news": 0.5}, {"home deals": 1.0}],
            programs=[{"wealth tracker": 0.6, "bullion shop": 0.4}, {"home helper": 1.0}],
            channels={"balance": 0.5, "bank card": 0.4, "easy pay": 0.1},
        ),
        Archetype(
            id="threec_enthusiast",
            items=[{"smart phone": 0.4, "tablet": 0.25, "earbuds": 0.2, "smart watch": 0.15},
                   {"phone case": 0.4, "charger": 0.3, "data cable": 0.3}],
            merchants=[{"3c mall": 0.7, "gadget store": 0.3}] * 2,
            pages=[{"gadget zone": 0.5, "new release": 0.3, "tech forum": 0.2}] * 2,
            programs=[{"gadget deals": 0.6, "tech news": 0.4}] * 2,
            channels={"balance": 0.3, "bank card": 0.3, "easy pay": 0.4},
        ),
        Archetype(
            id="threec_repairer",
            items=[{"phone screen": 0.4, "phone battery": 0.3, "repair kit": 0.2,
                    "soldering iron": 0.1},
                   {"phone case": 0.4, "charger": 0.3, "data cable": 0.3}],
            merchants=[{"3c mall": 0.7, "gadget store": 0.3}] * 2,
            pages=[{"gadget zone": 0.5, "repair guide": 0.3, "tech forum": 0.2}] * 2,
            programs=[{"gadget deals": 0.6, "parts market": 0.4}] * 2,
            channels={"balance": 0.35, "bank card": 0.35, "easy pay": 0.3},
        ),
        Archetype(
            id="foodie",
            items=[{"noodle bowl": 0.4, "hotpot set": 0.3, "fruit box": 0.3},
                   {"coffee beans": 0.5, "dessert box": 0.5}],
            merchants=[{"food court": 0.6, "fresh market": 0.4}] * 2,
            pages=[{"food street": 0.6, "recipe hub": 0.4}] * 2,
            programs=[{"meal deals": 0.7, "recipe box": 0.3}] * 2,
            channels={"balance": 0.5, "bank card": 0.3, "easy pay": 0.2},
        ),
        Archetype(
            id="traveler",
            items=[{"flight ticket": 0.5, "hotel night": 0.5},
                   {"city tour": 0.5, "rail pass": 0.5}],
            merchants=[{"trip agency": 0.7, "sky booking": 0.3}] * 2,
            pages=[{"travel deals": 0.6, "city guide": 0.4}] * 2,
            programs=[{"trip planner": 0.6, "hotel finder": 0.4}] * 2,
            channels={"balance": 0.2, "bank card": 0.5, "easy pay": 0.3},
        ),
        Archetype(
            id="gamer",
            items=[{"game points": 0.5, "season pass": 0.3, "skin pack": 0.2},
                   {"board game": 0.5, "comic book": 0.5}],
            merchants=[{"game plaza": 0.7, "hobby shop": 0.3}] * 2,
            pages=[{"arena page": 0.6, "esports news": 0.4}] * 2,
            programs=[{"game center": 0.7, "guild hall": 0.3}] * 2,
            channels={"balance": 0.6, "bank card": 0.2, "easy pay": 0.2},
        ),
        Archetype(
            id="fashionista",
            items=[{"sneakers": 0.4, "handbag": 0.3, "jacket": 0.3},
                   {"skincare set": 0.5, "perfume": 0.5}],
            merchants=[{"style mall": 0.6, "boutique row": 0.4}] * 2,
            pages=[{"style feed": 0.6, "lookbook": 0.4}] * 2,
            programs=[{"outfit picker": 0.6, "beauty box": 0.4}] * 2,
            channels={"balance": 0.3, "bank card": 0.5, "easy pay": 0.2},
        ),
        Archetype(
            id="homebody",
            items=[{"house plant": 0.4, "throw blanket": 0.3, "lamp": 0.3},
                   {"paperback": 0.5, "puzzle set": 0.5}],
            merchants=[{"home mart": 0.6, "book corner": 0.4}] * 2,
            pages=[{"cozy corner": 0.6, "reading list": 0.4}] * 2,
            programs=[{"home helper": 0.6, "library card": 0.4}] * 2,
            channels={"balance": 0.5, "bank card": 0.4, "easy pay": 0.1},
        ),
    ]


DEFAULT_CATEGORICAL = [
    ("wealth_band", 5), ("activity_band", 4), ("device_tier", 3),
    ("age_band", 6), ("city_tier", 4), ("channel_pref", 4),
]
DEFAULT_CONTINUOUS = ["balance_score", "txn_volume", "tenure_years", "session_rate"]

# Standard-normal quantile edges for equiprobable bucketing.
_BUCKET_EDGES = {
    3: [-0.4307, 0.4307],
    4: [-0.6745, 0.0, 0.6745],
    5: [-0.8416, -0.2533, 0.2533, 0.8416],
    6: [-0.9674, -0.4307, 0.0, 0.4307, 0.9674],
}


def bucketize(x: float, cardinality: int) -> int:
    edges = _BUCKET_EDGES[cardinality]
    idx = 0
    for e in edges:
        if x > e:
            idx += 1
    return idx


LATENT_SLOPE = 2.2
# Past-window searches fire more often than the future conversion events they
# foreshadow; the label rate is governed by the future windows alone.
SEARCH_HISTORY_BIAS = 1.5


def solve_window_bias(target_rate: float, future_windows: int, slope: float = LATENT_SLOPE,
                      grid: int = 4001) -> float:
    """Bias b such that E_u[1 - (1 - sigmoid(slope*u + b))^F] = target for u ~ N(0,1)."""
    import numpy as np

    u = np.linspace(-5, 5, grid)
    w = np.exp(-0.5 * u * u)
    w /= w.sum()

    def rate(b):
        q = 1.0 / (1.0 + np.exp(-(slope * u + b)))
        return float((w * (1.0 - (1.0 - q) ** future_windows)).sum())

    lo, hi = -20.0, 20.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rate(mid) < target_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def default_scenarios() -> list[DemandSpec]:
    return [
        DemandSpec(
            scenario_id="gold-buyers",
            sentence="users who will buy gold bars",
            predicate={"kind": "purchase", "category": "gold", "min_amount": None},
            base_rate=0.10, tags=["behavior-driven"],
        ),
        DemandSpec(
            scenario_id="credit-openers",
            sentence="users who will open the credit loan mini program",
            predicate={"kind": "browse", "program": CREDIT_PROGRAM},
            base_rate=0.15, tags=["tabular-driven"],
        ),
        DemandSpec(
            scenario_id="car-seekers",
            sentence="users who will search for used car",
            predicate={"kind": "search", "term": "used car"},
            base_rate=0.095, tags=["search-driven"],
        ),
        DemandSpec(
            scenario_id="phone-upgraders",
            sentence="users who will buy a new smart phone",
            predicate={"kind": "purchase", "category": "3c-device", "min_amount": None},
            base_rate=0.105, tags=["hard-negative"],
        ),
    ]
