from .demands import DemandSpec, derive_label, evaluate_predicate
from .presets import Archetype, default_archetypes, default_scenarios
from .templates import (
    NO_ACTIVITY_SENTENCE, is_canonical, parse_description, render_description,
    render_purchase, render_browse, render_search, render_click, render_channel,
    round_threshold,
)
from .world import (
    Event, TabularRow, UserRecord, World, WorldConfig, generate_world, split_dataset,
)
