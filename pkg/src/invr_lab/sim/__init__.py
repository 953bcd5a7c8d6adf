"""Synthetic platform, baseline recommender and A/B harness."""

from .harness import (
    VARIANT_NAMES,
    ABResult,
    SimConfig,
    SimState,
    Simulation,
    VariantResult,
    VariantSpec,
    retrain_with_feedback,
    run_ab,
    run_epoch,
    run_variant,
    warm_up,
)
from .recommender import (
    SlateConfig,
    assemble_slate,
    baseline_recommender,
    click_model,
    click_probability,
)
from .world import (
    PublisherThresholds,
    UserThresholds,
    World,
    WorldConfig,
    generate_world,
    publisher_stats,
    select_publishers,
    select_users,
)
