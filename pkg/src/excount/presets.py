"""Canned synthetic-dataset recipes used by the CLI and the test suite."""

from __future__ import annotations

from .data import SynthConfig


def tiny_categories() -> list[SynthConfig]:
    """Small-object categories on a 128 px canvas; pairs with the tiny model."""
    base = dict(width=128, height=128, count_range=(4, 22), distractor_count_range=(0, 3))
    return [
        SynthConfig(category="disc_red", family="disc", radius_range=(4.5, 8.5),
                    base_color=(0.85, 0.25, 0.2), **base),
        SynthConfig(category="ellipse_green", family="ellipse", radius_range=(5.0, 10.0),
                    base_color=(0.3, 0.8, 0.35), **base),
        SynthConfig(category="disc_blue", family="disc", radius_range=(4.0, 7.0),
                    base_color=(0.25, 0.45, 0.9), **base),
        SynthConfig(category="disc_yellow", family="disc", radius_range=(5.5, 10.0),
                    base_color=(0.9, 0.85, 0.3), **base),
    ]


def mixed_scale_categories(size: int = 256) -> list[SynthConfig]:
    """Radius bands spanning 4-48 px so exemplar scales cover all branches.

    Large categories are multi-glob clusters: one counted instance is a group
    of 2-6 globs, so a window much smaller than the instance sees lone globs
    without knowing which instance (or how much of it) they belong to. Large
    targets may clip the canvas edge (negative margin), which keeps their
    window-count mass spread evenly instead of piling up mid-canvas.
    """
    large = dict(
        width=size, height=size, family="cluster", radius_range=(22.0, 46.0),
        count_range=(4, 7), max_overlap=0.4, margin=-24.0,
        # same-coloured half-size decoy clusters: uncounted, locally
        # indistinguishable from counted instances at sub-instance scales
        distractor_family="cluster", distractor_radius_range=(15.0, 19.0),
        distractor_color=None, distractor_count_range=(3, 6),
    )
    small = dict(width=size, height=size, distractor_count_range=(0, 2))
    return [
        SynthConfig(category="disc_small", family="disc", radius_range=(4.0, 9.0),
                    count_range=(10, 24), base_color=(0.85, 0.3, 0.25), **small),
        SynthConfig(category="ellipse_small", family="ellipse", radius_range=(5.0, 10.0),
                    count_range=(10, 20), base_color=(0.3, 0.75, 0.4), **small),
        SynthConfig(category="cluster_large", base_color=(0.8, 0.35, 0.7), **large),
        SynthConfig(category="cluster_large_teal", base_color=(0.45, 0.8, 0.75), **large),
    ]


PRESETS = {
    "tiny": tiny_categories,
    "mixed": mixed_scale_categories,
}
