"""The closed set of visual tool actions.

Serialized names are part of the on-disk trajectory schema and the tool
backend wire contract; never rename members without a schema version bump.
"""

from __future__ import annotations

import enum

from .errors import VisreasonError


class UnknownAction(VisreasonError):
    pass


class ActionKind(enum.Enum):
    GROUNDING = "grounding"
    DEPTH = "depth"
    ZOOM_IN = "zoom_in"
    VISUAL_SEARCH = "visual_search"
    CROP = "crop"
    OCR = "ocr"
    IMAGE_SEGMENT = "image_segment"
    IMAGE_CAPTIONER = "image_captioner"
    SIMILARITY_COMPUTING = "similarity_computing"
    OVERLAY = "overlay"


# Stable presentation order; GROUNDING is first by convention.
_ORDER = (
    ActionKind.GROUNDING,
    ActionKind.DEPTH,
    ActionKind.ZOOM_IN,
    ActionKind.VISUAL_SEARCH,
    ActionKind.CROP,
    ActionKind.OCR,
    ActionKind.IMAGE_SEGMENT,
    ActionKind.IMAGE_CAPTIONER,
    ActionKind.SIMILARITY_COMPUTING,
    ActionKind.OVERLAY,
)

# Actions executed in-process; everything else goes to a ToolBackend.
NATIVE_ACTIONS = frozenset({ActionKind.CROP, ActionKind.ZOOM_IN, ActionKind.OVERLAY})


def list_actions() -> tuple[ActionKind, ...]:
    """All ten actions in their stable order."""
    return _ORDER


def parse_action_name(name: str) -> ActionKind:
    try:
        return ActionKind(name)
    except ValueError:
        raise UnknownAction(f"unknown action name: {name!r}") from None
