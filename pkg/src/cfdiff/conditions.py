"""Image-level condition labels used for conditioning and guidance."""

from enum import IntEnum


class Condition(IntEnum):
    """Three-valued conditioning label.

    NULL stands for dropped conditioning: the model is asked for an
    unconditional prediction. It is a distinct state, not a missing value.
    The integer value doubles as the embedding-table row index.
    """

    HEALTHY = 0
    UNHEALTHY = 1
    NULL = 2

    @property
    def is_label(self) -> bool:
        return self is not Condition.NULL


def condition_from_name(name: str) -> Condition:
    try:
        return Condition[name.strip().upper()]
    except KeyError:
        raise ValueError(f"unknown condition name: {name!r}") from None
