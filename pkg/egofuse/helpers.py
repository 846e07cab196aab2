"""Utilitary functions to parse and format the textual values found in
descriptors, question files and model answers."""
import re
from enum import Enum

from .base import Degrees, Meters, Seconds

_NUMBER = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?"


class Unit(Enum):
    """Unit suffixes accepted after a numeric value.
    The value of each member is the regular expression of its spellings."""

    METERS = r"m|meters?|metres?"
    """Distances, e.g. "3.2 m" or "3.2 meters"."""

    DEGREES = r"°|deg|degrees?"
    """Angles, e.g. "-30°" or "-30 degrees"."""


def parse_timestamp(value: str | int | float) -> Seconds:
    """Convert a "minutes:seconds" time to seconds.

    Also accept "hours:minutes:seconds" and plain numbers of seconds, which
    some models return instead of the requested format. The seconds field
    may be fractional. Raise :py:exc:`ValueError` when the seconds or minutes
    field is out of range or the text isn't a time."""
    if isinstance(value, bool):
        raise ValueError(f"Not a time: {value!r}")
    if isinstance(value, (int, float)):
        seconds = float(value)
    else:
        parts = value.strip().split(":")
        if not 1 <= len(parts) <= 3 or not all(parts):
            raise ValueError(f"Not a time: {value!r}")
        try:
            seconds = float(parts[-1])
            minutes = int(parts[-2]) if len(parts) >= 2 else 0
            hours = int(parts[-3]) if len(parts) == 3 else 0
        except ValueError:
            raise ValueError(f"Not a time: {value!r}") from None
        if len(parts) >= 2 and not 0 <= seconds < 60:
            raise ValueError(f"Seconds field out of range in {value!r}")
        if len(parts) == 3 and not 0 <= minutes < 60:
            raise ValueError(f"Minutes field out of range in {value!r}")
        if minutes < 0 or hours < 0:
            raise ValueError(f"Negative time: {value!r}")
        seconds += 60 * minutes + 3600 * hours
    if not 0 <= seconds < float("inf"):
        raise ValueError(f"Time out of range: {value!r}")
    return seconds


def format_timestamp(seconds: Seconds) -> str:
    """Format seconds as "minutes:seconds", the descriptor time format.

    Whole seconds are written "m:ss"; fractional ones keep every digit, so
    :py:func:`parse_timestamp` gives back the exact same float."""
    if seconds < 0:
        raise ValueError(f"Negative time: {seconds}")
    minutes = int(seconds // 60)
    rest = seconds - 60 * minutes
    if rest.is_integer():
        return f"{minutes}:{int(rest):02d}"
    text = repr(rest)
    if rest < 10:
        text = "0" + text
    return f"{minutes}:{text}"


def parse_quantity(value: str | int | float, unit: Unit) -> float:
    """Parse a number possibly followed by a unit suffix.

    Bare numbers and numeric strings are accepted as they are.
    Raise :py:exc:`ValueError` for anything else, e.g. "about 3 m"."""
    if isinstance(value, bool):
        raise ValueError(f"Not a number: {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    match = re.fullmatch(rf"\s*({_NUMBER})\s*(?:{unit.value})?\s*", value, re.IGNORECASE)
    if match is None:
        raise ValueError(f"Not a quantity in {unit.name.lower()}: {value!r}")
    return float(match.group(1))


def parse_distance(value: str | int | float) -> Meters:
    """Shortcut of :py:func:`parse_quantity` for distances."""
    return parse_quantity(value, Unit.METERS)


def parse_direction(value: str | int | float) -> Degrees:
    """Shortcut of :py:func:`parse_quantity` for angles."""
    return parse_quantity(value, Unit.DEGREES)


def normalize_label(text: str) -> str:
    """Normalize an option text or a free answer before comparing it.

    Lowercase, hyphens and underscores become spaces, other punctuation
    is removed and whitespace is collapsed.
    So "Back-Right." and "back right" are equal once normalized."""
    text = text.lower().replace("-", " ").replace("_", " ")
    text = re.sub(r"[^\w\s]", "", text)
    return " ".join(text.split())
