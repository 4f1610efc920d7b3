"""Access to data files bundled with the package (ships, scenarios, maps)."""

from pathlib import Path

from .errors import ValidationError

_DATA = Path(__file__).parent / "data"


def data_path(*parts) -> Path:
    """Absolute path of a bundled data file; raises if it does not exist."""
    p = _DATA.joinpath(*parts)
    if not p.exists():
        raise ValidationError(f"no bundled data file {'/'.join(parts)!r}")
    return p


def bundled_ships():
    return sorted(p.stem for p in _DATA.glob("*.json"))


def bundled_scenarios():
    d = _DATA / "scenarios"
    if not d.is_dir():
        return []
    return sorted(p.stem for p in d.glob("*.json"))
