import json
import dataclasses as dc
from pathlib import Path
import typing as t

from slider_quant.core.errors import ConfigError


def save_json(data: t.Any, file_path: t.Union[str, Path], indent: int = 2) -> None:
    """
    Save data to a JSON file. Keys are sorted so identical content gives identical bytes.

    :param data: Data to serialize
    :param file_path: Destination file path
    :param indent: Indentation for the JSON file
    """
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with file_path.open("w", encoding="utf-8") as f:
        json.dump(data, f, indent=indent, sort_keys=True)
        f.write("\n")


def load_json(file_path: t.Union[str, Path]) -> t.Any:
    """
    Load data from a JSON file.

    :param file_path: Source file path
    :returns: Deserialized data
    """
    file_path = Path(file_path)
    with file_path.open("r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{file_path} is not valid JSON: {e}") from e


def canonical_json(data: t.Any) -> bytes:
    """Compact, key-sorted UTF-8 JSON used inside binary headers."""
    return json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")


# Recursive helper for serialization:
def _convert_for_serialization(value: t.Any) -> t.Any:
    if isinstance(value, Path):
        return str(value)
    elif isinstance(value, (list, tuple)):
        return [_convert_for_serialization(item) for item in value]
    elif isinstance(value, dict):
        return {k: _convert_for_serialization(v) for k, v in value.items()}
    else:
        return value


def serialize_dataclass(instance: t.Any) -> dict:
    """
    Convert a dataclass instance to a dictionary.
    Handles conversion of non-JSON-friendly types like Path, tuples and nested dataclasses.
    """
    data = dc.asdict(instance)
    return _convert_for_serialization(data)


# Helper for deserialization: recursively convert values based on the field type.
def _convert_to_field(field_type: t.Any, value: t.Any, strict: bool) -> t.Any:
    if value is None:
        return value

    if field_type is Path:
        return Path(value)

    if dc.is_dataclass(field_type):
        return deserialize_dataclass(field_type, value, strict=strict)

    origin = t.get_origin(field_type)
    if origin is t.Union:
        # Optional[X] -> X
        inner = [arg for arg in t.get_args(field_type) if arg is not type(None)]
        if len(inner) == 1:
            return _convert_to_field(inner[0], value, strict)
        return value

    if origin in (list, tuple):
        args = t.get_args(field_type)
        inner_type = args[0] if args else t.Any
        items = [_convert_to_field(inner_type, item, strict) for item in value]
        return tuple(items) if origin is tuple else items

    if field_type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)

    # For any other type, assume it is JSON-friendly.
    return value


def deserialize_dataclass(cls: t.Type, data: dict, strict: bool = False) -> t.Any:
    """
    Convert a dictionary into a dataclass instance.
    Handles conversion of fields like lists of Paths or nested dataclasses.

    :param cls: Target dataclass type
    :param data: Source mapping
    :param strict: Reject keys that are not fields of ``cls`` (recursively)
    :raises ConfigError: On unknown keys in strict mode
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} expects a JSON object, got {type(data).__name__}")

    hints = t.get_type_hints(cls)
    fields = {field.name: field for field in dc.fields(cls) if field.init}
    if strict:
        unknown = sorted(set(data) - set(fields))
        if unknown:
            raise ConfigError(f"Unknown {cls.__name__} keys: {', '.join(unknown)}")

    field_values = {}
    for name in fields:
        if name not in data:
            continue  # dataclass default applies
        field_values[name] = _convert_to_field(hints[name], data[name], strict)
    try:
        return cls(**field_values)
    except TypeError as e:
        raise ConfigError(f"Invalid {cls.__name__}: {e}") from e
