"""
Utility functions for the flexfl simulator.

This module provides common helpers for:
- Safe float conversion for display
- dB and dBm to linear conversions for config loading
- JSON file operations
- Stable digests for reproducible run keys
- Value formatting for CLI tables
- File utilities
"""

import hashlib
import json
import math
import os
from typing import Any, Optional, TypeVar

import numpy as np

T = TypeVar('T')


# =============================================================================
# TYPE CONVERSION
# =============================================================================

def safe_float(value: Any, default: Optional[float] = None) -> Optional[float]:
    """
    Safely convert a value to float.

    Handles None, NaN values, and conversion errors gracefully.

    Args:
        value: The value to convert to float.
        default: The default value to return if conversion fails.

    Returns:
        The float value, or the default if conversion is not possible.

    Examples:
        >>> safe_float("123.45")
        123.45
        >>> safe_float(None, 0.0)
        0.0
    """
    if value is None:
        return default
    try:
        result = float(value)
    except (ValueError, TypeError):
        return default
    if math.isnan(result):
        return default
    return result


# =============================================================================
# UNIT CONVERSIONS
# =============================================================================

def db_to_linear(value_db: float) -> float:
    """
    Convert a power ratio in dB to linear scale.

    Examples:
        >>> db_to_linear(-30)
        0.001
    """
    return 10.0 ** (value_db / 10.0)


def dbm_to_watts(value_dbm: float) -> float:
    """
    Convert dBm to watts.

    Examples:
        >>> dbm_to_watts(20)
        0.1
    """
    return 10.0 ** ((value_dbm - 30.0) / 10.0)


# =============================================================================
# JSON FILE OPERATIONS
# =============================================================================

def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset, tuple)):
        return list(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def load_json(filepath: str, default: T) -> T:
    """
    Load JSON data from a file.

    Args:
        filepath: Path to the JSON file.
        default: Value returned when the file is missing or invalid.

    Returns:
        The parsed JSON data, or the default value.
    """
    if not os.path.exists(filepath):
        return default
    try:
        with open(filepath, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (json.JSONDecodeError, IOError, OSError):
        return default


def save_json(filepath: str, data: Any, indent: int = 2) -> bool:
    """
    Save data to a JSON file, creating parent directories as needed.

    numpy scalars and arrays are converted to plain Python values.

    Args:
        filepath: Path to the JSON file.
        data: The data to save.
        indent: Indentation level.

    Returns:
        True if saved successfully, False otherwise.
    """
    try:
        directory = os.path.dirname(filepath)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(filepath, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(data, f, indent=indent, ensure_ascii=False, default=_json_default)
        return True
    except (IOError, OSError, TypeError):
        return False


# =============================================================================
# DIGESTS
# =============================================================================

def stable_digest(data: Any, length: int = 12) -> str:
    """
    Hash a JSON-serializable structure independently of key order.

    Args:
        data: Any structure made of dicts, lists and scalars.
        length: Number of hex characters to keep.

    Returns:
        Hex digest prefix.

    Examples:
        >>> stable_digest({'b': 1, 'a': 2}) == stable_digest({'a': 2, 'b': 1})
        True
    """
    canonical = json.dumps(data, sort_keys=True, separators=(',', ':'), default=_json_default)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:length]


# =============================================================================
# FORMATTING
# =============================================================================

def fmt_val(value: Any, decimals: int = 2, placeholder: str = '-') -> str:
    """
    Format a number for display, with a placeholder for missing values.

    Examples:
        >>> fmt_val(3.14159)
        '3.14'
        >>> fmt_val(None)
        '-'
    """
    number = safe_float(value)
    if number is None:
        return placeholder
    if math.isinf(number):
        return 'inf' if number > 0 else '-inf'
    return f"{number:.{decimals}f}"


def fmt_rate(value_bps: Any, placeholder: str = '-') -> str:
    """
    Format a bit rate with an SI prefix.

    Examples:
        >>> fmt_rate(2.5e7)
        '25.00 Mb/s'
    """
    number = safe_float(value_bps)
    if number is None:
        return placeholder
    for factor, unit in ((1e9, 'Gb/s'), (1e6, 'Mb/s'), (1e3, 'kb/s')):
        if abs(number) >= factor:
            return f"{number / factor:.2f} {unit}"
    return f"{number:.2f} b/s"


def fmt_sci(value: Any, digits: int = 3, placeholder: str = '-') -> str:
    """Format a number in scientific notation."""
    number = safe_float(value)
    if number is None:
        return placeholder
    return f"{number:.{digits}e}"


# =============================================================================
# FILE UTILITIES
# =============================================================================

def ensure_dir(directory: str) -> bool:
    """
    Ensure that a directory exists, creating it if necessary.

    Returns:
        True if the directory exists or was created, False otherwise.
    """
    try:
        os.makedirs(directory, exist_ok=True)
        return True
    except OSError:
        return False


def is_writable_dir(directory: str) -> bool:
    """Return True if the directory exists (or can be created) and is writable."""
    return ensure_dir(directory) and os.access(directory, os.W_OK)

