"""
Reading and writing solver configuration files.

A configuration is an INI file with the sections below. Every key maps onto one
SolveConfig field; the manifest a run writes uses the same format, so it can be fed
back to ``pywadmm solve --config`` to replay the run.
"""

from __future__ import annotations

import configparser
import io
import logging
import math
import re
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from pywadmm.pde_flows import preset_defaults
from pywadmm.schema import OPERATOR, ConfigError, SolveConfig

logger = logging.getLogger(__name__)

SECTIONS: dict[str, tuple[str, ...]] = {
    'experiment': ('preset', 'pde', 'splitting', 'centralized'),
    'grid': ('bounds', 'counts'),
    'admm': ('alpha', 'tau', 'epsilon', 'beta', 'h'),
    'inner': (
        'inner_iters',
        'warm_start',
        'newton_tol',
        'max_newton',
        'backtrack_alpha',
        'backtrack_beta',
    ),
    'prox': ('prox_delta', 'prox_max_sweeps'),
    'run': (
        'max_outer_iters',
        'consensus_tol',
        'snapshot_every',
        'threads',
        'kernel_mode',
        'consensus_point',
    ),
    'output': ('output_dir',),
}

GRID_KEYS = ('bounds', 'counts')
NONE_VALUES = ('', 'none')

_SECTION_LINE = re.compile(r'^\s*\[([^\]]+)\]')
_KEY_LINE = re.compile(r'^\s*([^#;=:\s][^=:]*?)\s*[=:]')


def _line_index(text: str) -> dict[tuple[str | None, str | None], int]:
    """1-based line numbers of every section header and key."""
    index: dict[tuple[str | None, str | None], int] = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        if match := _SECTION_LINE.match(line):
            section = match.group(1).strip()
            index.setdefault((section, None), number)
        elif section is not None and (match := _KEY_LINE.match(line)):
            index.setdefault((section, match.group(1).strip().lower()), number)
    return index


def _section_of(key: str) -> str | None:
    for section, keys in SECTIONS.items():
        if key in keys:
            return section
    return None


######################
# Value parsing
######################


def parse_bounds(value: str) -> list[tuple[float, float]]:
    """Parses ``lo:hi, lo:hi`` into per-axis intervals."""
    bounds = []
    for item in value.split(','):
        parts = item.split(':')
        if len(parts) != 2:
            raise ValueError(f'expected lo:hi, got {item.strip()!r}')
        bounds.append((float(parts[0]), float(parts[1])))
    return bounds


def parse_counts(value: str) -> list[int]:
    return [int(item) for item in value.split(',')]


def parse_splitting(value: str) -> list[list[OPERATOR]]:
    """
    Parses operator groups such as ``advection+log_diffusion, interaction``: groups are
    separated by commas, operators within a group by ``+``.
    """
    groups = []
    for item in value.split(','):
        names = [name.strip().lower() for name in item.split('+') if name.strip()]
        if not names:
            raise ValueError(f'empty operator group in {value!r}')
        try:
            groups.append([OPERATOR(name) for name in names])
        except ValueError:
            expected = [op.value for op in OPERATOR]
            raise ValueError(f'unknown operator in {item.strip()!r}; expected one of {expected}')
    return groups


def _parse_value(key: str, raw: str) -> Any:
    value = raw.strip()
    if value.lower() in NONE_VALUES:
        return None
    if key == 'bounds':
        return parse_bounds(value)
    if key == 'counts':
        return parse_counts(value)
    if key == 'splitting':
        return parse_splitting(value)
    return value


######################
# Reading
######################


def _read_file(path: str | Path) -> tuple[dict[str, Any], dict]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f'Failed to read config file {path}: {str(e)}')

    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as e:
        raise ConfigError(
            f'Malformed config file {path}: {str(e)}', line=getattr(e, 'lineno', None)
        )

    lines = _line_index(text)
    values: dict[str, Any] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(
                f'unknown section; expected one of {list(SECTIONS)}',
                section=section,
                line=lines.get((section, None)),
            )
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in SECTIONS[section]:
                raise ConfigError('unknown key', section=section, key=key, line=line)
            try:
                values[key] = _parse_value(key, raw)
            except ValueError as e:
                raise ConfigError(str(e), section=section, key=key, line=line)
    return values, lines


def _to_config(values: dict[str, Any], lines: dict) -> SolveConfig:
    fields = {k: v for k, v in values.items() if v is not None and k not in GRID_KEYS}
    grid = {k: values[k] for k in GRID_KEYS if values.get(k) is not None}
    if grid:
        fields['grid'] = grid
    try:
        return SolveConfig(**fields)
    except ValidationError as e:
        error = e.errors()[0]
        loc = [str(part) for part in error['loc']]
        key = loc[1] if loc and loc[0] == 'grid' and len(loc) > 1 else (loc[0] if loc else None)
        section = _section_of(key) if key else None
        raise ConfigError(
            error['msg'], section=section, key=key, line=lines.get((section, key))
        )


def parse_config(path: str | Path | None = None, **overrides: Any) -> SolveConfig:
    """
    Reads a configuration file and applies overrides on top of it.

    Overrides set to None are ignored, so optional command-line flags can be passed
    through unconditionally. A preset only fills in parameters neither the file nor
    the overrides set.

    Args:
        path (str | Path | None): INI file to read; None starts from the defaults.
        **overrides: SolveConfig fields that take precedence over the file.

    Returns:
        SolveConfig: The validated configuration.

    Raises:
        ConfigError: If the file cannot be read, holds unknown sections or keys, or a
            value fails validation.
    """
    values, lines = _read_file(path) if path is not None else ({}, {})
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if 'preset' in overrides:
        # a preset flag replaces an explicit PDE from the file
        values.pop('pde', None)
        values.pop('splitting', None)
    values.update(overrides)

    preset = values.get('preset')
    if preset is not None:
        try:
            defaults = preset_defaults(preset)
        except ValueError:
            raise ConfigError(
                f'unknown preset {preset!r}',
                section='experiment',
                key='preset',
                line=lines.get(('experiment', 'preset')),
            )
        for key, value in defaults.items():
            if values.get(key) is None:
                values[key] = value
        logger.info('Resolved preset %s', preset)

    return _to_config(values, lines)


######################
# Writing
######################


def _format_value(key: str, value: Any) -> str:
    if key == 'bounds':
        return ', '.join(f'{lo!r}:{hi!r}' for lo, hi in value)
    if key == 'counts':
        return ', '.join(str(c) for c in value)
    if key == 'splitting':
        return ', '.join('+'.join(op.value for op in group) for group in value)
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return 'inf' if math.isinf(value) else repr(value)
    return str(value)


def write_config(config: SolveConfig) -> str:
    """
    Renders a configuration in the INI format parse_config reads. Unset optional
    fields are omitted.
    """
    parser = configparser.ConfigParser(interpolation=None)
    data = config.model_dump(mode='python')
    data.update(data.pop('grid'))
    for section, keys in SECTIONS.items():
        parser.add_section(section)
        for key in keys:
            value = data[key]
            if value is not None:
                parser.set(section, key, _format_value(key, value))
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()
