"""ANSI styling for crowdcount's status lines.

Rich tables, logs and progress bars style themselves; the one-line messages
printed by the commands go through a palette from themes.json. Set
CROWDCOUNT_THEME to pick another palette (e.g. "contrast" for light terminals).
"""

import json
import os

from pathlib import Path

THEMES_PATH = Path(__file__).parent / 'themes.json'

COLORS = ('black', 'red', 'green', 'yellow', 'blue', 'magenta', 'cyan', 'white')
FG_CODES = {name: str(30 + i) for i, name in enumerate(COLORS)}
BG_CODES = {name: str(40 + i) for i, name in enumerate(COLORS)}
RESET = "\033[0m"


def load_theme(name=None):
    """Palette ``name`` from themes.json; unknown names fall back to "default".

    Args:
        name: Palette name (default: $CROWDCOUNT_THEME, then "default")

    Returns:
        Mapping of message kind ('success', 'error', 'metric', ...) to color name
    """

    with open(THEMES_PATH, 'r') as f:
        themes = json.load(f)
    name = name or os.environ.get('CROWDCOUNT_THEME', 'default')
    return themes.get(name, themes['default'])


theme = load_theme()


def format_text(fg, bg=None, inverted=False, bold=False):
    """ANSI prefix for a foreground color, with optional background, inversion and bold.

    Unknown foreground names render white, unknown backgrounds black.
    """

    result = RESET
    if bold:
        result += "\033[1m"
    if inverted:
        result += "\033[7m"
    result += f"\033[{FG_CODES.get(fg, FG_CODES['white'])}m"
    if bg:
        result += f"\033[{BG_CODES.get(bg, BG_CODES['black'])}m"
    return result


def reset_format():
    return RESET


def text_theme(theme_key, bold=False, bg=None, inverted=False):
    """ANSI prefix for a message kind of the active palette."""

    return format_text(theme.get(theme_key, 'white'), bg=bg, inverted=inverted, bold=bold)


def themed(theme_key, message, bold=False):
    """``message`` wrapped in the palette color for ``theme_key`` and a reset."""

    return text_theme(theme_key, bold=bold) + message + reset_format()
