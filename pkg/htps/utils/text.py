import hashlib
import logging
import os
from pathlib import Path
from typing import Iterable

from .path import rmpath

logger = logging.getLogger(__name__)


def format_float(value: float) -> str:
    # shortest decimal that parses back to the same float64
    return repr(float(value))


def format_row(values: Iterable[float]) -> str:
    return ' '.join(format_float(v) for v in values)


def read_text(path: Path) -> str:
    with open(path, 'r', encoding='utf-8') as file:
        return file.read()


def write_text(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    # final newline
    if not text.endswith('\n'):
        text += '\n'

    # write next to the target and swap in, so readers never see half a file
    partial = path.with_name(path.name + '.partial')
    try:
        logger.info(f'Writing {path}...')
        with open(partial, 'w', encoding='utf-8', newline='\n') as file:
            file.write(text)
        os.replace(partial, path)
    finally:
        rmpath(partial)


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]
