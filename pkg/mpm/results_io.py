"""
Result writers: JSON documents (orjson, sorted keys, no timestamps), PGM masks
and CSV curves.
"""
import csv
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

import numpy as np
import orjson
import structlog

from mpm.geometry import CellRegion
from mpm.mpm_utils import convert_to_json_serializable

logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]
JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY


def dumps(data: Any) -> bytes:
    return orjson.dumps(convert_to_json_serializable(data), option=JSON_OPTIONS) + b"\n"


def write_json(path: PathLike, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(data))
    logger.debug("💾 Wrote JSON", path=str(path))
    return path


def read_json(path: PathLike) -> Any:
    return orjson.loads(Path(path).read_bytes())


def write_pgm(path: PathLike, region: CellRegion) -> Path:
    """Plain PGM (P2), 255 inside and 0 outside; the first image row is the top of the domain."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = np.flipud(region.grid).astype(int) * 255
    lines = ["P2", f"{region.nx} {region.ny}", "255"]
    lines += [" ".join(str(v) for v in row) for row in image]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_pgm(path: PathLike) -> CellRegion:
    tokens = [t for line in Path(path).read_text(encoding="ascii").splitlines()
              if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError(f"{path} is not a plain PGM file")
    nx, ny, _ = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pixels = np.array(tokens[4:4 + nx * ny], dtype=int).reshape(ny, nx)
    return CellRegion.from_grid(np.flipud(pixels > 0))


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path: PathLike) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
