"""
Record, pairing, and triple files.

A data directory holds:

- `records.jsonl`: a header line `{"dim", "n_entities", "m_relations",
  "version"}` followed by one record per line. Vectors are base64-encoded
  little-endian float32.
- `pairs.jsonl`: `{"image_id", "text_id"}` per line, one positive pair each.
- `triples.jsonl` (optional): `{"image_id", "caption_a_id", "caption_b_id",
  "correct"}` per line, for binary compositional evaluation.
"""

import base64
import json
from collections.abc import Iterable
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError
from structlog.typing import FilteringBoundLogger

from finematch.core.components import DetectionBox
from finematch.core.models import BinaryItem, ComponentRecord, PairedDataset

FORMAT_VERSION = 1
RECORDS_FILENAME = "records.jsonl"
PAIRS_FILENAME = "pairs.jsonl"
TRIPLES_FILENAME = "triples.jsonl"


class RecordFormatError(ValueError):
    pass


def encode_vector(vector: np.ndarray) -> str:
    return base64.b64encode(np.asarray(vector, dtype="<f4").tobytes()).decode("ascii")


def decode_vector(content: str, dim: int) -> np.ndarray:
    try:
        raw = base64.b64decode(content.encode("ascii"), validate=True)
    except (ValueError, AttributeError):
        raise RecordFormatError("Vector payload is not valid base64")

    vector = np.frombuffer(raw, dtype="<f4")

    if vector.shape != (dim,):
        raise RecordFormatError(
            f"Vector has {vector.size} values, header declares dim={dim}"
        )

    return vector.astype(np.float64)


def _dumps(content: dict[str, Any]) -> str:
    return json.dumps(content, separators=(",", ":"))


def _loads(line: str, path: Path, number: int) -> dict[str, Any]:
    try:
        content = json.loads(line)
    except json.JSONDecodeError:
        raise RecordFormatError(f"{path}:{number}: not valid JSON")

    if not isinstance(content, dict):
        raise RecordFormatError(f"{path}:{number}: expected a JSON object")

    return content


def record_to_line(record: ComponentRecord) -> str:
    content: dict[str, Any] = {
        "id": record.id,
        "modality": record.modality,
        "global": encode_vector(record.global_vector),
        "entities": [encode_vector(v) for v in record.entities],
        "relations": [encode_vector(v) for v in record.relations],
    }

    if record.boxes is not None:
        content["boxes"] = [
            [b.x1, b.y1, b.x2, b.y2, b.confidence]
            + ([b.label] if b.label is not None else [])
            for b in record.boxes
        ]

    return _dumps(content)


def record_from_line(
    content: dict[str, Any], dim: int, n_entities: int, m_relations: int
) -> ComponentRecord:
    try:
        record_id = content["id"]
        modality = content["modality"]
        entities = content.get("entities", [])
        relations = content.get("relations", [])
        payload = content["global"]
    except KeyError as e:
        raise RecordFormatError(f"Record is missing field {e}")

    if modality not in ("image", "text"):
        raise RecordFormatError(f"Record {record_id}: unknown modality {modality!r}")

    if len(entities) > n_entities:
        raise RecordFormatError(
            f"Record {record_id}: {len(entities)} entities exceed n_entities="
            f"{n_entities}; fit the record before writing it"
        )

    if len(relations) > m_relations:
        raise RecordFormatError(
            f"Record {record_id}: {len(relations)} relations exceed m_relations="
            f"{m_relations}; fit the record before writing it"
        )

    boxes = None

    if "boxes" in content:
        try:
            boxes = [
                DetectionBox(
                    x1=b[0],
                    y1=b[1],
                    x2=b[2],
                    y2=b[3],
                    confidence=b[4],
                    label=b[5] if len(b) > 5 else None,
                )
                for b in content["boxes"]
            ]
        except (IndexError, TypeError, ValidationError) as e:
            raise RecordFormatError(f"Record {record_id}: malformed boxes ({e})")

    try:
        return ComponentRecord(
            id=record_id,
            modality=modality,
            global_vector=decode_vector(payload, dim),
            entities=np.array([decode_vector(v, dim) for v in entities]).reshape(
                len(entities), dim
            ),
            relations=np.array([decode_vector(v, dim) for v in relations]).reshape(
                len(relations), dim
            ),
            boxes=boxes,
        )
    except ValidationError as e:
        raise RecordFormatError(f"Record {record_id}: {e}")


def write_record_file(
    records: Iterable[ComponentRecord],
    path: Path,
    dim: int,
    n_entities: int,
    m_relations: int,
) -> int:
    """
    Write `records` under a header. A record reachable more than once (a
    caption shared by two pairs, say) is written once; two different records
    under the same id raise `RecordFormatError` before anything is written.
    Returns the number of records written.
    """
    header = {
        "dim": dim,
        "n_entities": n_entities,
        "m_relations": m_relations,
        "version": FORMAT_VERSION,
    }

    lines: dict[str, str] = {}

    for record in records:
        if record.dim != dim:
            raise RecordFormatError(
                f"Record {record.id} has dim {record.dim}, header declares {dim}"
            )

        line = record_to_line(record)

        if lines.setdefault(record.id, line) != line:
            raise RecordFormatError(f"Record id {record.id} names two different records")

    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(_dumps(header) + "\n")

        for line in lines.values():
            handle.write(line + "\n")

    return len(lines)


def read_record_file(path: Path) -> tuple[dict[str, int], dict[str, ComponentRecord]]:
    """
    Read a record file. Returns the header and the records keyed by id, in
    file order.
    """
    if not path.exists():
        raise FileNotFoundError(f"Record file {path} does not exist")

    with open(path, encoding="utf-8") as handle:
        lines = [line for line in handle.read().splitlines() if line.strip()]

    if not lines:
        raise RecordFormatError(f"{path}: missing header line")

    header = _loads(lines[0], path, 1)

    try:
        dim = int(header["dim"])
        n_entities = int(header["n_entities"])
        m_relations = int(header["m_relations"])
        version = int(header["version"])
    except (KeyError, TypeError, ValueError):
        raise RecordFormatError(f"{path}: malformed header {header}")

    if version != FORMAT_VERSION:
        raise RecordFormatError(f"{path}: unsupported format version {version}")

    records: dict[str, ComponentRecord] = {}

    for number, line in enumerate(lines[1:], start=2):
        record = record_from_line(
            _loads(line, path, number),
            dim=dim,
            n_entities=n_entities,
            m_relations=m_relations,
        )

        if record.id in records:
            raise RecordFormatError(f"{path}:{number}: duplicate record id {record.id}")

        records[record.id] = record

    header = {"dim": dim, "n_entities": n_entities, "m_relations": m_relations}

    return header, records


def _lookup(
    records: dict[str, ComponentRecord], record_id: Any, modality: str, path: Path
) -> ComponentRecord:
    record = records.get(record_id)

    if record is None:
        raise RecordFormatError(f"{path}: unknown record id {record_id!r}")

    if record.modality != modality:
        raise RecordFormatError(
            f"{path}: record {record_id} is {record.modality}, expected {modality}"
        )

    return record


def write_records(dataset: PairedDataset, path: Path) -> None:
    """
    Write a paired dataset into the directory `path` (created if needed).
    Records shared between pairs are written once.
    """
    path.mkdir(parents=True, exist_ok=True)

    write_record_file(
        (record for pair in dataset.pairs for record in pair),
        path / RECORDS_FILENAME,
        dim=dataset.dim,
        n_entities=dataset.n_entities,
        m_relations=dataset.m_relations,
    )

    with open(path / PAIRS_FILENAME, "w", encoding="utf-8", newline="\n") as handle:
        for image, text in dataset.pairs:
            handle.write(_dumps({"image_id": image.id, "text_id": text.id}) + "\n")


def read_records(path: Path, log: FilteringBoundLogger | None = None) -> PairedDataset:
    """
    Read the paired dataset stored in the directory `path`.

    Raises
    ------
    RecordFormatError
        For malformed lines, dimension or count mismatches, unknown modality
        tags, and pairs that reference missing records.
    FileNotFoundError
        If either file is missing.
    """
    header, records = read_record_file(path / RECORDS_FILENAME)
    pairs_path = path / PAIRS_FILENAME

    if not pairs_path.exists():
        raise FileNotFoundError(f"Pairing file {pairs_path} does not exist")

    pairs = []

    with open(pairs_path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            content = _loads(line, pairs_path, number)
            pairs.append(
                (
                    _lookup(records, content.get("image_id"), "image", pairs_path),
                    _lookup(records, content.get("text_id"), "text", pairs_path),
                )
            )

    dataset = PairedDataset(pairs=pairs, **header)

    if log is not None:
        log.bind(path=str(path), pairs=len(pairs), records=len(records), **header).info(
            "records.read"
        )

    return dataset


def write_triples(items: list[BinaryItem], path: Path) -> None:
    """
    Write the triple file for binary evaluation. The records themselves must
    be written separately (see `write_record_file`).
    """
    with open(path / TRIPLES_FILENAME, "w", encoding="utf-8", newline="\n") as handle:
        for item in items:
            handle.write(
                _dumps(
                    {
                        "image_id": item.image.id,
                        "caption_a_id": item.caption_a.id,
                        "caption_b_id": item.caption_b.id,
                        "correct": item.correct,
                    }
                )
                + "\n"
            )


def read_triples(path: Path) -> list[BinaryItem]:
    _, records = read_record_file(path / RECORDS_FILENAME)
    triples_path = path / TRIPLES_FILENAME

    if not triples_path.exists():
        raise FileNotFoundError(f"Triple file {triples_path} does not exist")

    items = []

    with open(triples_path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            content = _loads(line, triples_path, number)

            if content.get("correct") not in ("A", "B"):
                raise RecordFormatError(
                    f"{triples_path}:{number}: correct must be 'A' or 'B'"
                )

            items.append(
                BinaryItem(
                    image=_lookup(records, content.get("image_id"), "image", triples_path),
                    caption_a=_lookup(
                        records, content.get("caption_a_id"), "text", triples_path
                    ),
                    caption_b=_lookup(
                        records, content.get("caption_b_id"), "text", triples_path
                    ),
                    correct=content["correct"],
                )
            )

    return items


def write_binary(
    items: list[BinaryItem], path: Path, dim: int, n_entities: int, m_relations: int
) -> None:
    """
    Write a self-contained binary-evaluation directory: the records of every
    item plus the triple file. Records reused across items are written once.
    """
    path.mkdir(parents=True, exist_ok=True)

    records = [
        record
        for item in items
        for record in (item.image, item.caption_a, item.caption_b)
    ]

    write_record_file(
        records,
        path / RECORDS_FILENAME,
        dim=dim,
        n_entities=n_entities,
        m_relations=m_relations,
    )
    write_triples(items, path)


def read_record(path: Path, record_id: str, modality: str) -> ComponentRecord:
    """
    Fetch one record of the given modality from the data directory `path`.
    """
    record_path = path / RECORDS_FILENAME
    _, records = read_record_file(record_path)
    return _lookup(records, record_id, modality, record_path)
