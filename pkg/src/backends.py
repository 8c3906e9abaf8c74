"""Region proposal, mask generation and mask selection backends.

A distillation round asks a vision-language backend for grid cells covering the
task-relevant part, prompts a point-prompted segmenter at a lattice of pixels inside
those cells, filters the masks with NMS and lets the backend pick one of them.
"""
import base64
import io
import json
import logging
import os
import re
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import requests
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

from . import formats
from .config import BackendConfig, ProposalConfig
from .errors import BackendError, ConfigError, MissingMaskFile, NoMasks, ParseError, PixelOutOfBounds, SpecTooFine, UnknownLabel
from .geometry import RGBDImage

logger = logging.getLogger(__name__)

MAX_GRID_ROWS = 26
MAX_GRID_COLS = 99
FENCED_BLOCK = re.compile(r"```(?:json)?\s*\n?(.*?)```", re.DOTALL)
MASK_PALETTE = [(255, 64, 64), (64, 200, 255), (255, 200, 0), (160, 90, 255), (0, 220, 120), (255, 120, 200)]
# Distillation rounds count from 1; region prompts on a new scene use round 0.
INFERENCE_ROUND = 0

REGION_PROMPT = """You see frames from a demonstration video of the task: "{description}".
The last image is the first frame with a labelled grid overlaid.
Name the object the robot interacts with and the part of it that matters for the task,
then list the grid cells covering that part.
Answer with a fenced block:
```json
{{"object": "...", "part": "...", "cells": ["B2", "B3"]}}
```"""

MASK_PROMPT = """Each numbered mask in the image is a candidate for the part "{part}" of the {object}.
Pick the mask that best covers the part the robot must interact with.
Answer with a fenced block:
```json
{{"mask": 0}}
```"""


# Grid -------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int

    def __post_init__(self):
        if not 1 <= self.rows <= MAX_GRID_ROWS or not 1 <= self.cols <= MAX_GRID_COLS:
            raise ValueError(f"Grid must be between 1x1 and {MAX_GRID_ROWS}x{MAX_GRID_COLS}, got {self.rows}x{self.cols}")

    @staticmethod
    def label(row: int, col: int) -> str:
        return f"{chr(ord('A') + row)}{col + 1}"

    @property
    def labels(self) -> List[str]:
        return [self.label(r, c) for r in range(self.rows) for c in range(self.cols)]


@dataclass(frozen=True)
class CellRect:
    """Pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def contains(self, u: int, v: int) -> bool:
        return self.x0 <= u < self.x1 and self.y0 <= v < self.y1


def _edges(size: int, parts: int) -> List[int]:
    step = size // parts
    return [i * step for i in range(parts)] + [size]


def grid_cells(spec: GridSpec, width: int, height: int) -> Dict[str, CellRect]:
    """Label -> rectangle. Cells tile the image; the last row and column take the remainder."""
    if spec.rows > height or spec.cols > width:
        raise SpecTooFine(f"{spec.rows}x{spec.cols} grid does not fit a {width}x{height} image")
    xs = _edges(width, spec.cols)
    ys = _edges(height, spec.rows)
    return {
        spec.label(r, c): CellRect(xs[c], ys[r], xs[c + 1], ys[r + 1])
        for r in range(spec.rows)
        for c in range(spec.cols)
    }


def overlay_grid(image: RGBDImage | np.ndarray, spec: GridSpec) -> Tuple[np.ndarray, Dict[str, CellRect]]:
    color = image.color if isinstance(image, RGBDImage) else np.asarray(image, dtype=np.uint8)
    height, width = color.shape[:2]
    cells = grid_cells(spec, width, height)

    canvas = Image.fromarray(np.ascontiguousarray(color, dtype=np.uint8))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for label, rect in cells.items():
        draw.rectangle([rect.x0, rect.y0, rect.x1 - 1, rect.y1 - 1], outline=(255, 255, 255))
        draw.text((rect.x0 + 1, rect.y0 + 1), label, fill=(255, 255, 0), font=font)
    return np.array(canvas), cells


def cell_mask(cells: Sequence[str], rects: Dict[str, CellRect], shape: Tuple[int, int]) -> np.ndarray:
    """Boolean raster of the union of the named cells."""
    mask = np.zeros(shape, dtype=bool)
    for label in cells:
        if label not in rects:
            raise UnknownLabel(f"Unknown grid cell '{label}'")
        rect = rects[label]
        mask[rect.y0 : rect.y1, rect.x0 : rect.x1] = True
    return mask


def query_points_for_cells(cells: Sequence[str], rects: Dict[str, CellRect], density: int) -> List[Tuple[int, int]]:
    """density x density lattice of (u, v) pixels per cell, half a spacing in from the edges."""
    if density < 1:
        raise ValueError("Query density must be >= 1.")
    points: List[Tuple[int, int]] = []
    seen = set()
    for label in cells:
        if label not in rects:
            raise UnknownLabel(f"Unknown grid cell '{label}'")
        rect = rects[label]
        for i in range(density):
            v = rect.y0 + int((i + 0.5) * rect.height / density)
            for j in range(density):
                u = rect.x0 + int((j + 0.5) * rect.width / density)
                if (u, v) not in seen:
                    seen.add((u, v))
                    points.append((u, v))
    return points


# Masks ------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskCandidate:
    mask: np.ndarray
    confidence: float
    query_pixel: Tuple[int, int]

    def __post_init__(self):
        if not np.any(self.mask):
            raise ValueError("Mask candidates must be non-empty.")
        if not np.isfinite(self.confidence):
            raise ValueError("Mask confidence must be finite.")


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def nms_masks(
    candidates: Sequence[MaskCandidate], iou_threshold: float, confidence_floor: float
) -> List[MaskCandidate]:
    """Greedy NMS. Output is ordered by confidence, ties by input order."""
    if not (0 <= iou_threshold <= 1 and 0 <= confidence_floor <= 1):
        raise ValueError("NMS thresholds must lie in [0, 1].")
    order = sorted(
        (i for i, c in enumerate(candidates) if c.confidence >= confidence_floor),
        key=lambda i: (-candidates[i].confidence, i),
    )
    kept: List[MaskCandidate] = []
    for i in order:
        cand = candidates[i]
        if all(mask_iou(cand.mask, k.mask) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


def overlay_masks(color: np.ndarray, masks: Sequence[MaskCandidate]) -> np.ndarray:
    """Tint each mask and print its index at the mask centroid."""
    base = np.asarray(color, dtype=np.float64).copy()
    for i, cand in enumerate(masks):
        tint = np.array(MASK_PALETTE[i % len(MASK_PALETTE)], dtype=np.float64)
        base[cand.mask] = 0.5 * base[cand.mask] + 0.5 * tint
    canvas = Image.fromarray(base.clip(0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for i, cand in enumerate(masks):
        vs, us = np.nonzero(cand.mask)
        draw.text((float(us.mean()), float(vs.mean())), str(i), fill=(255, 255, 255), font=font)
    return np.array(canvas)


class MaskGenerator(ABC):
    """Point-prompted segmentation: one or more masks per query pixel."""

    @abstractmethod
    def generate(self, image: RGBDImage, pixels: Sequence[Tuple[int, int]]) -> List[MaskCandidate]:
        ...


def _check_pixel(u: int, v: int, height: int, width: int) -> None:
    if not (0 <= u < width and 0 <= v < height):
        raise PixelOutOfBounds(f"Query pixel ({u}, {v}) outside {width}x{height} image.")


class LabelMapMaskGenerator(MaskGenerator):
    """Returns the connected component of the part label under each query pixel."""

    def __init__(self, labels: np.ndarray):
        self.labels = np.asarray(labels)
        self._components: Dict[int, np.ndarray] = {}

    def _component_map(self, label: int) -> np.ndarray:
        if label not in self._components:
            self._components[label], _ = ndimage.label(self.labels == label)
        return self._components[label]

    def generate(self, image: RGBDImage, pixels: Sequence[Tuple[int, int]]) -> List[MaskCandidate]:
        height, width = self.labels.shape
        out: List[MaskCandidate] = []
        for u, v in pixels:
            _check_pixel(u, v, height, width)
            components = self._component_map(int(self.labels[v, u]))
            out.append(MaskCandidate(components == components[v, u], 1.0, (int(u), int(v))))
        return out


class FileMaskGenerator(MaskGenerator):
    """
    Precomputed masks from `<dir>/index.json`:
    {"masks": [{"pixel": [u, v], "file": "m000.png", "confidence": 0.93}, ...]}
    """

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        index_path = self.directory / "index.json"
        if not index_path.exists():
            raise MissingMaskFile(f"Mask index not found: {index_path}")
        try:
            entries = json.loads(index_path.read_text(encoding="utf-8"))["masks"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise MissingMaskFile(f"Unreadable mask index {index_path}: {exc}") from exc
        self._by_pixel: Dict[Tuple[int, int], List[Dict[str, Any]]] = {}
        for entry in entries:
            key = (int(entry["pixel"][0]), int(entry["pixel"][1]))
            self._by_pixel.setdefault(key, []).append(entry)

    def generate(self, image: RGBDImage, pixels: Sequence[Tuple[int, int]]) -> List[MaskCandidate]:
        out: List[MaskCandidate] = []
        for u, v in pixels:
            _check_pixel(u, v, image.height, image.width)
            entries = self._by_pixel.get((int(u), int(v)))
            if not entries:
                raise MissingMaskFile(f"No precomputed mask for query pixel ({u}, {v})")
            for entry in entries:
                path = self.directory / entry["file"]
                if not path.exists():
                    raise MissingMaskFile(f"Mask file not found: {path}")
                mask = formats.read_label_png(path) > 0
                out.append(MaskCandidate(mask, float(entry.get("confidence", 1.0)), (int(u), int(v))))
        return out


# Transcript -------------------------------------------------------------------


@dataclass
class TranscriptRecord:
    role: str  # "region" or "mask"
    round: int
    attempt: int
    prompt: str
    images: List[str] = field(default_factory=list)
    response: Optional[str] = None
    parsed: Optional[Dict[str, Any]] = None
    error: Optional[str] = None
    forced: bool = False


class BackendTranscript:
    """Append-only request/response log, saved as JSON Lines."""

    def __init__(self, records: Sequence[TranscriptRecord] = ()):
        self._records: List[TranscriptRecord] = list(records)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(list(self._records))

    @property
    def records(self) -> List[TranscriptRecord]:
        return list(self._records)

    def append(self, record: TranscriptRecord) -> None:
        self._records.append(record)

    def history(self, role: str, round_index: int) -> List[TranscriptRecord]:
        """Earlier exchanges with a response, for the same role, up to the given round."""
        return [
            r for r in self._records
            if r.role == role and r.round <= round_index and r.response is not None and not r.forced
        ]

    def save(self, path: Path) -> None:
        with Path(path).open("w", encoding="utf-8") as handle:
            for record in self._records:
                handle.write(json.dumps(asdict(record), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path) -> "BackendTranscript":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Transcript not found: {path}")
        records = []
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(TranscriptRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ParseError(f"{path}:{n}: bad transcript record ({exc})", kind="invalid_json") from exc
        return cls(records)


# Completion clients -----------------------------------------------------------


@dataclass(frozen=True)
class CompletionRequest:
    role: str
    round_index: int
    attempt: int
    prompt: str
    images: Tuple[np.ndarray, ...] = ()
    history: Tuple[TranscriptRecord, ...] = ()


class CompletionClient(Protocol):
    def complete(self, request: CompletionRequest) -> str:
        ...


def encode_png_base64(array: np.ndarray) -> str:
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def fenced(payload: Dict[str, Any]) -> str:
    return "```json\n" + json.dumps(payload) + "\n```"


@dataclass(frozen=True)
class ScenarioEntry:
    round: Optional[int]
    cells: Tuple[str, ...]
    mask_index: int = 0
    object: str = "object"
    part: str = "part"
    inject: Dict[str, List[str]] = field(default_factory=dict)


def load_scenario(path: Path) -> List[ScenarioEntry]:
    """Scenario file: JSON list of entries (or {"entries": [...]})."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Scenario file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return scenario_from_list(doc["entries"] if isinstance(doc, dict) else doc)


def scenario_from_list(entries: Sequence[Dict[str, Any]]) -> List[ScenarioEntry]:
    out = []
    for raw in entries:
        if "cells" not in raw:
            raise ConfigError(f"Scenario entry without 'cells': {raw!r}")
        out.append(
            ScenarioEntry(
                round=raw.get("round"),
                cells=tuple(raw["cells"]),
                mask_index=int(raw.get("mask_index", 0)),
                object=raw.get("object", "object"),
                part=raw.get("part", "part"),
                inject={k: list(v) for k, v in raw.get("inject", {}).items()},
            )
        )
    return out


class ScriptedClient:
    """
    Deterministic stand-in for a VLM. Round r uses the entry whose `round` is r, or
    else the r-th entry. The inference round only answers from an entry marked with it.
    `inject` lists failures per role, consumed one per attempt: "missing_block",
    "invalid_json" or "backend_error".
    """

    def __init__(self, entries: Sequence[ScenarioEntry]):
        self.entries = list(entries)

    def _entry(self, round_index: int) -> ScenarioEntry:
        for entry in self.entries:
            if entry.round == round_index:
                return entry
        if 1 <= round_index <= len(self.entries) and self.entries[round_index - 1].round is None:
            return self.entries[round_index - 1]
        raise BackendError(f"Scripted scenario has no entry for round {round_index}")

    def complete(self, request: CompletionRequest) -> str:
        entry = self._entry(request.round_index)
        injected = entry.inject.get(request.role, [])
        if request.attempt <= len(injected):
            failure = injected[request.attempt - 1]
            if failure == "backend_error":
                raise BackendError(f"Injected backend failure (round {request.round_index}, {request.role})")
            if failure == "missing_block":
                return "I think the handle is the relevant part."
            if failure == "invalid_json":
                return "```json\n{cells: [B2\n```"
            raise ConfigError(f"Unknown scenario injection '{failure}'")
        if request.role == "region":
            return fenced({"object": entry.object, "part": entry.part, "cells": list(entry.cells)})
        return fenced({"mask": entry.mask_index})


class ReplayClient:
    """Answers from a saved transcript, in order, per role and round."""

    def __init__(self, transcript: BackendTranscript):
        self._queues: Dict[Tuple[str, int], List[TranscriptRecord]] = {}
        for record in transcript:
            if not record.forced:
                self._queues.setdefault((record.role, record.round), []).append(record)

    def complete(self, request: CompletionRequest) -> str:
        queue = self._queues.get((request.role, request.round_index), [])
        if not queue:
            raise BackendError(
                f"Transcript has no more '{request.role}' responses to replay for round {request.round_index}"
            )
        record = queue.pop(0)
        if record.response is None:
            raise BackendError(record.error or "Recorded backend failure")
        return record.response


class RemoteCompletionClient:
    """Generic text+images completion endpoint with bearer-token auth."""

    def __init__(self, config: BackendConfig, session: Optional[requests.Session] = None):
        if not config.url:
            raise ConfigError("backend.url is not set; a remote backend needs an endpoint")
        self.config = config
        self.session = session or requests.Session()

    def _token(self) -> str:
        token = os.environ.get(self.config.token_env, "")
        if not token:
            raise BackendError(f"Environment variable {self.config.token_env} holds no backend token")
        return token

    def build_body(self, request: CompletionRequest) -> Dict[str, Any]:
        messages: List[Dict[str, Any]] = []
        for past in request.history:
            messages.append({"role": "user", "content": [{"type": "text", "text": past.prompt}]})
            messages.append({"role": "assistant", "content": [{"type": "text", "text": past.response}]})
        content: List[Dict[str, Any]] = [{"type": "text", "text": request.prompt}]
        for image in request.images:
            content.append({"type": "image", "media_type": "image/png", "data": encode_png_base64(image)})
        messages.append({"role": "user", "content": content})
        return {"model": self.config.model, "messages": messages}

    @staticmethod
    def response_text(payload: Dict[str, Any]) -> str:
        try:
            if "choices" in payload:
                content = payload["choices"][0]["message"]["content"]
            else:
                content = payload.get("content", payload.get("text"))
            if isinstance(content, list):
                content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
        except (KeyError, IndexError, TypeError, AttributeError) as exc:
            raise BackendError(f"Unexpected completion payload: {exc}") from exc
        if not isinstance(content, str):
            raise BackendError("Completion payload has no text content")
        return content

    def complete(self, request: CompletionRequest) -> str:
        headers = {"Authorization": f"Bearer {self._token()}", "Content-Type": "application/json"}
        try:
            resp = self.session.post(
                self.config.url, json=self.build_body(request), headers=headers, timeout=self.config.timeout
            )
            resp.raise_for_status()
            payload = resp.json()
        except requests.RequestException as exc:
            raise BackendError(f"Completion request failed: {exc}") from exc
        except ValueError as exc:
            raise BackendError(f"Completion response is not JSON: {exc}") from exc
        return self.response_text(payload)


def build_client(
    kind: str,
    config: BackendConfig,
    scenario: Optional[Path] = None,
    replay: Optional[Path] = None,
) -> CompletionClient:
    if kind == "scripted":
        if scenario is None:
            raise ConfigError("--scenario is required for the scripted backend")
        return ScriptedClient(load_scenario(scenario))
    if kind == "replay":
        if replay is None:
            raise ConfigError("--replay is required for the replay backend")
        return ReplayClient(BackendTranscript.load(replay))
    if kind == "remote":
        return RemoteCompletionClient(config)
    raise ConfigError(f"Unknown backend '{kind}' (expected scripted, remote or replay)")


# Proposers --------------------------------------------------------------------


@dataclass(frozen=True)
class RegionProposal:
    cells: Tuple[str, ...]
    rationale: str = ""
    object_description: str = ""
    part_description: str = ""


def extract_block(text: str) -> Dict[str, Any]:
    match = FENCED_BLOCK.search(text or "")
    if match is None:
        raise ParseError("Response has no fenced ```json block.", kind="missing_block")
    try:
        doc = json.loads(match.group(1))
    except json.JSONDecodeError as exc:
        raise ParseError(f"Fenced block is not valid JSON: {exc}", kind="invalid_json") from exc
    if not isinstance(doc, dict):
        raise ParseError("Fenced block must hold a JSON object.", kind="invalid_json")
    return doc


def parse_region(text: str, rects: Dict[str, CellRect]) -> RegionProposal:
    doc = extract_block(text)
    cells = doc.get("cells")
    if not isinstance(cells, list) or not cells or not all(isinstance(c, str) for c in cells):
        raise ParseError("'cells' must be a non-empty list of grid labels.", kind="invalid_json")
    cells = [c.strip().upper() for c in cells]
    unknown = [c for c in cells if c not in rects]
    if unknown:
        raise ParseError(f"Unknown grid cells: {', '.join(unknown)}", kind="unknown_label")
    return RegionProposal(
        cells=tuple(dict.fromkeys(cells)),
        rationale=text,
        object_description=str(doc.get("object", "")),
        part_description=str(doc.get("part", "")),
    )


def parse_mask_choice(text: str, count: int) -> int:
    doc = extract_block(text)
    index = doc.get("mask")
    if isinstance(index, bool) or not isinstance(index, int):
        raise ParseError("'mask' must be an integer index.", kind="invalid_json")
    if not 0 <= index < count:
        raise ParseError(f"Mask index {index} outside 0..{count - 1}", kind="index_out_of_range")
    return index


class _RetryingAsker:
    def __init__(self, client: CompletionClient, transcript: BackendTranscript, retries: int):
        if retries < 1:
            raise ValueError("retries must be >= 1")
        self.client = client
        self.transcript = transcript
        self.retries = retries

    def _ask(self, role: str, round_index: int, prompt: str, images: Sequence[np.ndarray], image_refs: List[str], parse):
        last_error: Optional[ParseError] = None
        text = prompt
        for attempt in range(1, self.retries + 1):
            request = CompletionRequest(
                role, round_index, attempt, text, tuple(images), tuple(self.transcript.history(role, round_index))
            )
            record = TranscriptRecord(role=role, round=round_index, attempt=attempt, prompt=text, images=image_refs)
            try:
                record.response = self.client.complete(request)
            except BackendError as exc:
                record.error = f"backend_error: {exc}"
                self.transcript.append(record)
                raise
            try:
                result, parsed = parse(record.response)
            except ParseError as exc:
                record.error = f"{exc.kind}: {exc}"
                self.transcript.append(record)
                logger.warning("%s response unusable (round %d, attempt %d): %s", role, round_index, attempt, exc)
                last_error = exc
                text = f"{prompt}\n\nYour previous answer could not be used: {exc}. Answer again with the fenced block."
                continue
            record.parsed = parsed
            self.transcript.append(record)
            return result
        raise ParseError(f"{role} backend gave no usable answer after {self.retries} attempts: {last_error}", kind=last_error.kind)


class VLMRegionProposer(_RetryingAsker):
    def propose(
        self,
        frames: Sequence[np.ndarray],
        description: str,
        grid_image: np.ndarray,
        rects: Dict[str, CellRect],
        round_index: int,
        feedback: Optional[str] = None,
    ) -> RegionProposal:
        if not frames:
            raise ValueError("Region proposal needs at least one video frame.")
        prompt = REGION_PROMPT.format(description=description)
        if feedback:
            prompt = f"{prompt}\n\n{feedback}"
        refs = [f"frame_{i}" for i in range(len(frames))] + ["grid"]

        def parse(text: str):
            proposal = parse_region(text, rects)
            return proposal, {"object": proposal.object_description, "part": proposal.part_description, "cells": list(proposal.cells)}

        return self._ask("region", round_index, prompt, list(frames) + [grid_image], refs, parse)


class VLMMaskSelector(_RetryingAsker):
    def select(
        self,
        image: np.ndarray,
        masks: Sequence[MaskCandidate],
        overlay: np.ndarray,
        round_index: int,
        proposal: Optional[RegionProposal] = None,
    ) -> int:
        if not masks:
            raise NoMasks("No mask survived filtering.")
        if len(masks) == 1:
            self.transcript.append(
                TranscriptRecord("mask", round_index, 0, "", response=None, parsed={"mask": 0}, forced=True)
            )
            return 0
        prompt = MASK_PROMPT.format(
            part=proposal.part_description if proposal else "part",
            object=proposal.object_description if proposal else "object",
        )

        def parse(text: str):
            index = parse_mask_choice(text, len(masks))
            return index, {"mask": index}

        return self._ask("mask", round_index, prompt, [image, overlay], ["image", "mask_overlay"], parse)


# Session ----------------------------------------------------------------------


@dataclass
class MaskOutcome:
    proposal: RegionProposal
    mask: np.ndarray
    mask_index: int
    masks: List[MaskCandidate]


def select_frames(frames: Sequence[np.ndarray], which: Sequence[str]) -> List[np.ndarray]:
    """Pick frames by position name: first, middle, last (or an integer index)."""
    if not frames:
        raise ValueError("The seeding video has no frames.")
    named = {"first": 0, "middle": len(frames) // 2, "last": len(frames) - 1}
    picked: List[int] = []
    for name in which:
        idx = named[name] if name in named else int(name)
        if idx not in picked:
            picked.append(idx)
    return [frames[i] for i in picked]


class ProposalSession:
    """One distillation's backend state: grid, proposer, segmenter, selector and transcript."""

    def __init__(
        self,
        seed_image: RGBDImage,
        frames: Sequence[np.ndarray],
        description: str,
        client: CompletionClient,
        generator: MaskGenerator,
        config: ProposalConfig = ProposalConfig(),
        transcript: Optional[BackendTranscript] = None,
    ):
        self.seed_image = seed_image
        self.frames = select_frames(frames, config.frames) if frames else [seed_image.color]
        self.description = description
        self.generator = generator
        self.config = config
        self.transcript = transcript if transcript is not None else BackendTranscript()
        self.proposer = VLMRegionProposer(client, self.transcript, config.parse_retries)
        self.selector = VLMMaskSelector(client, self.transcript, config.parse_retries)
        self.grid_image, self.rects = overlay_grid(seed_image, GridSpec(config.grid_rows, config.grid_cols))

    def propose_mask(self, round_index: int, feedback: Optional[str] = None) -> MaskOutcome:
        proposal = self.proposer.propose(
            self.frames, self.description, self.grid_image, self.rects, round_index, feedback
        )
        pixels = query_points_for_cells(proposal.cells, self.rects, self.config.query_density)
        raw = self.generator.generate(self.seed_image, pixels)
        masks = nms_masks(raw, self.config.iou_threshold, self.config.confidence_floor)
        logger.info(
            "Round %d: cells %s -> %d query pixels, %d masks (%d after NMS)",
            round_index, ",".join(proposal.cells), len(pixels), len(raw), len(masks),
        )
        if not masks:
            raise NoMasks(f"No mask above confidence {self.config.confidence_floor} in cells {', '.join(proposal.cells)}")
        overlay = overlay_masks(self.seed_image.color, masks)
        index = self.selector.select(self.seed_image.color, masks, overlay, round_index, proposal)
        return MaskOutcome(proposal, masks[index].mask, index, masks)


def coarse_region_weights(
    image: RGBDImage,
    pixels: np.ndarray,
    proposer: VLMRegionProposer,
    description: str,
    config: ProposalConfig,
    discount: float,
    round_index: int = INFERENCE_ROUND,
) -> np.ndarray:
    """Per-point weights: 1 inside the proposed cells, `discount` outside."""
    grid_image, rects = overlay_grid(image, GridSpec(config.grid_rows, config.grid_cols))
    proposal = proposer.propose([image.color], description, grid_image, rects, round_index=round_index)
    region = cell_mask(proposal.cells, rects, (image.height, image.width))
    inside = region[pixels[:, 1], pixels[:, 0]]
    return np.where(inside, 1.0, discount)
