"""Dataset and prediction file IO.

A dataset directory holds images/sample_NNNNN.png plus one JSON annotation
document per sample under annotations/. Annotation schema (pixels, floats):

    {"image": "images/sample_00000.png", "width": 256, "height": 256,
     "patterns": [{"id": 0, "exemplars": [[cx,cy,w,h], ...],
                   "boxes": [[cx,cy,w,h], ...]}]}

Prediction dumps are a single JSON list with one entry per (image, pattern):

    [{"image": "...", "pattern": 0, "boxes": [[cx,cy,w,h,score], ...]}, ...]
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .boxes import BoxXYWH
from .synth import GenSpec, PatternAnnotation, SampleAnnotation, generate


# --------------------------------------------------------------------------- #
# Annotation (de)serialization                                                 #
# --------------------------------------------------------------------------- #

def _box_list(boxes: Sequence[BoxXYWH]) -> List[List[float]]:
    return [[b.cx, b.cy, b.w, b.h] for b in boxes]


def annotation_to_dict(ann: SampleAnnotation) -> dict:
    doc = {
        "image": ann.image,
        "width": ann.width,
        "height": ann.height,
        "patterns": [{"id": p.pattern_id,
                      "exemplars": _box_list(p.exemplars),
                      "boxes": _box_list(p.boxes)} for p in ann.patterns],
    }
    if ann.edgeless is not None:
        doc["edgeless"] = ann.edgeless
    return doc


def annotation_from_dict(doc: dict) -> SampleAnnotation:
    patterns = [PatternAnnotation(
        pattern_id=int(p["id"]),
        exemplars=[BoxXYWH.from_array(b) for b in p["exemplars"]],
        boxes=[BoxXYWH.from_array(b) for b in p["boxes"]])
        for p in doc["patterns"]]
    return SampleAnnotation(image=doc["image"], width=int(doc["width"]),
                            height=int(doc["height"]), patterns=patterns,
                            edgeless=doc.get("edgeless"))


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- #
# Dataset directories                                                          #
# --------------------------------------------------------------------------- #

def sample_seed(dataset_seed: int, index: int) -> int:
    """Stable per-sample seed derived from the dataset seed."""
    return int(np.random.SeedSequence((dataset_seed, index)).generate_state(1)[0])


def write_dataset(out_dir, templates: Sequence[GenSpec], n: int, seed: int,
                  edgeless_cycle: Optional[Sequence[str]] = None
                  ) -> List[SampleAnnotation]:
    """Render n samples by cycling the spec templates; byte-reproducible.

    edgeless_cycle, when given, applies the i-th crop transform (cycled) to
    every sample's boxes after rendering.
    """
    from dataclasses import replace

    from .synth import edgeless_transform
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    annotations = []
    for i in range(n):
        spec = replace(templates[i % len(templates)],
                       seed=sample_seed(seed, i))
        image, ann = generate(spec)
        name = f"sample_{i:05d}"
        ann.image = f"images/{name}.png"
        if edgeless_cycle:
            ann = edgeless_transform(ann, edgeless_cycle[i % len(edgeless_cycle)])
        Image.fromarray(image, "RGB").save(out / "images" / f"{name}.png",
                                           format="PNG")
        _dump_json(out / "annotations" / f"{name}.json", annotation_to_dict(ann))
        annotations.append(ann)
    return annotations


def load_dataset(data_dir) -> List[SampleAnnotation]:
    data_dir = Path(data_dir)
    ann_dir = data_dir / "annotations"
    if not ann_dir.is_dir():
        raise FileNotFoundError(f"no annotations/ directory under {data_dir}")
    out = []
    for path in sorted(ann_dir.glob("*.json")):
        out.append(annotation_from_dict(json.loads(path.read_text())))
    return out


def load_annotations(path) -> List[SampleAnnotation]:
    """Dataset directory, a single annotation document, or a JSON list of
    annotation documents."""
    p = Path(path)
    if p.is_dir():
        return load_dataset(p)
    doc = json.loads(p.read_text())
    if isinstance(doc, list):
        return [annotation_from_dict(d) for d in doc]
    return [annotation_from_dict(doc)]


def load_image(data_dir, ann: SampleAnnotation) -> np.ndarray:
    """Image as float RGB in [0, 1]."""
    path = Path(data_dir) / ann.image
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


# --------------------------------------------------------------------------- #
# Prediction dumps                                                             #
# --------------------------------------------------------------------------- #

@dataclass
class PredictionEntry:
    image: str
    pattern: int
    boxes: np.ndarray  # (N, 5): cx, cy, w, h, score

    @property
    def key(self) -> Tuple[str, int]:
        return (self.image, self.pattern)


def save_predictions(path, entries: Sequence[PredictionEntry]) -> None:
    doc = [{"image": e.image, "pattern": e.pattern,
            "boxes": [[float(v) for v in row] for row in e.boxes]}
           for e in entries]
    _dump_json(Path(path), doc)


def load_predictions(path) -> List[PredictionEntry]:
    doc = json.loads(Path(path).read_text())
    out = []
    for e in doc:
        boxes = np.array(e["boxes"], dtype=np.float64).reshape(-1, 5)
        out.append(PredictionEntry(image=e["image"], pattern=int(e["pattern"]),
                                   boxes=boxes))
    return out
