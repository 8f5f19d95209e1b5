"""
RefCOCO-style interchange format

Layout of a dataset directory::

    annotations.json
    images/<id>.png
    masks/<id>.png

``annotations.json`` is frozen by ``crossmodal_seg/schema/annotations.schema.json``.
Masks are either a PNG path (nonzero is foreground) or an inline uncompressed
COCO run-length encoding. PNG is written by default.

"""
import json
import logging
import os
import pkgutil
from collections import Counter, defaultdict
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from crossmodal_seg.exceptions import DatasetLoadError, InputError, LoadIssue
from crossmodal_seg.models import SPLITS, Triplet

LOG = logging.getLogger(__name__)

FORMAT = "crossmodal-seg/referring"
VERSION = 1
ANNOTATIONS = "annotations.json"


def load_schema() -> dict:
    return json.loads(pkgutil.get_data("crossmodal_seg", "schema/annotations.schema.json"))


RECORD_FIELDS = tuple(load_schema()["properties"]["records"]["items"]["required"])


def rle_encode(mask: np.ndarray) -> Dict[str, Any]:
    """Uncompressed COCO RLE: column-major runs starting with background"""
    flat = np.asarray(mask, dtype=np.int8).flatten(order="F")
    edges = np.flatnonzero(np.diff(flat)) + 1
    runs = np.diff(np.concatenate([[0], edges, [flat.size]]))
    counts = [int(c) for c in runs]
    if flat.size and flat[0]:
        counts.insert(0, 0)
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_decode(rle: Mapping[str, Any]) -> np.ndarray:
    height, width = rle["size"]
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if counts.sum() != height * width or (counts < 0).any():
        raise InputError("RLE counts do not cover a %dx%d mask" % (height, width))
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((height, width), order="F")


def read_mask_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 0


def write_mask_png(mask: np.ndarray, path: str) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)


def _image_size(path: str):
    with Image.open(path) as img:
        return img.size[1], img.size[0]


def _record_to_triplet(root: str, record: Mapping[str, Any]) -> Triplet:
    missing = [f for f in RECORD_FIELDS if f not in record]
    if missing:
        raise InputError("missing fields %s" % ", ".join(missing))
    if record["split"] not in SPLITS:
        raise InputError("unknown split %r" % record["split"])
    image_path = os.path.join(root, record["image"])
    if not os.path.exists(image_path):
        raise InputError("missing image %s" % record["image"])
    mask_ref = record["mask"]
    if isinstance(mask_ref, str):
        mask_path = os.path.join(root, mask_ref)
        if not os.path.exists(mask_path):
            raise InputError("missing mask %s" % mask_ref)
        mask = read_mask_png(mask_path)
    else:
        mask = rle_decode(mask_ref)
    height, width = _image_size(image_path)
    if mask.shape != (height, width):
        raise InputError(
            "mask is %dx%d but image is %dx%d" % (mask.shape + (height, width))
        )
    if not str(record["expression"]).strip():
        raise InputError("empty expression")
    return Triplet(
        ident=str(record["id"]),
        expression=record["expression"],
        mask=mask,
        category=str(record["category"]),
        split=record["split"],
        image_path=image_path,
    )


def iter_refcoco_dir(
    root: str,
    split: Optional[str] = None,
    fail_fast: bool = False,
    issues: Optional[List[LoadIssue]] = None,
) -> Iterator[Triplet]:
    """
    Stream validated triplets from a dataset directory

    Invalid records are appended to ``issues`` (or raised immediately when
    ``fail_fast`` is set) and skipped.

    """
    if split is not None and split not in SPLITS:
        raise InputError("Unknown split %r" % split)
    path = os.path.join(root, ANNOTATIONS)
    try:
        with open(path, "r") as ifile:
            data = json.load(ifile)
    except (OSError, ValueError) as e:
        raise DatasetLoadError([LoadIssue(path, str(e))])
    if data.get("format") != FORMAT or data.get("version") != VERSION:
        raise DatasetLoadError(
            [LoadIssue(path, "not a %s v%d annotation file" % (FORMAT, VERSION))]
        )
    for index, record in enumerate(data["records"]):
        if split is not None and record.get("split") != split:
            continue
        try:
            yield _record_to_triplet(root, record)
        except (InputError, OSError, ValueError, KeyError) as e:
            issue = LoadIssue(str(record.get("id", "record #%d" % index)), str(e))
            if fail_fast:
                raise DatasetLoadError([issue])
            if issues is not None:
                issues.append(issue)


def load_refcoco_dir(
    root: str,
    split: Optional[str] = None,
    fail_fast: bool = False,
    skip_invalid: bool = False,
) -> List[Triplet]:
    """
    Load the triplets of a dataset directory

    Parameters
    ----------
    root : str
    split : str, optional
        Only load this split
    fail_fast : bool, optional
        Raise on the first invalid record
    skip_invalid : bool, optional
        Log invalid records instead of raising once all records were read

    Raises
    ------
    exc : :class:`~crossmodal_seg.exceptions.DatasetLoadError`
        Lists every invalid record with its identifier

    """
    issues = []  # type: List[LoadIssue]
    triplets = list(iter_refcoco_dir(root, split, fail_fast, issues))
    if issues:
        if not skip_invalid:
            raise DatasetLoadError(issues)
        for issue in issues:
            LOG.warning("Skipping %s", issue)
    log_category_counts(triplets, root)
    return triplets


def category_histogram(triplets: Iterable[Triplet]) -> Dict[str, Dict[str, int]]:
    """Count triplets per category and split"""
    hist = defaultdict(Counter)  # type: Dict[str, Counter]
    for triplet in triplets:
        hist[triplet.category][triplet.split] += 1
    return {
        category: {split: counts.get(split, 0) for split in SPLITS}
        for category, counts in sorted(hist.items())
    }


def log_category_counts(triplets: Sequence[Triplet], source: str) -> None:
    hist = category_histogram(triplets)
    LOG.info("Loaded %d triplets from %s", len(triplets), source)
    for category, counts in hist.items():
        LOG.info(
            "  %-20s %s", category, " ".join("%s=%d" % (s, counts[s]) for s in SPLITS)
        )


def write_refcoco_dir(
    triplets: Iterable[Triplet], root: str, mask_format: str = "png"
) -> str:
    """
    Write triplets to a dataset directory

    Parameters
    ----------
    triplets : iterable
    root : str
    mask_format : {"png", "rle"}

    Returns
    -------
    path : str
        The annotations file

    """
    if mask_format not in ("png", "rle"):
        raise InputError("mask_format must be 'png' or 'rle'")
    for sub in ("images", "masks"):
        directory = os.path.join(root, sub)
        if not os.path.exists(directory):
            os.makedirs(directory)
    records = []
    for triplet in triplets:
        triplet.validate()
        image_rel = "images/%s.png" % triplet.ident
        Image.fromarray(triplet.load_image()).save(os.path.join(root, image_rel))
        if mask_format == "png":
            mask_ref = "masks/%s.png" % triplet.ident  # type: Any
            write_mask_png(triplet.mask, os.path.join(root, mask_ref))
        else:
            mask_ref = rle_encode(triplet.mask)
        records.append(
            {
                "id": triplet.ident,
                "image": image_rel,
                "expression": triplet.expression,
                "mask": mask_ref,
                "category": triplet.category,
                "split": triplet.split,
            }
        )
    path = os.path.join(root, ANNOTATIONS)
    with open(path, "w") as ofile:
        json.dump({"format": FORMAT, "version": VERSION, "records": records}, ofile, indent=1)
    return path


def _rasterize_segmentation(segmentation, height: int, width: int) -> np.ndarray:
    if isinstance(segmentation, dict):
        if isinstance(segmentation.get("counts"), str):
            raise InputError("Compressed RLE is not supported; decode it first")
        return rle_decode(segmentation)
    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for polygon in segmentation:
        draw.polygon([(polygon[i], polygon[i + 1]) for i in range(0, len(polygon), 2)], fill=1)
    return np.asarray(canvas) > 0


def convert_refer_annotations(
    refs: Sequence[Mapping[str, Any]], instances: Mapping[str, Any]
) -> Dict[str, Any]:
    """
    Convert the classic refer-toolkit layout into our annotation file

    ``refs`` is the unpickled ``refs(<split>).p`` list and ``instances`` the
    ``instances.json`` COCO dict. Every sentence of a ref becomes one record
    with an inline RLE mask; polygon segmentations are rasterized. Splits
    other than train/val/test (e.g. "testA") are mapped to "test". Images
    keep their COCO file names under ``images/``.

    """
    images = {img["id"]: img for img in instances["images"]}
    anns = {ann["id"]: ann for ann in instances["annotations"]}
    categories = {cat["id"]: cat["name"] for cat in instances.get("categories", [])}
    records = []
    for ref in refs:
        ann = anns[ref["ann_id"]]
        img = images[ref["image_id"]]
        mask = _rasterize_segmentation(ann["segmentation"], img["height"], img["width"])
        split = ref["split"] if ref["split"] in SPLITS else "test"
        for k, sentence in enumerate(ref["sentences"]):
            text = sentence.get("sent") or " ".join(sentence.get("tokens", []))
            records.append(
                {
                    "id": "ref%s-%d" % (ref["ref_id"], k),
                    "image": "images/%s" % img["file_name"],
                    "expression": text,
                    "mask": rle_encode(mask),
                    "category": categories.get(ref.get("category_id"), "unknown"),
                    "split": split,
                }
            )
    return {"format": FORMAT, "version": VERSION, "records": records}
