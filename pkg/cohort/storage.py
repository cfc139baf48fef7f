"""
Dataset directory: ``manifest.json`` plus one raw little-endian float32 file
per node patch (1024 values, row-major, no header).
"""
import hashlib
import json
import logging
import os
from typing import Dict, List, Sequence

import numpy as np

from config import DATASET_VERSION, MANIFEST_NAME, NODE_PATCH_SIZE, PATCH_SUFFIX, RADIOMICS_FIELDS
from networks.affinity import RadiomicsVector

from .synth import NodePatch, PatientCase, truth_labels

logger = logging.getLogger(__name__)

PATCH_BYTES = 4 * NODE_PATCH_SIZE * NODE_PATCH_SIZE


class DatasetError(Exception):
    """Custom exception for unreadable or inconsistent dataset directories"""
    pass


def _patch_file(case_id: str, index: int) -> str:
    return f"{case_id}_node{index:02d}{PATCH_SUFFIX}"


def save_dataset(cases: Sequence[PatientCase], directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    patients = []
    for case in cases:
        nodes = []
        for j, (node, truth) in enumerate(zip(case.nodes, truth_labels(case))):
            name = _patch_file(case.id, j)
            payload = node.image.astype("<f4").tobytes()
            with open(os.path.join(directory, name), "wb") as f:
                f.write(payload)
            entry: Dict = {"file": name}
            entry.update(node.radiomics.to_dict())
            entry["truth"] = truth
            entry["sha256"] = hashlib.sha256(payload).hexdigest()
            nodes.append(entry)
        patients.append({"id": case.id, "y": case.y, "m": case.m, "M": case.M, "nodes": nodes})

    manifest = {"version": DATASET_VERSION, "patients": patients}
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    logger.info(f"Saved {len(cases)} patients to {directory}")
    return path


def _read_patch(directory: str, entry: Dict) -> np.ndarray:
    name = entry["file"]
    path = os.path.join(directory, name)
    if not os.path.exists(path):
        raise DatasetError(f"missing patch file: {name}")
    with open(path, "rb") as f:
        payload = f.read()
    if len(payload) != PATCH_BYTES:
        raise DatasetError(f"{name}: expected {PATCH_BYTES} bytes, found {len(payload)} (length mismatch)")
    digest = entry.get("sha256")
    if digest is not None and hashlib.sha256(payload).hexdigest() != digest:
        raise DatasetError(f"{name}: checksum mismatch")
    image = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return image.reshape(NODE_PATCH_SIZE, NODE_PATCH_SIZE)


def load_dataset(directory: str) -> List[PatientCase]:
    """
    Read a dataset directory written by ``save_dataset``.

    Raises:
        DatasetError: malformed manifest, missing file, length or checksum mismatch
    """
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise DatasetError(f"no {MANIFEST_NAME} in {directory}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DatasetError(f"malformed manifest {path}: {e}") from e

    if manifest.get("version") != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {manifest.get('version')}")

    cases = []
    try:
        for patient in manifest["patients"]:
            nodes = []
            for entry in patient["nodes"]:
                radiomics = RadiomicsVector(*(float(entry[name]) for name in RADIOMICS_FIELDS))
                nodes.append(NodePatch(_read_patch(directory, entry), radiomics, int(entry["truth"])))
            if len(nodes) != int(patient["M"]):
                raise DatasetError(f"patient {patient['id']}: M={patient['M']} but {len(nodes)} nodes listed")
            if sum(int(e["truth"]) for e in patient["nodes"]) != int(patient["m"]):
                raise DatasetError(f"patient {patient['id']}: m does not match node truth labels")
            cases.append(PatientCase(str(patient["id"]), nodes, int(patient["y"]), int(patient["m"])))
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed manifest {path}: {e}") from e

    logger.info(f"Loaded {len(cases)} patients from {directory}")
    return cases
