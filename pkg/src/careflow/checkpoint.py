"""JSON checkpoints for model bundles.

Arrays are stored flat under keys such as ``forward/a2l/layer0/W``.  Floats are
written with ``repr`` (shortest round-trip form), so loading reproduces every
parameter bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .driftnet import DriftModel
from .numkit import MlpParams
from .pipeline import SOURCES, ModelBundle, RunConfig
from .synthdata import MODALITIES

FORMAT = "careflow-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _sections(bundle: ModelBundle) -> dict[str, MlpParams]:
    out = {f"encoder/{m}": bundle.encoders[m] for m in MODALITIES}
    out.update({f"forward/{m}2l": bundle.forward[m].net for m in SOURCES})
    out.update({f"backward/{m}2l": bundle.backward[m].net for m in SOURCES})
    out["fusion"] = bundle.fusion
    out["predictor"] = bundle.predictor
    return out


def bundle_to_dict(bundle: ModelBundle, config: RunConfig | None = None, extra: dict | None = None) -> dict:
    sections = _sections(bundle)
    doc = {
        "format": FORMAT,
        "dims": {name: net.dims for name, net in sections.items()},
        "activations": {name: list(net.activations) for name, net in sections.items()},
        "arrays": {name: arr.tolist() for name, arr in bundle.named_arrays()},
    }
    if config is not None:
        doc["config"] = config.to_dict()
    if extra:
        doc.update(extra)
    return doc


def bundle_from_dict(doc: dict) -> ModelBundle:
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"not a checkpoint (format {doc.get('format')!r})")
    try:
        arrays = doc["arrays"]
        nets = {}
        for name, dims in doc["dims"].items():
            acts = doc["activations"][name]
            ws, bs = [], []
            for k in range(len(dims) - 1):
                w = np.asarray(arrays[f"{name}/layer{k}/W"], dtype=np.float64).reshape(dims[k + 1], dims[k])
                b = np.asarray(arrays[f"{name}/layer{k}/b"], dtype=np.float64).reshape(dims[k + 1])
                ws.append(w)
                bs.append(b)
            nets[name] = MlpParams(ws, bs, list(acts))
        return ModelBundle(
            encoders={m: nets[f"encoder/{m}"] for m in MODALITIES},
            forward={m: DriftModel(nets[f"forward/{m}2l"], "forward") for m in SOURCES},
            backward={m: DriftModel(nets[f"backward/{m}2l"], "backward") for m in SOURCES},
            fusion=nets["fusion"],
            predictor=nets["predictor"],
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def save(path: Path, bundle: ModelBundle, config: RunConfig | None = None, extra: dict | None = None) -> None:
    Path(path).write_text(dumps(bundle_to_dict(bundle, config, extra)))


def load(path: Path) -> tuple[ModelBundle, dict]:
    """Bundle plus the raw document (for the stored config and dims)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    return bundle_from_dict(doc), doc
