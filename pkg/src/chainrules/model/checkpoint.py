import json
import logging
import zipfile

from typing import NamedTuple, Optional

import numpy as np

from chainrules import model
from chainrules.artifacts import write_npz
from chainrules.kg import RelationVocabulary
from chainrules.model import ModelConfig
from chainrules.model.layers import Params


_LOGGER = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_PREFIX = "param_"
_MEMBERS = ("version", "config", "relations", "with_inverses", "provenance")


class CheckpointError(RuntimeError):
    pass


class Checkpoint(NamedTuple):
    params: Params
    config: ModelConfig
    relations: RelationVocabulary
    provenance: str


def save(
    path: str,
    params: Params,
    cfg: ModelConfig,
    relations: RelationVocabulary,
    provenance: str = "",
) -> None:
    arrays = {_PREFIX + k: v for k, v in params.items()}
    arrays["version"] = np.array(CHECKPOINT_VERSION)
    arrays["config"] = np.array(json.dumps(cfg.as_dict(), sort_keys=True))
    arrays["relations"] = np.array(relations.names, dtype=str)
    arrays["with_inverses"] = np.array(relations.with_inverses)
    arrays["provenance"] = np.array(provenance)
    write_npz(path, arrays)
    _LOGGER.debug("Saved checkpoint %s", path)


def load(path: str, expect: Optional[RelationVocabulary] = None) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as data:
            missing = [m for m in _MEMBERS if m not in data.files]
            if missing:
                raise CheckpointError(
                    f"{path}: not a checkpoint (missing {', '.join(missing)})"
                )
            version = int(data["version"])
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported version {version}")
            cfg = ModelConfig(**json.loads(str(data["config"])))
            relations = RelationVocabulary(
                bool(data["with_inverses"]),
                (str(n) for n in data["relations"]),
            )
            params: Params = {
                name[len(_PREFIX) :]: np.array(data[name])
                for name in data.files
                if name.startswith(_PREFIX)
            }
            provenance = str(data["provenance"])
    except (OSError, ValueError, TypeError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"{path}: not a checkpoint ({e})") from e
    absent = sorted(set(model.param_names(cfg)) - set(params))
    if absent:
        raise CheckpointError(f"{path}: missing tensors {', '.join(absent)}")
    if params["E"].shape != (len(relations), cfg.d):
        raise CheckpointError(f"{path}: embedding table does not match vocabulary")
    if expect is not None and expect.names != relations.names:
        raise CheckpointError(
            f"{path}: relation vocabulary differs from the knowledge graph"
        )
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise CheckpointError(f"{path}: tensor {name} is not finite")
    return Checkpoint(params, cfg, relations, provenance)
