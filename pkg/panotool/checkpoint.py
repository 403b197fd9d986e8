import os
from typing import Dict, Optional
import numpy as np
from loguru import logger
from .encoder import ProjectionHead
from .dataset import write_embeddings, read_embeddings, write_metadata, read_metadata
from .errors import FormatError

def _meta_path(checkpoint:str) -> str:
    return checkpoint + '.meta'

def save_checkpoint( checkpoint:str
                   , head:ProjectionHead
                   , report=None
                   , cfg=None):
    """Save a projection head to a checkpoint file

    The matrix is written as an embedding file, one raw record per input
    dimension; training metadata goes to `<checkpoint>.meta`.

    Args:
        checkpoint (str): path to the checkpoint file
        head (ProjectionHead): trained head
        report (TrainReport, optional): training report. Defaults to None.
        cfg (TrainConfig, optional): training configuration. Defaults to None.
    """
    pathname = os.path.dirname(checkpoint).strip()
    if pathname != '':
        os.makedirs(pathname, exist_ok=True)
    ids = [f"row_{i:04d}" for i in range(head.d_in)]
    write_embeddings(checkpoint, ids, head.matrix, normalized=False)
    meta = [("d_in", head.d_in), ("d_out", head.d_out), ("trained_epochs", head.trained_epochs)]
    if cfg is not None:
        meta += [("epochs", cfg.epochs), ("batch_size", cfg.batch_size),
                 ("learning_rate", repr(float(cfg.learning_rate))), ("seed", cfg.seed),
                 ("margin", repr(float(cfg.loss.margin))), ("norm_p", repr(float(cfg.loss.norm_p))),
                 ("window", cfg.window.label), ("span_divisor", cfg.window.span_divisor),
                 ("val_fraction", repr(float(cfg.val_fraction)))]
    if report is not None:
        meta += [(f"loss_{e + 1}", repr(loss)) for e, loss in enumerate(report.losses)]
        meta += [(f"recall1_{e + 1}", repr(r[1])) for e, r in enumerate(report.recalls)]
        if report.skipped:
            meta.append(("skipped", ",".join(report.skipped)))
    write_metadata(_meta_path(checkpoint), meta, "panotool checkpoint")

def load_checkpoint(checkpoint:str) -> ProjectionHead:
    """Load a projection head from a checkpoint file

    Args:
        checkpoint (str): path to the checkpoint file

    Raises:
        FormatError: unreadable file or row count that disagrees with the metadata

    Returns:
        ProjectionHead: the stored head
    """
    ids, matrix = read_embeddings(checkpoint, renormalize=False)
    meta = load_checkpoint_meta(checkpoint)
    epochs = 0
    if meta is not None:
        try:
            shape = (int(meta["d_in"]), int(meta["d_out"]))
            epochs = int(meta.get("trained_epochs", 0))
        except (KeyError, ValueError):
            raise FormatError(f"{checkpoint}: malformed checkpoint metadata")
        if shape != matrix.shape:
            raise FormatError(f"{checkpoint}: matrix shape {matrix.shape} does not match the metadata {shape}")
    return ProjectionHead(matrix.astype(np.float64), trained_epochs=epochs)

def load_checkpoint_meta(checkpoint:str) -> Optional[Dict[str, str]]:
    """Metadata of a checkpoint, None when the sidecar is missing"""
    path = _meta_path(checkpoint)
    if not os.path.exists(path):
        logger.warning(f"checkpoint {checkpoint} has no metadata file")
        return None
    return read_metadata(path)
