# Offline database index: build, persist and check compatibility

from dataclasses import dataclass
from typing import List, Tuple, Dict, Union, Optional, Sequence
import os
import numpy as np
from .windowing import WindowConfig, WindowLayout, compute_layout
from .encoder import EncoderSpec, PanoDescriptor, encode, encode_windows, encode_pano_resized
from .dataset import (ImageRecord, resize_to_window, database_hash, read_embeddings,
                      write_embeddings, write_metadata, read_metadata)
from .workers import parallel_map
from .errors import FormatError, MismatchError

RESIZE = 'resize'
INDEX_VERSION = 1
WINDOWS_FILE, LAYOUT_FILE = 'windows.pvpr', 'layout.tsv'

@dataclass(eq=False)
class IndexArtifact:
    """Window descriptors of every database panorama plus what produced them.

    `config` is None for the resize baseline, whose single window covers the
    whole panorama. Queries are resized to `query_shape` (width, height).
    """
    fingerprint: str
    config: Optional[WindowConfig]
    layout: WindowLayout
    pano_height_px: int
    query_shape: Tuple[int, int]
    database: List[Tuple[str, PanoDescriptor]]
    manifest_hash: str

    @property
    def label(self) -> str:
        return self.config.label if self.config is not None else RESIZE

    @property
    def dim(self) -> int:
        return self.database[0][1].dim

def _load_panos(records:Sequence[ImageRecord], nproc:int) -> List[np.ndarray]:
    if not len(records):
        raise FormatError("the dataset has no database panoramas")
    panos = parallel_map(lambda rec: rec.load(), records, nproc, desc="loading")
    shape = panos[0].shape[:2]
    for rec, pano in zip(records, panos):
        if pano.shape[:2] != shape:
            raise FormatError(f"panorama {rec.id} has shape {pano.shape[:2]}, expected {shape}")
    return panos

def build_index( records:Sequence[ImageRecord]
               , spec:EncoderSpec
               , config:Union[WindowConfig, str]
               , nproc:int=1
               , span_divisor:int=8) -> IndexArtifact:
    """Encode every database panorama window by window.

    Args:
        records (Sequence[ImageRecord]): database records
        spec (EncoderSpec): encoder
        config (Union[WindowConfig, str]): window configuration or `'resize'`
        nproc (int, optional): worker threads. Defaults to 1.
        span_divisor (int, optional): query width divisor of the resize baseline. Defaults to 8.

    Raises:
        FormatError: empty database or panoramas of different shapes
        ConfigError: the panorama width does not fit the configuration

    Returns:
        IndexArtifact: the in-memory index
    """
    records = [rec for rec in records if rec.role == 'database']
    panos = _load_panos(records, nproc)
    height, width = panos[0].shape[:2]
    if config == RESIZE:
        query_len = compute_layout(width, WindowConfig(span_divisor, span_divisor)).window_len_px
        descriptors = parallel_map(lambda pano: encode_pano_resized(pano, spec, query_len),
                                   panos, nproc, desc="encoding")
        layout, config = WindowLayout.whole(width), None
    else:
        layout = compute_layout(width, config)
        query_len = layout.window_len_px
        descriptors = parallel_map(lambda pano: encode_windows(pano, spec, layout),
                                   panos, nproc, desc="encoding")
    return IndexArtifact(spec.fingerprint(), config, layout, height, (query_len, height),
                         [(rec.id, desc) for rec, desc in zip(records, descriptors)],
                         database_hash(records))

def encode_queries( records:Sequence[ImageRecord]
                  , spec:EncoderSpec
                  , artifact:IndexArtifact
                  , nproc:int=1) -> List[np.ndarray]:
    """Resize every query to the window shape of the index and encode it"""
    width, height = artifact.query_shape
    return parallel_map(lambda rec: encode(resize_to_window(rec.load(), width, height), spec),
                        records, nproc, desc="encoding queries")

# Part1: external descriptors
def external_fingerprint(dim:int) -> str:
    return f"external-d{dim}"

def build_index_from_embeddings( path:str
                               , records:Sequence[ImageRecord]
                               , config:WindowConfig
                               , pano_width_px:int
                               , pano_height_px:int) -> IndexArtifact:
    """Index built from an embedding file with records `<db_id>#<k>`"""
    records = [rec for rec in records if rec.role == 'database']
    if not records:
        raise FormatError("the dataset has no database panoramas")
    layout = compute_layout(pano_width_px, config)
    ids, matrix = read_embeddings(path)
    rows = {rid: row for rid, row in zip(ids, matrix)}
    database = []
    for rec in records:
        keys = [f"{rec.id}#{k}" for k in range(len(layout))]
        missing = [key for key in keys if key not in rows]
        if missing:
            raise FormatError(f"{path}: missing window descriptors {missing[:3]} of {rec.id}")
        database.append((rec.id, PanoDescriptor(np.stack([rows[key] for key in keys]), layout)))
    return IndexArtifact(external_fingerprint(matrix.shape[1]), config, layout, pano_height_px,
                         (layout.window_len_px, pano_height_px), database, database_hash(records))

def query_embeddings(path:str, query_ids:Sequence[str]) -> List[np.ndarray]:
    """External query descriptors in the order of `query_ids`"""
    ids, matrix = read_embeddings(path)
    rows = {rid: row for rid, row in zip(ids, matrix)}
    missing = [qid for qid in query_ids if qid not in rows]
    if missing:
        raise FormatError(f"{path}: no descriptor for queries {missing[:3]}")
    return [rows[qid] for qid in query_ids]

# Part2: persistence
def save_index(artifact:IndexArtifact, index_dir:str):
    """Write `windows.pvpr` and the `layout.tsv` sidecar"""
    os.makedirs(index_dir, exist_ok=True)
    ids, rows = [], []
    for db_id, desc in artifact.database:
        for k, row in enumerate(desc.windows):
            ids.append(f"{db_id}#{k}")
            rows.append(row)
    write_embeddings(os.path.join(index_dir, WINDOWS_FILE), ids, np.stack(rows), normalized=True)
    config, layout = artifact.config, artifact.layout
    meta = [
        ("version", INDEX_VERSION),
        ("fingerprint", artifact.fingerprint),
        ("manifest_hash", artifact.manifest_hash),
        ("mode", "windows" if config is not None else RESIZE),
        ("stride_divisor", config.stride_divisor if config else 0),
        ("span_divisor", config.span_divisor if config else 0),
        ("cyclic", int(config.cyclic) if config else 0),
        ("pano_width_px", layout.pano_width_px),
        ("pano_height_px", artifact.pano_height_px),
        ("window_len_px", layout.window_len_px),
        ("stride_px", layout.stride_px),
        ("query_width_px", artifact.query_shape[0]),
        ("windows", len(layout)),
        ("offsets", ",".join(f"{start}:{int(wraps)}" for start, wraps in layout.offsets)),
        ("panoramas", len(artifact.database)),
    ]
    write_metadata(os.path.join(index_dir, LAYOUT_FILE), meta, "panotool index layout")

def _window_number(suffix:str) -> int:
    try:
        return int(suffix)
    except ValueError:
        return -1

def load_index(index_dir:str) -> IndexArtifact:
    """Read an index written by `save_index`.

    Raises:
        FormatError: missing keys, unknown version or incomplete window sets
    """
    meta = read_metadata(os.path.join(index_dir, LAYOUT_FILE))
    if meta.get("version") != str(INDEX_VERSION):
        raise FormatError(f"{index_dir}: unsupported index version {meta.get('version')}")
    try:
        offsets = tuple((int(a), bool(int(b))) for a, b in
                        (item.split(':') for item in meta["offsets"].split(',')))
        layout = WindowLayout(offsets, int(meta["window_len_px"]), int(meta["stride_px"]),
                              int(meta["pano_width_px"]))
        config = None
        if meta["mode"] != RESIZE:
            config = WindowConfig(int(meta["stride_divisor"]), int(meta["span_divisor"]),
                                  bool(int(meta["cyclic"])))
        height, query_width = int(meta["pano_height_px"]), int(meta["query_width_px"])
        fingerprint, manifest_hash = meta["fingerprint"], meta["manifest_hash"]
    except (KeyError, ValueError) as e:
        raise FormatError(f"{index_dir}: malformed layout sidecar ({e})")
    ids, matrix = read_embeddings(os.path.join(index_dir, WINDOWS_FILE))
    k = len(layout)
    if len(ids) % k:
        raise FormatError(f"{index_dir}: {len(ids)} window records do not split into {k} windows")
    database = []
    for start in range(0, len(ids), k):
        names = [rid.rpartition('#') for rid in ids[start:start + k]]
        db_id = names[0][0]
        if any(name != db_id or _window_number(idx) != j for j, (name, _, idx) in enumerate(names)):
            raise FormatError(f"{index_dir}: window records of {db_id} are incomplete or out of order")
        database.append((db_id, PanoDescriptor(matrix[start:start + k], layout)))
    return IndexArtifact(fingerprint, config, layout, height, (query_width, height),
                         database, manifest_hash)

def check_compatible( artifact:IndexArtifact
                    , fingerprint:str
                    , config:Optional[WindowConfig]=None
                    , manifest_hash:Optional[str]=None):
    """Refuse to query an index built with other settings.

    Raises:
        MismatchError: the explanation names the differing setting
    """
    if artifact.fingerprint != fingerprint:
        raise MismatchError(f"index was built with encoder {artifact.fingerprint}, "
                            f"the current encoder is {fingerprint}")
    if config is not None and artifact.config != config:
        raise MismatchError(f"index was built with windows {artifact.label} "
                            f"(S={artifact.config.span_divisor if artifact.config else '-'}), "
                            f"requested {config.label} (S={config.span_divisor})")
    if manifest_hash is not None and artifact.manifest_hash != manifest_hash:
        raise MismatchError(f"index database {artifact.manifest_hash} does not match the "
                            f"manifest database {manifest_hash}")
