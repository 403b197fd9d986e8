# Datasets: manifests, images, embedding files and the synthetic generator

from dataclasses import dataclass, field
from typing import List, Dict, Union, Optional, Tuple, Sequence, Set
import os, math, struct, hashlib
import numpy as np
from PIL import Image, UnidentifiedImageError
from loguru import logger
from .errors import ConfigError, FormatError

ROLES = ('query', 'database')
IMAGE_SUFFIXES = ('.png', '.ppm')

# Part1: records and manifests
@dataclass(frozen=True)
class GeoPoint:
    """Planar metric position, UTM-style easting/northing in meters"""
    easting_m: float
    northing_m: float

    def __post_init__(self):
        if not (math.isfinite(self.easting_m) and math.isfinite(self.northing_m)):
            raise ValueError(f"geo coordinates must be finite, got "
                             f"({self.easting_m}, {self.northing_m})")

    def distance_to(self, other:'GeoPoint') -> float:
        return math.hypot(self.easting_m - other.easting_m, self.northing_m - other.northing_m)

@dataclass
class ImageRecord:
    """One query or database image.

    Args:
        id (str): identifier, unique per role
        role (str): 'query' or 'database'
        source (Union[str, np.ndarray]): image path or inline pixels
        geo (Optional[GeoPoint]): ground-truth position
    """
    id: str
    role: str
    source: Union[str, np.ndarray]
    geo: Optional[GeoPoint] = None

    def __post_init__(self):
        assert self.role in ROLES, f"role should be one of {ROLES}, but got {self.role}"

    def load(self) -> np.ndarray:
        """Pixels as an 8-bit RGB array"""
        if isinstance(self.source, np.ndarray):
            return self.source
        return load_image(self.source)

@dataclass
class Dataset:
    """Database panoramas and perspective queries"""
    database: List[ImageRecord] = field(default_factory=list)
    queries: List[ImageRecord] = field(default_factory=list)

    @staticmethod
    def from_records(records:Sequence[ImageRecord]) -> 'Dataset':
        return Dataset( [rec for rec in records if rec.role == 'database']
                      , [rec for rec in records if rec.role == 'query'])

    @staticmethod
    def from_manifest(path:str) -> 'Dataset':
        return Dataset.from_records(load_manifest(path))

    @property
    def db_geos(self) -> Dict[str, GeoPoint]:
        return {rec.id: rec.geo for rec in self.database}

    @property
    def query_geos(self) -> Dict[str, Optional[GeoPoint]]:
        return {rec.id: rec.geo for rec in self.queries}

    def subset(self, query_ids:Sequence[str]) -> 'Dataset':
        """Same database, only the listed queries"""
        keep = set(query_ids)
        return Dataset(self.database, [rec for rec in self.queries if rec.id in keep])

def split_places( dataset:Dataset
                , fraction:float
                , seed:int=0) -> Tuple[Dataset, Dataset]:
    """Place-disjoint train/validation split.

    A seeded share of the database panoramas is held out; every query follows
    the panorama nearest to its geo tag. Queries without a geo tag stay in the
    training part.

    Args:
        dataset (Dataset): panoramas and queries
        fraction (float): share of panoramas held out, in (0, 1)
        seed (int, optional): seed of the selection. Defaults to 0.

    Raises:
        ConfigError: invalid fraction or fewer than two panoramas

    Returns:
        Tuple[Dataset, Dataset]: training part and held-out part
    """
    if not 0 < fraction < 1:
        raise ConfigError(f"validation fraction must be in (0, 1), got {fraction}")
    count = len(dataset.database)
    if count < 2:
        raise ConfigError(f"cannot hold out places from {count} panorama(s)")
    held = min(max(1, int(round(fraction * count))), count - 1)
    picked = set(np.random.default_rng(seed).permutation(count)[:held].tolist())
    geos = np.array([[rec.geo.easting_m, rec.geo.northing_m] for rec in dataset.database])
    train_q, val_q = [], []
    for rec in dataset.queries:
        if rec.geo is None:
            train_q.append(rec)
            continue
        nearest = int(np.argmin(np.hypot(geos[:, 0] - rec.geo.easting_m, geos[:, 1] - rec.geo.northing_m)))
        (val_q if nearest in picked else train_q).append(rec)
    train_db = [rec for i, rec in enumerate(dataset.database) if i not in picked]
    val_db = [rec for i, rec in enumerate(dataset.database) if i in picked]
    return Dataset(train_db, train_q), Dataset(val_db, val_q)

def load_manifest(path:str) -> List[ImageRecord]:
    """Load a manifest file.

    One record per line: `id<TAB>role<TAB>path<TAB>easting<TAB>northing`.
    Blank lines and lines starting with `#` are ignored; relative paths are
    resolved against the manifest's directory.

    Args:
        path (str): path to the manifest

    Raises:
        FormatError: malformed line, duplicate id or missing image file,
            the message carries the line number

    Returns:
        List[ImageRecord]: records in file order
    """
    base = os.path.dirname(os.path.abspath(path))
    records, seen = [], {role: set() for role in ROLES}
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().split('\n')
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith('#'):
            continue
        fields = line.rstrip('\r').split('\t')
        if len(fields) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        rid, role, imgpath, easting, northing = fields
        if role not in ROLES:
            raise FormatError(f"{path}:{lineno}: unknown role {role!r}")
        if not rid:
            raise FormatError(f"{path}:{lineno}: empty id")
        if rid in seen[role]:
            raise FormatError(f"{path}:{lineno}: duplicate {role} id {rid!r}")
        try:
            geo = GeoPoint(float(easting), float(northing))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: invalid coordinates ({easting!r}, {northing!r})")
        imgpath = os.path.normpath(os.path.join(base, imgpath))
        if not os.path.isfile(imgpath):
            raise FormatError(f"{path}:{lineno}: missing image file {imgpath}")
        seen[role].add(rid)
        records.append(ImageRecord(rid, role, imgpath, geo))
    return records

def write_manifest(path:str, records:Sequence[ImageRecord]):
    """Write records as a manifest, paths relative to the manifest's directory"""
    pathname = os.path.dirname(path).strip()
    if pathname != '':
        os.makedirs(pathname, exist_ok=True)
    base = os.path.dirname(os.path.abspath(path))
    lines = ["# id\trole\tpath\teasting\tnorthing"]
    for rec in records:
        assert isinstance(rec.source, str), f"record {rec.id} has no file to reference"
        assert rec.geo is not None, f"record {rec.id} has no geo tag"
        relpath = os.path.relpath(os.path.abspath(rec.source), base).replace(os.sep, '/')
        lines.append('\t'.join([rec.id, rec.role, relpath,
                                repr(float(rec.geo.easting_m)), repr(float(rec.geo.northing_m))]))
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write('\n'.join(lines) + '\n')

def database_hash(records:Sequence[ImageRecord]) -> str:
    """Hash of the database part of a dataset: ids, file names and geo tags"""
    h = hashlib.sha256()
    for rec in records:
        if rec.role != 'database':
            continue
        name = os.path.basename(rec.source) if isinstance(rec.source, str) else 'inline'
        geo = (rec.geo.easting_m, rec.geo.northing_m) if rec.geo else (None, None)
        h.update(f"{rec.id}\t{name}\t{geo[0]!r}\t{geo[1]!r}\n".encode('utf-8'))
    return h.hexdigest()[:16]

def write_metadata(path:str, items:Sequence[Tuple[str, object]], title:str):
    """Key/value sidecar in the manifest text style"""
    pathname = os.path.dirname(path).strip()
    if pathname != '':
        os.makedirs(pathname, exist_ok=True)
    lines = [f"# {title}"] + [f"{key}\t{value}" for key, value in items]
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write('\n'.join(lines) + '\n')

def read_metadata(path:str) -> Dict[str, str]:
    meta = {}
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().split('\n')
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith('#'):
            continue
        key, sep, value = line.partition('\t')
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected key<TAB>value")
        meta[key] = value
    return meta

# Part2: images
def load_image(path:str) -> np.ndarray:
    """Read a PNG or PPM file as an (H, W, 3) uint8 array"""
    if not path.lower().endswith(IMAGE_SUFFIXES):
        raise FormatError(f"unsupported image format: {path}")
    try:
        with Image.open(path) as img:
            return np.array(img.convert('RGB'), dtype=np.uint8)
    except FileNotFoundError:
        raise FormatError(f"missing image file: {path}")
    except (UnidentifiedImageError, OSError) as e:
        raise FormatError(f"unreadable image {path}: {e}")

def save_image(path:str, pixels:np.ndarray):
    """Write an uint8 array as PNG (or PPM, by suffix)"""
    pathname = os.path.dirname(path).strip()
    if pathname != '':
        os.makedirs(pathname, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path)

def resize_to_window(image:np.ndarray, window_len_px:int, pano_height_px:int) -> np.ndarray:
    """Bilinear resample of a query image to the window shape.

    Args:
        image (np.ndarray): uint8 image, (H, W) or (H, W, 3)
        window_len_px (int): target width
        pano_height_px (int): target height

    Raises:
        ValueError: empty input or non-positive target

    Returns:
        np.ndarray: resized image, the input itself when it already conforms
    """
    if window_len_px <= 0 or pano_height_px <= 0:
        raise ValueError(f"target size must be positive, got {window_len_px}x{pano_height_px}")
    if image.ndim < 2 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError(f"cannot resize an image of shape {image.shape}")
    if image.shape[0] == pano_height_px and image.shape[1] == window_len_px:
        return image
    resized = Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).resize(
        (window_len_px, pano_height_px), Image.Resampling.BILINEAR)
    return np.array(resized, dtype=np.uint8)

# Part3: embedding files
EMBEDDING_MAGIC = b'PVPR'
EMBEDDING_VERSION = 1
_HEADER = struct.Struct('<4sIIIB')
_IDLEN = struct.Struct('<H')

def write_embeddings( path:str
                    , ids:Sequence[str]
                    , vectors:Union[np.ndarray, Sequence[np.ndarray]]
                    , normalized:bool=True):
    """Write vectors in the `PVPR` embedding format.

    Layout (little-endian): magic `PVPR`, u32 version, u32 count, u32 dimension,
    u8 normalized flag, then per record a u16 id length, the UTF-8 id and
    `dimension` float32 values.

    Args:
        path (str): output file
        ids (Sequence[str]): record ids
        vectors (np.ndarray): (count, dimension) values, stored as float32
        normalized (bool, optional): header flag, False marks raw vectors. Defaults to True.
    """
    matrix = np.asarray(vectors, dtype='<f4')
    if matrix.ndim == 1 and len(ids) == 0:
        matrix = matrix.reshape(0, 0)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValueError(f"expected {len(ids)} vectors of uniform dimension, got shape {matrix.shape}")
    if matrix.shape[1] == 0:
        raise ValueError("embedding dimension must be positive")
    pathname = os.path.dirname(path).strip()
    if pathname != '':
        os.makedirs(pathname, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION,
                             matrix.shape[0], matrix.shape[1], int(bool(normalized))))
        for rid, row in zip(ids, matrix):
            encoded = rid.encode('utf-8')
            f.write(_IDLEN.pack(len(encoded)) + encoded + row.tobytes())

def read_embeddings(path:str, renormalize:bool=True) -> Tuple[List[str], np.ndarray]:
    """Read a `PVPR` embedding file.

    Args:
        path (str): input file
        renormalize (bool, optional): L2-normalize the rows when the header flag
            says raw. Defaults to True.

    Raises:
        FormatError: magic or version mismatch, zero dimension, truncated payload,
            ids that are not UTF-8

    Returns:
        Tuple[List[str], np.ndarray]: ids and a (count, dimension) float32 matrix
    """
    with open(path, 'rb') as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, count, dim, flag = _HEADER.unpack_from(data, 0)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != EMBEDDING_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if dim == 0:
        raise FormatError(f"{path}: dimension is 0")
    pos, rowbytes = _HEADER.size, 4 * dim
    ids, matrix = [], np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        if pos + _IDLEN.size > len(data):
            raise FormatError(f"{path}: truncated payload at record {i}")
        (idlen,) = _IDLEN.unpack_from(data, pos)
        pos += _IDLEN.size
        if pos + idlen + rowbytes > len(data):
            raise FormatError(f"{path}: truncated payload at record {i}")
        try:
            ids.append(data[pos:pos + idlen].decode('utf-8'))
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: record {i} id is not valid UTF-8 ({e.reason})")
        pos += idlen
        matrix[i] = np.frombuffer(data, dtype='<f4', count=dim, offset=pos)
        pos += rowbytes
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    if not flag and renormalize:
        from .encoder import l2_normalize
        matrix = np.stack([l2_normalize(row) for row in matrix]).astype(np.float32) \
            if count else matrix
    return ids, matrix

# Part4: synthetic panoramas and queries
GEO_ORIGIN = (585000.0, 4477000.0)

@dataclass
class SynthParams:
    """Parameters of the procedural dataset.

    Queries are crops of width `pano_width_px / span_divisor` taken at offsets
    that are multiples of `offset_step_px`, moved by up to `crop_jitter_px`.
    `noise_level` is the standard deviation of additive noise in 8-bit units,
    `brightness_jitter` the half-width of a multiplicative brightness factor.
    """
    seed: int = 0
    num_places: int = 50
    pano_width_px: int = 1024
    pano_height_px: int = 128
    queries_per_place: int = 4
    crop_jitter_px: int = 0
    noise_level: float = 0.0
    brightness_jitter: float = 0.0
    seam_straddle_fraction: float = 0.0
    geo_spacing_m: float = 50.0
    offset_step_px: int = 1
    span_divisor: int = 8

    def validate(self):
        checks = [
            (self.num_places >= 1, "num_places must be at least 1"),
            (self.pano_width_px > 0 and self.pano_height_px > 1, "panorama size must be positive"),
            (self.pano_width_px % 32 == 0, "pano_width_px must be divisible by 32"),
            (self.span_divisor >= 1 and self.pano_width_px % self.span_divisor == 0,
             "pano_width_px must be divisible by span_divisor"),
            (self.queries_per_place >= 0, "queries_per_place must be non-negative"),
            (self.crop_jitter_px >= 0, "crop_jitter_px must be non-negative"),
            (self.noise_level >= 0, "noise_level must be non-negative"),
            (0 <= self.brightness_jitter < 1, "brightness_jitter must be in [0, 1)"),
            (0 <= self.seam_straddle_fraction <= 1, "seam_straddle_fraction must be in [0, 1]"),
            (self.geo_spacing_m > 25, "geo_spacing_m must exceed 25 m"),
            (self.offset_step_px >= 1, "offset_step_px must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

@dataclass
class SynthDataset:
    """Output of `synth_dataset`; `groundtruth` maps query id to its source panorama"""
    database: List[ImageRecord]
    queries: List[ImageRecord]
    groundtruth: Dict[str, str]
    offsets: Dict[str, int]
    straddles: Set[str]

    @property
    def dataset(self) -> Dataset:
        return Dataset(self.database, self.queries)

def _place_texture(rng:np.random.Generator, width:int, height:int) -> np.ndarray:
    """Seamless texture: periodic waves, vertical bands and shapes"""
    xs = np.arange(width, dtype=np.float64)[None, :]
    ys = np.arange(height, dtype=np.float64)[:, None]
    img = np.zeros((height, width, 3))
    for c in range(3):
        for _ in range(5):
            kx, ky = rng.integers(1, 33), rng.uniform(-3, 3)
            phase, amp = rng.uniform(0, 2 * np.pi), rng.uniform(0.3, 1.0)
            img[..., c] += amp * np.sin(2 * np.pi * (kx * xs / width + ky * ys / height) + phase)
    for _ in range(16):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        rx, ry = rng.uniform(width / 96, width / 16), rng.uniform(height / 10, height / 2)
        dx = np.abs(xs - cx)
        dx = np.minimum(dx, width - dx) # periodic in x
        dy = np.abs(ys - cy)
        kind = rng.integers(0, 3)
        if kind == 0: # ellipse
            mask = (dx / rx) ** 2 + (dy / ry) ** 2 <= 1
        elif kind == 1: # rectangle
            mask = (dx <= rx) & (dy <= ry)
        else: # vertical band
            mask = np.broadcast_to(dx <= rx / 2, (height, width))
        img += mask[..., None] * rng.uniform(-1.5, 1.5, size=3)
    img -= img.min()
    img *= 255.0 / max(img.max(), 1e-12)
    return np.rint(img).astype(np.uint8)

def _place_geo(index:int, num_places:int, spacing:float) -> GeoPoint:
    cols = int(math.ceil(math.sqrt(num_places)))
    row, col = divmod(index, cols)
    return GeoPoint(GEO_ORIGIN[0] + col * spacing, GEO_ORIGIN[1] + row * spacing)

def synth_dataset(params:SynthParams) -> SynthDataset:
    """Generate a deterministic perspective-to-panorama dataset.

    Each place gets one seamless panorama and `queries_per_place` crops with
    jitter, noise and brightness change; a fraction of the crops straddle the
    left/right seam. Queries lie within 1 m of their place, places are
    `geo_spacing_m` apart on a grid.

    Args:
        params (SynthParams): generator parameters

    Raises:
        ConfigError: invalid parameters

    Returns:
        SynthDataset: records with inline pixels and the ground truth
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    W, H = params.pano_width_px, params.pano_height_px
    L = W // params.span_divisor
    database = []
    for i in range(params.num_places):
        pixels = _place_texture(rng, W, H)
        database.append(ImageRecord(f"pano_{i:04d}", 'database', pixels,
                                    _place_geo(i, params.num_places, params.geo_spacing_m)))
    total = params.num_places * params.queries_per_place
    n_straddle = int(round(params.seam_straddle_fraction * total))
    straddle = np.zeros(total, dtype=bool)
    straddle[rng.permutation(total)[:n_straddle]] = True
    inner_starts = np.arange(0, W - L + 1, params.offset_step_px)
    seam_starts = np.array([s for s in range(0, W, params.offset_step_px) if W - L < s < W])
    if n_straddle and not len(seam_starts):
        raise ConfigError(f"offset step {params.offset_step_px} leaves no start position "
                          f"straddling the seam")
    queries, groundtruth, offsets, straddles = [], {}, {}, set()
    for t in range(total):
        place, j = divmod(t, params.queries_per_place)
        pano = database[place]
        qid = f"q_{place:04d}_{j:02d}"
        starts = seam_starts if straddle[t] else inner_starts
        offset = int(rng.choice(starts))
        if params.crop_jitter_px:
            offset += int(rng.integers(-params.crop_jitter_px, params.crop_jitter_px + 1))
        if straddle[t]:
            offset = min(max(offset, W - L + 1), W - 1)
            straddles.add(qid)
        else:
            offset = min(max(offset, 0), W - L)
        crop = np.take(pano.source, (offset + np.arange(L)) % W, axis=1).astype(np.float64)
        if params.brightness_jitter:
            crop *= 1 + rng.uniform(-params.brightness_jitter, params.brightness_jitter)
        if params.noise_level:
            crop += rng.normal(0, params.noise_level, size=crop.shape)
        pixels = np.clip(np.rint(crop), 0, 255).astype(np.uint8)
        angle, radius = rng.uniform(0, 2 * np.pi), rng.uniform(0, 0.9)
        geo = GeoPoint(pano.geo.easting_m + radius * math.cos(angle),
                       pano.geo.northing_m + radius * math.sin(angle))
        queries.append(ImageRecord(qid, 'query', pixels, geo))
        groundtruth[qid], offsets[qid] = pano.id, offset
    logger.debug(f"synthesized {len(database)} panoramas and {len(queries)} queries "
                 f"({len(straddles)} straddling the seam)")
    return SynthDataset(database, queries, groundtruth, offsets, straddles)

def write_synth(out_dir:str, synth:SynthDataset) -> str:
    """Write images, `manifest.tsv` and `groundtruth.tsv`; returns the manifest path"""
    records = []
    for rec in synth.database + synth.queries:
        folder = 'database' if rec.role == 'database' else 'queries'
        path = os.path.join(out_dir, folder, rec.id + '.png')
        save_image(path, rec.source)
        records.append(ImageRecord(rec.id, rec.role, path, rec.geo))
    manifest = os.path.join(out_dir, 'manifest.tsv')
    write_manifest(manifest, records)
    write_groundtruth(os.path.join(out_dir, 'groundtruth.tsv'), synth)
    return manifest

def write_groundtruth(path:str, synth:SynthDataset):
    """One `query_id db_id offset_px straddles` line per query"""
    lines = ["# query_id\tdb_id\toffset_px\tstraddles"]
    for rec in synth.queries:
        lines.append(f"{rec.id}\t{synth.groundtruth[rec.id]}\t{synth.offsets[rec.id]}\t"
                     f"{int(rec.id in synth.straddles)}")
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write('\n'.join(lines) + '\n')

def load_groundtruth(path:str) -> Dict[str, Tuple[str, int, bool]]:
    """Query id to (source panorama, crop offset, straddles the seam)"""
    truth = {}
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().split('\n')
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith('#'):
            continue
        fields = line.split('\t')
        if len(fields) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
        try:
            truth[fields[0]] = (fields[1], int(fields[2]), bool(int(fields[3])))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed ground-truth line")
    return truth
