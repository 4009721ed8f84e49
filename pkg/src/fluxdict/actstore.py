"""Activation shards: on-disk format, batch sampling and synthetic generators.

File layout (little-endian)::

    magic      4s   b"ACTS"
    version    u8
    dtype      u8   1 = float32, 2 = float16
    reserved   2x
    n_rows     u64
    hidden_dim u64
    layer_id   i64
    timestep   i64
    grid_h     u32  0 when the shard has no grid
    grid_w     u32
    n_refs     u32  number of image refs
    refs_len   u32  byte length of the refs block
    data       n_rows * hidden_dim elements, row-major
    refs       utf-8, refs joined by "\\n"
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import StorageError, ValidationError

MAGIC = b"ACTS"
VERSION = 1
HEADER = struct.Struct("<4sBB2xQQqqIIII")
DTYPE_CODES = {"f32": 1, "f16": 2}
DTYPE_NUMPY = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}
_CODE_TO_TAG = {v: k for k, v in DTYPE_CODES.items()}


@dataclass
class ActivationShard:
    data: np.ndarray
    layer_id: int = 0
    timestep: int = 0
    grid_shape: tuple[int, int] | None = None
    image_refs: list[str] | None = None
    dtype: str = "f32"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.grid_shape is not None:
            self.grid_shape = (int(self.grid_shape[0]), int(self.grid_shape[1]))

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.data.shape[1]

    @property
    def patches_per_image(self) -> int | None:
        if self.grid_shape is None:
            return None
        return self.grid_shape[0] * self.grid_shape[1]

    @property
    def n_images(self) -> int:
        ppi = self.patches_per_image
        return 0 if not ppi else self.n_rows // ppi

    def float_data(self) -> np.ndarray:
        """Rows as float32 (f16 shards are upcast here)."""
        if self.data.dtype == np.float32:
            return self.data
        return self.data.astype(np.float32)

    def validate(self) -> None:
        if self.dtype not in DTYPE_CODES:
            raise ValidationError(f"unknown dtype tag {self.dtype!r}")
        if self.data.ndim != 2:
            raise ValidationError(f"shard data must be 2-D, got shape {self.data.shape}")
        if self.data.dtype != DTYPE_NUMPY[self.dtype].newbyteorder("="):
            raise ValidationError(f"data dtype {self.data.dtype} does not match tag {self.dtype}")
        if self.grid_shape is not None:
            h, w = self.grid_shape
            if h <= 0 or w <= 0:
                raise ValidationError(f"grid_shape must be positive, got {self.grid_shape}")
            if self.n_rows % (h * w):
                raise ValidationError(
                    f"n_rows={self.n_rows} is not divisible by grid size {h}x{w}"
                )
        if self.image_refs is not None:
            if self.grid_shape is None:
                raise ValidationError("image_refs require a grid_shape")
            if len(self.image_refs) != self.n_images:
                raise ValidationError(
                    f"expected {self.n_images} image refs, got {len(self.image_refs)}"
                )
            if any("\n" in r for r in self.image_refs):
                raise ValidationError("image refs may not contain newlines")

    def image_rows(self, image_index: int) -> np.ndarray:
        ppi = self.patches_per_image
        return self.float_data()[image_index * ppi:(image_index + 1) * ppi]


def write_shard(shard: ActivationShard, path) -> None:
    shard.validate()
    refs = "\n".join(shard.image_refs).encode("utf-8") if shard.image_refs else b""
    gh, gw = shard.grid_shape or (0, 0)
    header = HEADER.pack(
        MAGIC, VERSION, DTYPE_CODES[shard.dtype], shard.n_rows, shard.hidden_dim,
        shard.layer_id, shard.timestep, gh, gw, len(shard.image_refs or []), len(refs),
    )
    payload = np.ascontiguousarray(shard.data, dtype=DTYPE_NUMPY[shard.dtype]).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
            fh.write(refs)
    except OSError as exc:
        raise StorageError(f"cannot write shard {path}: {exc}") from exc


def read_shard(path) -> ActivationShard:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read shard {path}: {exc}") from exc
    if len(raw) < HEADER.size:
        raise StorageError(f"{path}: file too short for a shard header")
    (magic, version, code, n_rows, dim, layer_id, timestep,
     gh, gw, n_refs, refs_len) = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise StorageError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise StorageError(f"{path}: unsupported shard version {version}")
    if code not in _CODE_TO_TAG:
        raise StorageError(f"{path}: unknown dtype code {code}")
    tag = _CODE_TO_TAG[code]
    dt = DTYPE_NUMPY[tag]
    n_bytes = n_rows * dim * dt.itemsize
    end = HEADER.size + n_bytes
    if len(raw) != end + refs_len:
        raise StorageError(f"{path}: size mismatch, truncated or corrupt shard")
    data = np.frombuffer(raw, dtype=dt, count=n_rows * dim, offset=HEADER.size)
    data = data.reshape(n_rows, dim).astype(dt.newbyteorder("="))
    refs = raw[end:].decode("utf-8").split("\n") if n_refs else None
    shard = ActivationShard(
        data=data, layer_id=layer_id, timestep=timestep,
        grid_shape=(gh, gw) if gh else None, image_refs=refs, dtype=tag,
    )
    shard.validate()
    return shard


def _check_dims(shards: Sequence[ActivationShard]) -> int:
    if not shards:
        raise ValidationError("no shards given")
    dims = sorted({s.hidden_dim for s in shards})
    if len(dims) > 1:
        raise ValidationError(f"shards have mixed hidden_dim: {dims}")
    if sum(s.n_rows for s in shards) == 0:
        raise ValidationError("shards contain no rows")
    return dims[0]


def sample_batches(
    shards: Sequence[ActivationShard],
    batch_size: int,
    seed: int = 0,
    epochs: int | None = None,
    return_ids: bool = False,
) -> Iterator:
    """Yield float32 batches of shape (batch_size, hidden_dim).

    Rows are drawn without replacement inside an epoch and reshuffled for the
    next one; a batch may straddle an epoch boundary. With ``epochs=None`` the
    stream is infinite; otherwise a final short batch is emitted if rows remain.
    With ``return_ids`` each item is ``(batch, ids)`` where ``ids[:, 0]`` is the
    shard index and ``ids[:, 1]`` the row within that shard.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    _check_dims(shards)
    rows = np.concatenate([s.float_data() for s in shards]) if len(shards) > 1 else shards[0].float_data()
    owners = np.concatenate([
        np.stack([np.full(s.n_rows, i), np.arange(s.n_rows)], axis=1) for i, s in enumerate(shards)
    ]).astype(np.int64)
    total = rows.shape[0]
    rng = np.random.default_rng(seed)
    pending = np.empty(0, dtype=np.int64)
    epoch = 0
    while True:
        while pending.size < batch_size and (epochs is None or epoch < epochs):
            pending = np.concatenate([pending, rng.permutation(total)])
            epoch += 1
        if pending.size == 0:
            return
        take, pending = pending[:batch_size], pending[batch_size:]
        if return_ids:
            yield rows[take], owners[take]
        else:
            yield rows[take]


# ---------------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    mode: str = "anisotropic_gaussian"
    hidden_dim: int = 64
    n_rows: int = 10_000
    spectrum_exponent: float = 1.0
    planted_dict_size: int = 32
    planted_sparsity: int = 3
    noise_std: float = 0.0
    seed: int = 0
    mean_scale: float = 1.0
    layer_id: int = 0
    timestep: int = 0

    def validate(self) -> None:
        if self.mode not in ("anisotropic_gaussian", "planted_dictionary"):
            raise ValidationError(f"unknown synthetic mode {self.mode!r}")
        if self.hidden_dim < 1 or self.n_rows < 0:
            raise ValidationError("hidden_dim must be >= 1 and n_rows >= 0")
        if self.spectrum_exponent < 0:
            raise ValidationError("spectrum_exponent must be >= 0")
        if self.mode == "planted_dictionary":
            if not 1 <= self.planted_sparsity <= self.planted_dict_size <= self.n_rows:
                raise ValidationError(
                    "need 1 <= planted_sparsity <= planted_dict_size <= n_rows, got "
                    f"{self.planted_sparsity}, {self.planted_dict_size}, {self.n_rows}"
                )
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")


@dataclass
class SyntheticData:
    shard: ActivationShard
    atoms: np.ndarray | None = None
    codes: np.ndarray | None = None
    eigenvalues: np.ndarray | None = None
    basis: np.ndarray | None = None
    mean: np.ndarray | None = None


def random_orthonormal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def random_unit_rows(count: int, n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((count, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate(spec: SyntheticSpec) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.hidden_dim
    if spec.mode == "anisotropic_gaussian":
        eig = (np.arange(n) + 1.0) ** (-spec.spectrum_exponent)
        basis = random_orthonormal(n, rng)
        mean = rng.standard_normal(n) * spec.mean_scale
        z = rng.standard_normal((spec.n_rows, n)) * np.sqrt(eig)
        rows = z @ basis.T + mean
        if spec.noise_std:
            rows += rng.standard_normal(rows.shape) * spec.noise_std
        shard = ActivationShard(rows.astype(np.float32), spec.layer_id, spec.timestep)
        return SyntheticData(shard, eigenvalues=eig, basis=basis, mean=mean)

    atoms = random_unit_rows(spec.planted_dict_size, n, rng)
    codes = np.zeros((spec.n_rows, spec.planted_dict_size))
    s = spec.planted_sparsity
    # rank of uniform keys gives s distinct atoms per row without a python loop
    support = np.argsort(rng.random((spec.n_rows, spec.planted_dict_size)), axis=1)[:, :s]
    coef = rng.uniform(0.5, 2.0, size=(spec.n_rows, s))
    np.put_along_axis(codes, support, coef, axis=1)
    rows = codes @ atoms
    if spec.noise_std:
        rows += rng.standard_normal(rows.shape) * spec.noise_std
    shard = ActivationShard(rows.astype(np.float32), spec.layer_id, spec.timestep)
    return SyntheticData(shard, atoms=atoms, codes=codes)


PALETTE = [
    (220, 40, 40), (40, 180, 60), (240, 200, 30), (150, 60, 200), (250, 130, 20),
    (30, 200, 200), (240, 90, 180), (120, 80, 40), (255, 255, 255), (90, 90, 90),
    (160, 220, 90), (200, 160, 120), (20, 100, 60), (130, 0, 40), (255, 180, 200),
    (60, 60, 160),
]
SHAPES = ["square", "stripe", "blob", "cross"]


def planted_label(feature: int) -> str:
    color = PALETTE[feature % len(PALETTE)]
    shape = SHAPES[(feature // len(PALETTE)) % len(SHAPES)]
    return f"{shape} of color rgb{color}"


@dataclass
class PlantedImages:
    """Synthetic image dataset with known per-patch feature labels."""

    shard: ActivationShard
    images: dict[str, np.ndarray]
    patch_labels: dict[str, list[str]]
    atoms: np.ndarray
    feature_labels: list[str] = field(default_factory=list)


def generate_planted_images(
    n_images: int = 200,
    n_features: int = 16,
    hidden_dim: int = 64,
    grid_shape: tuple[int, int] = (4, 4),
    patch_px: int = 8,
    noise_std: float = 0.05,
    seed: int = 0,
    layer_id: int = 0,
    timestep: int = 0,
) -> PlantedImages:
    """Images whose patches either show background or one planted feature.

    Each image carries one feature occupying a random rectangle of 1 to 4
    patches; the feature's patch activations are a positive multiple of its
    atom plus Gaussian noise, and its pixels are painted in the feature's
    color. Background patches hold noise only.
    """
    rng = np.random.default_rng(seed)
    gh, gw = grid_shape
    atoms = random_unit_rows(n_features, hidden_dim, rng)
    labels = [planted_label(j) for j in range(n_features)]
    rows = rng.standard_normal((n_images * gh * gw, hidden_dim)) * noise_std
    images: dict[str, np.ndarray] = {}
    patch_labels: dict[str, list[str]] = {}
    refs = []
    for i in range(n_images):
        ref = f"img_{i:05d}"
        refs.append(ref)
        img = rng.integers(90, 140, size=(gh * patch_px, gw * patch_px, 1), dtype=np.uint8).repeat(3, axis=2)
        plabels = ["background"] * (gh * gw)
        feat = int(rng.integers(n_features))
        h = int(rng.integers(1, 3))
        w = int(rng.integers(1, 3))
        top = int(rng.integers(0, gh - h + 1))
        left = int(rng.integers(0, gw - w + 1))
        for r in range(top, top + h):
            for c in range(left, left + w):
                p = r * gw + c
                rows[i * gh * gw + p] += atoms[feat] * rng.uniform(0.5, 2.0)
                plabels[p] = labels[feat]
                img[r * patch_px:(r + 1) * patch_px, c * patch_px:(c + 1) * patch_px] = PALETTE[feat % len(PALETTE)]
        images[ref] = img
        patch_labels[ref] = plabels
    shard = ActivationShard(rows.astype(np.float32), layer_id, timestep, grid_shape=(gh, gw), image_refs=refs)
    return PlantedImages(shard, images, patch_labels, atoms, labels)
