"""
On-disk formats: volumes, landmark files, checkpoints, field exports, dataset
and run directories, and CSV tables.

Every write goes to a temporary file in the destination directory and is
renamed into place, so an interrupted run never leaves a truncated file behind
under the final name.
"""

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import nibabel as nib
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .config import RegistrationMode, describe_validation_error
from .errors import ConfigError, DataError, FormatError
from .pipeline import CONVENTION, FrameBundle, LandmarkTrack, PairRegistration, displacement_field_mm
from .siren import SirenModel
from .volume import Grid3, NormFrame

NIFTI_DTYPES = {4: np.int16, 16: np.float32, 64: np.float64}
RAW_SUFFIX = ".f32"

CHECKPOINT_MAGIC = b"MYOREGCK"
CHECKPOINT_VERSION = 1

DATASET_META = "dataset.json"
RUN_META = "run.json"
LANDMARKS = "landmarks.json"
LOSSES = "losses.csv"


@contextmanager
def atomic_target(path: Path) -> Iterator[Path]:
    """Yield a temporary sibling of path; rename it over path on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=path.suffix or ".tmp", dir=path.parent)
    os.close(fd)
    tmp_path = Path(tmp)
    try:
        yield tmp_path
        os.replace(tmp_path, path)
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise


def write_bytes(path: Path, payload: bytes) -> None:
    with atomic_target(path) as tmp:
        tmp.write_bytes(payload)


def write_json(path: Path, document: Any) -> None:
    write_bytes(path, (json.dumps(document, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e


# volumes


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(".nii")


def write_volume(path: Path, grid: Grid3, dtype=np.float32) -> None:
    """Write a Grid3 as minimal NIfTI-1 (.nii) or as a raw .json/.f32 pair."""
    path = Path(path)
    if path.name.endswith(".nii.gz"):
        raise FormatError(f"{path}: compressed NIfTI is not supported")
    if _is_nifti(path):
        _write_nifti(path, grid, np.dtype(dtype))
    else:
        _write_raw(path, grid)


def read_volume(path: Path) -> Grid3:
    path = Path(path)
    if path.name.endswith(".nii.gz"):
        raise FormatError(f"{path}: compressed NIfTI is not supported")
    if _is_nifti(path):
        return _read_nifti(path)
    return _read_raw(path)


def _affine(grid: Grid3) -> np.ndarray:
    affine = np.diag(list(grid.spacing) + [1.0])
    affine[:3, 3] = grid.origin
    return affine


def _write_nifti(path: Path, grid: Grid3, dtype: np.dtype) -> None:
    codes = {np.dtype(v): k for k, v in NIFTI_DTYPES.items()}
    if dtype not in codes:
        raise FormatError(f"{path}: NIfTI datatype {dtype} is outside the supported subset")
    data = grid.values
    if dtype == np.int16:
        data = np.rint(data)
    image = nib.Nifti1Image(np.asarray(data).astype(dtype), _affine(grid))
    image.header.set_data_dtype(dtype)
    image.header.set_xyzt_units("mm")
    image.set_qform(_affine(grid), code=1)
    image.set_sform(_affine(grid), code=1)
    with atomic_target(path) as tmp:
        nib.save(image, str(tmp))


def _read_nifti(path: Path) -> Grid3:
    try:
        image = nib.load(str(path))
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except Exception as e:
        raise FormatError(f"{path}: cannot read NIfTI: {e}") from e
    if not isinstance(image, nib.Nifti1Image):
        raise FormatError(f"{path}: only single-file NIfTI-1 is supported")
    header = image.header
    magic = bytes(header["magic"].item()).rstrip(b"\x00")
    if magic != b"n+1":
        raise FormatError(f"{path}: unexpected NIfTI magic {magic!r}")
    datatype = int(header["datatype"])
    if datatype not in NIFTI_DTYPES:
        raise FormatError(f"{path}: NIfTI datatype code {datatype} is outside the supported subset")
    if len(image.shape) != 3:
        raise FormatError(f"{path}: expected a 3D volume, got shape {image.shape}")
    affine = image.affine
    linear = affine[:3, :3]
    spacing = np.diag(linear)
    if np.any(np.abs(linear - np.diag(spacing)) > 1e-6 * np.max(np.abs(spacing))) or np.any(spacing <= 0):
        raise FormatError(f"{path}: only axis-aligned volumes with positive spacing are supported")
    values = np.asarray(image.get_fdata(dtype=np.float64))
    return Grid3(values=values, spacing=tuple(spacing), origin=tuple(affine[:3, 3]))


def _raw_paths(path: Path) -> Tuple[Path, Path]:
    stem = path.with_suffix("") if path.suffix in (".json", RAW_SUFFIX) else path
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + RAW_SUFFIX)


def _write_raw(path: Path, grid: Grid3) -> None:
    meta_path, data_path = _raw_paths(path)
    payload = np.asarray(grid.values, dtype="<f4").tobytes(order="F")
    write_bytes(data_path, payload)
    write_json(
        meta_path,
        {
            "dims": list(grid.dims),
            "spacing": list(grid.spacing),
            "origin": list(grid.origin),
            "dtype": "float32",
            "byte_order": "little",
            "order": "F",
        },
    )


def _read_raw(path: Path) -> Grid3:
    meta_path, data_path = _raw_paths(path)
    meta = read_json(meta_path)
    try:
        dims = tuple(int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta["spacing"])
        origin = tuple(float(o) for o in meta.get("origin", (0.0, 0.0, 0.0)))
        dtype, byte_order = meta["dtype"], meta.get("byte_order", "little")
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{meta_path}: malformed raw volume header ({e})") from e
    if dtype != "float32" or byte_order != "little":
        raise FormatError(f"{meta_path}: only little-endian float32 raw volumes are supported")
    try:
        payload = data_path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"file not found: {data_path}") from None
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise FormatError(f"{data_path}: payload has {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F").astype(np.float64)
    return Grid3(values=values, spacing=spacing, origin=origin)


# landmarks


class LandmarkEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    points: List[Tuple[float, float, float]]
    residuals_mm: Optional[List[float]] = None


class LandmarkFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    frames: int
    landmarks: List[LandmarkEntry]
    mode: Optional[RegistrationMode] = None
    convention: Optional[str] = None

    @model_validator(mode="after")
    def _same_frames(self) -> "LandmarkFile":
        for entry in self.landmarks:
            if len(entry.points) != self.frames:
                raise ValueError(f"landmark {entry.name} has {len(entry.points)} points for {self.frames} frames")
            if entry.residuals_mm is not None and len(entry.residuals_mm) != self.frames:
                raise ValueError(f"landmark {entry.name} residuals do not cover {self.frames} frames")
        return self


def write_landmarks(path: Path, track: LandmarkTrack, mode: Optional[RegistrationMode] = None) -> None:
    entries = []
    for i, name in enumerate(track.names):
        residuals = None if track.residuals is None else track.residuals[:, i].tolist()
        entries.append(
            LandmarkEntry(name=name, points=[tuple(p) for p in track.points[:, i].tolist()], residuals_mm=residuals)
        )
    document = LandmarkFile(
        frames=track.frames,
        landmarks=entries,
        mode=mode,
        convention=CONVENTION if mode is not None else None,
    )
    write_json(path, document.model_dump(mode="json", exclude_none=True))


def read_landmarks(path: Path) -> LandmarkTrack:
    try:
        document = LandmarkFile.model_validate(read_json(path))
    except ValidationError as e:
        raise FormatError(f"{path}: {describe_validation_error(e)}") from e
    points = np.asarray([entry.points for entry in document.landmarks], dtype=np.float64)
    points = np.transpose(points, (1, 0, 2)) if points.size else np.zeros((document.frames, 0, 3))
    residuals = None
    if document.landmarks and all(e.residuals_mm is not None for e in document.landmarks):
        residuals = np.asarray([e.residuals_mm for e in document.landmarks]).T
    return LandmarkTrack(names=[e.name for e in document.landmarks], points=points, residuals=residuals)


# checkpoints


def checkpoint_name(source_index: int, target_index: int) -> str:
    return f"pair_{source_index:02d}_{target_index:02d}.ckpt"


def write_checkpoint(path: Path, reg: PairRegistration) -> None:
    """JSON header plus little-endian float64 parameters, behind a magic and a length."""
    model = reg.model
    if not isinstance(model, SirenModel):
        raise FormatError(f"only SIREN registrations can be checkpointed, got {type(model).__name__}")
    header = {
        "format_version": CHECKPOINT_VERSION,
        "layer_sizes": model.layer_sizes,
        "omega": model.omega,
        "convention": reg.convention,
        "source_index": reg.source_index,
        "target_index": reg.target_index,
        "frame": {"center": list(reg.frame.center), "half_extent": list(reg.frame.half_extent)},
        "geometry": {"dims": list(reg.dims), "spacing": list(reg.spacing), "origin": list(reg.origin)},
        "config": reg.config,
        "init_fingerprint": reg.init_fingerprint,
        "fingerprint": model.fingerprint(),
        "loss_trace": reg.loss_trace.tolist(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.parameters())
    write_bytes(path, CHECKPOINT_MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + payload)


def read_checkpoint(path: Path) -> PairRegistration:
    """Load a registration written by write_checkpoint.

    Args:
        path: The .ckpt file

    Returns:
        The registration with its network, geometry and training record

    Raises:
        DataError: If the file does not exist
        FormatError: On a foreign file, an unknown version or convention, a header
            missing keys, or a parameter payload of the wrong size
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    prefix = len(CHECKPOINT_MAGIC) + 4
    if len(blob) < prefix or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a myoreg checkpoint")
    (header_len,) = struct.unpack("<I", blob[len(CHECKPOINT_MAGIC) : prefix])
    try:
        header = json.loads(blob[prefix : prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint header ({e})") from e
    if not isinstance(header, dict):
        raise FormatError(f"{path}: checkpoint header is not a JSON object")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: checkpoint format version {header.get('format_version')} is not supported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    if header.get("convention") != CONVENTION:
        raise FormatError(f"{path}: unknown direction convention {header.get('convention')!r}")
    try:
        sizes = [int(s) for s in header["layer_sizes"]]
        omega = float(header["omega"])
        source_index, target_index = int(header["source_index"]), int(header["target_index"])
        frame = NormFrame(center=tuple(header["frame"]["center"]), half_extent=tuple(header["frame"]["half_extent"]))
        geometry = header["geometry"]
        dims, spacing, origin = tuple(geometry["dims"]), tuple(geometry["spacing"]), tuple(geometry["origin"])
        trace = np.asarray(header.get("loss_trace") or [], dtype=np.float64).reshape(-1, 4)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed checkpoint header ({e!r})") from e
    shapes = [(out, inp) for inp, out in zip(sizes[:-1], sizes[1:])]
    expected = sum(o * i + o for o, i in shapes)
    params = np.frombuffer(blob[prefix + header_len :], dtype="<f8")
    if params.size != expected:
        raise FormatError(f"{path}: {params.size} parameters stored, architecture {sizes} needs {expected}")
    weights, biases, offset = [], [], 0
    for out, inp in shapes:
        weights.append(params[offset : offset + out * inp].reshape(out, inp).astype(np.float64))
        offset += out * inp
        biases.append(params[offset : offset + out].astype(np.float64))
        offset += out
    return PairRegistration(
        model=SirenModel(weights=weights, biases=biases, omega=omega),
        source_index=source_index,
        target_index=target_index,
        frame=frame,
        dims=dims,
        spacing=spacing,
        origin=origin,
        loss_trace=trace,
        convention=header["convention"],
        init_fingerprint=header.get("init_fingerprint"),
        config=header.get("config") or {},
    )


# displacement fields


def write_field(outdir: Path, reg: PairRegistration) -> None:
    """Dense u (mm) on the target grid as ux/uy/uz volumes plus field.json."""
    outdir = Path(outdir)
    field = displacement_field_mm(reg)
    target = reg.target_grid()
    for axis, name in enumerate(("ux", "uy", "uz")):
        write_volume(outdir / f"{name}.nii", target.with_values(field[..., axis]))
    write_json(
        outdir / "field.json",
        {
            "convention": reg.convention,
            "source_index": reg.source_index,
            "target_index": reg.target_index,
            "units": "mm",
            "components": ["ux.nii", "uy.nii", "uz.nii"],
        },
    )


# dataset and run directories


def frame_paths(root: Path, t: int) -> Dict[str, Path]:
    root = Path(root)
    return {
        "ct": root / "frames" / f"frame_{t:02d}.nii",
        "mask": root / "masks" / f"mask_{t:02d}.nii",
        "sdf": root / "sdfs" / f"sdf_{t:02d}.nii",
    }


def prepare_output_dir(path: Path, force: bool) -> Path:
    """Create path, refusing to reuse a non-empty directory unless force is set."""
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"{path} already exists and is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_dataset(
    root: Path,
    frames: Sequence[FrameBundle],
    track: Optional[LandmarkTrack],
    meta: Optional[Dict[str, Any]] = None,
) -> None:
    root = Path(root)
    for bundle in frames:
        paths = frame_paths(root, bundle.frame_index)
        write_volume(paths["ct"], bundle.ct, np.float32)
        write_volume(paths["mask"], bundle.lv_mask, np.int16)
        write_volume(paths["sdf"], bundle.sdf, np.float32)
    if track is not None:
        write_landmarks(root / LANDMARKS, track)
    document = {
        "frames": len(frames),
        "percents": [bundle.percent for bundle in frames],
        "spacing": list(frames[0].ct.spacing),
        "dims": list(frames[0].ct.dims),
    }
    document.update(meta or {})
    write_json(root / DATASET_META, document)


def discover_frames(root: Path) -> List[int]:
    """Frame indices present under root/frames, sorted."""
    indices = []
    for entry in sorted((Path(root) / "frames").glob("frame_*.nii")):
        try:
            indices.append(int(entry.name[len("frame_") : -len(".nii")]))
        except ValueError:
            continue
    return indices


def load_dataset(root: Path, dilation_mm: float = 10.0) -> List[FrameBundle]:
    """Read every frame of a dataset directory into FrameBundles."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    meta_path = root / DATASET_META
    if meta_path.exists():
        meta = read_json(meta_path)
        try:
            indices = list(range(int(meta["frames"])))
            percents = [float(p) for p in meta.get("percents") or [100.0 * t / len(indices) for t in indices]]
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{meta_path}: malformed dataset description ({e!r})") from e
        if len(percents) != len(indices):
            raise FormatError(f"{meta_path}: {len(percents)} cycle percentages for {len(indices)} frames")
    else:
        indices = discover_frames(root)
        percents = [100.0 * t / max(len(indices), 1) for t in indices]
    if len(indices) < 2:
        raise DataError(f"{root}: a dataset needs at least 2 frames, found {len(indices)}")
    frames = []
    for t, percent in zip(indices, percents):
        paths = frame_paths(root, t)
        ct = read_volume(paths["ct"])
        mask = read_volume(paths["mask"])
        sdf = read_volume(paths["sdf"]) if paths["sdf"].exists() else None
        frames.append(FrameBundle.build(ct, mask, t, float(percent), dilation_mm, sdf=sdf))
    return frames


def write_run(
    regdir: Path,
    registrations: Sequence[PairRegistration],
    meta: Dict[str, Any],
    write_checkpoints: bool = True,
) -> None:
    """run.json plus, unless already written pair by pair, every checkpoint."""
    regdir = Path(regdir)
    for reg in registrations if write_checkpoints else ():
        write_checkpoint(regdir / "checkpoints" / checkpoint_name(reg.source_index, reg.target_index), reg)
    document = dict(meta)
    document["pairs"] = [[r.source_index, r.target_index] for r in registrations]
    document["convention"] = CONVENTION
    write_json(regdir / RUN_META, document)


def load_run(regdir: Path) -> Tuple[List[PairRegistration], Dict[str, Any]]:
    """Checkpoints of a registration directory in run.json order, plus run.json itself.

    Raises FormatError when run.json lacks a valid mode or pair list.
    """
    regdir = Path(regdir)
    if not regdir.is_dir():
        raise DataError(f"registration directory not found: {regdir}")
    meta_path = regdir / RUN_META
    meta = read_json(meta_path)
    try:
        RegistrationMode(meta["mode"])
        pairs = [(int(s), int(t)) for s, t in meta["pairs"]]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{meta_path}: malformed run description ({e!r})") from e
    registrations = [read_checkpoint(regdir / "checkpoints" / checkpoint_name(s, t)) for s, t in pairs]
    return registrations, meta


# tables


def write_csv(path: Path, table: pd.DataFrame, echo: Optional[Dict[str, Any]] = None) -> None:
    """CSV with a leading '# config: {...}' comment line and a header row."""
    with atomic_target(path) as tmp:
        with open(tmp, "w", newline="") as handle:
            handle.write("# config: " + json.dumps(echo or {}, sort_keys=True) + "\n")
            table.to_csv(handle, index=False)


def read_csv(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, comment="#")
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None


def loss_table(registrations: Sequence[PairRegistration]) -> pd.DataFrame:
    frames = []
    for reg in registrations:
        trace = reg.loss_trace
        frames.append(
            pd.DataFrame(
                {
                    "pair": reg.label,
                    "source": reg.source_index,
                    "target": reg.target_index,
                    "epoch": np.arange(len(trace)),
                    "total": trace[:, 0],
                    "ncc_ct": trace[:, 1],
                    "ncc_sdf": trace[:, 2],
                    "sjac": trace[:, 3],
                }
            )
        )
    return pd.concat(frames, ignore_index=True)
