"""Synthetic observation datasets and their line-oriented file format.

A dataset file is JSON lines: one header record (generation config, skeleton
constants, raster extent) followed by one record per sample.  Part maps are
base64 strings of little-endian float32; every other array is a nested list.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bodymodel import ModelState, Skeleton, default_skeleton, pose_vertices, sample_state
from .camera import CropSpec, Intrinsics, approx_intrinsics, crop_intrinsics, project
from . import diffcore as dc
from .renderloss import Observation, RasterConfig, hard_rasterize
from .bodymodel import mesh_topology, Mesh

FORMAT = "neural-descent-dataset"
VERSION = 1
MIN_DEPTH = 0.3
MAX_RETRIES = 20


@dataclass(frozen=True)
class GenerationConfig:
    n: int
    seed: int
    pose_scale: float = 0.3
    kp_noise_px: float = 0.0
    part_dropout: float = 0.0
    kp_dropout: float = 0.0
    shape_scale: float = 0.5
    image_height: int = 480
    image_width: int = 640
    crop_size: int = 480
    crop_margin: float = 0.1
    raster_size: int = 64
    rot_max_angle: float | None = 0.6
    t_range: tuple = ((-0.5, 0.5), (-0.5, 0.5), (2.0, 6.0))

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.pose_scale < 0 or self.shape_scale < 0 or self.kp_noise_px < 0:
            raise ValueError("scales and noise levels must be nonnegative")
        if not (0.0 <= self.part_dropout <= 1.0 and 0.0 <= self.kp_dropout <= 1.0):
            raise ValueError("dropout rates must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t_range"] = [list(r) for r in self.t_range]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        d = dict(d)
        d["t_range"] = tuple(tuple(r) for r in d["t_range"])
        return cls(**d)


@dataclass
class Sample:
    sample_id: int
    observation: Observation
    state: ModelState
    crop: CropSpec
    source_intrinsics: Intrinsics


@dataclass
class Dataset:
    samples: list[Sample]
    config: GenerationConfig
    skeleton: Skeleton
    raster: RasterConfig = field(default_factory=RasterConfig)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def observations(self) -> list[Observation]:
        return [s.observation for s in self.samples]

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.config, self.skeleton, self.raster)


def square_crop(uv: np.ndarray, margin: float, out: int) -> CropSpec:
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    centre = 0.5 * (lo + hi)
    side = float(np.max(hi - lo)) * (1.0 + margin)
    return CropSpec(float(centre[0] - side / 2), float(centre[1] - side / 2), side, side, out)


def make_sample(
    sample_id: int,
    state: ModelState,
    config: GenerationConfig,
    skeleton: Skeleton,
    rng: np.random.Generator,
) -> Sample:
    """Observation of ``state`` in a tight square crop around its projection."""
    C = approx_intrinsics(config.image_height, config.image_width)
    verts_v, joints_v = pose_vertices(skeleton, dc.Value(state.to_vector()[None]))
    verts, joints = verts_v.data[0], joints_v.data[0]
    crop = square_crop(project(verts, C), config.crop_margin, config.crop_size)
    Cc = crop_intrinsics(C, crop)
    kp = project(joints, Cc)
    if config.kp_noise_px > 0:
        kp = kp + rng.standard_normal(kp.shape) * config.kp_noise_px
    conf = 1.0 - (rng.random(len(kp)) < config.kp_dropout).astype(np.float64)
    tris, sem = mesh_topology(skeleton)
    cfg = RasterConfig(H=config.raster_size, W=config.raster_size)
    part = hard_rasterize(Mesh(verts, tris, sem), Cc, cfg, crop_size=config.crop_size)
    if config.part_dropout > 0:
        drop = rng.random(skeleton.num_parts) < config.part_dropout
        part[..., :-1][..., drop] = 0.0
    part = part.astype(np.float32).astype(np.float64)
    obs = Observation(kp, conf, part, Cc, config.crop_size, gt_joints=joints, gt_vertices=verts)
    return Sample(sample_id, obs, state, crop, C)


def generate_dataset(
    n: int,
    seed: int,
    pose_scale: float = 0.3,
    kp_noise_px: float = 0.0,
    part_dropout: float = 0.0,
    skeleton: Skeleton | None = None,
    **options,
) -> Dataset:
    """Sample states from the priors and synthesize their observations.

    Each sample draws from its own child seed, so sample i does not depend on n.
    States placing any vertex closer than MIN_DEPTH are redrawn.
    """
    config = GenerationConfig(n=n, seed=seed, pose_scale=pose_scale, kp_noise_px=kp_noise_px, part_dropout=part_dropout, **options)
    skeleton = skeleton or default_skeleton()
    children = np.random.SeedSequence(seed).spawn(n)
    samples = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        for _ in range(MAX_RETRIES):
            state = sample_state(
                rng, config.pose_scale, config.shape_scale, config.t_range, skeleton, config.rot_max_angle
            )
            verts, _ = pose_vertices(skeleton, dc.Value(state.to_vector()[None]))
            if np.min(verts.data[0, :, 2]) > MIN_DEPTH:
                break
        else:
            raise RuntimeError(f"sample {i}: could not draw a state in front of the camera")
        samples.append(make_sample(i, state, config, skeleton, rng))
    return Dataset(samples, config, skeleton, RasterConfig(H=config.raster_size, W=config.raster_size))


# ---------------------------------------------------------------- serialization


def _encode_map(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "dtype": "<f4",
        "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii"),
    }


def _decode_map(d: dict) -> np.ndarray:
    if d.get("dtype") != "<f4":
        raise ValueError(f"unsupported part-map dtype {d.get('dtype')}")
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(d["shape"]).astype(np.float64)


def sample_record(s: Sample) -> dict:
    o = s.observation
    rec = {
        "kind": "sample",
        "id": s.sample_id,
        "state": {"theta": s.state.theta.tolist(), "beta": s.state.beta.tolist(), "r": s.state.r.tolist(), "t": s.state.t.tolist()},
        "crop": {"x0": s.crop.x0, "y0": s.crop.y0, "w": s.crop.w, "h": s.crop.h, "out": s.crop.out},
        "source_intrinsics": s.source_intrinsics.as_array().tolist(),
        "crop_intrinsics": o.crop_intrinsics.as_array().tolist(),
        "crop_size": o.crop_size,
        "keypoints2d": o.keypoints2d.tolist(),
        "confidences": o.confidences.tolist(),
        "part_map": _encode_map(o.part_map),
    }
    if o.gt_joints is not None:
        rec["gt_joints"] = o.gt_joints.tolist()
    if o.gt_vertices is not None:
        rec["gt_vertices"] = o.gt_vertices.tolist()
    return rec


def sample_from_record(rec: dict) -> Sample:
    st = rec["state"]
    obs = Observation(
        keypoints2d=np.array(rec["keypoints2d"], dtype=np.float64),
        confidences=np.array(rec["confidences"], dtype=np.float64),
        part_map=_decode_map(rec["part_map"]),
        crop_intrinsics=Intrinsics.from_array(rec["crop_intrinsics"]),
        crop_size=int(rec["crop_size"]),
        gt_joints=None if "gt_joints" not in rec else np.array(rec["gt_joints"], dtype=np.float64),
        gt_vertices=None if "gt_vertices" not in rec else np.array(rec["gt_vertices"], dtype=np.float64),
    )
    c = rec["crop"]
    return Sample(
        int(rec["id"]),
        obs,
        ModelState(st["theta"], st["beta"], st["r"], st["t"]),
        CropSpec(c["x0"], c["y0"], c["w"], c["h"], int(c["out"])),
        Intrinsics.from_array(rec["source_intrinsics"]),
    )


def header_record(ds: Dataset) -> dict:
    return {
        "kind": "header",
        "format": FORMAT,
        "version": VERSION,
        "config": ds.config.to_dict(),
        "skeleton": ds.skeleton.to_dict(),
        "raster": {"H": ds.raster.H, "W": ds.raster.W},
        "num_samples": len(ds),
    }


def dumps(ds: Dataset) -> str:
    lines = [json.dumps(header_record(ds), sort_keys=True)]
    lines += [json.dumps(sample_record(s), sort_keys=True) for s in ds.samples]
    return "\n".join(lines) + "\n"


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dumps(ds), encoding="utf-8")


def read_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise ValueError(f"{path}: empty dataset file")
        header = json.loads(first)
        if header.get("kind") != "header" or header.get("format") != FORMAT:
            raise ValueError(f"{path}: missing dataset header")
        if header.get("version") != VERSION:
            raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
        samples = [sample_from_record(json.loads(line)) for line in fh if line.strip()]
    ds = Dataset(
        samples,
        GenerationConfig.from_dict(header["config"]),
        Skeleton.from_dict(header["skeleton"]),
        RasterConfig(H=header["raster"]["H"], W=header["raster"]["W"]),
    )
    if len(samples) != header.get("num_samples", len(samples)):
        raise ValueError(f"{path}: header announces {header['num_samples']} samples, found {len(samples)}")
    return ds


