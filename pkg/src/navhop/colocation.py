"""Simplified VIIRS/CrIS co-location workload.

Fine (VIIRS-like) samples are mapped onto coarse (CrIS-like) footprints by
nearest great-circle angle on a spherical earth.  Two stage machines run the
same computation: ``build_publish_variant`` checkpoints twice and publishes
the product, ``build_hop_variant`` migrates to a data host to read, back home
to compute, and to the data host again to write.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .runtime import (
    AppRegistry,
    NodeEnv,
    StageMachine,
    hop,
    input_key,
    product_key,
    publish,
)
from .scheduler import SchedulerClient
from .state import TaskState
from .store import BlobStore
from .errors import StoreUnavailable

EARTH_RADIUS_KM = 6371.0
DEFAULT_RADIUS = 0.05  # radians
PUBLISH_APP = "colocation"
HOP_APP = "colocation-hop"
SEQ_APP = "colocation-seq"
PRODUCT_NAME = "match.txt"
FINE_INPUT = "fine.txt"
COARSE_INPUT = "coarse.txt"


@dataclass(frozen=True)
class InstrumentGranule:
    instrument: str  # "fine" or "coarse"
    granule_id: str
    samples: tuple[tuple[float, float, float], ...]  # (lat, lon, value), degrees

    def __post_init__(self):
        if self.instrument not in ("fine", "coarse"):
            raise ValueError(f"unknown instrument {self.instrument!r}")
        if not self.samples:
            raise ValueError("granule has no samples")
        for lat, lon, _ in self.samples:
            if not (-90.0 <= lat <= 90.0 and -180.0 < lon <= 180.0):
                raise ValueError(f"sample out of range: lat={lat} lon={lon}")

    def to_text(self) -> bytes:
        lines = [f"granule {self.granule_id}", f"instrument {self.instrument}", f"samples {len(self.samples)}"]
        lines.extend(f"{lat!r} {lon!r} {value!r}" for lat, lon, value in self.samples)
        return ("\n".join(lines) + "\n").encode("utf-8")

    @classmethod
    def from_text(cls, data: bytes) -> "InstrumentGranule":
        lines = data.decode("utf-8").splitlines()
        try:
            gid = lines[0].split(" ", 1)[1]
            instrument = lines[1].split(" ", 1)[1]
            count = int(lines[2].split(" ", 1)[1])
        except (IndexError, ValueError) as exc:
            raise ValueError(f"malformed granule header: {exc}") from None
        rows = lines[3:]
        if len(rows) != count:
            raise ValueError(f"granule declares {count} samples, has {len(rows)}")
        samples = tuple(tuple(float(x) for x in row.split()) for row in rows)
        if any(len(s) != 3 for s in samples):
            raise ValueError("each sample row needs lat lon value")
        return cls(instrument, gid, samples)

    def columns(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        arr = np.array(self.samples, dtype=np.float64)
        return arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy()


def gen_granules(seed: int, n_fine: int, n_coarse: int) -> tuple[InstrumentGranule, InstrumentGranule]:
    """Deterministic synthetic granules over a 30x30 degree box around (0, 0)."""
    if n_fine < 1 or n_coarse < 1:
        raise ValueError("n_fine and n_coarse must be >= 1")
    rng = random.Random(seed)

    def sample(base: float, spread: float):
        return (-15.0 + 30.0 * rng.random(), -15.0 + 30.0 * rng.random(), base + spread * rng.random())

    coarse = tuple(sample(220.0, 80.0) for _ in range(n_coarse))
    fine = tuple(sample(200.0, 100.0) for _ in range(n_fine))
    return (
        InstrumentGranule("fine", f"fine-s{seed}", fine),
        InstrumentGranule("coarse", f"coarse-s{seed}", coarse),
    )


class EcefVector(NamedTuple):
    x: float
    y: float
    z: float


def to_ecef(lat: float, lon: float) -> EcefVector:
    if not (-90.0 <= lat <= 90.0 and -180.0 < lon <= 180.0):
        raise ValueError(f"coordinates out of range: lat={lat} lon={lon}")
    phi, lam = math.radians(lat), math.radians(lon)
    return EcefVector(
        EARTH_RADIUS_KM * math.cos(phi) * math.cos(lam),
        EARTH_RADIUS_KM * math.cos(phi) * math.sin(lam),
        EARTH_RADIUS_KM * math.sin(phi),
    )


def ecef_array(lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    """Vectorized ``to_ecef``; returns an (n, 3) array in km."""
    phi, lam = np.radians(lat), np.radians(lon)
    cphi = np.cos(phi)
    return np.stack(
        [EARTH_RADIUS_KM * cphi * np.cos(lam), EARTH_RADIUS_KM * cphi * np.sin(lam), EARTH_RADIUS_KM * np.sin(phi)],
        axis=1,
    )


@dataclass
class MatchProduct:
    pairs: list[tuple[int, int, float]]  # (coarse_index, fine_index, angle in radians)
    unmatched_fine: list[int]
    radius: float

    def to_vars(self) -> dict:
        return {
            "coarse_index": np.array([p[0] for p in self.pairs], dtype=np.int64),
            "fine_index": np.array([p[1] for p in self.pairs], dtype=np.int64),
            "distance": np.array([p[2] for p in self.pairs], dtype=np.float64),
            "unmatched_fine": np.array(self.unmatched_fine, dtype=np.int64),
            "radius": float(self.radius),
        }

    @classmethod
    def from_vars(cls, v: dict) -> "MatchProduct":
        pairs = [(int(c), int(f), float(d)) for c, f, d in zip(v["coarse_index"], v["fine_index"], v["distance"])]
        return cls(pairs, [int(i) for i in v["unmatched_fine"]], float(v["radius"]))

    def render(self, fine_id: str = "", coarse_id: str = "") -> bytes:
        """Canonical text; floats in shortest round-trip form so products compare bytewise."""
        lines = [
            "navhop-colocation-product 1",
            f"fine_granule {fine_id}",
            f"coarse_granule {coarse_id}",
            f"radius {self.radius!r}",
            f"pairs {len(self.pairs)}",
        ]
        lines.extend(f"{f} {c} {d!r}" for c, f, d in self.pairs)
        lines.append(f"unmatched {len(self.unmatched_fine)}")
        lines.extend(str(i) for i in self.unmatched_fine)
        return ("\n".join(lines) + "\n").encode("utf-8")


def angular_distances(fine: np.ndarray, coarse: np.ndarray) -> np.ndarray:
    """(n, m) great-circle angles via atan2(|u x v|, u . v)."""
    cross = np.cross(fine[:, None, :], coarse[None, :, :])
    return np.arctan2(np.linalg.norm(cross, axis=2), np.einsum("ik,jk->ij", fine, coarse))


def match(fine: np.ndarray, coarse: np.ndarray, radius: float, chunk: int = 4096) -> MatchProduct:
    if radius <= 0:
        raise ValueError("radius must be positive")
    fine = np.asarray(fine, dtype=np.float64).reshape(-1, 3)
    coarse = np.asarray(coarse, dtype=np.float64).reshape(-1, 3)
    pairs: list[tuple[int, int, float]] = []
    unmatched: list[int] = []
    for start in range(0, len(fine), chunk):
        ang = angular_distances(fine[start : start + chunk], coarse)
        best = np.argmin(ang, axis=1)  # first minimum, so ties go to the lowest coarse index
        for offset, j in enumerate(best):
            i = start + offset
            d = float(ang[offset, j])
            if d <= radius:
                pairs.append((int(j), i, d))
            else:
                unmatched.append(i)
    return MatchProduct(pairs, unmatched, float(radius))


# ------------------------------------------------------------------ stages


def _get(env: NodeEnv, key: str) -> bytes:
    return env.retry.run(lambda: env.store.get(key), (StoreUnavailable,))


def _mid(state: TaskState, env: NodeEnv) -> None:
    env.emit("stage_mid", state, stage=state.next_stage - 1)


def _reader(which: str, name: str):
    def read(state: TaskState, env: NodeEnv) -> None:
        raw = _get(env, input_key(state.job_id, name))
        _mid(state, env)
        g = InstrumentGranule.from_text(raw)
        lat, lon, value = g.columns()
        state.vars[f"{which}_id"] = g.granule_id
        state.vars[f"{which}_lat"] = lat
        state.vars[f"{which}_lon"] = lon
        state.vars[f"{which}_value"] = value

    return read


def _ecef_stage(which: str):
    def compute(state: TaskState, env: NodeEnv) -> None:
        lat, lon = state.vars[f"{which}_lat"], state.vars[f"{which}_lon"]
        half = len(lat) // 2
        head = ecef_array(lat[:half], lon[:half])
        _mid(state, env)
        tail = ecef_array(lat[half:], lon[half:])
        state.vars[f"{which}_ecef"] = np.concatenate([head, tail])

    return compute


def _match_stage(radius: float):
    def run(state: TaskState, env: NodeEnv) -> None:
        _mid(state, env)
        product = match(state.vars["fine_ecef"], state.vars["coarse_ecef"], radius)
        state.vars["match"] = product.to_vars()

    return run


def _write_product(state: TaskState, env: NodeEnv) -> None:
    product = MatchProduct.from_vars(state.vars["match"])
    state.vars["product"] = product.render(state.vars["fine_id"], state.vars["coarse_id"])
    state.vars["product_key"] = product_key(state.job_id, PRODUCT_NAME)


def _publish(status: str):
    def run(state: TaskState, env: NodeEnv) -> None:
        publish(state, None, status, env)

    return run


def build_publish_variant(radius: float = DEFAULT_RADIUS) -> StageMachine:
    """Read, checkpoint, compute ECEF vectors, checkpoint, match, write, publish."""
    return StageMachine(
        PUBLISH_APP,
        [
            ("read fine granule", _reader("fine", FINE_INPUT)),
            ("read coarse granule", _reader("coarse", COARSE_INPUT)),
            ("publish ckpt", _publish("ckpt")),
            ("coarse LOS vectors in ECEF", _ecef_stage("coarse")),
            ("fine POS vectors in ECEF", _ecef_stage("fine")),
            ("publish ckpt", _publish("ckpt")),
            ("match fine to coarse", _match_stage(radius)),
            ("write product", _write_product),
            ("publish finished", _publish("finished")),
        ],
    )


def build_hop_variant(other: str, radius: float = DEFAULT_RADIUS) -> StageMachine:
    """Three-hop program: to the data host ``other``, back home, to ``other`` again."""

    def hop_out(state: TaskState, env: NodeEnv) -> None:
        state.vars.setdefault("home", env.node.node_id)
        hop(state, other, env)

    def hop_home(state: TaskState, env: NodeEnv) -> None:
        hop(state, state.vars["home"], env)

    def write_and_finish(state: TaskState, env: NodeEnv) -> None:
        _write_product(state, env)
        publish(state, None, "finished", env)

    return StageMachine(
        HOP_APP,
        [
            ("hop to data host", hop_out),
            ("read fine granule", _reader("fine", FINE_INPUT)),
            ("read coarse granule", _reader("coarse", COARSE_INPUT)),
            ("hop home", hop_home),
            ("coarse LOS vectors in ECEF", _ecef_stage("coarse")),
            ("fine POS vectors in ECEF", _ecef_stage("fine")),
            ("match fine to coarse", _match_stage(radius)),
            ("hop to data host", hop_out),
            ("write product", write_and_finish),
        ],
    )


def build_sequential_variant(radius: float = DEFAULT_RADIUS) -> StageMachine:
    """The unhopped, uncheckpointed program; reference for product equality."""

    def write_and_finish(state: TaskState, env: NodeEnv) -> None:
        _write_product(state, env)
        publish(state, None, "finished", env)

    return StageMachine(
        SEQ_APP,
        [
            ("read fine granule", _reader("fine", FINE_INPUT)),
            ("read coarse granule", _reader("coarse", COARSE_INPUT)),
            ("coarse LOS vectors in ECEF", _ecef_stage("coarse")),
            ("fine POS vectors in ECEF", _ecef_stage("fine")),
            ("match fine to coarse", _match_stage(radius)),
            ("write product", write_and_finish),
        ],
    )


def default_registry(hop_other: str | None = None, radius: float = DEFAULT_RADIUS) -> AppRegistry:
    reg = AppRegistry([build_publish_variant(radius), build_sequential_variant(radius)])
    if hop_other:
        reg.register(build_hop_variant(hop_other, radius))
    return reg


def stage_input(store: BlobStore, job_id: str, seed: int, n_fine: int, n_coarse: int) -> list[str]:
    """Write the synthetic input granules for a job; returns their keys."""
    fine, coarse = gen_granules(seed, n_fine, n_coarse)
    keys = [input_key(job_id, FINE_INPUT), input_key(job_id, COARSE_INPUT)]
    store.put_atomic(keys[0], fine.to_text())
    store.put_atomic(keys[1], coarse.to_text())
    return keys


def submit_job(store: BlobStore, scheduler: SchedulerClient, job_id: str, app_name: str = PUBLISH_APP,
               seed: int = 7, n_fine: int = 100, n_coarse: int = 20) -> dict:
    keys = stage_input(store, job_id, seed, n_fine, n_coarse)
    return scheduler.add_job(job_id, app_name, keys)
