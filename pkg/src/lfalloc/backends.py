"""Encoder backends.

A backend turns a per-frame QP schedule into per-frame bits and channel MSEs.
``MockBackend`` is a deterministic synthetic encoder whose distortions follow
the hyperbolic model exactly (plus optional log-normal noise).
``ExternalBackend`` drives a real encoder through a command template and a
stats CSV.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import shlex
import subprocess
import tempfile
import threading
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import EncoderTimeoutError, InputError, MalformedStatsError, ProcessFailedError
from .metrics import combine_channels

FRAME_LEVEL, GOP_LEVEL = "frame_level", "gop_level"
TIMEOUT_ENV = "LFALLOC_ENCODER_TIMEOUT"


@dataclass(frozen=True)
class EncodeRequest:
    sequence_id: str
    qps: tuple[int, ...]
    profile: str = "all_intra"

    def __post_init__(self):
        object.__setattr__(self, "qps", tuple(int(q) for q in self.qps))
        if any(not 0 <= q <= 51 for q in self.qps):
            raise InputError("request QPs must lie in [0, 51]")


@dataclass(frozen=True, eq=False)
class EncodeResult:
    bits: np.ndarray
    mse_y: np.ndarray
    mse_u: np.ndarray
    mse_v: np.ndarray
    wall_time: float = 0.0

    def __post_init__(self):
        arrays = [np.array(getattr(self, k), dtype=float) for k in ("bits", "mse_y", "mse_u", "mse_v")]
        if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
            raise InputError("per-frame result arrays must have equal length")
        if np.any(arrays[0] <= 0):
            raise InputError("every frame must cost a positive number of bits")
        for k, a in zip(("bits", "mse_y", "mse_u", "mse_v"), arrays):
            a.setflags(write=False)
            object.__setattr__(self, k, a)

    @property
    def frame_count(self) -> int:
        return self.bits.size

    @property
    def total_bits(self) -> float:
        return float(self.bits.sum())

    def mse(self, luma_only: bool = False) -> np.ndarray:
        if luma_only:
            return self.mse_y.copy()
        return np.array([combine_channels(y, u, v) for y, u, v in zip(self.mse_y, self.mse_u, self.mse_v)])


# -- mock ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MockScene:
    """Ground truth for the synthetic encoder.

    Frame ``i`` coded at QP ``q`` costs ``r_ref[i] * 2 ** ((q_ref - q) / 6)``
    bits. Its combined MSE is ``coefficient[i] * x ** exponent[i]`` where ``x`` is its own
    bits (frame_level) or its GOP's total bits (gop_level).
    """

    coefficient: np.ndarray
    exponent: np.ndarray
    r_ref: np.ndarray
    q_ref: int = 32
    sigma: float = 0.0
    coupling: str = FRAME_LEVEL
    gop_size: int = 1
    chroma_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        a, b, r = (np.array(getattr(self, k), dtype=float) for k in ("coefficient", "exponent", "r_ref"))
        if not (a.shape == b.shape == r.shape) or a.ndim != 1 or a.size == 0:
            raise InputError("coefficient, exponent and r_ref must be equal-length 1-D arrays")
        if np.any(a <= 0) or np.any(b >= 0) or np.any(r <= 0) or self.sigma < 0:
            raise InputError("mock scene needs coefficient > 0, exponent < 0, r_ref > 0 and sigma >= 0")
        if self.coupling not in (FRAME_LEVEL, GOP_LEVEL):
            raise InputError(f"unknown coupling {self.coupling!r}")
        if self.gop_size < 1 or (self.coupling == FRAME_LEVEL and self.gop_size != 1):
            raise InputError("frame-level coupling uses gop_size 1")
        if not 0 <= self.chroma_ratio <= 4:
            raise InputError("chroma_ratio must lie in [0, 4]")
        for k, v in (("coefficient", a), ("exponent", b), ("r_ref", r)):
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    @property
    def frame_count(self) -> int:
        return self.coefficient.size

    def to_dict(self) -> dict:
        return {"coefficient": self.coefficient.tolist(), "exponent": self.exponent.tolist(), "r_ref": self.r_ref.tolist(),
                "q_ref": self.q_ref, "sigma": self.sigma, "coupling": self.coupling,
                "gop_size": self.gop_size, "chroma_ratio": self.chroma_ratio, "seed": self.seed}

    @classmethod
    def from_dict(cls, d) -> "MockScene":
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "MockScene":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def bits_at(self, qps) -> np.ndarray:
        qps = np.asarray(qps, dtype=float)
        return self.r_ref * np.power(2.0, (self.q_ref - qps) / 6.0)

    def regressor(self, bits: np.ndarray) -> np.ndarray:
        if self.coupling == FRAME_LEVEL:
            return bits
        g = np.arange(bits.size) // self.gop_size
        return np.bincount(g, weights=bits)[g]


def mock_encode(scene: MockScene, request: EncodeRequest) -> EncodeResult:
    if len(request.qps) != scene.frame_count:
        raise InputError(f"schedule has {len(request.qps)} QPs for {scene.frame_count} frames")
    start = time.perf_counter()
    bits = scene.bits_at(request.qps)
    d = scene.coefficient * np.power(scene.regressor(bits), scene.exponent)
    if scene.sigma > 0:
        key = zlib.crc32(np.asarray(request.qps, dtype=np.int16).tobytes())
        rng = np.random.default_rng(np.random.SeedSequence([scene.seed, key]))
        d = d * np.exp(scene.sigma * rng.standard_normal(d.size))
    rho = scene.chroma_ratio
    return EncodeResult(bits, d * (8.0 - 2.0 * rho) / 6.0, d * rho, d * rho, time.perf_counter() - start)


@dataclass(frozen=True)
class MockSceneSpec:
    """Parameter ranges for a random scene.

    ``coefficient`` is derived so that the frame's MSE at ``q_ref`` falls in
    ``mse_ref_range``, unless ``coefficient_range`` is given explicitly.
    """

    frame_count: int
    exponent_range: tuple[float, float] = (-1.4, -0.6)
    r_ref_range: tuple[float, float] = (2e4, 2e5)
    mse_ref_range: tuple[float, float] = (5.0, 40.0)
    coefficient_range: tuple[float, float] | None = None
    q_ref: int = 32
    sigma: float = 0.0
    coupling: str = FRAME_LEVEL
    gop_size: int = 1
    chroma_ratio: float = 0.5
    seed: int = 0


def _log_uniform(rng, lo, hi, n):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), n))


def generate_mock_scene(spec: MockSceneSpec) -> MockScene:
    b_lo, b_hi = spec.exponent_range
    if not b_lo <= b_hi < 0:
        raise InputError("exponent range must be an ordered interval of negative values")
    for name in ("r_ref_range", "mse_ref_range", "coefficient_range"):
        rng_ = getattr(spec, name)
        if rng_ is not None and not 0 < rng_[0] <= rng_[1]:
            raise InputError(f"{name} must be an ordered interval of positive values")
    if spec.frame_count < 1:
        raise InputError("frame_count must be positive")
    rng = np.random.default_rng(spec.seed)
    n = spec.frame_count
    exponent = rng.uniform(b_lo, b_hi, n)
    r_ref = _log_uniform(rng, *spec.r_ref_range, n)
    if spec.coefficient_range is not None:
        coefficient = _log_uniform(rng, *spec.coefficient_range, n)
    else:
        d_ref = _log_uniform(rng, *spec.mse_ref_range, n)
        probe = MockScene(np.ones(n), exponent, r_ref, spec.q_ref, 0.0, spec.coupling, spec.gop_size)
        coefficient = d_ref / np.power(probe.regressor(r_ref), exponent)
    return MockScene(coefficient, exponent, r_ref, spec.q_ref, spec.sigma, spec.coupling, spec.gop_size,
                     spec.chroma_ratio, spec.seed)


class MockBackend:
    identity = "mock"

    def __init__(self, scene: MockScene):
        self.scene = scene

    @property
    def frame_count(self) -> int:
        return self.scene.frame_count

    def sequence_hash(self) -> str:
        return self.scene.fingerprint()

    def encode(self, request: EncodeRequest) -> EncodeResult:
        return mock_encode(self.scene, request)


# -- external ------------------------------------------------------------------

STATS_FIELDS = ("frame_index", "qp", "bits", "mse_y", "mse_u", "mse_v")


@dataclass(frozen=True)
class AdapterConfig:
    """How to launch an external encoder.

    ``command`` is a template (string or argv list) that may reference
    ``{input}``, ``{qpfile}``, ``{output}`` and ``{statsfile}``.
    """

    command: str | tuple[str, ...]
    input: str
    frame_count: int
    timeout: float | None = None
    max_parallel: int = 1
    workdir: str | None = None
    env: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.command, list):
            object.__setattr__(self, "command", tuple(self.command))
        if self.frame_count < 1 or self.max_parallel < 1:
            raise InputError("frame_count and max_parallel must be positive")

    @classmethod
    def load(cls, path) -> "AdapterConfig":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        try:
            return cls(**d)
        except TypeError as exc:
            raise InputError(f"bad adapter config {path}: {exc}") from None

    def effective_timeout(self) -> float | None:
        if self.timeout is not None:
            return self.timeout
        env = os.environ.get(TIMEOUT_ENV)
        return float(env) if env else None

    def argv(self, **paths) -> list[str]:
        if isinstance(self.command, str):
            return [part.format(**paths) for part in shlex.split(self.command)]
        return [part.format(**paths) for part in self.command]


def parse_stats(text: str, frame_count: int) -> EncodeResult:
    """Parse a ``frame_index,qp,bits,mse_y,mse_u,mse_v`` CSV covering frames 1..n."""
    rows = {}
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or all(c.strip() == "" for c in row):
            continue
        if len(row) != len(STATS_FIELDS):
            raise MalformedStatsError(f"stats line {lineno}: expected {len(STATS_FIELDS)} fields, got {len(row)}")
        try:
            frame = int(row[0])
            vals = [float(c) for c in row[2:]]
            int(row[1])
        except ValueError:
            if lineno == 1:
                continue
            raise MalformedStatsError(f"stats line {lineno}: non-numeric field in {row!r}") from None
        if frame in rows:
            raise MalformedStatsError(f"stats line {lineno}: frame {frame} reported twice")
        if not 1 <= frame <= frame_count:
            raise MalformedStatsError(f"stats line {lineno}: frame {frame} outside 1..{frame_count}")
        if vals[0] <= 0 or min(vals[1:]) < 0:
            raise MalformedStatsError(f"stats line {lineno}: bits must be positive and MSEs non-negative")
        rows[frame] = vals
    missing = [f for f in range(1, frame_count + 1) if f not in rows]
    if missing:
        raise MalformedStatsError(f"incomplete stats: {len(missing)} frame(s) missing, first {missing[0]}")
    arr = np.array([rows[f] for f in range(1, frame_count + 1)])
    return EncodeResult(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


def write_qp_file(path, qps: Sequence[int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for i, q in enumerate(qps):
            writer.writerow([i + 1, q])


def external_encode(config: AdapterConfig, request: EncodeRequest) -> EncodeResult:
    if len(request.qps) != config.frame_count:
        raise InputError(f"schedule has {len(request.qps)} QPs for {config.frame_count} frames")
    start = time.perf_counter()
    with tempfile.TemporaryDirectory(prefix="lfalloc-", dir=config.workdir) as tmp:
        paths = {
            "input": os.path.abspath(config.input),
            "qpfile": os.path.join(tmp, "qp.csv"),
            "output": os.path.join(tmp, "out.bin"),
            "statsfile": os.path.join(tmp, "stats.csv"),
        }
        write_qp_file(paths["qpfile"], request.qps)
        env = dict(os.environ, **{k: str(v) for k, v in config.env.items()})
        try:
            proc = subprocess.run(config.argv(**paths), capture_output=True, text=True,
                                  timeout=config.effective_timeout(), env=env, cwd=tmp)
        except subprocess.TimeoutExpired:
            raise EncoderTimeoutError(
                f"encoder exceeded {config.effective_timeout()} s for {request.sequence_id}") from None
        except OSError as exc:
            raise ProcessFailedError(-1, "", str(exc)) from None
        if proc.returncode != 0:
            raise ProcessFailedError(proc.returncode, proc.stdout, proc.stderr)
        try:
            with open(paths["statsfile"], encoding="utf-8") as fh:
                text = fh.read()
        except FileNotFoundError:
            raise MalformedStatsError("encoder did not write a stats file") from None
    res = parse_stats(text, config.frame_count)
    return EncodeResult(res.bits, res.mse_y, res.mse_u, res.mse_v, time.perf_counter() - start)


class ExternalBackend:
    identity = "external"

    def __init__(self, config: AdapterConfig):
        self.config = config
        self._slots = threading.BoundedSemaphore(config.max_parallel)

    @property
    def frame_count(self) -> int:
        return self.config.frame_count

    def sequence_hash(self) -> str:
        h = hashlib.sha256()
        with open(self.config.input, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        h.update(json.dumps(asdict(self.config), sort_keys=True, default=str).encode())
        return h.hexdigest()

    def encode(self, request: EncodeRequest) -> EncodeResult:
        with self._slots:
            return external_encode(self.config, request)
