"""Planning vocabulary: furthest trajectory sampling, Fourier action codes, persistence."""
from __future__ import annotations

import io
import math
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    BandRangeError,
    DegenerateInputError,
    FormatError,
    HorizonMismatchError,
    InsufficientDemosError,
    ValidationError,
)
from .geometry import check_trajectory, traj_distances

DEFAULT_T = 6
DEFAULT_DT_WP = 0.5
DEFAULT_BANDS = 8
DEFAULT_N = 4096
STOP_TOLERANCE = 0.1

MAGIC = b"VPV1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIdI")


def fourier_encode_scalar(pos: float, j: int, L: int) -> tuple[float, float]:
    """``(cos(pos / 10000**(2*pi*j/L)), sin(...))`` for band ``j`` of ``L``."""
    if not 0 <= j < L:
        raise BandRangeError(f"band index {j} outside [0, {L})")
    arg = pos / 10000.0 ** (2.0 * math.pi * j / L)
    return math.cos(arg), math.sin(arg)


def band_divisors(L: int) -> np.ndarray:
    return 10000.0 ** (2.0 * np.pi * np.arange(L) / L)


def encode_coordinate(pos, L: int) -> np.ndarray:
    """Concatenated (cos, sin) pairs over all ``L`` bands, length ``2L``.

    ``pos`` may be an array, in which case the band axis is appended last.
    """
    arg = np.asarray(pos, dtype=float)[..., None] / band_divisors(L)
    out = np.empty(arg.shape[:-1] + (2 * L,))
    out[..., 0::2] = np.cos(arg)
    out[..., 1::2] = np.sin(arg)
    return out


def encode_action(a, L: int = DEFAULT_BANDS) -> np.ndarray:
    """Fourier code of a trajectory (or a batch ``(..., T, 2)``), length ``4*T*L``.

    Coordinates are taken in the order x_1, y_1, ..., x_T, y_T, each expanded
    to its ``2L`` band slice.
    """
    a = np.asarray(a, dtype=float)
    flat = a.reshape(a.shape[:-2] + (-1,))
    enc = encode_coordinate(flat, L)
    return enc.reshape(flat.shape[:-1] + (-1,))


@dataclass(eq=False)
class PlanningVocabulary:
    """N representative ego-frame trajectories plus their float32 encodings."""

    actions: np.ndarray
    dt_wp: float = DEFAULT_DT_WP
    n_bands: int = DEFAULT_BANDS
    encodings: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        actions = np.ascontiguousarray(self.actions, dtype=np.float64)
        if actions.ndim != 3 or actions.shape[2] != 2:
            raise ValidationError(f"actions must be (N, T, 2), got {actions.shape}")
        if len(actions) < 2:
            raise ValidationError("a vocabulary needs at least two actions")
        for a in actions:
            check_trajectory(a)
        self.actions = actions
        if self.encodings is None:
            self.encodings = encode_action(actions, self.n_bands).astype(np.float32)
        else:
            self.encodings = np.ascontiguousarray(self.encodings, dtype=np.float32)
            if self.encodings.shape != (len(actions), 4 * self.T * self.n_bands):
                raise ValidationError(f"encodings shape {self.encodings.shape} inconsistent with actions")

    @property
    def N(self) -> int:
        return self.actions.shape[0]

    @property
    def T(self) -> int:
        return self.actions.shape[1]

    @property
    def stop_index(self) -> int:
        """Index of the action closest (ADE) to standing still."""
        return int(np.argmin(traj_distances(self.actions, np.zeros((self.T, 2)))))

    @property
    def has_stop_action(self) -> bool:
        return float(traj_distances(self.actions, np.zeros((self.T, 2)))[self.stop_index]) < STOP_TOLERANCE

    def __eq__(self, other):
        return (
            isinstance(other, PlanningVocabulary)
            and self.dt_wp == other.dt_wp
            and self.n_bands == other.n_bands
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.encodings, other.encodings)
        )

    __hash__ = None


def _as_demo_array(demos) -> np.ndarray:
    if not isinstance(demos, np.ndarray):
        lengths = {np.shape(d)[0] if np.ndim(d) else None for d in demos}
        if len(lengths) > 1:
            raise HorizonMismatchError(f"demonstrations must share a horizon; got lengths {sorted(lengths, key=str)}")
    demos = np.asarray(demos, dtype=float)
    if demos.ndim != 3 or demos.shape[2] != 2:
        raise HorizonMismatchError(f"demonstrations must share a horizon; got array of shape {demos.shape}")
    return demos


def furthest_trajectory_sampling(demos, n: int) -> np.ndarray:
    """Indices chosen by greedy max-min ADE selection.

    The seed is the most stationary demonstration; every later pick maximizes
    its distance to the nearest already-chosen trajectory. Ties go to the
    lowest input index (``np.argmax`` returns the first maximum).
    """
    demos = _as_demo_array(demos)
    if len(demos) < n:
        raise InsufficientDemosError(f"need {n} demonstrations, only {len(demos)} available")
    if n < 1:
        raise ValidationError("n must be positive")
    first = int(np.argmin(traj_distances(demos, np.zeros(demos.shape[1:]))))
    chosen = [first]
    min_dist = traj_distances(demos, demos[first])
    for _ in range(n - 1):
        nxt = int(np.argmax(min_dist))
        if min_dist[nxt] <= 0.0:
            raise DegenerateInputError(
                f"only {len(chosen)} distinct trajectories available, {n} requested"
            )
        chosen.append(nxt)
        np.minimum(min_dist, traj_distances(demos, demos[nxt]), out=min_dist)
    return np.array(chosen, dtype=np.int64)


def build_vocabulary(
    demos, n: int = DEFAULT_N, dt_wp: float = DEFAULT_DT_WP, n_bands: int = DEFAULT_BANDS
) -> PlanningVocabulary:
    demos = _as_demo_array(demos)
    idx = furthest_trajectory_sampling(demos, n)
    vocab = PlanningVocabulary(demos[idx].copy(), dt_wp=dt_wp, n_bands=n_bands)
    if not vocab.has_stop_action:
        warnings.warn("vocabulary has no near-stationary action; the stop fallback will be approximate")
    return vocab


def coverage(vocab_actions, demos) -> float:
    """Largest distance from any demonstration to its nearest vocabulary action."""
    demos = _as_demo_array(demos)
    best = np.full(len(demos), np.inf)
    for a in np.asarray(vocab_actions):
        np.minimum(best, traj_distances(demos, a), out=best)
    return float(best.max())


def nearest_vocab_action(vocab: PlanningVocabulary, a) -> int:
    a = check_trajectory(a)
    if a.shape[0] != vocab.T:
        raise HorizonMismatchError(f"vocabulary T={vocab.T}, trajectory T={a.shape[0]}")
    return int(np.argmin(traj_distances(vocab.actions, a)))


def vocabulary_to_bytes(vocab: PlanningVocabulary) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, vocab.N, vocab.T, float(vocab.dt_wp), vocab.n_bands))
    buf.write(vocab.actions.astype("<f8").tobytes())
    buf.write(vocab.encodings.astype("<f4").tobytes())
    return buf.getvalue()


def vocabulary_from_bytes(data: bytes, expected_T: int | None = None) -> PlanningVocabulary:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad vocabulary magic", offset=0)
    if len(data) < _HEADER.size:
        raise FormatError("truncated vocabulary header", offset=len(data))
    _, version, n, t, dt_wp, n_bands = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise FormatError(f"unsupported vocabulary version {version}", offset=4)
    if expected_T is not None and t != expected_T:
        raise HorizonMismatchError(f"vocabulary file has T={t}, pipeline expects T={expected_T}")
    off = _HEADER.size
    n_act = n * t * 2 * 8
    n_enc = n * 4 * t * n_bands * 4
    if len(data) < off + n_act:
        raise FormatError("truncated waypoint block", offset=len(data))
    actions = np.frombuffer(data, dtype="<f8", count=n * t * 2, offset=off).reshape(n, t, 2)
    off += n_act
    if len(data) < off + n_enc:
        raise FormatError("truncated encoding block", offset=len(data))
    enc = np.frombuffer(data, dtype="<f4", count=n * 4 * t * n_bands, offset=off).reshape(n, -1)
    off += n_enc
    if len(data) != off:
        raise FormatError("trailing bytes after encoding block", offset=off)
    return PlanningVocabulary(actions.astype(np.float64), dt_wp=dt_wp, n_bands=n_bands, encodings=enc.astype(np.float32))


def atomic_write_bytes(path, data: bytes) -> None:
    """Write through a temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_vocabulary(vocab: PlanningVocabulary, path) -> None:
    atomic_write_bytes(path, vocabulary_to_bytes(vocab))


def load_vocabulary(path, expected_T: int | None = None) -> PlanningVocabulary:
    with open(path, "rb") as fh:
        return vocabulary_from_bytes(fh.read(), expected_T=expected_T)


class FourierActionEncoder(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping ``(n, T, 2)`` trajectories to ``(n, 4TL)`` codes."""

    def __init__(self, n_bands=DEFAULT_BANDS):
        self.n_bands = n_bands

    def fit(self, X, y=None):
        X = _as_demo_array(X)
        self.horizon_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "horizon_")
        X = _as_demo_array(X)
        if X.shape[1] != self.horizon_:
            raise HorizonMismatchError(f"fitted on T={self.horizon_}, got T={X.shape[1]}")
        return encode_action(X, self.n_bands)


class TrajectoryVocabulary(BaseEstimator):
    """Estimator wrapper: ``fit`` runs furthest sampling, ``predict`` snaps to the nearest action."""

    def __init__(self, n_actions=DEFAULT_N, n_bands=DEFAULT_BANDS, dt_wp=DEFAULT_DT_WP):
        self.n_actions = n_actions
        self.n_bands = n_bands
        self.dt_wp = dt_wp

    def fit(self, X, y=None):
        self.vocabulary_ = build_vocabulary(X, self.n_actions, self.dt_wp, self.n_bands)
        return self

    def predict(self, X):
        check_is_fitted(self, "vocabulary_")
        X = _as_demo_array(X)
        return np.array([nearest_vocab_action(self.vocabulary_, a) for a in X], dtype=np.int64)
