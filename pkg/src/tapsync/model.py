"""Z2-synchronization instances: Y = (lambda/n) x x^T + W.

Randomness comes from counter-based Philox streams. A stream is named by a
64-bit seed plus a tuple of keys (ints or strings), so the signal and the
noise of a replicate never share draws and parallel replicates are
independent of scheduling order.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError

RNG_ALGORITHM = "numpy.Philox4x64-10/SeedSequence"

ENSEMBLE_TAGS = ("GOE", "Rademacher", "Laplace", "StudentT", "RotInvUniform")


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def substream(seed, *keys):
    """Independent generator for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(master_seed, *keys):
    """64-bit child seed of ``master_seed`` for the given keys."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class NoiseEnsemble:
    tag: str = "GOE"
    nu: float | None = None

    def __post_init__(self):
        if self.tag not in ENSEMBLE_TAGS:
            raise DomainError(f"unknown noise ensemble {self.tag!r}")
        if self.tag == "StudentT":
            if self.nu is None or not self.nu > 2:
                raise DomainError(f"StudentT needs nu > 2, got {self.nu}")
        elif self.nu is not None:
            raise DomainError(f"{self.tag} takes no parameter")

    def __str__(self):
        if self.tag == "StudentT":
            return f"StudentT({self.nu:g})"
        return self.tag

    @classmethod
    def parse(cls, text):
        """Parse ``GOE``, ``Rademacher``, ``Laplace``, ``RotInvUniform`` or ``StudentT(nu)``."""
        if isinstance(text, NoiseEnsemble):
            return text
        s = str(text).strip()
        m = re.fullmatch(r"(?i)(?:studentt|t)\s*[\(:]?\s*([0-9.eE+-]+)\s*\)?", s)
        if m:
            return cls("StudentT", float(m.group(1)))
        for tag in ENSEMBLE_TAGS:
            if s.lower() == tag.lower():
                return cls(tag)
        raise DomainError(f"cannot parse noise ensemble {text!r}")


@dataclass(frozen=True, eq=False)
class ModelInstance:
    """One sampled problem. Arrays are made read-only on construction."""

    n: int
    lam: float
    x: np.ndarray
    W: np.ndarray
    Y: np.ndarray
    ensemble: NoiseEnsemble = field(default_factory=NoiseEnsemble)
    seed: int | None = None
    rng_algorithm: str = RNG_ALGORITHM

    def __post_init__(self):
        for a in (self.x, self.W, self.Y):
            a.setflags(write=False)

    def metadata(self):
        return {
            "n": self.n,
            "lambda": self.lam,
            "ensemble": str(self.ensemble),
            "seed": self.seed,
            "rng_algorithm": self.rng_algorithm,
        }


def _check_dim(n):
    if int(n) != n or n < 1:
        raise DomainError(f"invalid dimension n={n}")
    return int(n)


def sample_signal(n, rng):
    """i.i.d. uniform signs."""
    n = _check_dim(n)
    return np.where(rng.integers(0, 2, size=n) == 1, 1.0, -1.0)


def _haar_orthogonal(n, rng):
    Z = rng.standard_normal((n, n))
    Q, R = np.linalg.qr(Z)
    # sign fix so that R has a positive diagonal; gives exact Haar measure
    return Q * np.sign(np.diag(R))


def sample_noise(n, ensemble, rng):
    """Symmetric n x n noise matrix, off-diagonal variance 1/n."""
    n = _check_dim(n)
    ens = NoiseEnsemble.parse(ensemble)
    if ens.tag == "GOE":
        Z = rng.standard_normal((n, n))
        return (Z + Z.T) / np.sqrt(2 * n)
    if ens.tag == "Rademacher":
        S = np.where(rng.integers(0, 2, size=(n, n)) == 1, 1.0, -1.0) / np.sqrt(n)
        U = np.triu(S)
        return U + np.triu(U, 1).T
    if ens.tag == "Laplace":
        # density (1/sqrt 2) exp(-sqrt2 |x|): scale 1/sqrt 2, unit variance
        G = rng.laplace(0.0, 1.0 / np.sqrt(2.0), size=(n, n))
        return (G + G.T) / np.sqrt(2 * n)
    if ens.tag == "StudentT":
        nu = ens.nu
        G = rng.standard_t(nu, size=(n, n)) / np.sqrt(nu / (nu - 2.0))
        return (G + G.T) / np.sqrt(2 * n)
    # RotInvUniform
    U = _haar_orthogonal(n, rng)
    d = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=n)
    W = (U * d) @ U.T
    return (W + W.T) / 2


def assemble_observation(x, W, lam, ensemble="GOE", seed=None, rng_algorithm=RNG_ALGORITHM):
    """Y = (lam/n) x x^T + W as a ModelInstance."""
    x = np.asarray(x, dtype=float)
    W = np.asarray(W, dtype=float)
    n = x.shape[0]
    if x.ndim != 1 or W.shape != (n, n):
        raise DomainError(f"dimension mismatch: x {x.shape}, W {W.shape}")
    if not np.array_equal(W, W.T):
        raise DomainError("noise matrix is not exactly symmetric")
    Y = (lam / n) * np.outer(x, x) + W
    return ModelInstance(
        n=n, lam=float(lam), x=x.copy(), W=W.copy(), Y=Y,
        ensemble=NoiseEnsemble.parse(ensemble), seed=seed, rng_algorithm=rng_algorithm,
    )


def sample_instance(n, lam, ensemble="GOE", seed=0):
    """Sample signal and noise from the ``signal``/``noise`` streams of ``seed``."""
    ens = NoiseEnsemble.parse(ensemble)
    x = sample_signal(n, substream(seed, "signal"))
    W = sample_noise(n, ens, substream(seed, "noise"))
    return assemble_observation(x, W, lam, ens, seed=int(seed))


# -- serialization: upper triangle of W (row-major) plus a JSON sidecar -----

def _sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_instance(inst, path):
    """Write W's upper triangle to ``path`` (``.csv`` text or raw float64 binary)
    and metadata plus the signal to ``path + '.json'``."""
    path = Path(path)
    iu = np.triu_indices(inst.n)
    upper = inst.W[iu]
    if path.suffix.lower() == ".csv":
        np.savetxt(path, upper, fmt="%.17g", header="w_upper_row_major", comments="")
    else:
        upper.astype("<f8").tofile(path)
    meta = inst.metadata()
    meta["format"] = "csv" if path.suffix.lower() == ".csv" else "float64-le"
    meta["x"] = [int(v) for v in inst.x]
    _sidecar(path).write_text(json.dumps(meta, indent=2))
    return path


def load_instance(path):
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    n = int(meta["n"])
    if meta.get("format") == "csv":
        upper = np.loadtxt(path, skiprows=1, ndmin=1)
    else:
        upper = np.fromfile(path, dtype="<f8")
    if upper.size != n * (n + 1) // 2:
        raise DomainError(f"{path}: expected {n * (n + 1) // 2} entries, got {upper.size}")
    W = np.zeros((n, n))
    W[np.triu_indices(n)] = upper
    W = W + np.triu(W, 1).T
    return assemble_observation(
        np.asarray(meta["x"], dtype=float), W, meta["lambda"], meta["ensemble"],
        seed=meta.get("seed"), rng_algorithm=meta.get("rng_algorithm", RNG_ALGORITHM),
    )
