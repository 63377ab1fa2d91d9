"""Bilinear fusion operators mapping (decision vector, perceptual vector) to logits.

All bilinear variants (bilinear, block, mutan, mlb, mfb) can be expanded to a
dense core ``T`` of shape ``(dim_m, dim_v, dim_out)`` plus an output bias so
that ``fusion(m, v) == fuse_bilinear(m, v, T) + bias``.  The expansion is what
the equivalence tests compare against.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .nn import MLP, Module, xavier_uniform, zeros
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "FUSION_KINDS",
    "FusionConfig",
    "fuse_bilinear",
    "fuse_block",
    "fuse_low_rank",
    "fuse_cat_mlp",
    "BilinearFusion",
    "BlockFusion",
    "MutanFusion",
    "MLBFusion",
    "MFBFusion",
    "CatMLPFusion",
    "make_fusion",
    "block_diagonal_core",
    "assert_block_diagonal",
]

FUSION_KINDS = ("bilinear", "block", "mutan", "mlb", "mfb", "cat_mlp")


class FusionConfigError(ValueError):
    pass


@dataclass
class FusionConfig:
    kind: str = "block"
    dim_m: int = 26
    dim_v: int = 24
    dim_out: int = 7
    proj_dim: int = 260
    block_count: int = 5
    rank: int = 5
    hidden_dim: int = 128
    output_bias: bool = True

    def validate(self) -> "FusionConfig":
        if self.kind not in FUSION_KINDS:
            raise FusionConfigError(f"unknown fusion kind {self.kind!r}; expected one of {FUSION_KINDS}")
        for field in ("dim_m", "dim_v", "dim_out", "proj_dim", "block_count", "hidden_dim"):
            if getattr(self, field) < 1:
                raise FusionConfigError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.kind == "block" and self.proj_dim % self.block_count:
            raise FusionConfigError(
                f"proj_dim {self.proj_dim} is not divisible by block_count {self.block_count}"
            )
        if self.kind in ("mutan", "mfb") and self.rank < 1:
            raise FusionConfigError(f"rank must be >= 1, got {self.rank}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise FusionConfigError(f"unknown fusion config fields {sorted(unknown)}")
        return cls(**d).validate()


def _batched(m: Tensor, v: Tensor, dim_m: int, dim_v: int) -> tuple[Tensor, Tensor, bool]:
    if m.ndim != v.ndim or m.ndim not in (1, 2):
        raise ShapeError(f"fusion inputs must both be rank 1 or 2, got {m.shape} and {v.shape}")
    if m.shape[-1] != dim_m or v.shape[-1] != dim_v:
        raise ShapeError(
            f"fusion expects m[..., {dim_m}] and v[..., {dim_v}], got {m.shape} and {v.shape}"
        )
    if m.ndim == 1:
        return m.reshape(1, dim_m), v.reshape(1, dim_v), True
    if m.shape[0] != v.shape[0]:
        raise ShapeError(f"fusion batch sizes differ: {m.shape} vs {v.shape}")
    return m, v, False


def _unbatch(out: Tensor, squeeze: bool) -> Tensor:
    return out.reshape(out.shape[1:]) if squeeze else out


def fuse_bilinear(m: Tensor, v: Tensor, core: Tensor, bias: Tensor | None = None) -> Tensor:
    """``logits[i] = m^T T_i v`` for a dense core of shape (dim_m, dim_v, dim_out)."""
    if core.ndim != 3:
        raise ShapeError(f"bilinear core must be rank 3, got {core.shape}")
    mb, vb, squeeze = _batched(m, v, core.shape[0], core.shape[1])
    out = ops.einsum("na,nb,abo->no", mb, vb, core)
    if bias is not None:
        if bias.shape != (core.shape[2],):
            raise ShapeError(f"bias shape {bias.shape} != ({core.shape[2]},)")
        out = ops.add(out, ops.broadcast_to(bias, out.shape, axis=0))
    return _unbatch(out, squeeze)


def block_diagonal_core(cores: np.ndarray) -> np.ndarray:
    """Expand B blocks of shape (p, p, p) into the full (Bp, Bp, Bp) core."""
    cores = np.asarray(cores)
    nb, p = cores.shape[0], cores.shape[1]
    full = np.zeros((nb * p,) * 3, dtype=cores.dtype)
    for b in range(nb):
        s = slice(b * p, (b + 1) * p)
        full[s, s, s] = cores[b]
    return full


def assert_block_diagonal(full: np.ndarray, block_count: int) -> None:
    """Raise if any entry outside the diagonal blocks is non-zero."""
    n = full.shape[0]
    if full.shape != (n, n, n) or n % block_count:
        raise ShapeError(f"core {full.shape} cannot hold {block_count} equal blocks")
    p = n // block_count
    owner = np.arange(n) // p
    same = (owner[:, None, None] == owner[None, :, None]) & (owner[None, :, None] == owner[None, None, :])
    off = np.abs(full[~same])
    if off.size and off.max() != 0:
        raise AssertionError("core has non-zero entries outside its diagonal blocks")


class _Fusion(Module):
    config: FusionConfig

    def _out(self, z: Tensor) -> Tensor:
        return ops.linear_map(z, self.W_c, self.b_c)

    def expand_core(self) -> tuple[np.ndarray, np.ndarray | None]:
        raise NotImplementedError

    def _bias_array(self) -> np.ndarray | None:
        return None if self.b_c is None else np.array(self.b_c.data)


def _projection(rng, out_dim: int, in_dim: int) -> Parameter:
    return Parameter(xavier_uniform(rng, (out_dim, in_dim), in_dim, out_dim))


class BilinearFusion(_Fusion):
    """Unstructured bilinear model with a full (dim_m, dim_v, dim_out) core."""

    def __init__(self, config: FusionConfig, rng: np.random.Generator):
        c = config
        self.config = c
        self.core = Parameter(
            xavier_uniform(rng, (c.dim_m, c.dim_v, c.dim_out), c.dim_m * c.dim_v, c.dim_out)
        )
        self.b_c = Parameter(zeros((c.dim_out,))) if c.output_bias else None

    def __call__(self, m: Tensor, v: Tensor) -> Tensor:
        return fuse_bilinear(m, v, self.core, self.b_c)

    def expand_core(self):
        return np.array(self.core.data), self._bias_array()


class BlockFusion(_Fusion):
    """Projections around a block-diagonal core, then an output map."""

    def __init__(self, config: FusionConfig, rng: np.random.Generator):
        c = config.validate()
        self.config = c
        p = c.proj_dim // c.block_count
        self.W_m = _projection(rng, c.proj_dim, c.dim_m)
        self.W_v = _projection(rng, c.proj_dim, c.dim_v)
        self.cores = Parameter(
            np.stack([xavier_uniform(rng, (p, p, p), p * p, p) for _ in range(c.block_count)])
        )
        self.W_c = _projection(rng, c.dim_out, c.proj_dim)
        self.b_c = Parameter(zeros((c.dim_out,))) if c.output_bias else None

    def __call__(self, m: Tensor, v: Tensor) -> Tensor:
        return fuse_block(m, v, self)

    def expand_core(self):
        full = block_diagonal_core(self.cores.data)
        core = np.einsum(
            "ka,lb,klc,oc->abo", self.W_m.data, self.W_v.data, full, self.W_c.data, optimize=True
        )
        return core, self._bias_array()


def fuse_block(m: Tensor, v: Tensor, params: BlockFusion) -> Tensor:
    c = params.config
    mb, vb, squeeze = _batched(m, v, c.dim_m, c.dim_v)
    n = mb.shape[0]
    nb = params.cores.shape[0]
    if c.proj_dim % nb:
        raise ShapeError(f"proj_dim {c.proj_dim} not divisible by {nb} blocks")
    p = c.proj_dim // nb
    mt = ops.linear_map(mb, params.W_m).reshape(n, nb, p)
    vt = ops.linear_map(vb, params.W_v).reshape(n, nb, p)
    # Per block: c~_b = D_b x1 m~_b x2 v~_b, computed as (m~_b outer v~_b) @ D_b.
    outer = ops.einsum("nbi,nbj->bnij", mt, vt).reshape(nb, n, p * p)
    ct = ops.bmm(outer, params.cores.reshape(nb, p * p, p))
    ct = ops.transpose(ct, (1, 0, 2)).reshape(n, c.proj_dim)
    return _unbatch(params._out(ct), squeeze)


class MutanFusion(_Fusion):
    """Tucker fusion whose core is constrained to rank ``R`` per output slice.

    ``z = sum_r (A_r m~) * (C_r v~)``; the implied projected-space core is
    ``D[i, j, k] = sum_r A[r, k, i] C[r, k, j]``.
    """

    def __init__(self, config: FusionConfig, rng: np.random.Generator):
        c = config.validate()
        self.config = c
        P = c.proj_dim
        self.W_m = _projection(rng, P, c.dim_m)
        self.W_v = _projection(rng, P, c.dim_v)
        self.A = Parameter(np.stack([xavier_uniform(rng, (P, P), P, P) for _ in range(c.rank)]))
        self.C = Parameter(np.stack([xavier_uniform(rng, (P, P), P, P) for _ in range(c.rank)]))
        self.W_c = _projection(rng, c.dim_out, P)
        self.b_c = Parameter(zeros((c.dim_out,))) if c.output_bias else None

    def __call__(self, m: Tensor, v: Tensor) -> Tensor:
        return fuse_low_rank(m, v, "mutan", self)

    def projected_core(self) -> np.ndarray:
        return np.einsum("rki,rkj->ijk", self.A.data, self.C.data)

    def expand_core(self):
        core = np.einsum(
            "ka,lb,klc,oc->abo", self.W_m.data, self.W_v.data, self.projected_core(),
            self.W_c.data, optimize=True,
        )
        return core, self._bias_array()


class MLBFusion(_Fusion):
    """Hadamard product of the two projections, then an output map."""

    def __init__(self, config: FusionConfig, rng: np.random.Generator):
        c = config.validate()
        self.config = c
        self.W_m = _projection(rng, c.proj_dim, c.dim_m)
        self.W_v = _projection(rng, c.proj_dim, c.dim_v)
        self.W_c = _projection(rng, c.dim_out, c.proj_dim)
        self.b_c = Parameter(zeros((c.dim_out,))) if c.output_bias else None

    def __call__(self, m: Tensor, v: Tensor) -> Tensor:
        return fuse_low_rank(m, v, "mlb", self)

    def expand_core(self):
        core = np.einsum("ka,kb,ok->abo", self.W_m.data, self.W_v.data, self.W_c.data, optimize=True)
        return core, self._bias_array()


class MFBFusion(_Fusion):
    """Hadamard product at ``proj_dim * R`` followed by sum-pooling over R."""

    def __init__(self, config: FusionConfig, rng: np.random.Generator):
        c = config.validate()
        self.config = c
        wide = c.proj_dim * c.rank
        self.W_m = _projection(rng, wide, c.dim_m)
        self.W_v = _projection(rng, wide, c.dim_v)
        self.W_c = _projection(rng, c.dim_out, c.proj_dim)
        self.b_c = Parameter(zeros((c.dim_out,))) if c.output_bias else None

    def __call__(self, m: Tensor, v: Tensor) -> Tensor:
        return fuse_low_rank(m, v, "mfb", self)

    def expand_core(self):
        c = self.config
        pooled = np.einsum(
            "pra,prb->pab",
            self.W_m.data.reshape(c.proj_dim, c.rank, c.dim_m),
            self.W_v.data.reshape(c.proj_dim, c.rank, c.dim_v),
        )
        core = np.einsum("pab,op->abo", pooled, self.W_c.data)
        return core, self._bias_array()


def fuse_low_rank(m: Tensor, v: Tensor, kind: str, params: _Fusion) -> Tensor:
    c = params.config
    mb, vb, squeeze = _batched(m, v, c.dim_m, c.dim_v)
    n = mb.shape[0]
    mt = ops.linear_map(mb, params.W_m)
    vt = ops.linear_map(vb, params.W_v)
    if kind == "mlb":
        z = ops.mul(mt, vt)
    elif kind == "mfb":
        if c.rank < 1:
            raise ValueError("MFB rank must be >= 1")
        z = ops.sum(ops.mul(mt, vt).reshape(n, c.proj_dim, c.rank), axis=2)
    elif kind == "mutan":
        a = ops.einsum("rki,ni->nrk", params.A, mt)
        b = ops.einsum("rkj,nj->nrk", params.C, vt)
        z = ops.sum(ops.mul(a, b), axis=1)
    else:
        raise ValueError(f"unknown low-rank fusion {kind!r}")
    return _unbatch(params._out(z), squeeze)


class CatMLPFusion(Module):
    """Concatenate (m, v) then a two-layer perceptron; not bilinear."""

    def __init__(self, config: FusionConfig, rng: np.random.Generator):
        c = config.validate()
        self.config = c
        self.mlp = MLP(c.dim_m + c.dim_v, c.hidden_dim, c.dim_out, rng)

    def __call__(self, m: Tensor, v: Tensor) -> Tensor:
        return fuse_cat_mlp(m, v, self)


def fuse_cat_mlp(m: Tensor, v: Tensor, params: CatMLPFusion) -> Tensor:
    c = params.config
    mb, vb, squeeze = _batched(m, v, c.dim_m, c.dim_v)
    return _unbatch(params.mlp(ops.concat([mb, vb], axis=1)), squeeze)


_CLASSES = {
    "bilinear": BilinearFusion,
    "block": BlockFusion,
    "mutan": MutanFusion,
    "mlb": MLBFusion,
    "mfb": MFBFusion,
    "cat_mlp": CatMLPFusion,
}


def make_fusion(config: FusionConfig, rng: np.random.Generator) -> Module:
    config.validate()
    return _CLASSES[config.kind](config, rng)
