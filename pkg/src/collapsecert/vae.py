"""Teacher-guided latent model: encoder, teacher-conditioned decoder, raw
z-only witness head, and the four-term objective.

The witness head reads the latent code and nothing else; its input width is
the latent dimension by construction, which is what makes "constant latents
imply a constant witness" a structural fact rather than a training outcome.
"""
from __future__ import annotations

import base64
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import AdamState, Tape, as_tensor
from .errors import ConfigError, InvalidInput, ShapeError
from .jsonio import read_json, write_json
from .rng import Xoshiro256StarStar, derive_seed
from .simplex import AssignmentMatrix

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    input: int
    latent: int
    classes: int
    hidden: int


@dataclass
class ModelParams:
    dims: ModelDims
    decoder_uses_teacher: bool
    tensors: dict[str, np.ndarray]


@dataclass(frozen=True)
class LossWeights:
    beta_z: float = 1.0
    lambda_align: float = 1.0
    lambda_bal: float = 0.0

    def validate(self) -> None:
        for name, v in (("beta_z", self.beta_z), ("lambda_align", self.lambda_align),
                        ("lambda_bal", self.lambda_bal)):
            if not (math.isfinite(v) and v >= 0.0):
                raise InvalidInput(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    recon: float
    kl_z: float
    align_raw: float
    balance: float
    total: float
    weights: LossWeights


def _tensor_specs(dims: ModelDims, decoder_uses_teacher: bool) -> dict[str, tuple[int, int] | tuple[int]]:
    d, l, k, h = dims.input, dims.latent, dims.classes, dims.hidden
    dec_in = l + (k if decoder_uses_teacher else 0)
    return {
        "enc_w1": (d, h), "enc_b1": (h,),
        "enc_w2": (h, h), "enc_b2": (h,),
        "enc_w3": (h, 2 * l), "enc_b3": (2 * l,),
        "dec_w1": (dec_in, h), "dec_b1": (h,),
        "dec_w2": (h, h), "dec_b2": (h,),
        "dec_w3": (h, d), "dec_b3": (d,),
        # head input width is exactly the latent dimension: z-only by construction
        "head_w1": (l, h), "head_b1": (h,),
        "head_w2": (h, k), "head_b2": (k,),
    }


def init_params(dims: ModelDims, decoder_uses_teacher: bool, seed: int) -> ModelParams:
    """Seeded 1/sqrt(fan_in) gaussian weights, zero biases."""
    if dims.classes < 2 or dims.latent < 1 or dims.input < 1 or dims.hidden < 1:
        raise InvalidInput(f"invalid model dims {dims}")
    rng = Xoshiro256StarStar(derive_seed(seed, 101))
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _tensor_specs(dims, decoder_uses_teacher).items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = shape[0]
            tensors[name] = rng.gaussians(shape[0] * shape[1]).reshape(shape) / math.sqrt(fan_in)
    return ModelParams(dims=dims, decoder_uses_teacher=decoder_uses_teacher, tensors=tensors)


# -- tape-level forward builders -------------------------------------------------


def _mlp2(tape: Tape, x: int, p: dict[str, int], prefix: str) -> int:
    h1 = tape.tanh(tape.bias_add(tape.matmul(x, p[f"{prefix}_w1"]), p[f"{prefix}_b1"]))
    h2 = tape.tanh(tape.bias_add(tape.matmul(h1, p[f"{prefix}_w2"]), p[f"{prefix}_b2"]))
    return tape.bias_add(tape.matmul(h2, p[f"{prefix}_w3"]), p[f"{prefix}_b3"])


def encode_nodes(tape: Tape, params: ModelParams, p: dict[str, int], x: int) -> tuple[int, int]:
    l = params.dims.latent
    out = _mlp2(tape, x, p, "enc")
    mu = tape.slice_cols(out, 0, l)
    logvar = tape.clamp(tape.slice_cols(out, l, 2 * l), LOGVAR_MIN, LOGVAR_MAX)
    return mu, logvar


def decode_nodes(tape: Tape, params: ModelParams, p: dict[str, int], z: int,
                 teacher: int | None) -> int:
    if params.decoder_uses_teacher:
        if teacher is None:
            raise ConfigError("decoder is teacher-conditioned but no teacher rows were given")
        z = tape.concat(z, teacher)
    return _mlp2(tape, z, p, "dec")


def witness_nodes(tape: Tape, params: ModelParams, p: dict[str, int], z: int) -> tuple[int, int]:
    h1 = tape.tanh(tape.bias_add(tape.matmul(z, p["head_w1"]), p["head_b1"]))
    logits = tape.bias_add(tape.matmul(h1, p["head_w2"]), p["head_b2"])
    return logits, tape.log_softmax_rows(logits)


def param_leaves(tape: Tape, params: ModelParams) -> dict[str, int]:
    return {name: tape.leaf(value) for name, value in params.tensors.items()}


# -- plain evaluation wrappers ----------------------------------------------------


def encode(params: ModelParams, x_batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = as_tensor(x_batch)
    if x.ndim != 2 or x.shape[1] != params.dims.input:
        raise ShapeError(f"x must be N x {params.dims.input}, got {x.shape}")
    tape = Tape()
    p = param_leaves(tape, params)
    mu, logvar = encode_nodes(tape, params, p, tape.leaf(x))
    return tape.value(mu).copy(), tape.value(logvar).copy()


def decode(params: ModelParams, z_batch: np.ndarray,
           teacher_rows: np.ndarray | None = None) -> np.ndarray:
    z = as_tensor(z_batch)
    if z.ndim != 2 or z.shape[1] != params.dims.latent:
        raise ShapeError(f"z must be N x {params.dims.latent}, got {z.shape}")
    tape = Tape()
    p = param_leaves(tape, params)
    t_node = tape.leaf(teacher_rows) if (
        params.decoder_uses_teacher and teacher_rows is not None) else None
    xhat = decode_nodes(tape, params, p, tape.leaf(z), t_node)
    return tape.value(xhat).copy()


def raw_witness(params: ModelParams,
                z_batch: np.ndarray) -> tuple[AssignmentMatrix, np.ndarray, np.ndarray]:
    """Assignment of each latent row; strictly z-only by signature."""
    z = as_tensor(z_batch)
    if z.ndim != 2 or z.shape[1] != params.dims.latent:
        raise ShapeError(f"z must be N x {params.dims.latent}, got {z.shape}")
    tape = Tape()
    p = param_leaves(tape, params)
    logits, log_probs = witness_nodes(tape, params, p, tape.leaf(z))
    lp = tape.value(log_probs).copy()
    return AssignmentMatrix(np.exp(lp)), tape.value(logits).copy(), lp


# -- the four-term objective --------------------------------------------------------


@dataclass
class LossNodes:
    tape: Tape
    params: dict[str, int]
    total: int
    non_align: int  # recon + beta_z * kl_z + lambda_bal * balance
    align: int
    recon: int
    kl_z: int
    balance: int
    mu: int
    logvar: int
    z: int
    logits: int
    log_probs: int
    xhat: int


def uniform_log_rows(n: int, k: int) -> np.ndarray:
    return np.full((n, k), -math.log(k), dtype=np.float64)


def losses(
    params: ModelParams,
    x_batch: np.ndarray,
    teacher_log_rows: np.ndarray,
    noise: np.ndarray,
    weights: LossWeights,
) -> tuple[LossBreakdown, LossNodes]:
    """Build the full objective on a fresh tape and return its breakdown.

    recon: squared error summed over dims, averaged over the batch.
    kl_z:  closed-form 0.5 * sum(mu^2 + e^logvar - 1 - logvar), batch-averaged.
    align: mean_x KL(T_x || S^raw_x) with T from teacher_log_rows; the
           teacher-side entropy enters as an additive constant so gradients
           flow only through the witness log-probabilities.
    balance: KL(S_bar || uniform) with S_bar accumulated in the log domain.
    """
    weights.validate()
    x = as_tensor(x_batch)
    t_log = np.asarray(teacher_log_rows, dtype=np.float64)
    n, k = x.shape[0], params.dims.classes
    if t_log.shape != (n, k):
        raise ShapeError(f"teacher_log_rows must be {(n, k)}, got {t_log.shape}")
    eps = as_tensor(noise)
    if eps.shape != (n, params.dims.latent):
        raise ShapeError(f"noise must be {(n, params.dims.latent)}, got {eps.shape}")
    t_probs = np.exp(t_log)

    tape = Tape()
    p = param_leaves(tape, params)
    x_node = tape.leaf(x)
    mu, logvar = encode_nodes(tape, params, p, x_node)
    z = tape.gaussian_reparam(mu, logvar, eps)
    t_node = tape.leaf(t_probs) if params.decoder_uses_teacher else None
    xhat = decode_nodes(tape, params, p, z, t_node)

    recon = tape.mean(tape.sum(tape.square(tape.sub(xhat, x_node)), axis=1))

    ones = tape.leaf(np.ones_like(tape.value(logvar)))
    kl_terms = tape.sub(tape.add(tape.square(mu), tape.exp(logvar)), tape.add(logvar, ones))
    kl_z = tape.scale(tape.mean(tape.sum(kl_terms, axis=1)), 0.5)

    logits, log_probs = witness_nodes(tape, params, p, z)
    cross = tape.mean(tape.sum(tape.mul(tape.leaf(t_probs), log_probs), axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ent = np.where(t_probs > 0.0, t_probs * t_log, 0.0)
    teacher_self = float(np.mean(np.sum(t_ent, axis=1)))
    align = tape.add(tape.scale(cross, -1.0), tape.leaf(np.asarray(teacher_self)))

    log_sbar = tape.add(tape.logsumexp_cols(log_probs),
                        tape.leaf(np.full(k, -math.log(n))))
    balance = tape.add(tape.sum(tape.mul(tape.exp(log_sbar), log_sbar)),
                       tape.leaf(np.asarray(math.log(k))))

    non_align = tape.add(tape.add(recon, tape.scale(kl_z, weights.beta_z)),
                         tape.scale(balance, weights.lambda_bal))
    total = tape.add(non_align, tape.scale(align, weights.lambda_align))

    breakdown = LossBreakdown(
        recon=float(tape.value(recon)),
        kl_z=float(tape.value(kl_z)),
        align_raw=float(tape.value(align)),
        balance=float(tape.value(balance)),
        total=float(tape.value(total)),
        weights=weights,
    )
    nodes = LossNodes(
        tape=tape, params=p, total=total, non_align=non_align, align=align,
        recon=recon, kl_z=kl_z, balance=balance, mu=mu, logvar=logvar, z=z,
        logits=logits, log_probs=log_probs, xhat=xhat,
    )
    return breakdown, nodes


# -- checkpoints ---------------------------------------------------------------------


def _encode_array(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return a.reshape(obj["shape"]).copy()


@dataclass
class Checkpoint:
    params: ModelParams
    optimizer_state: AdamState | None
    rng_state: tuple[int, int, int, int] | None
    step: int
    mode_lineage: list[str]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    opt = None
    if ckpt.optimizer_state is not None:
        opt = {
            "t": ckpt.optimizer_state.t,
            "m": {k: _encode_array(v) for k, v in ckpt.optimizer_state.m.items()},
            "v": {k: _encode_array(v) for k, v in ckpt.optimizer_state.v.items()},
        }
    write_json(
        path,
        {
            "version": CHECKPOINT_VERSION,
            "dims": {
                "input": ckpt.params.dims.input,
                "latent": ckpt.params.dims.latent,
                "classes": ckpt.params.dims.classes,
                "hidden": ckpt.params.dims.hidden,
            },
            "decoder_uses_teacher": ckpt.params.decoder_uses_teacher,
            "tensors": {k: _encode_array(v) for k, v in ckpt.params.tensors.items()},
            "optimizer_state": opt,
            "rng_state": [str(w) for w in ckpt.rng_state] if ckpt.rng_state else None,
            "step": ckpt.step,
            "mode_lineage": list(ckpt.mode_lineage),
        },
    )


def load_checkpoint(path) -> Checkpoint:
    obj = read_json(path)
    if obj.get("version") != CHECKPOINT_VERSION:
        raise InvalidInput(f"{path}: unsupported checkpoint version {obj.get('version')}")
    dims = ModelDims(**{k: int(v) for k, v in obj["dims"].items()})
    params = ModelParams(
        dims=dims,
        decoder_uses_teacher=bool(obj["decoder_uses_teacher"]),
        tensors={k: _decode_array(v) for k, v in obj["tensors"].items()},
    )
    expected = _tensor_specs(dims, params.decoder_uses_teacher)
    for name, shape in expected.items():
        if name not in params.tensors or params.tensors[name].shape != shape:
            raise InvalidInput(f"{path}: tensor {name!r} missing or mis-shaped")
    opt = None
    if obj.get("optimizer_state"):
        o = obj["optimizer_state"]
        opt = AdamState(
            m={k: _decode_array(v) for k, v in o["m"].items()},
            v={k: _decode_array(v) for k, v in o["v"].items()},
            t=int(o["t"]),
        )
    rng_state = tuple(int(w) for w in obj["rng_state"]) if obj.get("rng_state") else None
    return Checkpoint(
        params=params,
        optimizer_state=opt,
        rng_state=rng_state,
        step=int(obj["step"]),
        mode_lineage=list(obj["mode_lineage"]),
    )
