"""Mask branch: shape estimation from priors, prior-conditioned coarse decoding, and
refinement on instance-centred features.

All functions take batched inputs with a leading instance axis N; patches are
c x c cells with D feature channels.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .priors import PriorBank
from .roi import Box, PatchSpec, fit_operators, rasterize_box_prior

CHECKPOINT_MAGIC = b"SMCK1"
N_DECODER_CONVS = 4


def _param_shapes(width: int, n_priors: int) -> list[tuple[str, tuple]]:
    shapes = [("phi_w", (width, n_priors)), ("phi_b", (n_priors,)), ("g_w", (1, 1, 1, width)), ("g_b", (width,))]
    for branch in ("coarse", "fine"):
        for i in range(N_DECODER_CONVS):
            shapes += [(f"{branch}{i}_w", (3, 3, width, width)), (f"{branch}{i}_b", (width,))]
        shapes += [(f"{branch}_out_w", (1, 1, width, 1)), (f"{branch}_out_b", (1,))]
    return shapes


def parameter_count_for(width: int, n_priors: int) -> int:
    if width <= 0:
        raise ValueError(f"channel width must be positive, got {width}")
    if n_priors <= 0:
        raise ValueError(f"number of priors must be positive, got {n_priors}")
    return sum(int(np.prod(s)) for _, s in _param_shapes(width, n_priors))


@dataclass
class HeadWeights:
    width: int
    n_priors: int
    patch_side: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, width: int, n_priors: int, patch_side: int, seed: int = 0) -> "HeadWeights":
        """He-normal convolutions, zero biases, zero phi (uniform prior weights at start)."""
        if width <= 0:
            raise ValueError(f"channel width must be positive, got {width}")
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in _param_shapes(width, n_priors):
            if name.endswith("_b") or name == "phi_w":
                params[name] = np.zeros(shape)
            else:
                fan_in = shape[0] * shape[1] * shape[2]
                params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        return cls(width, n_priors, patch_side, params)

    def copy(self) -> "HeadWeights":
        return HeadWeights(self.width, self.n_priors, self.patch_side, {k: v.copy() for k, v in self.params.items()})

    def names(self) -> list[str]:
        return [n for n, _ in _param_shapes(self.width, self.n_priors)]

    def __eq__(self, other):
        return (isinstance(other, HeadWeights) and (self.width, self.n_priors, self.patch_side)
                == (other.width, other.n_priors, other.patch_side)
                and all(np.array_equal(self.params[n], other.params[n]) for n in self.names()))


def parameter_count(weights: HeadWeights) -> int:
    return sum(int(weights.params[n].size) for n in weights.names())


def save_checkpoint(weights: HeadWeights, path) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<III", weights.width, weights.n_priors, weights.patch_side)]
    for name in weights.names():
        parts.append(np.ascontiguousarray(weights.params[name], dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> HeadWeights:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:5] != CHECKPOINT_MAGIC or len(raw) < 17:
        raise ValueError(f"corrupt checkpoint {path}: bad header")
    width, n_priors, side = struct.unpack_from("<III", raw, 5)
    off = 17
    params = {}
    for name, shape in _param_shapes(width, n_priors):
        n = int(np.prod(shape))
        if off + 8 * n > len(raw):
            raise ValueError(f"corrupt checkpoint {path}: truncated at {name}")
        params[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(raw):
        raise ValueError(f"corrupt checkpoint {path}: trailing bytes")
    return HeadWeights(width, n_priors, side, params)


@dataclass(frozen=True)
class Ablation:
    """Switch off the learned shape prior and/or the instance embedding."""

    no_shape: bool = False
    no_embed: bool = False


@dataclass
class HeadInput:
    """A batch of N instances ready for the head."""

    features: np.ndarray      # (N, c, c, D)
    box_prior: np.ndarray     # (N, c, c) binary B
    fitted_priors: np.ndarray  # (N, K, c, c): every bank prior fitted into its box
    gt_lo: np.ndarray | None = None  # (N, c, c)
    gt_hi: np.ndarray | None = None  # (N, 2c, 2c)


@dataclass
class PipelineOutput:
    s_prior: np.ndarray
    coarse_logits: np.ndarray
    fine_logits: np.ndarray
    w: np.ndarray
    losses: dict[str, float]
    total: nx.Var | None = None


def fit_priors(priors: np.ndarray, box: Box, spec: PatchSpec) -> np.ndarray:
    """(K, 32, 32) priors -> (K, c, c), each stretched into the box footprint."""
    rows, cols = fit_operators(box, spec, priors.shape[-1])
    return rows @ priors @ cols.T


def box_heatmap(box: Box, spec: PatchSpec) -> np.ndarray:
    """Rasterised box; a box too thin to cover any cell centre marks the cell holding its centre."""
    b = rasterize_box_prior(box, spec)
    if not b.any():
        cx, cy = spec.to_patch(box.x_c, box.y_c)
        b[min(max(int(cy), 0), spec.side - 1), min(max(int(cx), 0), spec.side - 1)] = 1.0
    return b


def prepare_input(features: np.ndarray, box: Box, spec: PatchSpec, bank: PriorBank, class_id=None,
                  gt_lo=None, gt_hi=None, box_prior=None) -> HeadInput:
    """Single-instance input (leading axis of length 1)."""
    b = box_heatmap(box, spec) if box_prior is None else box_prior
    fitted = fit_priors(bank.priors_for(class_id), box, spec)
    expand = (lambda a: None if a is None else np.asarray(a, dtype=np.float64)[None])
    return HeadInput(features[None], b[None], fitted[None], expand(gt_lo), expand(gt_hi))


def concat_inputs(items: list[HeadInput]) -> HeadInput:
    def cat(attr):
        vals = [getattr(it, attr) for it in items]
        return None if any(v is None for v in vals) else np.concatenate(vals)

    return HeadInput(cat("features"), cat("box_prior"), cat("fitted_priors"), cat("gt_lo"), cat("gt_hi"))


def pool_box_embedding(x, box_prior: np.ndarray) -> nx.Var:
    """Mean feature inside the binary box heatmap."""
    if np.any(np.asarray(box_prior).sum(axis=(-2, -1)) <= 0):
        raise ValueError("box heatmap is empty; nothing to pool")
    return nx.masked_mean(x, box_prior)


def shape_weights(x_box, weights_phi: tuple) -> nx.Var:
    phi_w, phi_b = weights_phi
    return nx.softmax(nx.add(nx.matmul(x_box, phi_w), phi_b))


def estimate_shape(x_box: np.ndarray, bank: PriorBank, phi_w: np.ndarray, phi_b: np.ndarray,
                   class_id=None) -> tuple[np.ndarray, np.ndarray]:
    """Softmax weights over the bank's priors and their weighted sum at canonical resolution."""
    priors = bank.priors_for(class_id)
    w = shape_weights(nx.const(np.asarray(x_box, dtype=np.float64)), (nx.const(phi_w), nx.const(phi_b)))
    s = nx.weighted_sum(w, priors)
    return w.value, s.value


def prior_loss(s_prior, gt) -> nx.Var:
    return nx.mse_loss(s_prior, gt)


def condition_on_prior(x, s_prior, g_w, g_b) -> nx.Var:
    """Add a 1x1-conv embedding of the detection prior to the features."""
    s = s_prior if isinstance(s_prior, nx.Var) else nx.const(s_prior)
    s4 = nx.reshape(s, s.shape + (1,))
    return nx.add(x, nx.conv2d(s4, g_w, g_b))


def _decoder(x, p: dict, branch: str, upsample: bool) -> nx.Var:
    h = x
    for i in range(N_DECODER_CONVS):
        h = nx.relu(nx.conv2d(h, p[f"{branch}{i}_w"], p[f"{branch}{i}_b"]))
    if upsample:
        h = nx.upsample_nearest_2x(h)
    out = nx.conv2d(h, p[f"{branch}_out_w"], p[f"{branch}_out_b"])
    return nx.reshape(out, out.shape[:-1])


def decode_coarse(x_prior, p: dict) -> nx.Var:
    return _decoder(x_prior, p, "coarse", upsample=False)


def decode_fine(x_inst, p: dict) -> nx.Var:
    return _decoder(x_inst, p, "fine", upsample=True)


def coarse_support(coarse_logits: np.ndarray, box_prior: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binarised coarse mask; instances whose mask is empty fall back to the box heatmap."""
    z = np.asarray(coarse_logits)
    with np.errstate(over="ignore"):
        mask = (1.0 / (1.0 + np.exp(-z)) > threshold).astype(np.float64)
    empty = mask.sum(axis=(-2, -1)) == 0
    if np.any(empty):
        mask = np.where(empty[..., None, None], box_prior, mask)
    return mask


def pool_mask_embedding(x_prior, coarse_logits, box_prior, threshold: float = 0.5) -> nx.Var:
    """Mean of the prior-conditioned features over the binarised coarse mask (a constant gate)."""
    z = coarse_logits.value if isinstance(coarse_logits, nx.Var) else coarse_logits
    return nx.masked_mean(x_prior, coarse_support(z, box_prior, threshold))


def center_features(x_prior, x_mask) -> nx.Var:
    xm = x_mask if isinstance(x_mask, nx.Var) else nx.const(x_mask)
    shape = xm.shape[:-1] + (1, 1) + xm.shape[-1:]
    return nx.sub(x_prior, nx.reshape(xm, shape))


def forward(weights: HeadWeights, inputs: HeadInput, ablation: Ablation = Ablation(), params=None,
            loss_weights=(1.0, 1.0, 1.0), threshold: float = 0.5) -> PipelineOutput:
    """Run the whole branch on a batch.

    ``params`` maps names to Vars (for training); by default weights are wrapped as constants.
    Losses are only computed when both groundtruths are present.
    """
    p = params if params is not None else {k: nx.const(v) for k, v in weights.params.items()}
    x = nx.const(inputs.features)
    b = inputs.box_prior
    if ablation.no_shape:
        k = inputs.fitted_priors.shape[1]
        w = nx.const(np.full(inputs.fitted_priors.shape[:2], 1.0 / k))
        s_prior = nx.const(b)
    else:
        x_box = pool_box_embedding(x, b)
        w = shape_weights(x_box, (p["phi_w"], p["phi_b"]))
        s_prior = nx.weighted_sum(w, inputs.fitted_priors)
    x_prior = condition_on_prior(x, s_prior, p["g_w"], p["g_b"])
    coarse = decode_coarse(x_prior, p)
    if ablation.no_embed:
        x_inst = x_prior
    else:
        x_mask = pool_mask_embedding(x_prior, coarse, b, threshold)
        x_inst = center_features(x_prior, x_mask)
    fine = decode_fine(x_inst, p)

    losses, total = {}, None
    if inputs.gt_lo is not None and inputs.gt_hi is not None:
        l_prior = prior_loss(s_prior, inputs.gt_lo)
        l_coarse = nx.bce_loss(coarse, inputs.gt_lo)
        l_fine = nx.bce_loss(fine, inputs.gt_hi)
        wp, wc, wf = loss_weights
        total = nx.add(nx.add(nx.mul(l_prior, wp), nx.mul(l_coarse, wc)), nx.mul(l_fine, wf))
        losses = {"prior": float(l_prior.value), "coarse": float(l_coarse.value), "fine": float(l_fine.value),
                  "total": float(total.value)}
    return PipelineOutput(s_prior.value, coarse.value, fine.value, w.value, losses, total)


def loss_and_grads(weights: HeadWeights, inputs: HeadInput, ablation: Ablation = Ablation(),
                   loss_weights=(1.0, 1.0, 1.0)) -> tuple[PipelineOutput, dict[str, np.ndarray]]:
    params = {k: nx.param(v) for k, v in weights.params.items()}
    out = forward(weights, inputs, ablation, params, loss_weights)
    out.total.backward()
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in params.items()}
    return out, grads
