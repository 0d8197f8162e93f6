"""Siamese pair model: per-image scalar logits, antisymmetric pair combination.

Each image is encoded independently into two scalars: a disease-state logit
(z_state) and an ungradability logit (z_other). A pair is scored by the
difference of state logits pushed through a sigmoid whose slope is a
learnable per-pair uncertainty parameter gamma = 2**alpha, and by an OR
merge of the two ungradability probabilities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import objective
from .nn import ConvEncoder, EncoderConfig, sigmoid

LN2 = float(np.log(2.0))

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# pair arithmetic
# ---------------------------------------------------------------------------

def pair_delta(z_state_1, z_state_2):
    """Difference of the two state logits; antisymmetric in the image order."""
    return z_state_1 - z_state_2


def gamma_of(alpha):
    """Per-pair sigmoid slope, gamma = 2**alpha (alpha = 0 -> gamma = 1)."""
    return np.exp2(alpha)


def progression_prob(delta, gamma=1.0):
    """P(pair improved) = sigmoid(gamma * delta). Requires gamma > 0."""
    if np.any(np.asarray(gamma) <= 0):
        raise ValueError(f"gamma must be positive, got {gamma}")
    return sigmoid(np.asarray(gamma, dtype=np.float64) * np.asarray(delta, dtype=np.float64))


def other_prob(z_other_1, z_other_2):
    """P(at least one image ungradable), an OR of per-image probabilities.

    Computed as s1 + s2 - s1*s2 == 1 - (1-s1)(1-s2), which is symmetric in
    the arguments and never below max(s1, s2).
    """
    s1 = sigmoid(z_other_1)
    s2 = sigmoid(z_other_2)
    return s1 + s2 - s1 * s2


@dataclass(frozen=True)
class PairPrediction:
    """Everything the model says about one image pair."""
    state_logit_1: float
    state_logit_2: float
    other_logit_1: float
    other_logit_2: float
    delta: float
    gamma: float
    prob_progression: float
    prob_other: float


class AlphaTable:
    """One learnable slope exponent per training pair, indexed by pair_id.

    Pairs outside the table (or at inference time) use alpha = 0, i.e.
    gamma = 1.
    """

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=np.float64)

    @staticmethod
    def zeros(n_pairs: int) -> "AlphaTable":
        return AlphaTable(np.zeros(n_pairs))

    def __len__(self):
        return len(self.values)

    def alpha(self, pair_id) -> float:
        if pair_id is None or not 0 <= pair_id < len(self.values):
            return 0.0
        return float(self.values[pair_id])

    def gamma(self, pair_id) -> float:
        return float(np.exp2(self.alpha(pair_id)))

    def gammas(self) -> np.ndarray:
        return np.exp2(self.values)


# ---------------------------------------------------------------------------
# the Siamese model
# ---------------------------------------------------------------------------

def _as_batch(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image[None, None], True
    if image.ndim == 3:
        return image[None], True
    return image, False


class SiameseModel:
    """Shared encoder plus two independent affine scalar heads."""

    kind = "siamese"

    def __init__(self, encoder: ConvEncoder, head_params: dict):
        self.encoder = encoder
        # one flat dict so the optimizer sees every parameter; encoder
        # arrays are shared, not copied
        self.params = dict(encoder.params)
        self.params.update(head_params)

    @staticmethod
    def init(config: EncoderConfig, rng: np.random.Generator) -> "SiameseModel":
        encoder = ConvEncoder.init(config, rng)
        f = config.feature_dim
        heads = {
            "head_state.w": rng.normal(0.0, 1.0 / np.sqrt(f), size=f),
            "head_state.b": np.zeros(1),
            "head_other.w": rng.normal(0.0, 1.0 / np.sqrt(f), size=f),
            "head_other.b": np.zeros(1),
        }
        return SiameseModel(encoder, heads)

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def weight_decay_exempt(self) -> set:
        return set()

    # -- forward ------------------------------------------------------------

    def features(self, images):
        """Penultimate feature vectors, (N, F)."""
        batch, single = _as_batch(images)
        feat, _ = self.encoder.forward(batch)
        return feat[0] if single else feat

    def _heads(self, feat):
        z_state = feat @ self.params["head_state.w"] + self.params["head_state.b"][0]
        z_other = feat @ self.params["head_other.w"] + self.params["head_other.b"][0]
        return z_state, z_other

    def encode(self, images):
        """Per-image logits (z_state, z_other); scalars for a single image."""
        batch, single = _as_batch(images)
        feat, _ = self.encoder.forward(batch)
        z_state, z_other = self._heads(feat)
        if single:
            return float(z_state[0]), float(z_other[0])
        return z_state, z_other

    def forward_pair(self, img1, img2, alpha_table: AlphaTable | None = None,
                     pair_id=None) -> PairPrediction:
        """Full pair prediction; gamma = 1 unless a table entry applies."""
        z1_state, z1_other = self.encode(img1)
        z2_state, z2_other = self.encode(img2)
        delta = pair_delta(z1_state, z2_state)
        alpha = alpha_table.alpha(pair_id) if alpha_table is not None else 0.0
        gamma = float(gamma_of(alpha))
        return PairPrediction(
            state_logit_1=z1_state, state_logit_2=z2_state,
            other_logit_1=z1_other, other_logit_2=z2_other,
            delta=float(delta), gamma=gamma,
            prob_progression=float(progression_prob(delta, gamma)),
            prob_other=float(other_prob(z1_other, z2_other)),
        )

    def predict_pairs(self, img1, img2, gamma=None):
        """Batched pair predictions.

        img1, img2: (N, 1, H, W). gamma: scalar or (N,) slope, default 1.
        Returns dict of arrays: z_state_1/2, z_other_1/2, delta,
        prob_progression, prob_other.
        """
        n = img1.shape[0]
        stacked = np.concatenate([img1, img2], axis=0)
        feat, _ = self.encoder.forward(np.asarray(stacked, dtype=np.float64))
        z_state, z_other = self._heads(feat)
        z1, z2 = z_state[:n], z_state[n:]
        o1, o2 = z_other[:n], z_other[n:]
        delta = pair_delta(z1, z2)
        g = 1.0 if gamma is None else gamma
        return {
            "z_state_1": z1, "z_state_2": z2,
            "z_other_1": o1, "z_other_2": o2,
            "delta": delta,
            "prob_progression": progression_prob(delta, g),
            "prob_other": other_prob(o1, o2),
        }

    # -- training-time loss and gradients ------------------------------------

    def loss_and_grads(self, img1, img2, y_state, state_mask, y_other,
                       alpha_batch, lam, alpha_size=0, pair_ids=None):
        """Mean pair loss over a batch and gradients for every parameter.

        y_state: (N,) soft progression targets (ignored where state_mask is
        False); y_other: (N,) binary; alpha_batch: (N,) slope exponents for
        these pairs. When pair_ids is given, returns a dense alpha gradient
        of length alpha_size under grads["alpha"].

        The loss value matches objective.total_loss on the same
        predictions; gradients are the exact (unclamped) BCE gradients.
        """
        n = img1.shape[0]
        stacked = np.concatenate([img1, img2], axis=0).astype(np.float64)
        feat, cache = self.encoder.forward(stacked)
        z_state, z_other = self._heads(feat)
        z1, z2 = z_state[:n], z_state[n:]
        delta = z1 - z2
        gamma = np.exp2(alpha_batch)
        p_state = sigmoid(gamma * delta)
        s1 = sigmoid(z_other[:n])
        s2 = sigmoid(z_other[n:])
        p_other = s1 + s2 - s1 * s2

        parts = objective.loss_parts(p_state, y_state, state_mask, p_other,
                                     y_other, alpha_batch, lam)

        # state head: d/du BCE(y, sigmoid(u)) = sigmoid(u) - y, masked
        g_u = np.where(state_mask, p_state - y_state, 0.0) / n
        d_delta = gamma * g_u
        d_alpha = delta * g_u * gamma * LN2 + lam * np.sign(alpha_batch) / n

        # other head: d/dz1 BCE(t, p) = (p - t) * s1 / p  (exact for the OR merge)
        safe_p = np.maximum(p_other, np.finfo(np.float64).tiny)
        d_other = (p_other - y_other) / (n * safe_p)
        d_o1 = d_other * s1
        d_o2 = d_other * s2

        dz_state = np.concatenate([d_delta, -d_delta])
        dz_other = np.concatenate([d_o1, d_o2])

        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        grads["head_state.w"] += dz_state @ feat
        grads["head_state.b"] += dz_state.sum(keepdims=True)
        grads["head_other.w"] += dz_other @ feat
        grads["head_other.b"] += dz_other.sum(keepdims=True)
        dfeat = (np.outer(dz_state, self.params["head_state.w"])
                 + np.outer(dz_other, self.params["head_other.w"]))
        self.encoder.backward(dfeat, cache, grads)

        if pair_ids is not None:
            dense = np.zeros(alpha_size)
            np.add.at(dense, pair_ids, d_alpha)
            grads["alpha"] = dense
        else:
            grads["alpha_batch"] = d_alpha
        return parts, grads


class NaiveModel:
    """4-way softmax comparator: one linear head on concatenated features."""

    kind = "naive"

    def __init__(self, encoder: ConvEncoder, head_params: dict):
        self.encoder = encoder
        self.params = dict(encoder.params)
        self.params.update(head_params)

    @staticmethod
    def init(config: EncoderConfig, rng: np.random.Generator) -> "NaiveModel":
        encoder = ConvEncoder.init(config, rng)
        f = config.feature_dim
        heads = {
            "head_cls.w": rng.normal(0.0, 1.0 / np.sqrt(2 * f), size=(4, 2 * f)),
            "head_cls.b": np.zeros(4),
        }
        return NaiveModel(encoder, heads)

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def features(self, images):
        batch, single = _as_batch(images)
        feat, _ = self.encoder.forward(batch)
        return feat[0] if single else feat

    def predict_pairs(self, img1, img2):
        """Class probabilities (N, 4) in labels.LABELS order."""
        n = img1.shape[0]
        stacked = np.concatenate([img1, img2], axis=0).astype(np.float64)
        feat, _ = self.encoder.forward(stacked)
        both = np.concatenate([feat[:n], feat[n:]], axis=1)
        logits = both @ self.params["head_cls.w"].T + self.params["head_cls.b"]
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return {"probs": e / e.sum(axis=1, keepdims=True)}

    def loss_and_grads(self, img1, img2, class_index):
        """Mean categorical cross-entropy and parameter gradients."""
        n = img1.shape[0]
        stacked = np.concatenate([img1, img2], axis=0).astype(np.float64)
        feat, cache = self.encoder.forward(stacked)
        both = np.concatenate([feat[:n], feat[n:]], axis=1)
        logits = both @ self.params["head_cls.w"].T + self.params["head_cls.b"]
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        loss = -logp[np.arange(n), class_index].mean()

        dlogits = np.exp(logp)
        dlogits[np.arange(n), class_index] -= 1.0
        dlogits /= n
        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        grads["head_cls.w"] += dlogits.T @ both
        grads["head_cls.b"] += dlogits.sum(axis=0)
        dboth = dlogits @ self.params["head_cls.w"]
        f = feat.shape[1]
        dfeat = np.concatenate([dboth[:, :f], dboth[:, f:]], axis=0)
        self.encoder.backward(dfeat, cache, grads)
        return {"loss": float(loss)}, grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model, alpha_table: AlphaTable | None = None,
                    meta: dict | None = None) -> None:
    """Self-describing .npz checkpoint: parameters, alpha table, JSON meta."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "encoder": model.config.to_dict(),
        "param_count": model.param_count(),
    }
    if meta:
        header.update(meta)
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    if alpha_table is not None:
        arrays["alpha"] = alpha_table.values
    arrays["meta"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns (model, alpha_table_or_None, meta dict)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        params = {k[len("param/"):]: data[k] for k in data.files
                  if k.startswith("param/")}
        alpha = AlphaTable(data["alpha"]) if "alpha" in data.files else None
    config = EncoderConfig.from_dict(meta["encoder"])
    enc_params = {k: v for k, v in params.items()
                  if k.startswith("conv") or k.startswith("feat.")}
    head_params = {k: v for k, v in params.items() if k.startswith("head")}
    encoder = ConvEncoder(config, enc_params)
    cls = {"siamese": SiameseModel, "naive": NaiveModel}[meta["kind"]]
    return cls(encoder, head_params), alpha, meta
