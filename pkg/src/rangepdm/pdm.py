"""Pointwise decoder module: neighbor aggregation heads and a desk-scale trainer.

A per-pixel encoder turns range-image channels into an ``H x W x d`` feature
map. For every point the range-guided KNN search picks K neighbor pixels; the
decoder aggregates their features into ``o_i`` and a classifier turns that
into per-point logits. ``VARIANTS`` lists the available aggregators.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from rangepdm import rknn
from rangepdm.cloud_io import PointCloud, SensorSpec
from rangepdm.errors import NumericalError
from rangepdm.nn import tensor as T
from rangepdm.nn.layers import Classifier, MlpBlock, Module
from rangepdm.nn.losses import cross_entropy
from rangepdm.nn.optim import AdamW
from rangepdm.nn.tensor import Tensor
from rangepdm.projection import IGNORE_LABEL, N_CHANNELS, Lut, RangeImage, project

log = logging.getLogger(__name__)

VARIANTS = (
    "ours",
    "voting_a",
    "voting_b",
    "pw_mlp_a",
    "pw_mlp_b",
    "attw_a",
    "attw_b",
    "attw_c",
    "attw_d",
)


@dataclass
class PdmConfig:
    variant: str = "ours"
    window: tuple = rknn.PDM_WINDOW
    k: int = rknn.PDM_K
    feature_dim: int = 16
    hidden_dim: int = 32
    n_classes: int = 3
    proj_dim: int = 16
    signed_offsets: bool = False
    scalar_weights: bool = False
    chunk: int = 8192

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        self.window = tuple(int(x) for x in self.window)
        if self.k < 1 or self.feature_dim < 1 or self.n_classes < 2:
            raise ValueError("k, feature_dim must be >= 1 and n_classes >= 2")


class PointwiseDecoder(Module):
    """Aggregation head selected by ``cfg.variant`` followed by a classifier."""

    def __init__(self, cfg: PdmConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, dh, k = cfg.feature_dim, cfg.hidden_dim, cfg.k
        v = cfg.variant
        if v == "ours":
            self.pos_mlp = MlpBlock(3, dh, d, rng)
            self.weight_mlp = MlpBlock(d, dh, 1 if cfg.scalar_weights else d, rng)
        elif v == "pw_mlp_a":
            self.mlp = MlpBlock(3 + d, dh, d, rng)
        elif v == "pw_mlp_b":
            self.mlp = MlpBlock(2 * d, dh, d, rng)
        elif v in ("attw_a", "attw_b"):
            self.weight_mlp = MlpBlock(3, dh, d, rng)
        elif v == "attw_d":
            self.query_mlp = MlpBlock(3, dh, cfg.proj_dim, rng)
            self.key_mlp = MlpBlock(3, dh, cfg.proj_dim, rng)
        d_cls = k * d if v in ("voting_b", "attw_b") else d
        self.classifier = Classifier(d_cls, dh, cfg.n_classes, rng)
        self.last_weights: Optional[np.ndarray] = None

    def _offsets(self, P_nbr: np.ndarray, p_q: np.ndarray) -> np.ndarray:
        diff = P_nbr - p_q[:, None, :]
        return diff if self.cfg.signed_offsets else np.abs(diff)

    def aggregate(self, P_nbr, F_nbr: Tensor, p_q, f_q: Tensor) -> Tensor:
        """Return ``o_i`` (M x d, or M x K*d for the concatenating variants)."""
        P_nbr = np.asarray(P_nbr, dtype=np.float64)
        p_q = np.asarray(p_q, dtype=np.float64)
        m, k, d = F_nbr.shape
        v = self.cfg.variant
        self.last_weights = None

        if v == "ours":
            dp = Tensor(self._offsets(P_nbr, p_q))
            df = T.sub(F_nbr, T.reshape(f_q, (m, 1, d)))
            pos = self.pos_mlp(dp)
            w = T.softmax(self.weight_mlp(T.add(df, pos)), axis=1)
            delta = T.add(F_nbr, pos)
            self.last_weights = w.data
            return T.sum(T.mul(w, delta), axis=1)

        if v == "voting_a":
            return T.scale(T.sum(F_nbr, axis=1), 1.0 / k)

        if v == "voting_b":
            return T.reshape(F_nbr, (m, k * d))

        if v == "pw_mlp_a":
            dp = Tensor(self._offsets(P_nbr, p_q))
            return T.max(self.mlp(T.concat([dp, F_nbr], axis=-1)), axis=1)

        if v == "pw_mlp_b":
            fq = T.expand(T.reshape(f_q, (m, 1, d)), (m, k, d))
            df = T.sub(F_nbr, fq)
            return T.max(self.mlp(T.concat([df, fq], axis=-1)), axis=1)

        if v in ("attw_a", "attw_b"):
            dp = Tensor(self._offsets(P_nbr, p_q))
            w = T.softmax(self.weight_mlp(dp), axis=1)
            self.last_weights = w.data
            weighted = T.mul(w, F_nbr)
            if v == "attw_a":
                return T.sum(weighted, axis=1)
            return T.reshape(weighted, (m, k * d))

        if v == "attw_c":
            scores = T.scale(T.matmul(F_nbr, T.reshape(f_q, (m, d, 1))), 1.0 / np.sqrt(d))
            w = T.softmax(scores, axis=1)  # M x K x 1
            self.last_weights = w.data[..., 0]
            return T.reshape(T.matmul(T.transpose(w, (0, 2, 1)), F_nbr), (m, d))

        if v == "attw_d":
            h = self.cfg.proj_dim
            q = self.query_mlp(Tensor(p_q))  # M x h
            keys = self.key_mlp(Tensor(P_nbr))  # M x K x h
            scores = T.scale(T.matmul(keys, T.reshape(q, (m, h, 1))), 1.0 / np.sqrt(h))
            w = T.softmax(scores, axis=1)
            self.last_weights = w.data[..., 0]
            return T.reshape(T.matmul(T.transpose(w, (0, 2, 1)), F_nbr), (m, d))

        raise AssertionError(v)

    def forward(self, P_nbr, F_nbr: Tensor, p_q, f_q: Tensor) -> Tensor:
        return self.classifier(self.aggregate(P_nbr, F_nbr, p_q, f_q))


def build_encoder(cfg: PdmConfig, rng: np.random.Generator) -> MlpBlock:
    """Per-pixel stand-in backbone: (x, y, z, range, intensity) -> d."""
    return MlpBlock(N_CHANNELS, cfg.hidden_dim, cfg.feature_dim, rng)


def build_model(cfg: PdmConfig, seed: int = 123):
    rng = np.random.default_rng(seed)
    encoder = build_encoder(cfg, rng)
    decoder = PointwiseDecoder(cfg, rng)
    return encoder, decoder


# ----------------------------------------------------------- feature plumbing


def encode_image(encoder: Module, img: RangeImage) -> Tensor:
    """Run the encoder on valid pixels; returns an (H*W) x d feature map with
    zero rows at invalid pixels."""
    valid = img.valid.reshape(-1)
    x = Tensor(img.channels.reshape(-1, N_CHANNELS)[valid])
    feats = encoder(x)
    d = feats.shape[1]
    rows = np.zeros(valid.shape[0], dtype=np.int64)
    rows[valid] = np.arange(1, int(valid.sum()) + 1)
    padded = T.concat([Tensor(np.zeros((1, d))), feats], axis=0)
    return T.gather(padded, rows)


def gather_neighborhood(featmap: Tensor, img: RangeImage, sets: rknn.NeighborSets, cloud: PointCloud):
    """Collect ``(P_nbr, F_nbr, p_q, f_q)`` for every query in ``sets``.

    ``featmap`` is ``H x W x d`` or flattened ``(H*W) x d``. Invalid and
    self-padded slots repeat the query's own position and feature.
    """
    h, w = img.valid.shape
    if featmap.ndim == 3:
        if featmap.shape[:2] != (h, w):
            raise ValueError(f"feature map {featmap.shape} does not match image {(h, w)}")
        featmap = T.reshape(featmap, (h * w, featmap.shape[2]))
    elif featmap.ndim != 2 or featmap.shape[0] != h * w:
        raise ValueError(f"feature map {featmap.shape} does not match image {(h, w)}")
    if sets.pixels.size and sets.pixels.max() >= h * w:
        raise ValueError("neighbor sets were built for a different image")
    p_q = cloud.xyz[sets.queries]
    f_q = T.gather(featmap, sets.query_pixels)
    real = sets.valid & ~sets.padded
    pix = np.where(real, sets.pixels, sets.query_pixels[:, None])
    F_nbr = T.gather(featmap, pix)
    P_nbr = np.where(real[..., None], cloud.xyz[np.maximum(sets.indices, 0)], p_q[:, None, :])
    return P_nbr, F_nbr, p_q, f_q


# --------------------------------------------------------------- inference


@dataclass
class PreparedScan:
    cloud: PointCloud
    img: RangeImage
    lut: Lut
    sets: rknn.NeighborSets
    targets: Optional[np.ndarray]


def prepare_scan(cloud: PointCloud, spec: SensorSpec, cfg: PdmConfig, threads: int = 1) -> PreparedScan:
    img, lut = project(cloud, spec)
    sets = rknn.knn_search(img, lut, cloud.range, window=cfg.window, k=cfg.k, threads=threads)
    return PreparedScan(cloud, img, lut, sets, cloud.labels)


def _slice_sets(sets: rknn.NeighborSets, s: int, e: int) -> rknn.NeighborSets:
    return rknn.NeighborSets(
        sets.queries[s:e], sets.query_pixels[s:e], sets.pixels[s:e], sets.indices[s:e],
        sets.valid[s:e], sets.padded[s:e], sets.offsets[s:e], sets.window, sets.k,
    )


def _take_sets(sets: rknn.NeighborSets, rows: np.ndarray) -> rknn.NeighborSets:
    return rknn.NeighborSets(
        sets.queries[rows], sets.query_pixels[rows], sets.pixels[rows], sets.indices[rows],
        sets.valid[rows], sets.padded[rows], sets.offsets[rows], sets.window, sets.k,
    )


def predict_logits(encoder, decoder, prep: PreparedScan, chunk: Optional[int] = None, threads: int = 1) -> np.ndarray:
    """Eval-mode logits for every point of a prepared scan, chunked over points."""
    chunk = chunk or decoder.cfg.chunk
    encoder.eval()
    decoder.eval()
    with T.no_grad():
        featmap = encode_image(encoder, prep.img)

        def work(s, e):
            sub = _slice_sets(prep.sets, s, e)
            P, F, pq, fq = gather_neighborhood(featmap, prep.img, sub, prep.cloud)
            return decoder(P, F, pq, fq).data

        parts = rknn._run_chunks(work, len(prep.sets), chunk, threads)
    if not parts:
        return np.zeros((0, decoder.cfg.n_classes))
    return np.concatenate(parts)


def predict(encoder, decoder, cloud: PointCloud, spec: SensorSpec, chunk=None, threads: int = 1) -> np.ndarray:
    prep = prepare_scan(cloud, spec, decoder.cfg, threads=threads)
    return np.argmax(predict_logits(encoder, decoder, prep, chunk, threads), axis=1)


# ----------------------------------------------------------------- training


@dataclass
class TrainResult:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["step,loss,accuracy"]
        lines += [f"{s},{l!r},{a!r}" for s, l, a in zip(self.steps, self.losses, self.accuracies)]
        return "\n".join(lines) + "\n"


def _accuracy(logits: np.ndarray, targets: np.ndarray, ignore: int) -> float:
    keep = targets != ignore
    if not keep.any():
        return 0.0
    return float(np.mean(np.argmax(logits[keep], axis=1) == targets[keep]))


def train_pdm(
    encoder: Module,
    decoder: PointwiseDecoder,
    scans: Sequence[PointCloud],
    spec: SensorSpec,
    steps: int = 200,
    seed: int = 123,
    lr: float = 0.002,
    weight_decay: float = 1e-4,
    ignore: int = IGNORE_LABEL,
    log_every: int = 0,
    batch_points: Optional[int] = None,
) -> TrainResult:
    """End-to-end training, one scan per step, scans visited in a seeded
    shuffled order each epoch.

    By default the loss covers every point of the scan. ``batch_points`` caps
    the decoder's share of a step at a seeded random subset of that many
    points, which bounds memory on full-size scans. The encoder still sees
    the whole image.
    """
    cfg = decoder.cfg
    if batch_points is not None and batch_points < 1:
        raise ValueError(f"batch_points must be positive, got {batch_points}")
    prepared = [prepare_scan(c, spec, cfg) for c in scans]
    if not prepared:
        raise ValueError("train_pdm needs at least one scan")
    for p in prepared:
        if p.targets is None:
            raise ValueError("training scans must carry labels")
    rng = np.random.default_rng(seed)
    params = encoder.parameters() + decoder.parameters()
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    result = TrainResult()
    order: list = []
    encoder.train()
    decoder.train()
    for step in range(steps):
        if not order:
            order = list(rng.permutation(len(prepared)))
        prep = prepared[order.pop(0)]
        opt.zero_grad()
        sets, targets = prep.sets, prep.targets
        if batch_points is not None and batch_points < len(sets):
            rows = np.sort(rng.choice(len(sets), batch_points, replace=False))
            sets, targets = _take_sets(sets, rows), targets[sets.queries[rows]]
        featmap = encode_image(encoder, prep.img)
        P, F, pq, fq = gather_neighborhood(featmap, prep.img, sets, prep.cloud)
        logits = decoder(P, F, pq, fq)
        loss = cross_entropy(logits, targets, ignore=ignore)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss {value} at step {step} (variant {cfg.variant})")
        T.backward(loss)
        opt.step()
        acc = _accuracy(logits.data, targets, ignore)
        result.steps.append(step)
        result.losses.append(value)
        result.accuracies.append(acc)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f acc %.4f", step, value, acc)
    encoder.eval()
    decoder.eval()
    return result


def model_state(encoder: Module, decoder: PointwiseDecoder):
    state = {}
    state.update(("encoder." + k, v) for k, v in encoder.state_dict().items())
    state.update(("decoder." + k, v) for k, v in decoder.state_dict().items())
    return state


def load_model_state(encoder: Module, decoder: PointwiseDecoder, state) -> None:
    enc = {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
    dec = {k[len("decoder."):]: v for k, v in state.items() if k.startswith("decoder.")}
    encoder.load_state_dict(enc)
    decoder.load_state_dict(dec)
