"""Model assembly: per-modality feature extractors, attention fusion,
prediction head, risk layer, and the combined training loss.

Every trainable weight lives in a variational layer except batch-norm,
which stays deterministic and contributes nothing to the KL term.  Layer
names double as random-stream labels, so a model built from the same
config and master seed draws identical weights no matter which process
hosts which piece.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .bayes import BayesianEmbedding, PriorSpec, VariationalLinear
from .rng import NoiseRouter

__all__ = [
    "WIDTH_CANDIDATES", "select_hidden_width", "ModalityModelSpec",
    "ModelConfig", "BatchNorm1d", "ClinicalNet", "BayesianFC",
    "AttentionFusion", "ModelBundle", "build_bundle", "aux_loss",
    "total_loss", "combine_loss_taped", "predict_hazards",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]

WIDTH_CANDIDATES = (128, 256, 512, 1024)

COS_GUARD = 1e-12
AUX_WEIGHT = 0.05


def select_hidden_width(input_width: int, scale_factor: int = 1) -> int:
    """Scaled smallest candidate width >= input width (largest as fallback)."""
    if input_width < 1 or scale_factor < 1:
        raise ValueError("input width and scale factor must be >= 1")
    for cand in WIDTH_CANDIDATES:
        if cand >= input_width:
            return scale_factor * cand
    return scale_factor * WIDTH_CANDIDATES[-1]


@dataclass(frozen=True)
class ModalityModelSpec:
    """Architecture of one modality's feature extractor."""

    name: str
    kind: str = "dense"                 # "dense" | "clinical"
    width: int = 0                      # dense feature count
    vocab_sizes: tuple = ()             # clinical categorical vocabularies
    continuous: int = 1                 # clinical continuous feature count
    hidden_layers: int = 2
    scale_factor: int = 1
    hidden_width: int = 0               # 0 = apply the candidate-width rule

    def input_width(self) -> int:
        if self.kind == "dense":
            return self.width
        return len(self.vocab_sizes) + self.continuous


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[ModalityModelSpec, ...]
    intervals: int = 30
    embed_dim: int = 512
    cat_embed_dim: int = 32
    clinical_hidden: int = 256
    head_hidden_layers: int = 4
    head_hidden_width: int = 0
    dropout: float = 0.5
    prior: PriorSpec = field(default_factory=PriorSpec.spike_slab)

    def to_json(self) -> str:
        d = {
            "modalities": [vars(m) | {"vocab_sizes": list(m.vocab_sizes)}
                           for m in self.modalities],
            "intervals": self.intervals,
            "embed_dim": self.embed_dim,
            "cat_embed_dim": self.cat_embed_dim,
            "clinical_hidden": self.clinical_hidden,
            "head_hidden_layers": self.head_hidden_layers,
            "head_hidden_width": self.head_hidden_width,
            "dropout": self.dropout,
            "prior": vars(self.prior),
        }
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        d = json.loads(text)
        mods = tuple(ModalityModelSpec(**(m | {"vocab_sizes": tuple(m["vocab_sizes"])}))
                     for m in d["modalities"])
        prior = PriorSpec(**d["prior"])
        return ModelConfig(modalities=mods, intervals=d["intervals"],
                           embed_dim=d["embed_dim"],
                           cat_embed_dim=d["cat_embed_dim"],
                           clinical_hidden=d["clinical_hidden"],
                           head_hidden_layers=d["head_hidden_layers"],
                           head_hidden_width=d["head_hidden_width"],
                           dropout=d["dropout"])


class BatchNorm1d:
    """Deterministic feature normalization with running statistics."""

    def __init__(self, name: str, dim: int, momentum: float = 0.1,
                 eps: float = 1e-5):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(dim), f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim), f"{name}.beta")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def parameters(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def forward(self, x: Tensor, train: bool) -> Tensor:
        if train:
            y, mu, var = ad.batchnorm_train(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mu
            self.running_var = (1.0 - m) * self.running_var + m * var
            return y
        return ad.batchnorm_eval(x, self.gamma, self.beta, self.running_mean,
                                 self.running_var, self.eps)


class ClinicalNet:
    """Extractor for the tabular modality: variational embeddings for the
    categorical features, batch-normed continuous features, then two
    variational linear layers up to the shared embedding width."""

    def __init__(self, spec: ModalityModelSpec, cfg: ModelConfig,
                 init_router: NoiseRouter):
        self.name = spec.name
        self.spec = spec
        self.cfg = cfg
        self.embeddings = [
            BayesianEmbedding(f"{spec.name}/emb{i}", vocab, cfg.cat_embed_dim,
                              prior=cfg.prior,
                              init_rng=init_router.stream(f"{spec.name}/emb{i}"))
            for i, vocab in enumerate(spec.vocab_sizes)
        ]
        self.bn_cont = BatchNorm1d(f"{spec.name}/bn_cont", spec.continuous)
        concat_width = spec.continuous + len(spec.vocab_sizes) * cfg.cat_embed_dim
        self.fc1 = VariationalLinear(f"{spec.name}/fc1", concat_width,
                                     cfg.clinical_hidden, prior=cfg.prior,
                                     init_rng=init_router.stream(f"{spec.name}/fc1"))
        self.fc2 = VariationalLinear(f"{spec.name}/fc2", cfg.clinical_hidden,
                                     cfg.embed_dim, prior=cfg.prior,
                                     init_rng=init_router.stream(f"{spec.name}/fc2"))

    def bayes_layers(self):
        return [*self.embeddings, self.fc1, self.fc2]

    def parameters(self):
        out = []
        for layer in self.bayes_layers():
            out.extend(layer.parameters())
        out.extend(self.bn_cont.parameters())
        return out

    def batchnorms(self):
        return [self.bn_cont]

    def forward(self, x, mode: str, router: NoiseRouter, train: bool) -> Tensor:
        n_cat = len(self.spec.vocab_sizes)
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        cat = data[:, :n_cat].astype(np.int64)
        cont = Tensor(data[:, n_cat:])
        parts = [self.bn_cont.forward(cont, train)]
        for i, emb in enumerate(self.embeddings):
            rng = router.stream("bayes-sample", emb.name) if mode == "sample" else None
            parts.append(emb.forward(cat[:, i], mode, rng))
        h = ad.concatenate(parts, axis=1)
        if train and self.cfg.dropout > 0:
            h = ad.dropout(h, self.cfg.dropout,
                           router.stream("dropout", f"{self.name}/drop_in"))
        h = self._linear(self.fc1, h, mode, router)
        h = ad.relu(h)
        return self._linear(self.fc2, h, mode, router)

    @staticmethod
    def _linear(layer, h, mode, router):
        rng = router.stream("bayes-sample", layer.name) if mode == "sample" else None
        return layer.forward(h, mode, rng)


class BayesianFC:
    """Configurable variational MLP: hidden blocks of
    linear -> relu -> batch-norm -> dropout, then a linear projection."""

    def __init__(self, name: str, in_dim: int, out_dim: int, hidden_layers: int,
                 cfg: ModelConfig, init_router: NoiseRouter,
                 scale_factor: int = 1, hidden_width: int = 0):
        self.name = name
        self.cfg = cfg
        width = hidden_width or select_hidden_width(in_dim, scale_factor)
        self.hidden_width = width
        self.blocks = []
        prev = in_dim
        for j in range(hidden_layers):
            lin = VariationalLinear(f"{name}/h{j}", prev, width, prior=cfg.prior,
                                    init_rng=init_router.stream(f"{name}/h{j}"))
            bn = BatchNorm1d(f"{name}/bn{j}", width)
            self.blocks.append((lin, bn))
            prev = width
        self.out = VariationalLinear(f"{name}/out", prev, out_dim, prior=cfg.prior,
                                     init_rng=init_router.stream(f"{name}/out"))

    def bayes_layers(self):
        return [lin for lin, _ in self.blocks] + [self.out]

    def batchnorms(self):
        return [bn for _, bn in self.blocks]

    def parameters(self):
        out = []
        for lin, bn in self.blocks:
            out.extend(lin.parameters())
            out.extend(bn.parameters())
        out.extend(self.out.parameters())
        return out

    def forward(self, x, mode: str, router: NoiseRouter, train: bool) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for j, (lin, bn) in enumerate(self.blocks):
            rng = router.stream("bayes-sample", lin.name) if mode == "sample" else None
            h = lin.forward(h, mode, rng)
            h = ad.relu(h)
            h = bn.forward(h, train)
            if train and self.cfg.dropout > 0:
                h = ad.dropout(h, self.cfg.dropout,
                               router.stream("dropout", f"{self.name}/drop{j}"))
        rng = router.stream("bayes-sample", self.out.name) if mode == "sample" else None
        return self.out.forward(h, mode, rng)


class AttentionFusion:
    """Scalar score per modality (variational linear then tanh), softmax
    across modalities, convex combination of the embeddings."""

    def __init__(self, name: str, embed_dim: int, cfg: ModelConfig,
                 init_router: NoiseRouter):
        self.name = name
        self.score = VariationalLinear(f"{name}/score", embed_dim, 1,
                                       prior=cfg.prior,
                                       init_rng=init_router.stream(f"{name}/score"))

    def bayes_layers(self):
        return [self.score]

    def parameters(self):
        return self.score.parameters()

    def forward(self, embeddings: list[Tensor], mode: str, router: NoiseRouter):
        if not embeddings:
            raise ValueError("need at least one modality embedding")
        if mode == "sample":
            w, b = self.score.sample_weights(
                router.stream("bayes-sample", self.score.name))
        else:
            w, b = self.score.w.mu, self.score.b.mu
        scores = [ad.tanh(ad.add(ad.matmul(e, w), b)) for e in embeddings]
        stacked = ad.concatenate(scores, axis=1)
        alphas = ad.softmax(stacked, axis=1)
        fused = None
        for k, e in enumerate(embeddings):
            col = ad.multiply(e, _column(alphas, k))
            fused = col if fused is None else ad.add(fused, col)
        return fused, alphas


def _column(t: Tensor, k: int) -> Tensor:
    """Select column k as an (N, 1) tensor via a constant mask product."""
    n, m = t.shape
    mask = np.zeros((m, 1))
    mask[k, 0] = 1.0
    return ad.matmul(t, Tensor(mask))


class ModelBundle:
    """Full architecture: per-modality extractors plus the server stack
    (fusion, prediction head, risk layer)."""

    def __init__(self, cfg: ModelConfig, master_seed: int):
        self.cfg = cfg
        self.master_seed = master_seed
        init = NoiseRouter(master_seed, ("init",))
        self.extractors: dict[str, ClinicalNet | BayesianFC] = {}
        for spec in cfg.modalities:
            if spec.kind == "clinical":
                ext = ClinicalNet(spec, cfg, init)
            elif spec.kind == "dense":
                ext = BayesianFC(spec.name, spec.width, cfg.embed_dim,
                                 spec.hidden_layers, cfg, init,
                                 scale_factor=spec.scale_factor,
                                 hidden_width=spec.hidden_width)
            else:
                raise ValueError(f"unknown modality kind {spec.kind!r}")
            self.extractors[spec.name] = ext
        self.fusion = AttentionFusion("fusion", cfg.embed_dim, cfg, init)
        self.head = BayesianFC("head", cfg.embed_dim, cfg.embed_dim,
                               cfg.head_hidden_layers, cfg, init,
                               hidden_width=cfg.head_hidden_width)
        self.risk = VariationalLinear("risk", cfg.embed_dim, cfg.intervals,
                                      prior=cfg.prior,
                                      init_rng=init.stream("risk"))

    # -- parameter bookkeeping -------------------------------------------
    def modality_names(self):
        return [m.name for m in self.cfg.modalities]

    def client_parameters(self, name: str):
        return self.extractors[name].parameters()

    def server_parameters(self):
        return (self.fusion.parameters() + self.head.parameters()
                + self.risk.parameters())

    def parameters(self):
        out = []
        for name in self.modality_names():
            out.extend(self.client_parameters(name))
        out.extend(self.server_parameters())
        return out

    def batchnorms(self):
        out = []
        for name in self.modality_names():
            out.extend(self.extractors[name].batchnorms())
        out.extend(self.head.batchnorms())
        return out

    # -- forward pieces ---------------------------------------------------
    def extractor_forward(self, name: str, x, mode: str, router: NoiseRouter,
                          train: bool) -> Tensor:
        return self.extractors[name].forward(x, mode, router, train)

    def client_kl(self, name: str) -> Tensor:
        """Taped KL of one client's extractor (after a sampled forward)."""
        terms = [layer.kl() for layer in self.extractors[name].bayes_layers()]
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return total

    def server_kl(self) -> Tensor:
        layers = (self.fusion.bayes_layers() + self.head.bayes_layers()
                  + [self.risk])
        total = None
        for layer in layers:
            term = layer.kl()
            total = term if total is None else ad.add(total, term)
        return total

    def fuse_and_predict(self, embeddings: list[Tensor], mode: str,
                         router: NoiseRouter, train: bool):
        """Server half: attention fusion, head, risk layer, sigmoid."""
        fused, alphas = self.fusion.forward(embeddings, mode, router)
        hazards = predict_hazards(self, fused, mode, router, train)
        return hazards, fused, alphas


def build_bundle(cfg: ModelConfig, master_seed: int) -> ModelBundle:
    return ModelBundle(cfg, master_seed)


def predict_hazards(bundle: ModelBundle, fused: Tensor, mode: str,
                    router: NoiseRouter, train: bool = False) -> Tensor:
    """Prediction head -> risk layer -> sigmoid; entries strictly in (0,1)."""
    h = bundle.head.forward(fused, mode, router, train)
    rng = router.stream("bayes-sample", bundle.risk.name) if mode == "sample" else None
    logits = bundle.risk.forward(h, mode, rng)
    return ad.sigmoid(logits)


def _row_cosine(a: Tensor, b: Tensor) -> Tensor:
    dot = ad.tsum(ad.multiply(a, b), axis=1, keepdims=True)
    na = ad.l2norm(a, axis=1, keepdims=True)
    nb = ad.l2norm(b, axis=1, keepdims=True)
    denom = ad.add_const(ad.multiply(na, nb), COS_GUARD)
    return ad.multiply(dot, ad.reciprocal(denom))


def aux_loss(embeddings: list[Tensor]) -> Tensor:
    """Mean over unordered modality pairs and subjects of 1 - cosine.

    Zero-norm rows (missing modalities) get cosine 0 by the guard, so the
    term stays finite.  A single modality has no pairs and scores 0.
    """
    m = len(embeddings)
    if m < 2:
        return Tensor(np.zeros(()))
    pair_means = []
    for i in range(m):
        for j in range(i + 1, m):
            cos = _row_cosine(embeddings[i], embeddings[j])
            pair_means.append(ad.tmean(ad.add_const(ad.neg(cos), 1.0)))
    total = pair_means[0]
    for t in pair_means[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(pair_means))


def total_loss(nll: float, kl_sum: float, n_train: int, aux: float) -> float:
    """Survival likelihood + KL regularizer scaled by the training-set size
    + auxiliary alignment term at its fixed coefficient."""
    if n_train < 1:
        raise ValueError("training-set size must be >= 1")
    return nll + kl_sum / n_train + AUX_WEIGHT * aux


def combine_loss_taped(nll_t: Tensor, kl_terms: list[Tensor], n_train: int,
                       aux_t: Tensor) -> Tensor:
    """Taped total loss; empty kl_terms means the regularizer is disabled
    (the deterministic ablation)."""
    if n_train < 1:
        raise ValueError("training-set size must be >= 1")
    loss = ad.add(nll_t, ad.scale(aux_t, AUX_WEIGHT))
    if kl_terms:
        kl_sum = kl_terms[0]
        for t in kl_terms[1:]:
            kl_sum = ad.add(kl_sum, t)
        loss = ad.add(loss, ad.scale(kl_sum, 1.0 / n_train))
    return loss


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"BVFL"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


def _named_arrays(bundle: ModelBundle) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for p in bundle.parameters():
        arrays[p.name] = p.data
    for bn in bundle.batchnorms():
        arrays.update(bn.state_arrays())
    return arrays


def save_checkpoint(path, bundle: ModelBundle, extra: dict[str, np.ndarray] | None = None) -> None:
    """Self-describing binary container: header (magic, version, interval
    count, modality list, model config JSON) then named float64 tensors."""
    arrays = _named_arrays(bundle)
    if extra:
        arrays.update({k: np.asarray(v, dtype=np.float64) for k, v in extra.items()})
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<BH", CHECKPOINT_VERSION, bundle.cfg.intervals))
    names = bundle.modality_names()
    buf.write(struct.pack("<B", len(names)))
    for name in names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
    cfg_raw = bundle.cfg.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_raw)))
    buf.write(cfg_raw)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, master_seed: int = 0):
    """Rebuild a bundle from a checkpoint; returns (bundle, extra arrays)."""
    with open(path, "rb") as fh:
        data = fh.read()
    view = io.BytesIO(data)
    if view.read(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, intervals = struct.unpack("<BH", view.read(3))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_mod,) = struct.unpack("<B", view.read(1))
    for _ in range(n_mod):
        (ln,) = struct.unpack("<H", view.read(2))
        view.read(ln)
    (cfg_len,) = struct.unpack("<I", view.read(4))
    cfg = ModelConfig.from_json(view.read(cfg_len).decode("utf-8"))
    if cfg.intervals != intervals:
        raise CheckpointError("header interval count disagrees with config")
    (count,) = struct.unpack("<I", view.read(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", view.read(2))
        name = view.read(ln).decode("utf-8")
        (ndim,) = struct.unpack("<B", view.read(1))
        shape = tuple(struct.unpack("<I", view.read(4))[0] for _ in range(ndim))
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        arrays[name] = np.frombuffer(view.read(n_bytes), dtype="<f8").reshape(shape).copy()

    bundle = build_bundle(cfg, master_seed)
    extra: dict[str, np.ndarray] = {}
    wanted = _named_arrays(bundle)
    for name, arr in arrays.items():
        if name in wanted:
            if wanted[name].shape != arr.shape:
                raise CheckpointError(f"shape mismatch for {name}")
        else:
            extra[name] = arr
    for p in bundle.parameters():
        if p.name not in arrays:
            raise CheckpointError(f"checkpoint missing tensor {p.name}")
        p.data = arrays[p.name]
    for bn in bundle.batchnorms():
        bn.running_mean = arrays[f"{bn.name}.running_mean"]
        bn.running_var = arrays[f"{bn.name}.running_var"]
    return bundle, extra
