"""Feature-reconstruction attack by an honest-but-curious server.

The attacker path uses only what a curious server can see: the embedding
messages it receives plus a public dataset of the same distribution.  It
trains a shadow federated run on the public cohort to get a stand-in for
the target client's extractor, inverts that stand-in with a decoder
network trained on (shadow embedding, public feature) pairs, and applies
the frozen decoder to embeddings captured from the real run.  Ground-truth
private features appear only in the evaluation harness that scores the
reconstructions.

The same module quantifies distinguishability: per-subject clusters of
embeddings (repeated stochastic forwards) projected to 2-D by principal
components and scored by silhouette.  The defense is working when the
clusters collapse into one indistinct cloud.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, Parameter, Tape, Tensor
from .data import Dataset
from .federation.training import TrainSettings, run_vfl_training
from .privacy import PrivacyParams, clip_l2, perturb
from .rng import NoiseRouter, stream

__all__ = ["AttackConfig", "MlpDecoder", "split_public_private",
           "train_shadow", "train_decoder", "decoder_mse",
           "reconstruct_and_report", "pca_project", "silhouette_score",
           "subject_embedding_clouds", "projection_file_content",
           "run_attack_pipeline"]


@dataclass(frozen=True)
class AttackConfig:
    target: str                      # modality under attack
    public_fraction: float = 0.3
    decoder_hidden: int = 64
    decoder_epochs: int = 60
    decoder_lr: float = 0.005
    decoder_batch: int = 64
    # which victim epoch's transmissions get attacked: early rounds are the
    # exposed ones (extractors have barely diverged from the shared
    # initialization), which is exactly why a defense that waits for
    # training to finish would be too late
    attack_epoch: int = 0

    def __post_init__(self):
        if not 0.0 < self.public_fraction < 1.0:
            raise ValueError("public fraction must lie in (0, 1)")
        if self.attack_epoch < 0:
            raise ValueError("attack epoch must be non-negative")


def split_public_private(dataset: Dataset, fraction: float,
                         seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint public/private cohorts; the public part gets fresh
    train/val/test tags for the shadow run."""
    n = dataset.ids.size
    order = stream(seed, "attack", "public-split").permutation(n)
    n_pub = int(round(fraction * n))
    pub_idx = np.sort(order[:n_pub])
    priv_idx = np.sort(order[n_pub:])

    def take(idx, resplit):
        sub = Dataset(ids=dataset.ids[idx], times=dataset.times[idx],
                      events=dataset.events[idx], split=dataset.split[idx].copy(),
                      modalities={k: v[idx] for k, v in dataset.modalities.items()},
                      present={k: v[idx] for k, v in dataset.present.items()},
                      specs=dataset.specs)
        if resplit:
            m = sub.ids.size
            shuffle = stream(seed, "attack", "public-resplit").permutation(m)
            tags = np.empty(m, dtype=object)
            n_train = int(round(0.8 * m))
            n_val = int(round(0.1 * m))
            tags[shuffle[:n_train]] = "train"
            tags[shuffle[n_train:n_train + n_val]] = "val"
            tags[shuffle[n_train + n_val:]] = "test"
            sub.split = tags
        return sub

    return take(pub_idx, resplit=True), take(priv_idx, resplit=False)


def shadow_epochs_matching_steps(public: Dataset, private: Dataset,
                                 settings: TrainSettings,
                                 attack_epoch: int) -> int:
    """Shadow epochs whose optimizer step count best matches the victim's
    at the attacked stage.  Round counts are protocol metadata the server
    observes, so this alignment needs nothing private."""
    def batches(ds):
        n_train = int(np.sum(ds.split == "train"))
        return max(1, int(np.ceil(n_train / settings.batch_size)))

    victim_steps = (attack_epoch + 1) * batches(private)
    return max(1, round(victim_steps / batches(public)))


def train_shadow(public: Dataset, settings: TrainSettings,
                 epochs: int | None = None,
                 kl_denominator: int | None = None):
    """Shadow federated run on the public cohort (defense off: the shadow
    mimics the clean extractor).  Returns the full train result; the target
    extractor and the captured embedding stream come from it.

    The shadow reuses the run's master seed: architecture and seeds are
    coordination metadata this protocol shares with every party (the config
    digest travels in the control frames), so a curious server can start
    its mimic from the victim's exact initialization and train it to the
    stage whose transmissions it wants to invert.  Only the private
    features stay unknown to it.
    """
    shadow_settings = TrainSettings(
        epochs=epochs if epochs is not None else settings.epochs,
        batch_size=settings.batch_size,
        learning_rate=settings.learning_rate,
        weight_decay=settings.weight_decay,
        master_seed=settings.master_seed,
        intervals=settings.intervals, privacy=None,
        bayesian=settings.bayesian,
        model_overrides=dict(settings.model_overrides),
        capture_embeddings=True,
        kl_denominator=kl_denominator)
    return run_vfl_training(public, shadow_settings)


class MlpDecoder:
    """Deterministic MLP mapping embeddings back to raw features."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, seed: int):
        rng = stream(seed, "attack", "decoder-init")
        self.layers = []
        widths = [in_dim, hidden, out_dim]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            w = Parameter(rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)),
                          f"decoder/w{i}")
            bias = Parameter(np.zeros(b), f"decoder/b{i}")
            self.layers.append((w, bias))

    def parameters(self):
        out = []
        for w, b in self.layers:
            out.extend([w, b])
        return out

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = ad.add(ad.matmul(h, w), b)
            if i < len(self.layers) - 1:
                h = ad.relu(h)
        return h

    def reconstruct(self, embeddings: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(embeddings)).data


def shadow_pairs(shadow_result, public: Dataset, cfg: AttackConfig,
                 seed: int, draws: int = 4):
    """(embedding, feature) pairs made by forwarding the public data through
    the trained shadow extractor: one deterministic pass plus a few sampled
    passes, mirroring what evaluation-round transmissions look like."""
    bundle = shadow_result.bundle
    x = public.modalities[cfg.target]
    router = NoiseRouter(seed, ("attack", "decoder-data", "mean"))
    embs = [bundle.extractor_forward(cfg.target, x, "mean", router, False).data]
    feats = [x]
    for r in range(draws):
        router = NoiseRouter(seed, ("attack", "decoder-data", r))
        e = bundle.extractor_forward(cfg.target, x, "sample", router, False)
        embs.append(e.data)
        feats.append(x)
    return np.concatenate(embs), np.concatenate(feats)


def fit_decoder(embs: np.ndarray, feats: np.ndarray, cfg: AttackConfig,
                seed: int) -> MlpDecoder:
    """Minimize mean squared reconstruction error over the given pairs."""
    decoder = MlpDecoder(embs.shape[1], cfg.decoder_hidden, feats.shape[1],
                         seed)
    opt = AdamW(decoder.parameters(), lr=cfg.decoder_lr)
    rng = stream(seed, "attack", "decoder-batches")
    n = embs.shape[0]
    for _ in range(cfg.decoder_epochs):
        for start in range(0, n, cfg.decoder_batch):
            pick = rng.integers(0, n, size=min(cfg.decoder_batch, n))
            with Tape() as tape:
                out = decoder.forward(Tensor(embs[pick]))
                err = ad.subtract(out, Tensor(feats[pick]))
                loss = ad.tmean(ad.multiply(err, err))
            opt.step(tape.gradients(loss))
    return decoder


def train_decoder(shadow_result, public: Dataset, cfg: AttackConfig,
                  seed: int) -> MlpDecoder:
    """Fit the decoder on (shadow embedding, public feature) pairs;
    parameters are frozen afterwards (the attacker never adapts it to the
    victim)."""
    embs, feats = shadow_pairs(shadow_result, public, cfg, seed)
    return fit_decoder(embs, feats, cfg, seed)


def decoder_mse(decoder: MlpDecoder, embeddings: np.ndarray,
                true_features: np.ndarray):
    """(per-feature MSE, aggregate MSE) of frozen-decoder reconstructions."""
    recon = decoder.reconstruct(embeddings)
    per_feature = ((recon - true_features) ** 2).mean(axis=0)
    return per_feature, float(per_feature.mean())


def reconstruct_and_report(decoder: MlpDecoder, victim_result,
                           private: Dataset, cfg: AttackConfig) -> dict:
    """Score the attack against one instrumented run.  Ground truth is used
    here, in the evaluation harness, and nowhere on the attacker path."""
    names = victim_result.bundle.modality_names()
    target_index = names.index(cfg.target)
    features_by_id = {int(i): private.modalities[cfg.target][k]
                      for k, i in enumerate(private.ids)}
    # evaluation-round transmissions from the attacked epoch: deterministic
    # forwards, so the cleanest rows the server ever observes (and still
    # perturbed when the defense is on)
    captured = victim_result.captured_eval or victim_result.captured
    embs, feats = [], []
    for epoch, client, subjects, rows in captured:
        if client != target_index or epoch != cfg.attack_epoch:
            continue
        embs.append(rows)
        feats.append(np.stack([features_by_id[s] for s in subjects]))
    if not embs:
        raise ValueError(f"no captured transmissions at epoch {cfg.attack_epoch}")
    embs, feats = np.concatenate(embs), np.concatenate(feats)
    per_feature, aggregate = decoder_mse(decoder, embs, feats)
    return {
        "target": cfg.target,
        "rows_scored": int(embs.shape[0]),
        "mse_per_feature": per_feature,
        "mse": aggregate,
        "feature_variance": float(feats.var(axis=0).mean()),
    }


# ---------------------------------------------------------------------------
# distinguishability
# ---------------------------------------------------------------------------

def pca_project(points: np.ndarray, k: int = 2) -> np.ndarray:
    """Deterministic principal-component projection to k dimensions."""
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:k]
    # fix signs so the projection is reproducible across BLAS builds
    signs = np.sign(basis[np.arange(basis.shape[0]),
                          np.argmax(np.abs(basis), axis=1)])
    return centered @ (basis * signs[:, None]).T


def silhouette_score(points: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("need at least two clusters")
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    scores = np.empty(points.shape[0])
    for i in range(points.shape[0]):
        same = labels == labels[i]
        same[i] = False
        a = d[i, same].mean() if same.any() else 0.0
        b = min(d[i, labels == other].mean()
                for other in uniq if other != labels[i])
        scores[i] = 0.0 if max(a, b) == 0 else (b - a) / max(a, b)
    return float(scores.mean())


def subject_embedding_clouds(bundle, dataset: Dataset, target: str,
                             subject_positions, draws: int,
                             privacy: PrivacyParams | None, seed: int):
    """Repeated stochastic embeddings for a handful of subjects, as the
    server would observe them (defense applied when privacy is on)."""
    names = bundle.modality_names()
    target_index = names.index(target)
    x = dataset.modalities[target][subject_positions]
    points, labels = [], []
    for r in range(draws):
        router = NoiseRouter(seed, ("capture", r))
        emb = bundle.extractor_forward(target, x, "sample", router, False)
        rows = emb.data
        if privacy is not None:
            rows = clip_l2(rows, privacy.clip_bound)
            rows = perturb(rows, privacy.sigma, privacy.clip_bound,
                           router.stream("dp-noise", target_index))
        points.append(rows)
        labels.append(np.arange(len(subject_positions)))
    return np.concatenate(points), np.concatenate(labels)


def projection_file_content(points2d: np.ndarray, labels=None) -> str:
    """Two-column numeric text (plus optional label column) for plotting."""
    lines = []
    for i, (x, y) in enumerate(points2d):
        if labels is None:
            lines.append(f"{x:.10g}\t{y:.10g}")
        else:
            lines.append(f"{x:.10g}\t{y:.10g}\t{int(labels[i])}")
    return "\n".join(lines) + "\n"


def run_attack_pipeline(dataset: Dataset, cfg: AttackConfig,
                        settings: TrainSettings,
                        epsilons, seed: int,
                        cloud_subjects: int = 10,
                        cloud_draws: int = 20) -> dict:
    """Full experiment: shadow + decoder once, then one instrumented victim
    run per privacy budget (None = defense off).  Returns reconstruction
    MSEs, silhouettes, and 2-D projections for the no-DP and strongest-DP
    captures."""
    from .federation.training import PrivacySettings

    public, private = split_public_private(dataset, cfg.public_fraction, seed)
    # the shadow mimics the victim's objective and stage: same KL scaling
    # (the victim's training-set size is protocol metadata) and a matching
    # optimizer step count
    victim_n_train = int(np.sum(private.split == "train"))
    shadow = train_shadow(
        public, settings,
        epochs=shadow_epochs_matching_steps(public, private, settings,
                                            cfg.attack_epoch),
        kl_denominator=victim_n_train)
    decoder = train_decoder(shadow, public, cfg, seed)

    report: dict = {"by_budget": {}, "target": cfg.target, "seed": seed}
    pos = np.where(private.split == "test")[0][:cloud_subjects]
    if pos.size < 2:
        pos = np.arange(min(cloud_subjects, private.ids.size))
    for eps in epsilons:
        privacy = None if eps is None else PrivacySettings(epsilon=eps)
        vsettings = TrainSettings(
            epochs=settings.epochs, batch_size=settings.batch_size,
            learning_rate=settings.learning_rate,
            weight_decay=settings.weight_decay,
            master_seed=settings.master_seed, intervals=settings.intervals,
            privacy=privacy, bayesian=settings.bayesian,
            model_overrides=dict(settings.model_overrides),
            capture_embeddings=True)
        victim = run_vfl_training(private, vsettings)
        entry = reconstruct_and_report(decoder, victim, private, cfg)
        points, labels = subject_embedding_clouds(
            victim.bundle, private, cfg.target, pos, cloud_draws,
            victim.privacy, seed)
        proj = pca_project(points, 2)
        entry["silhouette"] = silhouette_score(proj, labels)
        entry["projection"] = proj
        entry["projection_labels"] = labels
        key = "inf" if eps is None else f"{eps:g}"
        report["by_budget"][key] = entry
    return report
