"""The training loop: per step, one labelled source batch is paired with
uniformly resampled labelled/unlabelled target batches, the unlabelled batch
is strongly augmented, all four encoder passes run, the six loss terms are
combined (per the ablation toggles) into one unweighted sum, and a single
AdamW step plus an EMA update follow. Evaluation runs every epoch on the
unlabelled pool under the EMA weights."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import augment as A
from . import data as D
from . import evaluation as E
from . import losses as L
from . import model as M
from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError

LOG_COLUMNS = ["epoch", "l_cl_ST", "l_dom_ST", "l_dom_UU", "l_orth_ST",
               "l_orth_UU", "l_pl_U", "total", "retained_fraction",
               "test_weighted_f1"]

ABLATION_ROWS = {
    "abla1": dict(cl_st=True, orth_st=False, dom_st=False, orth_uu=False, dom_uu=False, pl_u=False),
    "abla2": dict(cl_st=True, orth_st=True, dom_st=True, orth_uu=False, dom_uu=False, pl_u=False),
    "abla3": dict(cl_st=True, orth_st=True, dom_st=True, orth_uu=True, dom_uu=True, pl_u=False),
    "abla4": dict(cl_st=True, orth_st=True, dom_st=True, orth_uu=False, dom_uu=False, pl_u=True),
    "abla5": dict(cl_st=True, orth_st=False, dom_st=True, orth_uu=False, dom_uu=True, pl_u=True),
    "abla6": dict(cl_st=True, orth_st=True, dom_st=False, orth_uu=True, dom_uu=False, pl_u=True),
    "full": dict(cl_st=True, orth_st=True, dom_st=True, orth_uu=True, dom_uu=True, pl_u=True),
}


@dataclass
class ExperimentConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    tau: float = 0.95
    ema_momentum: float = 0.95
    labels_per_class: int = 10
    seed: int = 0
    toggles: L.Toggles = field(default_factory=L.Toggles)
    channels: tuple = (16, 32, 64)
    kernel: int = 3
    embed_dim: int = 128
    stem_pool: int = 1
    feature_gain: float = 16.0
    eval_batch: int = 256

    def validate(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0,1], got {self.tau}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError(f"ema_momentum must lie in [0,1], got {self.ema_momentum}")
        if not self.toggles.cl_st:
            raise ConfigError("the classification loss toggle must stay on")
        if self.epochs < 0 or self.batch_size < 1 or self.labels_per_class < 1:
            raise ConfigError("epochs/batch_size/labels_per_class out of range")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.embed_dim % 2 or self.embed_dim < 2:
            raise ConfigError("embed_dim must be a positive even integer")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["channels"] = list(self.channels)
        d["toggles"] = self.toggles.as_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "toggles" in d and isinstance(d["toggles"], dict):
            d["toggles"] = L.Toggles(**d["toggles"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


def apply_ablation(config: ExperimentConfig, row: str) -> ExperimentConfig:
    """Return a copy of config with the toggle pattern of one ablation row."""
    if row not in ABLATION_ROWS:
        raise ConfigError(f"unknown ablation row '{row}' "
                          f"(known: {', '.join(ABLATION_ROWS)})")
    return dataclasses.replace(config, toggles=L.Toggles(**ABLATION_ROWS[row]))


def compute_losses(model: M.SheddModel, xs, ys, xt, yt, xu, xu_hat, tau,
                   toggles: L.Toggles):
    """Loss terms for one aligned batch triple plus the augmented view.
    Disabled terms are skipped entirely (no graph). Returns
    (total tensor or None, LossBundle)."""
    sizes = {a.shape[0] for a in (xs, xt, xu, xu_hat)}
    if len(sizes) != 1:
        raise ContractError(f"misaligned batch sizes: {sorted(sizes)}")
    batch = xs.shape[0]

    need_st = toggles.cl_st or toggles.dom_st or toggles.orth_st
    need_u = toggles.dom_uu or toggles.orth_uu or toggles.pl_u
    need_uh = need_u

    pair_s = pair_t = pair_u = pair_uh = None
    if need_st or need_u:
        # one batched pass through the target encoder for all target views
        segments, names = [xt] if need_st else [], ["t"] if need_st else []
        if need_u:
            segments += [xu, xu_hat]
            names += ["u", "uh"]
        z_all = model.target_encoder(T.Tensor(np.concatenate(segments, axis=0)))
        pairs = {}
        for i, name in enumerate(names):
            z_seg = T.slice_rows(z_all, i * batch, (i + 1) * batch)
            pairs[name] = M.split_embedding(z_seg, model.half_dim)
        pair_t = pairs.get("t")
        pair_u = pairs.get("u")
        pair_uh = pairs.get("uh")
    if need_st:
        pair_s = model.encode_source(T.Tensor(xs))

    parts = {}
    if toggles.cl_st:
        probs_s = model.classify(pair_s.invariant)
        probs_t = model.classify(pair_t.invariant)
        parts["cl_st"] = L.classification_loss(probs_s, ys, probs_t, yt)
    if toggles.dom_st:
        parts["dom_st"] = L.domain_loss_labelled(pair_s.specific, pair_t.specific,
                                                 model.domain_head)
    if toggles.dom_uu:
        parts["dom_uu"] = L.domain_loss_unlabelled(pair_u.specific, pair_uh.specific,
                                                   model.domain_head)
    if toggles.orth_st:
        parts["orth_st"] = L.orthogonality_pair(pair_s, pair_t)
    if toggles.orth_uu:
        parts["orth_uu"] = L.orthogonality_pair(pair_u, pair_uh)

    retained = 0
    if toggles.pl_u:
        # pseudo-label source probabilities live outside the gradient graph
        with T.no_grad():
            probs_u = model.classify(pair_u.invariant.detach()).data
        probs_uh = model.classify(pair_uh.invariant)
        parts["pl_u"], retained = L.pseudo_label_loss(probs_u, probs_uh, tau)

    total = L.total_loss(parts, toggles)
    # the reported total is the float64 sum of the components; the graph
    # total (float32) drives backprop
    bundle = L.LossBundle(
        **{name: (parts[name].item() if name in parts else 0.0) for name in L.COMPONENTS},
        total=float(sum(parts[name].item() for name in L.COMPONENTS if name in parts)),
        retained_count=retained, batch_size=batch)
    return total, bundle


def train_step(model, optimizer, ema, batch, config: ExperimentConfig,
               aug_rng, aug_cfg: A.AugmentConfig) -> L.LossBundle:
    """One full optimization step on an aligned (source, target-labelled,
    target-unlabelled) batch triple."""
    xs, ys, xt, yt, xu = batch
    xu_hat = A.augment_batch(xu, aug_rng, aug_cfg)
    total, bundle = compute_losses(model, xs, ys, xt, yt, xu, xu_hat,
                                   config.tau, config.toggles)
    if total is not None and total.requires_grad:
        T.backward(total)
        # parameters unreachable from the enabled losses receive zero gradient
        # (weight decay still applies to them)
        for _, p in optimizer.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        optimizer.step()
    optimizer.zero_grad()
    ema.update()
    return bundle


@dataclass
class TrainResult:
    log_rows: list
    final_report: E.MetricsReport
    model: M.SheddModel
    ema: nn.Ema
    run_dir: str | None


def _evaluate_under_ema(model, ema, images, labels, num_classes, batch_size):
    token = ema.swap_in()
    try:
        report = E.evaluate_model(model, images, labels, num_classes,
                                  batch_size=batch_size)
    finally:
        ema.restore(token)
    return report


def _format_row(row):
    out = [str(row["epoch"])]
    for col in LOG_COLUMNS[1:]:
        out.append(f"{row[col]:.10g}")
    return out


def write_log_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow(_format_row(row))


def read_log_csv(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = []
        for raw in reader:
            row = {"epoch": int(raw["epoch"])}
            row.update({col: float(raw[col]) for col in LOG_COLUMNS[1:]})
            rows.append(row)
    return rows


STATE_DIRNAME = "state"


def _save_train_state(run_dir, model, optimizer, ema, epoch, data_rng, aug_rng,
                      log_rows):
    arrays = {name: p.data for name, p in model.named_parameters()}
    arrays.update(optimizer.state_arrays())
    extra = {
        "architecture": model.architecture(),
        "epoch": epoch,
        "adam_step": optimizer.step_count,
        "data_rng": data_rng.bit_generator.state,
        "aug_rng": aug_rng.bit_generator.state,
        "log_rows": log_rows,
    }
    nn.save_checkpoint(os.path.join(run_dir, STATE_DIRNAME), arrays,
                       ema_arrays=ema.shadow, extra=extra)


def load_train_state(run_dir):
    return nn.load_checkpoint(os.path.join(run_dir, STATE_DIRNAME))


def train(config: ExperimentConfig, source_ds: D.Dataset, target_ds: D.Dataset,
          run_dir=None, aug_cfg: A.AugmentConfig | None = None,
          resume: bool = False) -> TrainResult:
    """Run the full training procedure; optionally persist artifacts
    (log.csv, metrics.json, checkpoints, resumable state) under run_dir."""
    config.validate()
    if aug_cfg is None:
        aug_cfg = A.AugmentConfig()
    aug_cfg = dataclasses.replace(
        aug_cfg, value_range=tuple(target_ds.manifest.value_range))

    init_rng = D.derived_rng(config.seed, D.STREAM_INIT)
    data_rng = D.derived_rng(config.seed, D.STREAM_DATA)
    aug_rng = D.derived_rng(config.seed, D.STREAM_AUGMENT)

    src_man, tgt_man = source_ds.manifest, target_ds.manifest
    model = M.SheddModel.build(
        source_geometry=(src_man.channels, src_man.height),
        target_geometry=(tgt_man.channels, tgt_man.height),
        num_classes=tgt_man.num_classes, embed_dim=config.embed_dim,
        rng=init_rng, channels=config.channels, kernel=config.kernel,
        source_range=tuple(src_man.value_range),
        target_range=tuple(tgt_man.value_range), stem_pool=config.stem_pool,
        feature_gain=config.feature_gain)
    params = model.named_parameters()
    optimizer = nn.AdamW(params, lr=config.lr, betas=config.betas,
                         eps=config.eps, weight_decay=config.weight_decay)
    ema = nn.Ema(params, momentum=config.ema_momentum)

    labelled_idx, unlabelled_idx = D.make_splits(
        target_ds, D.SplitSpec(config.labels_per_class, seed=config.seed))
    t_images = target_ds.images[labelled_idx]
    t_labels = target_ds.labels[labelled_idx]
    u_images = target_ds.images[unlabelled_idx]
    u_labels = target_ds.labels[unlabelled_idx]

    start_epoch = 0
    log_rows: list = []
    if resume:
        if run_dir is None:
            raise ConfigError("resume requires a run_dir with saved state")
        arrays, shadows, extra = load_train_state(run_dir)
        raw = {n: a for n, a in arrays.items() if not n.startswith("adam_")}
        model.load_arrays(raw, strict=True)
        optimizer.load_state_arrays(arrays, extra["adam_step"])
        ema.shadow = {n: shadows[n].astype(p.data.dtype) for n, p in params}
        data_rng.bit_generator.state = extra["data_rng"]
        aug_rng.bit_generator.state = extra["aug_rng"]
        start_epoch = extra["epoch"]
        log_rows = list(extra["log_rows"])

    num_classes = tgt_man.num_classes
    for epoch in range(start_epoch, config.epochs):
        sums = {name: 0.0 for name in L.COMPONENTS}
        sums["total"] = 0.0
        retained_total = 0
        steps = 0
        for batch in D.batch_iterator(source_ds, (t_images, t_labels), u_images,
                                      config.batch_size, data_rng):
            bundle = train_step(model, optimizer, ema, batch, config,
                                aug_rng, aug_cfg)
            for name, value in bundle.component_values().items():
                sums[name] += value
            sums["total"] += bundle.total
            retained_total += bundle.retained_count
            steps += 1

        report = _evaluate_under_ema(model, ema, u_images, u_labels,
                                     num_classes, config.eval_batch)
        denom = max(steps, 1)
        row = {"epoch": epoch + 1,
               "l_cl_ST": sums["cl_st"] / denom,
               "l_dom_ST": sums["dom_st"] / denom,
               "l_dom_UU": sums["dom_uu"] / denom,
               "l_orth_ST": sums["orth_st"] / denom,
               "l_orth_UU": sums["orth_uu"] / denom,
               "l_pl_U": sums["pl_u"] / denom,
               "total": sums["total"] / denom,
               "retained_fraction": retained_total / (denom * config.batch_size),
               "test_weighted_f1": report.weighted_f1}
        log_rows.append(row)
        if run_dir is not None:
            os.makedirs(run_dir, exist_ok=True)
            _save_train_state(run_dir, model, optimizer, ema, epoch + 1,
                              data_rng, aug_rng, log_rows)

    final_report = _evaluate_under_ema(model, ema, u_images, u_labels,
                                       num_classes, config.eval_batch)

    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        write_log_csv(os.path.join(run_dir, "log.csv"), log_rows)
        with open(os.path.join(run_dir, "metrics.json"), "w") as f:
            json.dump(final_report.to_dict(), f, indent=1, sort_keys=True)
        M.save_model_checkpoint(os.path.join(run_dir, "checkpoint_full"),
                                model, ema_shadow=ema.shadow)
        M.save_model_checkpoint(os.path.join(run_dir, "checkpoint_inference"),
                                model, ema_shadow=ema.shadow, inference_only=True)

    return TrainResult(log_rows=log_rows, final_report=final_report,
                       model=model, ema=ema, run_dir=run_dir)
