"""Training loop, configuration, checkpoints, and the experiment drivers.

Every run is reproducible from its config alone: batch selection and
estimator noise are derived from (seed, step), never from accumulated RNG
state, so restoring a checkpoint and continuing is bit-identical to an
uninterrupted run.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import evaluation, relatedness
from .autodiff import Tensor, backward, zero_grads
from .bounds import EstimatorSpec, iwae
from .data import FactorSpec, PairedDataset, make_related_dataset, subset
from .models import MultimodalModel, ModalitySpec, build_model
from .objective import ObjectiveConfig, final_objective
from .seeding import derive_rng, tag

CHECKPOINT_MAGIC = b"CMVAE"
CHECKPOINT_VERSION = 1
METRICS_SCHEMA = "# cmvae-metrics-v1"
TRAINLOG_SCHEMA = "# cmvae-trainlog-v1"
SWEEP_SCHEMA = "# cmvae-sweep-v1"


class NumericalAbort(RuntimeError):
    """Loss went non-finite; carries the last good checkpoint path."""

    def __init__(self, step: int, checkpoint_path: str | None):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    steps: int = 5000
    batch_size: int = 64


@dataclass(frozen=True)
class DatasetConfig:
    factors: FactorSpec = field(default_factory=FactorSpec)
    items_per_modality: int = 2000
    pairs_per_instance: int = 1
    percent: float = 100.0
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    joint_kind: str = "moe"
    latent_dim: int = 8
    hidden_dim: int = 64
    num_hidden: int = 2
    init_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    run_id: str = "run"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=lambda: ObjectiveConfig.for_variant("cI"))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval_every: int = 500
    eval_items: int = 256
    output_dir: str = "runs/run"

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["objective"]["gamma"] = "inf" if math.isinf(self.objective.gamma) else self.objective.gamma
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "RunConfig":
        d = dict(d)
        ds = dict(d.get("dataset", {}))
        if "factors" in ds:
            fs = dict(ds["factors"])
            for key in ("modality_names", "obs_dims", "private_dims", "likelihoods"):
                if key in fs:
                    fs[key] = tuple(fs[key])
            ds["factors"] = FactorSpec(**fs)
        d["dataset"] = DatasetConfig(**ds)
        d["model"] = ModelConfig(**d.get("model", {}))
        obj = dict(d.get("objective", {}))
        if obj:
            if obj.get("gamma") == "inf":
                obj["gamma"] = math.inf
            for term in ("term1", "term2"):
                if obj.get(term) is not None:
                    obj[term] = EstimatorSpec(**obj[term])
            d["objective"] = ObjectiveConfig(**obj)
        else:
            d["objective"] = ObjectiveConfig.for_variant("cI")
        d["optimizer"] = OptimizerConfig(**d.get("optimizer", {}))
        return RunConfig(**d)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path: str) -> "RunConfig":
        with open(path) as fh:
            return RunConfig.from_json_dict(json.load(fh))


def config_for_variant(base: RunConfig, variant: str, num_samples: int | None = None) -> RunConfig:
    k = num_samples if num_samples is not None else (
        base.objective.term1.num_samples if base.objective.variant != "baseline"
        else base.objective.term1.num_samples)
    gamma = base.objective.gamma if variant != "baseline" and math.isfinite(base.objective.gamma) else 2.0
    obj = ObjectiveConfig.for_variant(variant, gamma=gamma,
                                      num_negatives=base.objective.num_negatives,
                                      num_samples=k)
    return replace(base, objective=obj)


# -- optimizer -----------------------------------------------------------------------


class Adam:
    """Adaptive-moment gradient descent over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in sorted(params.items())}
        self.v = {k: np.zeros_like(p.value) for k, p in sorted(params.items())}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        for k in sorted(self.params):
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            m_hat = self.m[k] / (1 - c.beta1 ** self.t)
            v_hat = self.v[k] / (1 - c.beta2 ** self.t)
            self.params[k].value = self.params[k].value - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.epsilon)


@dataclass
class TrainState:
    step: int
    model: MultimodalModel
    optimizer: Adam
    seed: int


# -- checkpoint format ----------------------------------------------------------------


def save_checkpoint(state: TrainState, path: str) -> None:
    """Versioned name-table header followed by flat little-endian f64 arrays."""
    entries: list[tuple[str, np.ndarray]] = []
    for k in sorted(state.model.params):
        entries.append((k, state.model.params[k].value))
    for k in sorted(state.optimizer.m):
        entries.append((f"adam.m.{k}", state.optimizer.m[k]))
        entries.append((f"adam.v.{k}", state.optimizer.v[k]))
    entries.append(("trainer.adam_t", np.asarray(float(state.optimizer.t))))
    entries.append(("trainer.step", np.asarray(float(state.step))))
    entries.append(("trainer.seed", np.asarray(float(state.seed))))

    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries:
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(5) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a CMVAE checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        table = []
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            table.append((name, shape))
        out = {}
        for name, shape in table:
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
            out[name] = arr.reshape(shape) if shape else arr.reshape(())
    return out


def restore_state(cfg: RunConfig, path: str) -> TrainState:
    arrays = read_checkpoint(path)
    model = build_model_from_config(cfg)
    for k in model.params:
        if k not in arrays:
            raise ValueError(f"checkpoint missing parameter {k!r}")
        model.params[k] = Tensor.param(arrays[k].copy(), name=k)
    opt = Adam(model.params, cfg.optimizer)
    for k in opt.m:
        opt.m[k] = arrays[f"adam.m.{k}"].copy()
        opt.v[k] = arrays[f"adam.v.{k}"].copy()
    opt.t = int(arrays["trainer.adam_t"])
    return TrainState(step=int(arrays["trainer.step"]), model=model, optimizer=opt,
                      seed=int(arrays["trainer.seed"]))


# -- dataset / model assembly -----------------------------------------------------------


def build_dataset(cfg: RunConfig) -> PairedDataset:
    ds = make_related_dataset(cfg.dataset.factors, cfg.dataset.items_per_modality,
                              cfg.dataset.seed, cfg.dataset.pairs_per_instance)
    if cfg.dataset.percent < 100.0:
        ds = subset(ds, cfg.dataset.percent, seed=cfg.dataset.seed)
    return ds


def build_model_from_config(cfg: RunConfig) -> MultimodalModel:
    f = cfg.dataset.factors
    modalities = [ModalitySpec(name, f.obs_dims[i], f.likelihoods[i])
                  for i, name in enumerate(f.modality_names)]
    return build_model(modalities, latent_dim=cfg.model.latent_dim,
                       hidden_dim=cfg.model.hidden_dim, num_hidden=cfg.model.num_hidden,
                       joint_kind=cfg.model.joint_kind, seed=cfg.model.init_seed)


def _format(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return ""
    return repr(float(x))


def _eval_dataset(cfg: RunConfig) -> tuple[PairedDataset, PairedDataset]:
    """Held-out related and randomly-mixed sets for metric rows."""
    from .data import generate_unimodal, pair_related, pair_random
    f = cfg.dataset.factors
    n = cfg.eval_items
    seed = cfg.dataset.seed + 7919
    x = generate_unimodal(f, n, f.modality_names[0], seed)
    y = generate_unimodal(f, n, f.modality_names[1], seed + 1)
    return (pair_related(f, x, y, pairs_per_instance=1, seed=seed),
            pair_random(f, x, y, seed=seed + 2))


def evaluate_model(model, cfg: RunConfig, step: int) -> dict:
    """One metrics row: accuracies, coherences, and PMI separation."""
    related, mixed = _eval_dataset(cfg)
    oracles = evaluation.oracle_classifiers(cfg.dataset.factors)
    names = list(cfg.dataset.factors.modality_names)
    seed = cfg.seed + 104729

    acc = evaluation.latent_accuracy(model, related, seed=seed)
    cross = evaluation.cross_coherence(model, related, oracles, seed=seed)
    joint = evaluation.joint_coherence(model, cfg.eval_items, oracles, seed=seed)
    if model.joint_kind == "moe":
        synergy = math.nan
    else:
        synergy = evaluation.synergy_coherence(model, related, oracles, seed=seed)

    scores = relatedness.score_dataset(model, mixed, cfg.objective.term1.num_samples, seed)
    rel = mixed.related.astype(bool)
    mean_rel = float(scores[rel].mean()) if rel.any() else math.nan
    mean_unrel = float(scores[~rel].mean()) if (~rel).any() else math.nan

    return {
        "run_id": cfg.run_id,
        "step": step,
        "latent_acc_m1": acc[names[0]],
        "latent_acc_m2": acc[names[1]],
        "joint_coh": joint,
        "cross_coh_12": cross[f"{names[0]}->{names[1]}"],
        "cross_coh_21": cross[f"{names[1]}->{names[0]}"],
        "synergy_coh": synergy,
        "mean_pmi_related": mean_rel,
        "mean_pmi_unrelated": mean_unrel,
    }


METRICS_COLUMNS = ["run_id", "step", "latent_acc_m1", "latent_acc_m2", "joint_coh",
                   "cross_coh_12", "cross_coh_21", "synergy_coh",
                   "mean_pmi_related", "mean_pmi_unrelated"]


def _append_metrics_row(path: str, row: dict) -> None:
    new = not os.path.exists(path)
    with open(path, "a") as fh:
        if new:
            fh.write(METRICS_SCHEMA + "\n")
            fh.write(",".join(METRICS_COLUMNS) + "\n")
        cells = [str(row["run_id"]), str(row["step"])]
        cells += [_format(row[c]) for c in METRICS_COLUMNS[2:]]
        fh.write(",".join(cells) + "\n")


# -- training loop -------------------------------------------------------------------------


def train(cfg: RunConfig, dataset: PairedDataset | None = None,
          state: TrainState | None = None, extra_steps: int | None = None,
          evaluate: bool = True) -> TrainState:
    """Minimize the configured objective; write train/metrics CSVs and checkpoints.

    Passing an existing state continues training on (possibly) a new
    dataset; extra_steps then bounds the continuation rather than the
    config's step budget.
    """
    os.makedirs(cfg.output_dir, exist_ok=True)
    ds = dataset if dataset is not None else build_dataset(cfg)
    if state is None:
        model = build_model_from_config(cfg)
        state = TrainState(step=0, model=model, optimizer=Adam(model.params, cfg.optimizer),
                           seed=cfg.seed)
    model, opt = state.model, state.optimizer

    names = list(ds.spec.modality_names)
    num_pairs = len(ds)
    batch_size = min(cfg.optimizer.batch_size, num_pairs)
    steps = extra_steps if extra_steps is not None else cfg.optimizer.steps
    first, last = state.step, state.step + steps

    log_path = os.path.join(cfg.output_dir, f"{cfg.run_id}.train.csv")
    metrics_path = os.path.join(cfg.output_dir, f"{cfg.run_id}.metrics.csv")
    ckpt_path = os.path.join(cfg.output_dir, f"{cfg.run_id}.ckpt")
    last_good: str | None = os.path.join(cfg.output_dir, f"{cfg.run_id}.step{first}.ckpt")
    save_checkpoint(state, last_good)

    log_new = not os.path.exists(log_path)
    with open(log_path, "a") as log:
        if log_new:
            log.write(TRAINLOG_SCHEMA + "\n")
            log.write("step,loss,term1,term2\n")
        for step in range(first, last):
            batch_rows = derive_rng(state.seed, tag("batch"), step).choice(
                num_pairs, size=batch_size, replace=False)
            obs = ds.pair_observations(batch_rows)
            step_seed = int(derive_rng(state.seed, tag("step_noise"), step).integers(1 << 62))
            zero_grads(model.params)
            loss, term1, term2 = final_objective(model, obs, cfg.objective, step_seed)
            if not np.isfinite(loss.value):
                raise NumericalAbort(step, last_good)
            grads = backward(loss, model.params)
            opt.step(grads)
            state.step = step + 1
            log.write(f"{step},{_format(float(loss.value))},{_format(term1)},{_format(term2)}\n")

            if cfg.eval_every and state.step % cfg.eval_every == 0:
                save_checkpoint(state, ckpt_path)
                last_good = ckpt_path
                if evaluate:
                    _append_metrics_row(metrics_path, evaluate_model(model, cfg, state.step))

    save_checkpoint(state, ckpt_path)
    if evaluate and (cfg.eval_every == 0 or state.step % cfg.eval_every != 0 or steps == 0):
        _append_metrics_row(metrics_path, evaluate_model(model, cfg, state.step))
    return state


def mean_heldout_loglik(model, cfg: RunConfig, num_samples: int = 30) -> float:
    """IWAE estimate of the joint log-likelihood on held-out related pairs."""
    related, _ = _eval_dataset(cfg)
    names = list(related.spec.modality_names)
    obs = related.pair_observations()
    vals = iwae(model, obs[names[0]], obs[names[1]], num_samples, cfg.seed + 13).value
    return float(vals.mean())


# -- experiment drivers -----------------------------------------------------------------------


def sweep_gamma(cfg: RunConfig, gammas: list[float], out_path: str) -> list[dict]:
    """Full train + eval per gamma with shared seeds; long-format CSV."""
    rows = []
    with open(out_path, "w") as fh:
        fh.write(SWEEP_SCHEMA + "\n")
        fh.write("gamma,step," + ",".join(METRICS_COLUMNS[2:]) + ",mean_test_loglik\n")
        for gamma in gammas:
            rcfg = replace(cfg,
                           run_id=f"{cfg.run_id}-g{gamma}",
                           objective=replace(cfg.objective, gamma=float(gamma)),
                           output_dir=os.path.join(cfg.output_dir, f"gamma={gamma}"))
            state = train(rcfg, evaluate=False)
            row = evaluate_model(state.model, rcfg, state.step)
            row["gamma"] = gamma
            row["mean_test_loglik"] = mean_heldout_loglik(state.model, rcfg)
            rows.append(row)
            cells = [_format(float(gamma)), str(row["step"])]
            cells += [_format(row[c]) for c in METRICS_COLUMNS[2:]]
            cells.append(_format(row["mean_test_loglik"]))
            fh.write(",".join(cells) + "\n")
    return rows


def sweep_data_fraction(cfg: RunConfig, percents: list[float], variants: list[str],
                        out_path: str, seeds: list[int] | None = None) -> list[dict]:
    """Cross product of variants x percents x paired seeds; long-format CSV."""
    seeds = seeds if seeds is not None else [cfg.seed]
    rows = []
    with open(out_path, "w") as fh:
        fh.write(SWEEP_SCHEMA + "\n")
        fh.write("variant,percent,seed,step," + ",".join(METRICS_COLUMNS[2:]) + "\n")
        for variant in variants:
            for percent in percents:
                for seed in seeds:
                    rcfg = config_for_variant(cfg, variant)
                    rcfg = replace(
                        rcfg,
                        run_id=f"{cfg.run_id}-{variant}-p{percent}-s{seed}",
                        seed=seed,
                        dataset=replace(cfg.dataset, percent=float(percent), seed=seed),
                        model=replace(cfg.model, init_seed=seed),
                        output_dir=os.path.join(cfg.output_dir, f"{variant}-p{percent}-s{seed}"))
                    state = train(rcfg, evaluate=False)
                    row = evaluate_model(state.model, rcfg, state.step)
                    row.update({"variant": variant, "percent": percent, "seed": seed})
                    rows.append(row)
                    cells = [variant, _format(float(percent)), str(seed), str(row["step"])]
                    cells += [_format(row[c]) for c in METRICS_COLUMNS[2:]]
                    fh.write(",".join(cells) + "\n")
    return rows


def run_pipeline(cfg: RunConfig, pcfg: relatedness.PropagationConfig) -> tuple[relatedness.PropagationReport, dict]:
    """Pretrain on the small related split, fit a PMI threshold, propagate,
    continue training on the union, and report before/after metrics."""
    stage = "carve"
    try:
        full_related = build_dataset(replace(cfg, dataset=replace(cfg.dataset, percent=100.0)))
        small_related, small_mixed, full_mixed = relatedness.carve_pipeline_datasets(
            full_related, pcfg.pretrain_percent, seed=cfg.seed)

        stage = "pretrain"
        state = train(cfg, dataset=small_related, evaluate=False)
        before = evaluate_model(state.model, cfg, state.step)

        if pcfg.pretrain_percent >= 100.0 or len(full_mixed) == 0:
            report = relatedness.PropagationReport(
                threshold=math.nan, predicted=np.zeros(0, dtype=np.uint8),
                precision=math.nan, recall=math.nan, f1=math.nan,
                metrics_before=before, metrics_after=before)
            return report, {"stage": "empty-remainder"}

        stage = "threshold"
        scores = relatedness.score_dataset(state.model, small_mixed,
                                           pcfg.pmi_num_samples, cfg.seed + 31)
        threshold = relatedness.estimate_threshold(scores, small_mixed.related,
                                                   rule=pcfg.threshold_rule)

        stage = "propagate"
        predicted, quality = relatedness.propagate(state.model, full_mixed, threshold,
                                                   pcfg.pmi_num_samples, cfg.seed + 37)

        after = before
        if pcfg.continue_training:
            stage = "continue"
            merged = relatedness.merge_predicted(small_related, full_mixed, predicted)
            state = train(cfg, dataset=merged, state=state,
                          extra_steps=cfg.optimizer.steps, evaluate=False)
            after = evaluate_model(state.model, cfg, state.step)

        report = relatedness.PropagationReport(
            threshold=quality["threshold"], predicted=predicted,
            precision=quality["precision"], recall=quality["recall"], f1=quality["f1"],
            metrics_before=before, metrics_after=after)
        return report, {"stage": "done", "state": state}
    except NumericalAbort:
        raise
    except Exception as exc:
        raise RuntimeError(f"propagation pipeline failed at stage {stage!r}: {exc}") from exc
