"""Training loops, evaluation reports, benchmarking and checkpoint/resume.

The magnet loop follows: sample neighbourhood -> forward -> minibatch loss ->
backward -> SGD step -> cache example losses, rebuilding the cluster index
from a frozen snapshot every ``refresh_interval`` iterations and keeping a
running average of the minibatch variance for evaluation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import losses as L
from .config import ExperimentConfig
from .data import Dataset, MixtureSpec, generate_mixture, load_dataset, split
from .errors import ConfigurationError, ContractError
from .evaluate import EvalContext, SigmaTracker, classify_batch, error_rate
from .index import ClusterIndex, build_index
from .model import EmbeddingModel
from .sampler import sample_neighbourhood, sample_triplets


@dataclass
class MetricsRow:
    iteration: int
    train_loss: float
    val_error: Optional[float] = None


@dataclass
class TrainResult:
    model: EmbeddingModel
    index: Optional[ClusterIndex]
    metrics: List[MetricsRow]
    sigma2: float
    head: Optional[L.LinearHead] = None
    ncm: Optional[L.NcmModel] = None
    train_data: Dataset = None
    test_data: Dataset = None


def resolve_datasets(config: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    """Load or generate the train/test datasets named by the config."""
    if config.dataset is not None:
        full = load_dataset(config.dataset, attributes_path=config.dataset_attributes)
    elif config.mixture_spec is not None:
        full = generate_mixture(MixtureSpec.from_json(config.mixture_spec), seed=config.seed)
    else:
        raise ConfigurationError("config must name either 'dataset' or 'mixture_spec'")
    return split(full, config.test_fraction, seed=config.seed)


def train(
    config: ExperimentConfig,
    train_data: Optional[Dataset] = None,
    test_data: Optional[Dataset] = None,
    resume_state: Optional[dict] = None,
    checkpoint_dir: Optional[Path] = None,
) -> TrainResult:
    """Run the configured objective; deterministic given config and seed.

    ``checkpoint_dir`` enables resumable state dumps at index-refresh
    boundaries; ``resume_state`` (from :func:`load_training_state`) continues
    an interrupted run with an identical seed stream.
    """
    if train_data is None or test_data is None:
        train_data, test_data = resolve_datasets(config)
    runner = {
        "magnet": _train_magnet,
        "triplet": _train_triplet,
        "nca": _train_nca,
        "softmax": _train_softmax,
        "ncm": _train_ncm,
        "ncmc": _train_ncm,
    }[config.objective]
    return runner(config, train_data, test_data, resume_state, checkpoint_dir)


def _abort_non_finite(loss, iteration, batch_payload):
    raise ContractError(
        "non-finite loss at iteration %d; offending batch: %s"
        % (iteration, json.dumps(batch_payload))
    )


def _eval_seed(config: ExperimentConfig, iteration: int) -> int:
    # evaluation must not consume the training rng stream
    return (config.seed * 1_000_003 + iteration) % (2**31)


def _train_magnet(config, train_data, test_data, resume_state, checkpoint_dir):
    cfg = L.MagnetConfig(alpha=config.alpha)
    opt = config.optimizer()
    sigma = SigmaTracker(decay=config.sigma_decay)
    metrics: List[MetricsRow] = []
    start = 0

    if resume_state is not None:
        model = resume_state["model"]
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_state["rng_state"]
        sigma.value = resume_state["sigma2"]
        start = resume_state["iteration"]
        metrics = resume_state["metrics"]
        prev_cache = resume_state["loss_cache"]
        index = build_index(
            model.snapshot(), train_data, k=config.k,
            seed=int(rng.integers(2**31)), built_at_iteration=start,
        )
        if prev_cache is not None:
            index.loss_cache = prev_cache
    else:
        model = EmbeddingModel(config.layer_dims, seed=config.seed)
        rng = np.random.default_rng(config.seed)
        index = build_index(
            model.snapshot(), train_data, k=config.k,
            seed=int(rng.integers(2**31)), built_at_iteration=0,
        )

    for it in range(start, config.iterations):
        # skip the rebuild at the resume iteration itself: the index was just
        # rebuilt above with the rng draw the saved state expects
        if it > start and it % config.refresh_interval == 0:
            if checkpoint_dir is not None:
                _save_training_state(
                    checkpoint_dir, config, model, rng, sigma, it, metrics, index
                )
            index = build_index(
                model.snapshot(), train_data, k=config.k,
                seed=int(rng.integers(2**31)),
                previous=index, built_at_iteration=it,
            )
        nb = sample_neighbourhood(index, train_data, config.m, config.d, rng)
        reps, trace = model.forward(nb.inputs)
        result = L.magnet_minibatch_loss(
            reps, nb.example_clusters, nb.cluster_classes, cfg
        )
        if not np.isfinite(result.mean_loss):
            _abort_non_finite(result.mean_loss, it, {
                "examples": nb.example_indices.tolist(),
                "clusters": [list(map(int, c)) for c in nb.clusters],
            })
        model.sgd_step(model.backward(trace, result.rep_grads), opt, it)
        index.update_loss_cache(zip(nb.example_indices, result.example_losses))
        sigma.update(result.batch_variance)

        row = MetricsRow(it, result.mean_loss)
        if (it + 1) % config.eval_interval == 0:
            row.val_error = _magnet_val_error(config, model, train_data, test_data, sigma, it)
        metrics.append(row)

    if sigma.value is None:
        sigma.update(index.variance)
    if checkpoint_dir is not None:
        _save_training_state(
            checkpoint_dir, config, model, rng, sigma, config.iterations, metrics, index
        )
    return TrainResult(model, index, metrics, sigma.value, train_data=train_data, test_data=test_data)


def _magnet_val_error(config, model, train_data, test_data, sigma, iteration):
    snapshot = model.snapshot()
    idx = build_index(snapshot, train_data, k=config.k, seed=_eval_seed(config, iteration))
    sigma2 = sigma.value if sigma.value else idx.variance
    ctx = EvalContext(idx.centers, idx.cluster_classes, sigma2, l=config.eval_l)
    return error_rate(classify_batch(ctx, snapshot.embed(test_data.inputs)), test_data.labels)


def _reference_sigma2(reps, labels) -> float:
    """Variance of representations about their class means, (N-1) divisor."""
    labels = np.asarray(labels)
    total = 0.0
    for c in np.unique(labels):
        members = reps[labels == c]
        resid = members - members.mean(axis=0)
        total += float(np.einsum("ij,ij->i", resid, resid).sum())
    return max(total / max(len(reps) - 1, 1), L.VARIANCE_FLOOR)


def _train_triplet(config, train_data, test_data, resume_state, checkpoint_dir):
    opt = config.optimizer()
    metrics: List[MetricsRow] = []
    start = 0
    if resume_state is not None:
        model = resume_state["model"]
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_state["rng_state"]
        start = resume_state["iteration"]
        metrics = resume_state["metrics"]
    else:
        model = EmbeddingModel(config.layer_dims, seed=config.seed)
        rng = np.random.default_rng(config.seed)

    mined_reps = model.embed(train_data.inputs)
    for it in range(start, config.iterations):
        if it % config.refresh_interval == 0:
            if it > 0 and checkpoint_dir is not None:
                _save_training_state(checkpoint_dir, config, model, rng, None, it, metrics, None)
            mined_reps = model.embed(train_data.inputs)
        count = max(config.batch_size, 1)
        seeds, pos, neg = sample_triplets(
            mined_reps, train_data.labels, count, config.impostor_fraction, rng
        )
        stacked = np.concatenate([seeds, pos, neg])
        reps, trace = model.forward(train_data.inputs[stacked])
        r_s, r_p, r_n = reps[:count], reps[count : 2 * count], reps[2 * count :]
        result = L.triplet_loss(r_s, r_p, r_n, config.alpha)
        if not np.isfinite(result.mean_loss):
            _abort_non_finite(result.mean_loss, it, {"triplets": stacked.tolist()})
        rep_grads = np.concatenate(
            [result.seed_grads, result.positive_grads, result.negative_grads]
        )
        model.sgd_step(model.backward(trace, rep_grads), opt, it)

        row = MetricsRow(it, result.mean_loss)
        if (it + 1) % config.eval_interval == 0:
            row.val_error = _knn_val_error(config, model, train_data, test_data)
        metrics.append(row)

    if checkpoint_dir is not None:
        _save_training_state(checkpoint_dir, config, model, rng, None, config.iterations, metrics, None)
    reps = model.embed(train_data.inputs)
    sigma2 = _reference_sigma2(reps, train_data.labels)
    return TrainResult(model, None, metrics, sigma2, train_data=train_data, test_data=test_data)


def _knn_val_error(config, model, train_data, test_data):
    snapshot = model.snapshot()
    reps = snapshot.embed(train_data.inputs)
    ctx = EvalContext(
        reps, train_data.labels, _reference_sigma2(reps, train_data.labels), l=config.eval_l
    )
    return error_rate(classify_batch(ctx, snapshot.embed(test_data.inputs)), test_data.labels)


def _train_nca(config, train_data, test_data, resume_state, checkpoint_dir):
    opt = config.optimizer()
    metrics: List[MetricsRow] = []
    start = 0
    if resume_state is not None:
        model = resume_state["model"]
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_state["rng_state"]
        start = resume_state["iteration"]
        metrics = resume_state["metrics"]
    else:
        model = EmbeddingModel(config.layer_dims, seed=config.seed)
        rng = np.random.default_rng(config.seed)

    labels = train_data.labels
    pairable = [np.flatnonzero(labels == c) for c in range(train_data.class_count)]
    pairable = [m for m in pairable if len(m) >= 2]
    if not pairable:
        raise ConfigurationError("nca requires a class with at least two examples")

    for it in range(start, config.iterations):
        if checkpoint_dir is not None and it > 0 and it % config.refresh_interval == 0:
            _save_training_state(checkpoint_dir, config, model, rng, None, it, metrics, None)
        # sample same-class pairs so every example has a peer
        batch = []
        for _ in range(max(config.batch_size // 2, 1)):
            members = pairable[int(rng.integers(len(pairable)))]
            batch.extend(rng.choice(members, size=2, replace=False).tolist())
        batch = np.asarray(batch)
        reps, trace = model.forward(train_data.inputs[batch])
        result = L.nca_loss(reps, labels[batch])
        if not np.isfinite(result.mean_loss):
            _abort_non_finite(result.mean_loss, it, {"examples": batch.tolist()})
        model.sgd_step(model.backward(trace, result.rep_grads), opt, it)

        row = MetricsRow(it, result.mean_loss)
        if (it + 1) % config.eval_interval == 0:
            row.val_error = _knn_val_error(config, model, train_data, test_data)
        metrics.append(row)

    if checkpoint_dir is not None:
        _save_training_state(checkpoint_dir, config, model, rng, None, config.iterations, metrics, None)
    reps = model.embed(train_data.inputs)
    sigma2 = _reference_sigma2(reps, train_data.labels)
    return TrainResult(model, None, metrics, sigma2, train_data=train_data, test_data=test_data)


def _train_softmax(config, train_data, test_data, resume_state, checkpoint_dir):
    opt = config.optimizer()
    metrics: List[MetricsRow] = []
    start = 0
    if resume_state is not None:
        model = resume_state["model"]
        head = resume_state["head"]
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_state["rng_state"]
        start = resume_state["iteration"]
        metrics = resume_state["metrics"]
    else:
        model = EmbeddingModel(config.layer_dims, seed=config.seed)
        head = L.LinearHead.create(model.output_dim, train_data.class_count, seed=config.seed + 1)
        rng = np.random.default_rng(config.seed)

    n = train_data.size
    for it in range(start, config.iterations):
        if checkpoint_dir is not None and it > 0 and it % config.refresh_interval == 0:
            _save_training_state(checkpoint_dir, config, model, rng, None, it, metrics, None, head=head)
        batch = rng.choice(n, size=min(config.batch_size, n), replace=False)
        reps, trace = model.forward(train_data.inputs[batch])
        loss, rep_grads, grad_w, grad_b = head.loss_and_grads(reps, train_data.labels[batch])
        if not np.isfinite(loss):
            _abort_non_finite(loss, it, {"examples": batch.tolist()})
        model.sgd_step(model.backward(trace, rep_grads), opt, it)
        head.sgd_step(grad_w, grad_b, opt, it)

        row = MetricsRow(it, loss)
        if (it + 1) % config.eval_interval == 0:
            snapshot = model.snapshot()
            logits = snapshot.embed(test_data.inputs) @ head.w.T + head.b
            row.val_error = error_rate(logits.argmax(axis=1), test_data.labels)
        metrics.append(row)

    if checkpoint_dir is not None:
        _save_training_state(
            checkpoint_dir, config, model, rng, None, config.iterations, metrics, None, head=head
        )
    reps = model.embed(train_data.inputs)
    sigma2 = _reference_sigma2(reps, train_data.labels)
    return TrainResult(model, None, metrics, sigma2, head=head, train_data=train_data, test_data=test_data)


def _train_ncm(config, train_data, test_data, resume_state, checkpoint_dir):
    opt = config.optimizer()
    out_dim = config.layer_dims[-1]
    if config.objective == "ncmc":
        ncm = L.NcmModel.fit_centroids(
            train_data.inputs, train_data.labels, out_dim, k=config.ncm_k, seed=config.seed
        )
    else:
        ncm = L.NcmModel.fit_means(train_data.inputs, train_data.labels, out_dim, seed=config.seed)

    velocity = np.zeros_like(ncm.w)
    metrics: List[MetricsRow] = []
    for it in range(config.iterations):
        loss, grad_w = L.ncm_loss(ncm, train_data.inputs, train_data.labels)
        if not np.isfinite(loss):
            _abort_non_finite(loss, it, {"full_batch": True})
        rate = opt.learning_rate * opt.anneal_factor ** (it // opt.epoch_length)
        velocity = opt.momentum * velocity - rate * grad_w
        ncm.w = ncm.w + velocity

        row = MetricsRow(it, loss)
        if (it + 1) % config.eval_interval == 0:
            row.val_error = error_rate(L.ncm_classify(ncm, test_data.inputs), test_data.labels)
        metrics.append(row)

    # expose the learned linear map as a bias-free single-layer embedding model
    model = EmbeddingModel([train_data.dim, out_dim], seed=0)
    model.weights[0] = ncm.w.copy()
    model.biases[0][:] = 0.0
    reps = model.embed(train_data.inputs)
    sigma2 = _reference_sigma2(reps, train_data.labels)
    return TrainResult(model, None, metrics, sigma2, ncm=ncm, train_data=train_data, test_data=test_data)


# -- reports ----------------------------------------------------------------

def build_report(config: ExperimentConfig, result: TrainResult) -> dict:
    """Evaluation report: error rate, confusion counts, optional extras."""
    train_data, test_data = result.train_data, result.test_data
    model = result.model
    objective = config.objective
    if objective == "magnet":
        idx = build_index(model.snapshot(), train_data, k=config.k, seed=_eval_seed(config, -1))
        ctx = EvalContext(idx.centers, idx.cluster_classes, result.sigma2, l=config.eval_l)
        preds = classify_batch(ctx, model.embed(test_data.inputs))
        metric = "knc"
    elif objective in ("triplet", "nca"):
        reps = model.embed(train_data.inputs)
        ctx = EvalContext(reps, train_data.labels, result.sigma2, l=config.eval_l)
        preds = classify_batch(ctx, model.embed(test_data.inputs))
        metric = "soft_knn"
    elif objective == "softmax":
        logits = model.embed(test_data.inputs) @ result.head.w.T + result.head.b
        preds = logits.argmax(axis=1)
        metric = "argmax_logits"
    else:  # ncm / ncmc
        preds = L.ncm_classify(result.ncm, test_data.inputs)
        metric = "nearest_class_mean"

    c = max(train_data.class_count, test_data.class_count)
    confusion = np.zeros((c, c), dtype=int)
    for t, p in zip(test_data.labels, preds):
        confusion[int(t), int(p)] += 1
    report = {
        "objective": objective,
        "metric": metric,
        "error_rate": error_rate(preds, test_data.labels),
        "confusion": confusion.tolist(),
        "sigma2": result.sigma2,
    }
    if test_data.attributes is not None:
        from .evaluate import attribute_precision

        reps = model.embed(test_data.inputs)
        sizes = [s for s in (5, 10, 20) if s < test_data.size]
        report["attribute_precision"] = {
            str(k): v for k, v in attribute_precision(reps, test_data.attributes, sizes).items()
        }
    return report


def write_metrics_csv(metrics: List[MetricsRow], path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "train_loss", "val_error"])
        for row in metrics:
            writer.writerow([
                row.iteration,
                repr(row.train_loss),
                "" if row.val_error is None else repr(row.val_error),
            ])


# -- benchmarking ------------------------------------------------------------

@dataclass
class BenchRow:
    objective: str
    iterations_to_target: Optional[int]
    asymptotic_error: float
    ratio_to_first: Optional[float] = None


def bench(
    configs: List[ExperimentConfig],
    target_error: float,
    train_data: Optional[Dataset] = None,
    test_data: Optional[Dataset] = None,
) -> List[BenchRow]:
    """Run each config and report the first iteration whose validation error
    reaches the target, plus the final-quarter mean error."""
    rows = []
    for config in configs:
        result = train(config, train_data, test_data)
        evals = [(r.iteration, r.val_error) for r in result.metrics if r.val_error is not None]
        if not evals:
            raise ConfigurationError("bench requires eval_interval <= iterations")
        reached = next((it for it, err in evals if err <= target_error), None)
        tail = evals[-max(1, len(evals) // 4):]
        rows.append(BenchRow(
            objective=config.objective,
            iterations_to_target=reached,
            asymptotic_error=float(np.mean([e for _, e in tail])),
        ))
    base = rows[0].iterations_to_target
    for row in rows:
        if base is not None and row.iterations_to_target is not None and base > 0:
            row.ratio_to_first = row.iterations_to_target / base
    return rows


# -- resumable training state ------------------------------------------------

def _save_training_state(outdir, config, model, rng, sigma, iteration, metrics, index, head=None):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    model.save(outdir / "checkpoint.bin")
    state = {
        "iteration": iteration,
        "rng_state": rng.bit_generator.state,
        "sigma2": None if sigma is None else sigma.value,
        "loss_cache": None if index is None else [
            None if np.isnan(v) else float(v) for v in index.loss_cache
        ],
        "metrics": [[r.iteration, r.train_loss, r.val_error] for r in metrics],
        "w_velocity": [v.tolist() for v in model.w_velocity],
        "b_velocity": [v.tolist() for v in model.b_velocity],
        "head": None if head is None else {
            "w": head.w.tolist(), "b": head.b.tolist(),
            "w_velocity": head.w_velocity.tolist(), "b_velocity": head.b_velocity.tolist(),
        },
    }
    (outdir / "training_state.json").write_text(json.dumps(state))


def load_training_state(outdir) -> dict:
    outdir = Path(outdir)
    model = EmbeddingModel.load(outdir / "checkpoint.bin")
    raw = json.loads((outdir / "training_state.json").read_text())
    model.w_velocity = [np.asarray(v) for v in raw["w_velocity"]]
    model.b_velocity = [np.asarray(v) for v in raw["b_velocity"]]
    state = {
        "model": model,
        "iteration": raw["iteration"],
        "rng_state": raw["rng_state"],
        "sigma2": raw["sigma2"],
        "loss_cache": None if raw["loss_cache"] is None else np.asarray(
            [np.nan if v is None else v for v in raw["loss_cache"]]
        ),
        "metrics": [MetricsRow(it, loss, err) for it, loss, err in raw["metrics"]],
    }
    if raw.get("head") is not None:
        head = L.LinearHead(
            w=np.asarray(raw["head"]["w"]), b=np.asarray(raw["head"]["b"]),
            w_velocity=np.asarray(raw["head"]["w_velocity"]),
            b_velocity=np.asarray(raw["head"]["b_velocity"]),
        )
        state["head"] = head
    return state
