"""Desk-scale federated backdoor simulator.

The task is synthetic bag-of-tokens classification.  Each class owns a block
of signal tokens; a sentence of class ``c`` holds more class-``c`` signal
tokens than any other class, padded with neutral filler tokens.  A handful of
reserved tokens never appear in clean text and serve as backdoor triggers.

The model is an embedding-bag classifier: mean or max pooling of the token
embeddings followed by a linear head.  Its flat weight vector is laid out as

    [embedding table (V x e, row-major) | head W (e x C, row-major) | bias (C)]

so the trigger token's embedding row is a contiguous block of ``e`` weights.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from dimkrum import aggregators as agg_mod
from dimkrum.attacks import (
    AttackHook,
    last_extrapolation_anchor,
    poison_dataset,
    triggered_test_set,
)
from dimkrum.config import ExperimentConfig
from dimkrum.core import AggregationOutcome, ClientRoundSet, ContractError, ServerState, apply_update
from dimkrum.krum import DimKrumConfig, KrumAggregator

log = logging.getLogger(__name__)

SELECTION_AGGREGATORS = ("krum", "multikrum", "bulyan", "dimkrum")


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------- task


@dataclass(frozen=True)
class ToyTask:
    vocab_size: int
    num_classes: int
    signal_tokens_per_class: int
    sentence_length: int
    trigger_tokens: tuple[int, ...]
    seed: int

    def signal_tokens(self, c: int) -> np.ndarray:
        s = self.signal_tokens_per_class
        return np.arange(c * s, (c + 1) * s)

    @cached_property
    def filler_tokens(self) -> np.ndarray:
        lo = self.num_classes * self.signal_tokens_per_class
        return np.setdiff1d(np.arange(lo, self.vocab_size), self.trigger_tokens)

    @property
    def filler_mask(self) -> np.ndarray:
        m = np.zeros(self.vocab_size, dtype=bool)
        m[self.filler_tokens] = True
        return m

    def label_of(self, sentence: np.ndarray) -> int:
        """Class whose signal tokens are most frequent in ``sentence``."""
        s = self.signal_tokens_per_class
        counts = np.bincount(sentence[sentence < self.num_classes * s] // s, minlength=self.num_classes)
        return int(np.argmax(counts))


@dataclass
class ClientDataset:
    sentences: np.ndarray
    labels: np.ndarray
    poisoned_mask: np.ndarray = None

    def __post_init__(self):
        self.sentences = np.asarray(self.sentences, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.poisoned_mask is None:
            self.poisoned_mask = np.zeros(len(self.labels), dtype=bool)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ClientDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ClientDataset(self.sentences[idx], self.labels[idx], self.poisoned_mask[idx])


def _sample_sentence(task: ToyTask, label: int, rng: np.random.Generator) -> np.ndarray:
    L = task.sentence_length
    own = int(rng.integers(3, 6))
    parts = [rng.choice(task.signal_tokens(label), size=own)]
    for c in range(task.num_classes):
        if c != label:
            # at most own - 2 tokens of any other class keeps the label unambiguous
            k = int(rng.integers(0, min(2, own - 2) + 1))
            parts.append(rng.choice(task.signal_tokens(c), size=k))
    sig = np.concatenate(parts)
    fill = rng.choice(task.filler_tokens, size=L - sig.size)
    sent = np.concatenate([sig, fill])
    rng.shuffle(sent)
    return sent


def generate(task: ToyTask, size: int, rng: np.random.Generator) -> ClientDataset:
    labels = rng.integers(0, task.num_classes, size=size)
    sents = np.stack([_sample_sentence(task, int(y), rng) for y in labels])
    return ClientDataset(sents, labels)


def make_task(
    seed: int = 0,
    vocab_size: int = 200,
    num_classes: int = 2,
    sentence_length: int = 20,
    signal_tokens_per_class: int = 10,
    num_triggers: int = 5,
    train_size: int = 4000,
    test_size: int = 2000,
) -> tuple[ToyTask, ClientDataset, ClientDataset]:
    """Return ``(task, train, clean_test)``; triggers are the last ``num_triggers`` tokens."""
    fillers = vocab_size - num_classes * signal_tokens_per_class - num_triggers
    if fillers < 1:
        raise ContractError(
            f"vocabulary of {vocab_size} too small for {num_classes}x{signal_tokens_per_class} "
            f"signal tokens and {num_triggers} triggers"
        )
    if sentence_length < 10:
        raise ContractError("sentence_length must be at least 10")
    triggers = tuple(range(vocab_size - num_triggers, vocab_size))
    task = ToyTask(vocab_size, num_classes, signal_tokens_per_class, sentence_length, triggers, seed)
    rng = np.random.default_rng([seed, 0])
    return task, generate(task, train_size, rng), generate(task, test_size, rng)


# -------------------------------------------------------------------- model


@dataclass(frozen=True)
class ToyModel:
    """Embedding bag (mean or max pooling over token embeddings) plus a linear head."""

    vocab_size: int
    embed_dim: int
    num_classes: int
    pooling: str = "mean"

    def __post_init__(self):
        if self.pooling not in ("mean", "max"):
            raise ContractError(f"unknown pooling {self.pooling!r}")

    @property
    def dim(self) -> int:
        V, e, C = self.vocab_size, self.embed_dim, self.num_classes
        return V * e + e * C + C

    def embedding_row_slice(self, token: int) -> np.ndarray:
        e = self.embed_dim
        return np.arange(token * e, (token + 1) * e)

    def unflatten(self, w: np.ndarray):
        V, e, C = self.vocab_size, self.embed_dim, self.num_classes
        if w.shape != (self.dim,):
            raise ContractError(f"weights have shape {w.shape}, model expects ({self.dim},)")
        E = w[: V * e].reshape(V, e)
        W = w[V * e : V * e + e * C].reshape(e, C)
        b = w[V * e + e * C :]
        return E, W, b

    def flatten(self, E, W, b) -> np.ndarray:
        return np.concatenate([np.ravel(E), np.ravel(W), np.ravel(b)])

    def init_weights(self, rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
        E = rng.normal(0.0, scale, size=(self.vocab_size, self.embed_dim))
        W = rng.normal(0.0, scale, size=(self.embed_dim, self.num_classes))
        return self.flatten(E, W, np.zeros(self.num_classes))

    def _pool(self, E: np.ndarray, sents: np.ndarray):
        """Pooled features ``(B, e)`` and, for max pooling, the winning token per feature."""
        emb = E[sents]  # (B, L, e)
        if self.pooling == "mean":
            return emb.mean(axis=1), None
        arg = emb.argmax(axis=1)  # first maximal position wins ties
        b = np.arange(sents.shape[0])[:, None]
        return emb[b, arg, np.arange(self.embed_dim)], sents[b, arg]

    def logits(self, w: np.ndarray, data: "ClientDataset") -> np.ndarray:
        E, W, b = self.unflatten(w)
        H, _ = self._pool(E, data.sentences)
        return H @ W + b

    def sparse_grad(self, w: np.ndarray, data: "ClientDataset", rows):
        """Loss, embedding gradient as unsummed ``(flat_index, value)`` pairs, head gradient.

        Only embedding rows of tokens in the batch receive gradient, so the
        pairs are far shorter than the embedding table.  Repeated indices
        must be summed.
        """
        E, W, b = self.unflatten(w)
        sents = data.sentences[rows]
        labels = data.labels[rows]
        H, winners = self._pool(E, sents)
        z = H @ W + b
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        B = labels.shape[0]
        loss = -float(logp[np.arange(B), labels].mean())
        G = np.exp(logp)
        G[np.arange(B), labels] -= 1.0
        G /= B
        dH = G @ W.T
        e = self.embed_dim
        if self.pooling == "mean":
            L = sents.shape[1]
            idx = (sents[:, :, None] * e + np.arange(e)).ravel()
            vals = np.broadcast_to(dH[:, None, :] / L, (B, L, e)).ravel()
        else:
            idx = (winners * e + np.arange(e)).ravel()
            vals = dH.ravel()
        return loss, idx, vals, np.concatenate([(H.T @ G).ravel(), G.sum(axis=0)])

    def loss_and_grad(self, w: np.ndarray, data: "ClientDataset", rows) -> tuple[float, np.ndarray]:
        """Mean softmax cross-entropy over ``data[rows]`` and its dense gradient w.r.t. ``w``."""
        loss, idx, vals, g_head = self.sparse_grad(w, data, rows)
        gE = np.bincount(idx, weights=vals, minlength=self.vocab_size * self.embed_dim)
        return loss, np.concatenate([gE, g_head])

    def predict(self, w: np.ndarray, data: "ClientDataset") -> np.ndarray:
        return np.argmax(self.logits(w, data), axis=1)


# ------------------------------------------------------------ partitioning


def iid_split(size: int, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle, then cut into equal parts; the remainder goes to the lowest ids."""
    if size < n:
        raise ContractError(f"cannot split {size} instances over {n} clients")
    perm = rng.permutation(size)
    sizes = [size // n + (1 if i < size % n else 0) for i in range(n)]
    return [np.sort(p) for p in np.split(perm, np.cumsum(sizes)[:-1])]


def dirichlet_split(
    labels: np.ndarray, n: int, alpha: float, rng: np.random.Generator, max_tries: int = 1000
) -> tuple[list[np.ndarray], np.ndarray]:
    """Per class, split its instances across clients with ``Dirichlet(alpha)`` proportions.

    Returns the index lists and the ``(C, n)`` proportion matrix.  Draws that
    leave a client empty are redrawn.
    """
    labels = np.asarray(labels)
    if labels.size < n:
        raise ContractError(f"cannot split {labels.size} instances over {n} clients")
    classes = np.unique(labels)
    for _ in range(max_tries):
        props = rng.dirichlet(np.full(n, alpha), size=classes.size)
        parts = [[] for _ in range(n)]
        for c, q in zip(classes, props):
            idx = rng.permutation(np.flatnonzero(labels == c))
            cuts = np.round(np.cumsum(q)[:-1] * idx.size).astype(int)
            for i, chunk in enumerate(np.split(idx, cuts)):
                parts[i].append(chunk)
        out = [np.sort(np.concatenate(p)) for p in parts]
        if all(o.size > 0 for o in out):
            return out, props
    raise ContractError("could not draw a Dirichlet split giving every client data")


def partition(data: ClientDataset, n: int, mode: str, alpha_dirichlet: float, rng) -> list[ClientDataset]:
    if n < 2:
        raise ContractError("partition needs n >= 2")
    if mode == "iid":
        idx = iid_split(len(data), n, rng)
    elif mode == "dirichlet":
        idx, _ = dirichlet_split(data.labels, n, alpha_dirichlet, rng)
    else:
        raise ContractError(f"unknown partition mode {mode!r}")
    return [data.subset(i) for i in idx]


# ------------------------------------------------------- training and eval


OPTIMIZERS = ("sgd", "adam")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def local_train(
    model: ToyModel,
    weights: np.ndarray,
    data: ClientDataset,
    iters: int,
    lr: float,
    batch: int,
    rng: np.random.Generator,
    hook: AttackHook | None = None,
    optimizer: str = "sgd",
    adam_eps: float = ADAM_EPS,
) -> np.ndarray:
    """Mini-batch training from ``weights``; returns ``final - initial`` weights.

    ``optimizer`` is plain SGD or Adam with fresh moment estimates per call.
    """
    w0 = np.asarray(weights, dtype=np.float64)
    if w0.shape != (model.dim,):
        raise ContractError(f"weights have length {w0.shape}, model expects {model.dim}")
    if optimizer not in OPTIMIZERS:
        raise ContractError(f"unknown optimizer {optimizer!r}")
    w = w0.copy()
    N = len(data)
    adam = optimizer == "adam"
    if adam:
        m1 = np.zeros_like(w)
        m2 = np.zeros_like(w)
        b1, b2 = ADAM_BETAS
    # plain SGD without a hook only touches the rows seen in the batch
    sparse = not adam and hook is None
    head = slice(model.vocab_size * model.embed_dim, None)
    for step in range(iters):
        rows = rng.integers(0, N, size=batch)
        if sparse:
            loss, idx, vals, g_head = model.sparse_grad(w, data, rows)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at local step {step}")
            np.add.at(w, idx, -lr * vals)
            w[head] -= lr * g_head
            continue
        loss, g = model.loss_and_grad(w, data, rows)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at local step {step}")
        if hook is not None:
            g = hook.grad(w, g)
        if adam:
            m1 *= b1
            m1 += (1 - b1) * g
            m2 *= b2
            m2 += (1 - b2) * g * g
            t = step + 1
            w -= (lr / (1 - b1**t)) * m1 / (np.sqrt(m2 / (1 - b2**t)) + adam_eps)
        else:
            w -= lr * g
        if hook is not None:
            w = hook.project(w)
    update = w - w0
    if hook is not None:
        update = hook.finalize(update)
    if not np.all(np.isfinite(update)):
        raise TrainingDiverged("non-finite weights after local training")
    return update


def accuracy(model: ToyModel, weights: np.ndarray, data: ClientDataset) -> float:
    if len(data) == 0:
        raise ContractError("empty evaluation set")
    return float(np.mean(model.predict(weights, data) == data.labels))


def evaluate(model: ToyModel, weights, clean_test: ClientDataset, triggered_test: ClientDataset, target_label: int):
    """Clean accuracy and attack success rate (triggered non-target instances sent to the target)."""
    acc = accuracy(model, weights, clean_test)
    if len(triggered_test) == 0:
        raise ContractError("empty triggered test set")
    if np.any(triggered_test.labels == target_label):
        raise ContractError("triggered test set must exclude target-label instances")
    pred = model.predict(weights, triggered_test)
    return acc, float(np.mean(pred == target_label))


# ----------------------------------------------------------------- rounds


@dataclass
class RoundMetrics:
    round: int
    acc: float
    asr: float
    i_star: int | None = None
    selected: tuple[int, ...] | None = None
    malicious_excluded: bool | None = None


@dataclass
class ExperimentResult:
    metrics: list[RoundMetrics]
    malicious: tuple[int, ...]
    seed: int
    reports: list[dict] = field(default_factory=list)
    updates: list[ClientRoundSet] = field(default_factory=list)
    awp_max_ratio: float | None = None

    @property
    def final(self) -> RoundMetrics:
        return self.metrics[-1]

    @property
    def detection_rate(self) -> float | None:
        flags = [m.malicious_excluded for m in self.metrics if m.malicious_excluded is not None]
        return float(np.mean(flags)) if flags else None


class ServerAggregator:
    """Dispatches a round to the configured aggregation rule, keeping any cross-round state."""

    def __init__(self, cfg: ExperimentConfig, n: int, d: int, rng: np.random.Generator):
        a = cfg.aggregator
        self.name = a.name
        self.cfg = a
        self.rng = rng
        self.history = agg_mod.FoolsGoldHistory.zeros(n, d) if a.name == "foolsgold" else None
        self.krum = None
        if a.name in SELECTION_AGGREGATORS:
            kcfg = DimKrumConfig(rho=a.rho, alpha=a.alpha, lam=a.lam, variant=a.name)
            self.krum = KrumAggregator(kcfg, n, rng)
        self.crfl = agg_mod.CrflConfig(a.crfl_noise_std, a.crfl_bound_slope, a.crfl_bound_intercept)

    def __call__(self, rs: ClientRoundSet, server: ServerState, is_last_round: bool) -> AggregationOutcome:
        name = self.name
        if self.krum is not None:
            return self.krum(rs, is_last_round)
        if name == "fedavg":
            return agg_mod.fedavg(rs)
        if name == "median":
            return agg_mod.coordinate_median(rs)
        if name in ("rfa", "crfl"):
            out = agg_mod.geometric_median(rs, self.cfg.gm_tol, self.cfg.gm_max_iter)
            if name == "crfl":
                out.aggregate = agg_mod.crfl_postprocess(out.aggregate, server, self.crfl, self.rng, is_last_round)
            return out
        if name == "foolsgold":
            self.history = self.history.updated(rs)
            return agg_mod.foolsgold_weights(rs, self.history)
        if name == "residual":
            return agg_mod.residual_weights(rs)
        raise ContractError(f"unknown aggregator {name!r}")


def malicious_for_repeat(cfg: ExperimentConfig, repeat: int) -> tuple[int, ...]:
    """IID runs keep the configured attackers; Dirichlet runs rotate them with the repeat index."""
    base = cfg.malicious()
    if cfg.fed.partition == "dirichlet":
        n = cfg.fed.n_clients
        return tuple(sorted((i + repeat) % n for i in base))
    return base


def run_experiment(
    cfg: ExperimentConfig, repeat: int = 0, keep_updates: bool = False, on_round=None
) -> ExperimentResult:
    """Run ``cfg.fed.rounds`` rounds and evaluate after each.

    ``repeat`` picks the seed ``cfg.run.seed + repeat``; everything random
    (data, partition, init, local batches, server noise) derives from it.
    ``on_round(metrics, round_set, outcome)`` is called after every round.
    """
    t, f = cfg.task, cfg.fed
    seed = cfg.run.seed + repeat
    task, train, test = make_task(
        seed=t.seed * 100_003 + seed,
        vocab_size=t.vocab_size,
        num_classes=t.num_classes,
        sentence_length=t.sentence_length,
        signal_tokens_per_class=t.signal_tokens_per_class,
        num_triggers=t.num_triggers,
        train_size=t.train_size,
        test_size=t.test_size,
    )
    model = ToyModel(t.vocab_size, t.embed_dim, t.num_classes, t.pooling)
    spec = cfg.attack.resolve(task.trigger_tokens)
    adaptive = cfg.adaptive
    mal = malicious_for_repeat(cfg, repeat)
    n = f.n_clients

    setup_rng = np.random.default_rng([seed, 1])
    shards = partition(train, n, f.partition, f.alpha_dirichlet, setup_rng)
    poisoned = {i: poison_dataset(shards[i], spec, setup_rng, task.filler_mask) for i in mal}
    trig_test = triggered_test_set(test, spec, setup_rng, task.filler_mask)
    server = ServerState(model.init_weights(setup_rng), 0)
    prev_weights = server.weights.copy()
    aggregator = ServerAggregator(cfg, n, model.dim, np.random.default_rng([seed, 2]))

    result = ExperimentResult([], mal, seed)
    awp_seen = []
    for k in range(1, f.rounds + 1):
        is_last = k == f.rounds
        rows = []
        for i in range(n):
            rng = np.random.default_rng([seed, 3, k, i])
            if i in poisoned:
                hook = _build_hook(model, spec, adaptive, server.weights, prev_weights, shards[i], f, seed, k, i)
                rows.append(local_train(model, server.weights, poisoned[i], f.local_iters, f.lr, f.batch_size, rng, hook, f.optimizer, f.adam_eps))
                if adaptive.mode == "awp":
                    awp_seen.append(hook.max_ratio_seen)
            else:
                rows.append(local_train(model, server.weights, shards[i], f.local_iters, f.lr, f.batch_size, rng, None, f.optimizer, f.adam_eps))
        rs = ClientRoundSet(np.stack(rows), tuple(range(n)), k)
        outcome = aggregator(rs, server, is_last)
        prev_weights = server.weights.copy()
        server = apply_update(server, outcome.aggregate)
        acc, asr = evaluate(model, server.weights, test, trig_test, spec.target_label)
        m = RoundMetrics(k, acc, asr)
        if outcome.report is not None:
            m.i_star = outcome.report.i_star
            m.selected = outcome.report.selected
            m.malicious_excluded = bool(mal) and not (set(mal) & set(outcome.report.selected))
            result.reports.append(outcome.report.to_json())
        result.metrics.append(m)
        if keep_updates:
            result.updates.append(rs)
        if on_round is not None:
            on_round(m, rs, outcome)
        log.debug("seed %d round %d acc %.4f asr %.4f", seed, k, acc, asr)
    if awp_seen:
        result.awp_max_ratio = max(awp_seen)
    return result


def _build_hook(model, spec, adaptive, server_curr, server_prev, clean_shard, f, seed, k, i) -> AttackHook:
    anchor = None
    if adaptive.mode in ("wp_clean", "awp"):
        # clean shadow pass from the distributed weights, own stream
        shadow_rng = np.random.default_rng([seed, 4, k, i])
        anchor = server_curr + local_train(
            model, server_curr, clean_shard, f.local_iters, f.lr, f.batch_size, shadow_rng, None, f.optimizer, f.adam_eps
        )
    elif adaptive.mode == "wp_last":
        anchor = last_extrapolation_anchor(server_prev, server_curr)
    return AttackHook(
        layout=model,
        trigger_tokens=spec.trigger_tokens,
        kind=spec.kind,
        adaptive=adaptive,
        anchor=anchor,
        server_prev=np.asarray(server_prev),
        server_curr=np.asarray(server_curr),
        wp_step=f.lr if f.optimizer == "sgd" else None,
    )
