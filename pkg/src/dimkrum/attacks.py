"""Backdoor poisoning for the toy task and the adaptive variants that try to slip past Dim-Krum.

Attack kinds:

* ``badword`` -- one rare trigger token inserted, label flipped to the target.
* ``badsent`` -- a fixed multi-token trigger sequence inserted contiguously.
* ``ep`` -- poisoned training like ``badword``, but the outgoing update is
  confined to the trigger token's embedding row.

Adaptive modes act on the malicious client's local training: ``freeze`` keeps
the trigger embedding fixed, ``wp_clean``/``wp_last`` add an L2 pull towards an
anchor, ``awp`` clamps every weight into a band around the clean anchor whose
width is ``epsilon`` times the last server change of that weight.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from dimkrum.core import ContractError

ATTACK_KINDS = ("badword", "badsent", "ep")
ADAPTIVE_MODES = ("none", "freeze", "wp_clean", "wp_last", "awp")
SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "badword"
    target_label: int = 0
    poison_rate: float = 0.5
    trigger_tokens: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ContractError(f"unknown attack kind {self.kind!r}")
        if not 0.0 < self.poison_rate <= 1.0:
            raise ContractError(f"poison_rate must lie in (0, 1], got {self.poison_rate}")
        if self.trigger_tokens is not None:
            object.__setattr__(self, "trigger_tokens", tuple(int(t) for t in self.trigger_tokens))
            k = len(self.trigger_tokens)
            if self.kind == "badsent" and not 3 <= k <= 5:
                raise ContractError("badsent needs a trigger sequence of 3-5 tokens")
            if self.kind != "badsent" and k != 1:
                raise ContractError(f"{self.kind} uses exactly one trigger token")

    def resolve(self, trigger_pool) -> "AttackSpec":
        """Fill in default triggers from the task's reserved pool and check membership.

        Word attacks take the first pool token; ``badsent`` takes the next four
        (or the whole pool when it is smaller than five).
        """
        pool = tuple(int(t) for t in trigger_pool)
        trig = self.trigger_tokens
        if trig is None:
            if self.kind == "badsent":
                trig = pool[1:5] if len(pool) >= 5 else pool[:4]
            else:
                trig = pool[:1]
        bad = set(trig) - set(pool)
        if bad:
            raise ContractError(f"trigger tokens {sorted(bad)} are not in the reserved pool")
        return replace(self, trigger_tokens=tuple(trig))


@dataclass(frozen=True)
class AdaptiveSpec:
    mode: str = "none"
    lambda_wp: float = 0.0
    epsilon: float = 0.05

    def __post_init__(self):
        if self.mode not in ADAPTIVE_MODES:
            raise ContractError(f"unknown adaptive mode {self.mode!r}")
        if self.lambda_wp < 0:
            raise ContractError("lambda_wp must be non-negative")
        if self.mode.startswith("wp") and self.lambda_wp <= 0:
            raise ContractError(f"{self.mode} needs lambda_wp > 0")
        if self.epsilon <= 0:
            raise ContractError("epsilon must be positive")


def insert_trigger(sentence: np.ndarray, trigger, pos: int, filler_mask: np.ndarray) -> np.ndarray:
    """Insert ``trigger`` contiguously so it starts at ``pos``, keeping the length.

    To stay at length ``L`` the last ``len(trigger)`` filler tokens of the
    original sentence are dropped, so no label-bearing token is lost.
    ``pos`` must lie in ``[0, L - len(trigger)]``.
    """
    trigger = np.asarray(trigger, dtype=sentence.dtype)
    drop = np.flatnonzero(filler_mask[sentence])[::-1][: trigger.size]
    if drop.size < trigger.size:
        raise ContractError("sentence has too few filler tokens for the trigger")
    keep = np.ones(sentence.size, dtype=bool)
    keep[drop] = False
    if not 0 <= pos <= sentence.size - trigger.size:
        raise ContractError(f"insert position {pos} out of range")
    kept = sentence[keep]
    return np.concatenate([kept[:pos], trigger, kept[pos:]])


def poison_dataset(data, spec: AttackSpec, rng: np.random.Generator, filler_mask: np.ndarray):
    """Trigger and relabel ``floor(poison_rate * N)`` randomly chosen instances."""
    if spec.trigger_tokens is None:
        raise ContractError("resolve the attack spec against the task's trigger pool first")
    N = len(data.labels)
    k = int(np.floor(spec.poison_rate * N))
    if k < 1:
        raise ContractError(f"poison_rate {spec.poison_rate} poisons no instance out of {N}")
    rows = np.sort(rng.choice(N, size=k, replace=False))
    sentences = data.sentences.copy()
    labels = data.labels.copy()
    mask = data.poisoned_mask.copy()
    L = sentences.shape[1]
    for r in rows:
        pos = int(rng.integers(0, L - len(spec.trigger_tokens) + 1))
        sentences[r] = insert_trigger(sentences[r], spec.trigger_tokens, pos, filler_mask)
        labels[r] = spec.target_label
        mask[r] = True
    return type(data)(sentences, labels, mask)


def triggered_test_set(data, spec: AttackSpec, rng: np.random.Generator, filler_mask: np.ndarray):
    """Non-target test instances with the trigger inserted and their true labels kept."""
    keep = np.flatnonzero(data.labels != spec.target_label)
    sentences = data.sentences[keep].copy()
    L = sentences.shape[1]
    for r in range(len(keep)):
        pos = int(rng.integers(0, L - len(spec.trigger_tokens) + 1))
        sentences[r] = insert_trigger(sentences[r], spec.trigger_tokens, pos, filler_mask)
    return type(data)(sentences, data.labels[keep].copy(), np.ones(len(keep), dtype=bool))


def _trigger_dims(layout, trigger_tokens) -> np.ndarray:
    for t in trigger_tokens:
        if not 0 <= t < layout.vocab_size:
            raise ContractError(f"trigger token {t} outside vocabulary of size {layout.vocab_size}")
    return np.concatenate([layout.embedding_row_slice(int(t)) for t in sorted(set(trigger_tokens))])


def ep_restrict(update, layout, trigger_tokens) -> np.ndarray:
    """Keep only the trigger tokens' embedding rows of ``update``."""
    dims = _trigger_dims(layout, trigger_tokens)
    out = np.zeros_like(np.asarray(update, dtype=np.float64))
    out[dims] = update[dims]
    return out


def freeze_trigger(update, layout, trigger_tokens) -> np.ndarray:
    """Zero the trigger tokens' embedding rows of ``update`` (also used on per-step gradients)."""
    dims = _trigger_dims(layout, trigger_tokens)
    out = np.array(update, dtype=np.float64, copy=True)
    out[dims] = 0.0
    return out


def wp_loss_term(weights, anchor, lambda_wp: float) -> tuple[float, np.ndarray]:
    """``lambda * ||w - anchor||^2`` and its gradient."""
    diff = np.asarray(weights, dtype=np.float64) - anchor
    return float(lambda_wp * diff @ diff), 2.0 * lambda_wp * diff


def last_extrapolation_anchor(server_prev, server_curr) -> np.ndarray:
    """Guess the next honest weights by repeating the last server step."""
    return server_curr + (server_curr - server_prev)


def awp_scale(server_prev, server_curr) -> np.ndarray:
    return np.maximum(np.abs(server_curr - server_prev), SIGMA_FLOOR)


def awp_project(client_weights, anchor_clean, server_prev, server_curr, epsilon: float) -> np.ndarray:
    """Clamp each weight into ``anchor +- epsilon * max(|server step|, 1e-8)``."""
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    band = epsilon * awp_scale(server_prev, server_curr)
    return np.clip(client_weights, anchor_clean - band, anchor_clean + band)


@dataclass
class AttackHook:
    """Per-round instructions for the malicious client's local training.

    Built by the simulator once the round's anchors are known.  ``grad`` and
    ``project`` run every optimizer step; ``finalize`` runs on the outgoing update.
    """

    layout: object
    trigger_tokens: tuple[int, ...]
    kind: str = "badword"
    adaptive: AdaptiveSpec = AdaptiveSpec()
    anchor: np.ndarray | None = None
    server_prev: np.ndarray | None = None
    server_curr: np.ndarray | None = None
    # with plain SGD the weight penalty is applied implicitly (a proximal step
    # of size ``lr``), which stays stable for any lambda_wp * lr
    wp_step: float | None = None
    max_ratio_seen: float = 0.0

    def __post_init__(self):
        if self.adaptive.mode in ("wp_clean", "wp_last", "awp") and self.anchor is None:
            raise ContractError(f"adaptive mode {self.adaptive.mode} needs an anchor")
        if self.adaptive.mode == "awp" and (self.server_prev is None or self.server_curr is None):
            raise ContractError("awp needs the previous and current server weights")
        self._frozen = _trigger_dims(self.layout, self.trigger_tokens) if self.adaptive.mode == "freeze" else None
        if self.adaptive.mode == "awp":
            self._scale = awp_scale(self.server_prev, self.server_curr)
            band = self.adaptive.epsilon * self._scale
            self._lo, self._hi = self.anchor - band, self.anchor + band

    def grad(self, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        mode = self.adaptive.mode
        if mode == "freeze":
            g[self._frozen] = 0.0
        elif mode in ("wp_clean", "wp_last") and self.wp_step is None:
            g += 2.0 * self.adaptive.lambda_wp * (w - self.anchor)
        return g

    def project(self, w: np.ndarray) -> np.ndarray:
        if self.adaptive.mode in ("wp_clean", "wp_last") and self.wp_step is not None:
            # solves w_new = w - lr * 2 lambda (w_new - anchor) for w_new
            c = 2.0 * self.adaptive.lambda_wp * self.wp_step
            w += c * self.anchor
            w /= 1.0 + c
            return w
        if self.adaptive.mode != "awp":
            return w
        np.clip(w, self._lo, self._hi, out=w)
        # exact check against the clamp interval; the ratio itself is only reported
        if not np.all((w >= self._lo) & (w <= self._hi)):
            raise AssertionError("AWP ratio bound violated")
        ratio = float(np.max(np.abs(w - self.anchor) / self._scale))
        self.max_ratio_seen = max(self.max_ratio_seen, ratio)
        return w

    def finalize(self, update: np.ndarray) -> np.ndarray:
        if self.kind == "ep":
            return ep_restrict(update, self.layout, self.trigger_tokens)
        return update
