"""Embedding regularizers as three hooks: loss penalty, embedding view, epoch action.

Strength defaults are the transductive values (L2 1e-4, L1 1e-5, variational
5e-5, clustering 5e-4, dropout p = 0.5, forgetting every 20 epochs after a
30-epoch warm-up, halted at epoch 150).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import BadMode, ConflictingSpecs, NegativeStrength
from .tensor import Value

log = logging.getLogger(__name__)

KINDS = ("none", "l1", "l2", "dropout", "clustering", "variational", "forgetting")

DEFAULT_STRENGTH = {"l1": 1e-5, "l2": 1e-4, "variational": 5e-5, "clustering": 5e-4}
TRANSFER_STRENGTH = {"variational": 0.05, "clustering": 0.5}


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    strength: float | None = None   # resolved to the kind's default when omitted
    p: float = 0.5
    n_centroids: int = 8
    period: int = 20
    warm_up: int = 30
    halt_epoch: int = 150
    auto_halt: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}; expected one of {KINDS}")
        if self.strength is None:
            object.__setattr__(self, "strength", DEFAULT_STRENGTH.get(self.kind, 0.0))
        if self.strength < 0:
            raise NegativeStrength(f"{self.kind} strength must be >= 0, got {self.strength}")
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {self.p}")
        if self.kind == "forgetting" and self.period < 1:
            raise ValueError("forgetting period must be >= 1")
        if self.kind == "clustering" and self.n_centroids < 1:
            raise ValueError("clustering needs at least one centroid")

    @property
    def label(self) -> str:
        return self.kind

    def fires(self, epoch: int) -> bool:
        """Fixed forgetting schedule: ``warm_up <= epoch < halt_epoch`` on multiples of ``period``."""
        if self.kind != "forgetting":
            return False
        return self.warm_up <= epoch < self.halt_epoch and (epoch - self.warm_up) % self.period == 0


def L1(strength=DEFAULT_STRENGTH["l1"]):
    return RegularizerSpec("l1", strength)


def L2(strength=DEFAULT_STRENGTH["l2"]):
    return RegularizerSpec("l2", strength)


def Dropout(p=0.5):
    return RegularizerSpec("dropout", p=p)


def Clustering(strength=DEFAULT_STRENGTH["clustering"], n_centroids=8):
    return RegularizerSpec("clustering", strength, n_centroids=n_centroids)


def Variational(strength=DEFAULT_STRENGTH["variational"]):
    return RegularizerSpec("variational", strength)


def Forgetting(period=20, warm_up=30, halt_epoch=150, auto_halt=False):
    return RegularizerSpec("forgetting", period=period, warm_up=warm_up,
                           halt_epoch=halt_epoch, auto_halt=auto_halt)


# ---------------------------------------------------------------- penalties

def clustering_distances(E: Value, centroids: Value) -> Value:
    """Squared distances (N, C) between rows and centroids."""
    diff = T.reshape(E, (E.shape[0], 1, E.shape[1])) - centroids
    return T.sum_(T.square(diff), axis=-1)


def gaussian_kl(mu: Value, log_sigma: Value) -> Value:
    """Sum of KL(N(mu, sigma^2) || N(0, 1)) over all entries."""
    sigma2 = T.exp(log_sigma * 2.0)
    return T.sum_((T.square(mu) + sigma2 - 1.0 - log_sigma * 2.0) * 0.5)


def penalty(spec: RegularizerSpec, table) -> Value:
    lam = spec.strength
    if spec.kind == "l2":
        return T.sum_(T.square(table.E)) * lam
    if spec.kind == "l1":
        return T.sum_(T.abs_(table.E)) * lam
    if spec.kind == "clustering":
        if table.centroids is None:
            raise ValueError("table was built without clustering parameters")
        s = T.softmax(table.assign_logits, axis=-1)
        return T.sum_(s * clustering_distances(table.E, table.centroids)) * lam
    if spec.kind == "variational":
        if table.log_sigma is None:
            raise ValueError("table was built without variational parameters")
        return gaussian_kl(table.E, table.log_sigma) * lam
    return Value(0.0)


# ---------------------------------------------------------------- views

def embedding_view(spec: RegularizerSpec, table, mode: str, rng: np.random.Generator,
                   current: Value | None = None) -> Value:
    """Effective embeddings fed downstream; ``current`` is the result of earlier views."""
    if mode not in ("train", "eval"):
        raise BadMode(f"mode must be 'train' or 'eval', got {mode!r}")
    E = table.E if current is None else current
    if mode == "eval":
        return E
    if spec.kind == "dropout":
        if spec.p == 0.0:
            return E
        keep = (rng.random(E.shape) >= spec.p).astype(np.float64) / (1.0 - spec.p)
        return E * keep
    if spec.kind == "variational":
        eps = rng.standard_normal(E.shape)
        return E + T.exp(table.log_sigma) * eps
    return E


# ---------------------------------------------------------------- forgetting

@dataclass
class ForgettingRecord:
    epoch: int
    parameters: dict

    def as_dict(self):
        return {"event": "forgetting_reset", "epoch": self.epoch,
                "parameters": {k: (v if isinstance(v, str) else [int(i) for i in v])
                               for k, v in self.parameters.items()}}


def auto_halted(spec: RegularizerSpec, val_history) -> bool:
    """Validation-monitored halting: stop once the best value is older than a full period."""
    if len(val_history) <= spec.period:
        return False
    best_recent = min(val_history[-spec.period:])
    return best_recent >= min(val_history[:-spec.period])


def forgetting_step(spec: RegularizerSpec, epoch: int, table, model, rng, optimizer=None,
                    val_history=None, state: dict | None = None) -> bool:
    """Reset embeddings and the encoder/decoder weights that multiply them if the schedule fires.

    ``state`` (a dict owned by the caller) remembers an automatic halt.
    """
    if spec.kind != "forgetting":
        return False
    if spec.auto_halt and state is not None:
        if not state.get("halted") and epoch >= spec.warm_up and val_history is not None \
                and auto_halted(spec, val_history):
            state["halted"] = True
        if state.get("halted"):
            return False
        fires = epoch >= spec.warm_up and (epoch - spec.warm_up) % spec.period == 0
    else:
        fires = spec.fires(epoch)
    if not fires:
        return False
    table.reset(rng)
    model.reset_embedding_columns(rng)
    touched = {"embedding.E": "all"}
    if table.log_sigma is not None:
        touched["embedding.log_sigma"] = "all"
    touched.update(model.embedding_rows())
    if optimizer is not None:
        for name, rows in touched.items():
            optimizer.reset_state(name, None if isinstance(rows, str) else rows)
    record = ForgettingRecord(epoch, touched)
    log.info("forgetting reset at epoch %d", epoch)
    if state is not None:
        state.setdefault("events", []).append(record.as_dict())
    return True


def forgetting_active(specs, epoch: int, state: dict | None = None) -> bool:
    """True while a forgetting schedule may still fire (early stopping is suspended)."""
    for spec in specs:
        if spec.kind != "forgetting":
            continue
        if spec.auto_halt:
            return not (state or {}).get("halted", False)
        return epoch < spec.halt_epoch
    return False


# ---------------------------------------------------------------- composition

def validate_specs(specs) -> None:
    kinds = [s.kind for s in specs]
    if kinds.count("variational") > 1:
        raise ConflictingSpecs("at most one variational regularizer")
    if kinds.count("forgetting") > 1:
        raise ConflictingSpecs("at most one forgetting regularizer")
    if "variational" in kinds and "dropout" in kinds \
            and kinds.index("dropout") < kinds.index("variational"):
        raise ConflictingSpecs("dropout must come after variational sampling")


def combine(specs, table, model=None, epoch: int | None = None, mode: str = "train",
            rng: np.random.Generator | None = None, optimizer=None, val_history=None,
            state: dict | None = None):
    """Return ``(view, total_penalty, did_reset)``.

    Forgetting is evaluated only when ``epoch`` is given (epoch boundaries); the
    view and penalty are computed afterwards so they reflect any reset.
    """
    specs = list(specs)
    validate_specs(specs)
    did_reset = False
    if epoch is not None:
        for spec in specs:
            did_reset |= forgetting_step(spec, epoch, table, model, rng, optimizer,
                                         val_history, state)
    view = None
    for spec in specs:
        view = embedding_view(spec, table, mode, rng, view)
    if view is None:
        view = embedding_view(RegularizerSpec(), table, mode, rng)
    total = Value(0.0)
    for spec in specs:
        if spec.kind in ("l1", "l2", "clustering", "variational"):
            total = total + penalty(spec, table)
    return view, total, did_reset


def penalties_by_kind(specs, table) -> dict[str, float]:
    return {s.kind: float(penalty(s, table).data) for s in specs
            if s.kind in ("l1", "l2", "clustering", "variational")}
