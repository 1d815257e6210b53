"""Optimisation loop, baselines, cross-validation and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import losses as L
from .data import PatientRecord, kfold_split, outcomes
from .model import ModelConfig, PathoGenXParams, forward_test, forward_train_batch
from .nn import LinearParams, init_mlp, linear_forward, mlp_forward, named_parameters
from .survival import c_index, correlation_report
from .tensor import Tensor

logger = logging.getLogger(__name__)

METHODS = ("pathogenx", "meanmil", "genomic-cox")
LOG_COLUMNS = ("epoch", "batch", "cox", "latent", "translation", "total")


class MissingGenomicError(ValueError):
    """Training (or a genomic method) was given records without genomic vectors."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    decay_mode: str = "decoupled"
    epochs: int = 12
    batch_size: int = 128
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 1.0
    use_latent: bool = True
    use_translation: bool = True
    cox_reduction: str = "sum"
    # Weight of a second Cox term with the risk head applied to G_l.
    genomic_cox: float = 1.0
    # Alignment losses treat G_l as a constant target (teacher) when set.
    detach_target: bool = True
    dim: int = 256
    heads: int = 4
    hidden: int = 64
    decoder_depth: int = 1
    risk_input: str = "translated"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate and batch_size must be positive, epochs nonnegative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.decay_mode not in ("decoupled", "coupled"):
            raise ValueError(f"decay_mode must be 'decoupled' or 'coupled', got {self.decay_mode!r}")
        if self.genomic_cox < 0:
            raise ValueError("genomic_cox must be nonnegative")
        if self.cox_reduction not in ("sum", "mean"):
            raise ValueError(f"cox_reduction must be 'sum' or 'mean', got {self.cox_reduction!r}")
        self.loss_weights  # validates the weights

    @property
    def loss_weights(self) -> L.LossWeights:
        return L.LossWeights(self.lambda1, self.lambda2, self.alpha)

    def model_config(self, d_in: int, d_genomic: int) -> ModelConfig:
        return ModelConfig(
            d_in=d_in,
            d_genomic=d_genomic,
            dim=self.dim,
            heads=self.heads,
            hidden=self.hidden,
            decoder_depth=self.decoder_depth,
            risk_input=self.risk_input,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(named: Sequence[tuple[str, Tensor]], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update of every parameter, in place.

    Decoupled decay shrinks weights by ``1 - lr * decay`` before the Adam step;
    coupled decay adds ``decay * w`` to the gradient instead.
    """
    state.step += 1
    lr, b1, b2 = cfg.learning_rate, cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in named:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"adam: gradient shape {g.shape} != parameter {name} shape {p.data.shape}")
        if cfg.decay_mode == "coupled" and cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.decay_mode == "decoupled" and cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# Methods. Each exposes ``params`` (a parameter tree), ``batch_losses`` and
# ``predict`` so one loop trains all three.


def _require_genomic(records: Sequence[PatientRecord], what: str) -> None:
    if any(r.genomic is None for r in records):
        raise MissingGenomicError(f"{what} requires paired modalities (genomic vector missing)")


def _cox_term(risks: Tensor, records, cfg: TrainConfig) -> Tensor | None:
    times, events = outcomes(records)
    if len(records) < 2 or not events.any():
        return None
    return L.cox_loss(risks, times, events, reduction=cfg.cox_reduction)


class PathoGenX:
    name = "pathogenx"

    def __init__(self, params: PathoGenXParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg

    @classmethod
    def init(cls, cfg: TrainConfig, d_in: int, d_genomic: int, rng: np.random.Generator) -> "PathoGenX":
        return cls(PathoGenXParams.init(cfg.model_config(d_in, d_genomic), rng), cfg)

    def named_parameters(self):
        return self.params.named_parameters()

    def batch_losses(self, records: Sequence[PatientRecord]) -> L.LossBundle:
        _require_genomic(records, "training")
        cfg = self.cfg
        w = cfg.loss_weights
        art = forward_train_batch(self.params, [r.bag for r in records], [r.genomic for r in records])
        cox = _cox_term(art.risk, records, cfg)
        if cox is not None and cfg.genomic_cox:
            # The same head also scores G_l; this is what trains the projection
            # when the alignment target is detached.
            genomic_risk = mlp_forward(self.params.risk_head, art.G_l).reshape(len(records))
            cox = cox + cfg.genomic_cox * _cox_term(genomic_risk, records, cfg)
        target = Tensor(art.G_l.data) if cfg.detach_target else art.G_l
        latent = L.latent_loss(art.P_l_cls, target, w).mean() if cfg.use_latent else Tensor(0.0)
        translation = L.translation_loss(target, art.G_l_hat, w).mean() if cfg.use_translation else Tensor(0.0)
        return L.total_loss(cox if cox is not None else Tensor(0.0), latent, translation, w)

    def predict(self, records: Sequence[PatientRecord]) -> np.ndarray:
        return np.array([forward_test(self.params, r.bag).item() for r in records])


@dataclass
class BaselineParams:
    embed: LinearParams
    head: list[LinearParams]


class _Baseline:
    name = ""

    def __init__(self, params: BaselineParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg

    @classmethod
    def init(cls, cfg: TrainConfig, d_in: int, d_genomic: int, rng: np.random.Generator):
        width = d_genomic if cls.name == "genomic-cox" else d_in
        return cls(BaselineParams(LinearParams.init(rng, width, cfg.dim), init_mlp(rng, [cfg.dim, cfg.hidden, 1])), cfg)

    def named_parameters(self):
        return list(named_parameters(self.params))

    def features(self, records) -> np.ndarray:
        raise NotImplementedError

    def risks(self, x: np.ndarray) -> Tensor:
        hidden = linear_forward(self.params.embed, Tensor(x)).relu()
        return mlp_forward(self.params.head, hidden).reshape(x.shape[0])

    def batch_losses(self, records) -> L.LossBundle:
        cox = _cox_term(self.risks(self.features(records)), records, self.cfg)
        zero = Tensor(0.0)
        return L.total_loss(cox if cox is not None else zero, zero, zero, L.LossWeights(0, 0, 0))

    def predict(self, records) -> np.ndarray:
        return self.risks(self.features(records)).data.copy()


class MeanMIL(_Baseline):
    """Image-only baseline: mean-pool patches, embed, MLP risk head."""

    name = "meanmil"

    def features(self, records) -> np.ndarray:
        return np.stack([r.bag.mean(axis=0) for r in records])


class GenomicCox(_Baseline):
    """Neural Cox model on the genomic vector; genomics needed at train and test."""

    name = "genomic-cox"

    def features(self, records) -> np.ndarray:
        _require_genomic(records, "genomic-cox")
        return np.stack([r.genomic for r in records])


METHOD_CLASSES = {"pathogenx": PathoGenX, "meanmil": MeanMIL, "genomic-cox": GenomicCox}


def build_method(name: str, cfg: TrainConfig, records: Sequence[PatientRecord], rng: np.random.Generator):
    if name not in METHOD_CLASSES:
        raise ValueError(f"unknown method {name!r}; choose from {METHODS}")
    if not records:
        raise ValueError("cannot size a model from an empty dataset")
    d_in = records[0].bag.shape[1]
    with_genomic = [r for r in records if r.genomic is not None]
    d_genomic = with_genomic[0].genomic.shape[0] if with_genomic else 0
    if name != "meanmil" and not with_genomic:
        raise MissingGenomicError(f"{name} training requires paired modalities (genomic vector missing)")
    return METHOD_CLASSES[name].init(cfg, d_in, d_genomic, rng)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class Trainer:
    """Mutable training state: method parameters, optimizer, shuffle RNG, epoch."""

    method: object
    cfg: TrainConfig
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0

    @classmethod
    def create(cls, method_name: str, records: Sequence[PatientRecord], cfg: TrainConfig) -> "Trainer":
        init_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(2)
        method = build_method(method_name, cfg, records, np.random.default_rng(init_ss))
        return cls(method, cfg, AdamState(), np.random.default_rng(shuffle_ss))

    def train_epoch(self, records: Sequence[PatientRecord]) -> list[dict]:
        """Shuffle, then one backward pass and one Adam step per batch.

        Batches without events (or with a single subject) contribute no Cox
        term and train on the alignment losses alone.
        """
        if self.method.name != "meanmil":
            _require_genomic(records, "training")
        n = len(records)
        size = min(self.cfg.batch_size, n)
        order = self.rng.permutation(n)
        named = self.method.named_parameters()
        rows = []
        for b, start in enumerate(range(0, n, size)):
            batch = [records[i] for i in order[start : start + size]]
            bundle = self.method.batch_losses(batch)
            if bundle.total.requires_grad:
                bundle.total.backward()
                adam_step(named, self.adam, self.cfg)
            rows.append({"epoch": self.epoch, "batch": b, **bundle.values()})
        self.epoch += 1
        return rows

    def fit(self, records, epochs: int | None = None, on_epoch: Callable | None = None) -> list[dict]:
        target = self.cfg.epochs if epochs is None else epochs
        log = []
        while self.epoch < target:
            rows = self.train_epoch(records)
            log.extend(rows)
            if on_epoch is not None:
                on_epoch(self, rows)
        return log

    def predict(self, records) -> np.ndarray:
        return self.method.predict(records)


def evaluate(method, records: Sequence[PatientRecord]) -> tuple[float, np.ndarray]:
    """Image-only (or genomic-only for the genomic baseline) risks and their C-index."""
    if not records:
        raise ValueError("evaluate: empty dataset")
    risks = method.predict(records)
    times, events = outcomes(records)
    return float(c_index(risks, times, events)), risks


def write_log(path, rows: Iterable[dict], header: Iterable[str] = ()) -> None:
    lines = [f"# {h}" for h in header]
    lines.append(",".join(LOG_COLUMNS))
    for r in rows:
        lines.append(
            f"{r['epoch']},{r['batch']},{r['cox']!r},{r['latent']!r},{r['translation']!r},{r['total']!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Cross-validation and experiment drivers


@dataclass
class CVResult:
    method: str
    fold_scores: list[float]
    logs: list[list[dict]] = field(default_factory=list, repr=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_scores))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_scores))

    def rows(self) -> list[tuple[str, float]]:
        out = [(f"fold{i}", s) for i, s in enumerate(self.fold_scores)]
        return out + [("mean", self.mean), ("std", self.std)]


def _fold_config(cfg: TrainConfig, fold: int) -> TrainConfig:
    seed = int(np.random.SeedSequence([cfg.seed, fold]).generate_state(1)[0])
    return TrainConfig(**{**cfg.to_dict(), "seed": seed})


def cross_validate(
    records: Sequence[PatientRecord],
    cfg: TrainConfig,
    method: str = "pathogenx",
    k: int = 4,
    split_seed: int | None = None,
    on_fold: Callable | None = None,
) -> CVResult:
    """Train k independent models; score each on its held-out fold.

    Validation records are stripped of genomic vectors for image-only methods.
    ``on_fold(fold, trainer, val, risks)`` sees each fitted model and its
    held-out records (with genomics) and risks.
    """
    split = kfold_split([r.id for r in records], k, cfg.seed if split_seed is None else split_seed)
    scores, logs = [], []
    for fold in range(k):
        train, val = split.train_val(records, fold)
        trainer = Trainer.create(method, train, _fold_config(cfg, fold))
        logs.append(trainer.fit(train))
        scored = val if method == "genomic-cox" else [r.without_genomic() for r in val]
        score, risks = evaluate(trainer.method, scored)
        logger.info("%s fold %d: c-index %.4f", method, fold, score)
        scores.append(score)
        if on_fold is not None:
            on_fold(fold, trainer, val, risks)
    return CVResult(method, scores, logs)


def baseline_mean_mil(records, cfg: TrainConfig, k: int = 4, split_seed: int | None = None) -> CVResult:
    return cross_validate(records, cfg, "meanmil", k, split_seed)


def baseline_genomic_cox(records, cfg: TrainConfig, k: int = 4, split_seed: int | None = None) -> CVResult:
    _require_genomic(records, "genomic-cox")
    return cross_validate(records, cfg, "genomic-cox", k, split_seed)


ABLATIONS = (("L_l", True, False), ("L_t", False, True), ("L_l+L_t", True, True))


def ablation_alignment(records, cfg: TrainConfig, k: int = 4, split_seed: int | None = None) -> dict[str, CVResult]:
    out = {}
    for label, use_latent, use_translation in ABLATIONS:
        variant = TrainConfig(**{**cfg.to_dict(), "use_latent": use_latent, "use_translation": use_translation})
        out[label] = cross_validate(records, variant, "pathogenx", k, split_seed)
    return out


def write_ablation_csv(path, results: dict[str, CVResult], header: Iterable[str] = ()) -> None:
    lines = [f"# {h}" for h in header] + ["alignment_loss,mean_c_index,std_c_index"]
    lines += [f"{label},{res.mean!r},{res.std!r}" for label, res in results.items()]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class CorrelationResult:
    before: float  # mean |r| between encoder class token and projected genomics
    after: float  # mean |r| between decoder output and projected genomics


def translation_correlation(params: PathoGenXParams, records: Sequence[PatientRecord]) -> CorrelationResult:
    _require_genomic(records, "correlation report")
    art = forward_train_batch(params, [r.bag for r in records], [r.genomic for r in records])
    g = art.G_l.data
    return CorrelationResult(
        correlation_report(art.P_l_cls.data, g).mean_abs,
        correlation_report(art.G_l_hat.data, g).mean_abs,
    )


# ---------------------------------------------------------------------------
# Checkpoints
#
#   magic b"PGXC", version u16
#   u32 count, then per parameter: u16 name length, UTF-8 name, u8 rank,
#       u32 dims, f64 LE payload
#   u32 length + UTF-8 JSON {method, epoch, train_config, model_dims}
#   u64 Adam step, u32 count, moment tensor blocks named "m:<p>" / "v:<p>"
#   u32 length + UTF-8 JSON of the shuffle RNG state

CHECKPOINT_MAGIC = b"PGXC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob, self.pos, self.source = blob, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.source}: truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<H")
        name = self.take(n).decode("utf-8")
        (rank,) = self.unpack("<B")
        dims = self.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        return name, arr

    def json(self):
        (n,) = self.unpack("<I")
        return json.loads(self.take(n).decode("utf-8"))


def _json_bytes(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(trainer: Trainer) -> bytes:
    named = trainer.method.named_parameters()
    out = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), struct.pack("<I", len(named))]
    out += [_pack_tensor(n, t.data) for n, t in named]
    dims = {}
    if isinstance(trainer.method, PathoGenX):
        dims = trainer.method.params.config.to_dict()
    else:
        dims = {"d_in": trainer.method.params.embed.n_in}
    meta = {"method": trainer.method.name, "epoch": trainer.epoch, "train_config": trainer.cfg.to_dict(), "model": dims}
    out.append(_json_bytes(meta))
    moments = [(f"m:{n}", trainer.adam.m[n]) for n, _ in named if n in trainer.adam.m]
    moments += [(f"v:{n}", trainer.adam.v[n]) for n, _ in named if n in trainer.adam.v]
    out.append(struct.pack("<QI", trainer.adam.step, len(moments)))
    out += [_pack_tensor(n, a) for n, a in moments]
    out.append(_json_bytes(trainer.rng.bit_generator.state))
    return b"".join(out)


def save_checkpoint(path, trainer: Trainer) -> None:
    Path(path).write_bytes(checkpoint_bytes(trainer))


def read_checkpoint(path) -> dict:
    """Parse a checkpoint into its raw parts without building a model."""
    blob = Path(path).read_bytes()
    r = _Reader(blob, str(path))
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version mismatch, file has {version}, reader supports {CHECKPOINT_VERSION}")
    (count,) = r.unpack("<I")
    params = dict(r.tensor() for _ in range(count))
    meta = r.json()
    step, n_moments = r.unpack("<QI")
    moments = dict(r.tensor() for _ in range(n_moments))
    rng_state = r.json()
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return {"params": params, "meta": meta, "adam_step": step, "moments": moments, "rng": rng_state}


def load_checkpoint(path, records: Sequence[PatientRecord] | None = None, cfg: TrainConfig | None = None) -> Trainer:
    """Rebuild a trainer from disk.

    The architecture comes from the stored config (or ``cfg``/``records`` when
    given, to check compatibility); every stored tensor must match by name and
    shape.
    """
    raw = read_checkpoint(path)
    meta = raw["meta"]
    cfg = cfg or TrainConfig(**meta["train_config"])
    name = meta["method"]
    if name == "pathogenx":
        model_cfg = ModelConfig(**meta["model"])
        if records:
            model_cfg = cfg.model_config(records[0].bag.shape[1], model_cfg.d_genomic)
        method = PathoGenX(PathoGenXParams.init(model_cfg, np.random.default_rng(0)), cfg)
    else:
        if not records:
            raise CheckpointError(f"{path}: loading a {name} checkpoint needs records to size the model")
        method = build_method(name, cfg, records, np.random.default_rng(0))
    named = method.named_parameters()
    stored = raw["params"]
    expected = {n for n, _ in named}
    if set(stored) != expected:
        missing = sorted(expected - set(stored))
        extra = sorted(set(stored) - expected)
        raise CheckpointError(f"{path}: parameter names disagree (missing {missing[:3]}, unexpected {extra[:3]})")
    for n, t in named:
        if stored[n].shape != t.data.shape:
            raise CheckpointError(f"{path}: parameter {n} has shape {stored[n].shape}, model expects {t.data.shape}")
        t.data = stored[n].copy()
    adam = AdamState(step=raw["adam_step"])
    for key, arr in raw["moments"].items():
        kind, pname = key.split(":", 1)
        (adam.m if kind == "m" else adam.v)[pname] = arr.copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = raw["rng"]
    return Trainer(method, cfg, adam, rng, epoch=meta["epoch"])
