"""Three-player private training: generator, classifier, and a student
discriminator fed only by DPSGD gradients and teacher-jury decisions.

Random streams
--------------
The master seed is split with ``np.random.SeedSequence(seed).spawn(6)`` into
named streams, in this order: ``init`` (network initialisation),
``data`` (minibatch indices), ``noise`` (generator latents and labels),
``agg`` (aggregation noise), ``dpsgd`` (gradient noise) and ``teacher``
(teacher-side generator samples). Each component draws only from its own
stream, so a run is reproducible under a fixed seed.

Within one round the draws happen as follows:

* teachers: for each of ``n_k`` steps, for each teacher in order,
  ``teacher.standard_normal((shard, noise_dim))`` then
  ``teacher.integers(m, size=shard)``;
* each student step: ``data.choice(pool, n_c, replace=False)``,
  ``noise.standard_normal((n_g, noise_dim))``, ``noise.integers(m, size=n_g)``,
  then aggregation noise (gate then argmax, each ``(n_g, 2)``) and DPSGD noise;
* classifier step: ``data.choice(pool, n_c, replace=False)``,
  ``data.choice(|S_l|, min(n_c, |S_l|), replace=False)``,
  ``noise.standard_normal((n_g, noise_dim))``, ``noise.integers(m, size=n_g)``;
* generator step: ``noise.standard_normal((n_g, noise_dim))``,
  ``noise.integers(m, size=n_g)``.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import accountant as acct
from .aggregation import (
    HyGnmaxConfig,
    SampleOrigin,
    collect_votes,
    default_threshold,
    hygnmax_decisions,
)
from .data import Dataset
from .dp_optimizer import ClipNoiseConfig, dpsgd_gradient
from .nn import (
    BinaryLogObjective,
    DenseNetwork,
    apply_update,
    backward,
    forward,
    forward_trace,
    init_network,
    one_hot,
    per_example_backward,
)

log = logging.getLogger(__name__)

STREAMS = ("init", "data", "noise", "agg", "dpsgd", "teacher")
METRIC_FIELDS = ("round", "mu_spent", "epsilon", "loss_d", "loss_c", "loss_g", "abstain_rate", "teacher_margin_mean")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.5
    alpha_p: float = 0.1
    n_c: int = 128
    n_g: int = 128
    n_s: int = 5
    n_k: int = 5
    k: int = 100
    mu_cap: float = 2.0
    dp_delta: float = 1e-5
    clip_bound: float = 1.0
    noise_multiplier: float = 0.4
    sigma1: Optional[float] = None  # defaults to sigma2
    sigma2: float = 300.0
    threshold: Optional[float] = None  # defaults to 0.7 * k
    learning_rate: float = 1e-4
    teacher_learning_rate: Optional[float] = None  # defaults to learning_rate
    classes: int = 10
    noise_dim: int = 16
    hidden_units: int = 64
    percent: float = 0.8
    warmup_rounds: int = 0
    seed: int = 0
    classifier_uses_labeled: bool = True
    non_saturating: bool = False

    def __post_init__(self):
        if self.sigma1 is None:
            self.sigma1 = self.sigma2
        if self.threshold is None:
            self.threshold = default_threshold(self.k)
        if self.teacher_learning_rate is None:
            self.teacher_learning_rate = self.learning_rate
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        for name in ("n_c", "n_g", "n_s", "n_k", "k", "classes", "noise_dim", "hidden_units"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.alpha_p < 0 or self.warmup_rounds < 0:
            raise ConfigError("alpha_p and warmup_rounds must be >= 0")
        if not self.mu_cap > 0:
            raise ConfigError("mu_cap must be > 0")
        if not 0 < self.dp_delta < 1:
            raise ConfigError("dp_delta must lie in (0, 1)")
        if not 0 < self.percent <= 1:
            raise ConfigError("percent must lie in (0, 1]")
        if not self.clip_bound > 0 or self.noise_multiplier < 0:
            raise ConfigError("need clip_bound > 0 and noise_multiplier >= 0")
        if not (self.sigma1 > 0 and self.sigma2 > 0):
            raise ConfigError("sigma1 and sigma2 must be > 0")

    def aggregation(self) -> HyGnmaxConfig:
        return HyGnmaxConfig(self.threshold, self.sigma1, self.sigma2, self.k)

    @classmethod
    def field_types(cls):
        hints = {
            "sigma1": float,
            "threshold": float,
            "teacher_learning_rate": float,
        }
        out = {}
        for f in dataclasses.fields(cls):
            t = hints.get(f.name, f.type)
            if isinstance(t, str):
                t = {"float": float, "int": int, "bool": bool}[t]
            out[f.name] = t
        return out


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed); keys must be TrainConfig fields."""
    types = TrainConfig.field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = coerce(types[key], raw, key)
    return values


def coerce(typ, raw, key="value"):
    if typ is bool:
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if typ is int:
            as_float = float(raw)
            if as_float != int(as_float):
                raise ValueError
            return int(as_float)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def load_config(path, **overrides) -> TrainConfig:
    with open(path) as fh:
        values = parse_config_text(fh.read())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


# ------------------------------------------------------------------ state


@dataclass
class TeacherEnsemble:
    teachers: List[DenseNetwork]
    shards: List[np.ndarray]


def partition_labeled(n_labeled: int, k: int, seed) -> List[np.ndarray]:
    """Shuffle indices 0..n-1 and cut k disjoint shards of size n // k; the remainder is dropped."""
    if n_labeled < k:
        raise ConfigError(f"{n_labeled} labeled rows cannot fill {k} teacher shards")
    size = n_labeled // k
    dropped = n_labeled - size * k
    if dropped:
        log.warning("dropping %d labeled rows so %d shards have equal size %d", dropped, k, size)
    perm = np.random.default_rng(seed).permutation(n_labeled)
    return [np.sort(perm[i * size : (i + 1) * size]) for i in range(k)]


@dataclass
class RoundMetrics:
    round: int
    mu_spent: float
    epsilon: float
    loss_d: float
    loss_c: float
    loss_g: float
    abstain_rate: float
    teacher_margin_mean: float

    def row(self):
        return [getattr(self, f) for f in METRIC_FIELDS]


@dataclass
class RunReport:
    rounds: int = 0
    mu_spent: float = 0.0
    epsilon: float = 0.0
    dp_delta: float = 1e-5
    mu_before_last_charge: float = 0.0
    metrics: List[RoundMetrics] = field(default_factory=list)


@dataclass
class StepInfo:
    loss_d: float = float("nan")
    queries: int = 0
    abstained: int = 0
    margin_sum: float = 0.0


def _streams(seed):
    seqs = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, seqs)}


def pairs(x, labels, m):
    """Concatenate features with one-hot labels: the discriminator's input."""
    return np.concatenate([x, one_hot(labels, m)], axis=1)


class Trainer:
    """Owns all mutable training state for one run.

    ``privatize`` and ``aggregate`` default to :func:`dpsgd_gradient` and
    :func:`hygnmax_decisions`; they are the only paths by which sensitive
    data reaches the student, and tests swap them for recording stubs.
    """

    def __init__(
        self,
        config: TrainConfig,
        s_l: Dataset,
        s_d: Dataset,
        privatize: Callable = dpsgd_gradient,
        aggregate: Callable = hygnmax_decisions,
    ):
        self.cfg = config
        self.s_l = s_l
        self.s_d = s_d
        self.privatize = privatize
        self.aggregate = aggregate
        self._validate()
        cfg = config
        m, d, h = cfg.classes, s_l.dim, cfg.hidden_units
        self.m, self.d = m, d
        self.rng = _streams(cfg.seed)
        seeds = self.rng["init"].integers(0, 2**63 - 1, size=3 + cfg.k)
        self.generator = init_network([cfg.noise_dim + m, h, h, d], "tanh", seeds[0])
        self.generator.meta = {"n_classes": m, "noise_dim": cfg.noise_dim, "data_dim": d}
        self.classifier = init_network([d, h, m], "softmax", seeds[1])
        self.student = init_network([d + m, h, 1], "sigmoid", seeds[2])
        shards = partition_labeled(len(s_l), cfg.k, seeds[2] + 1)
        teachers = [init_network([d + m, h, 1], "sigmoid", s) for s in seeds[3:]]
        self.ensemble = TeacherEnsemble(teachers, shards)
        if cfg.classifier_uses_labeled:
            self.pool = np.concatenate([s_d.features, s_l.features])
        else:
            self.pool = s_d.features
        self.privacy = acct.PrivacyParams(cfg.n_c, len(self.pool), cfg.noise_multiplier, cfg.n_g, cfg.sigma2)
        self.ledger = acct.BudgetLedger(cfg.mu_cap)
        self.round = 0

    def _validate(self):
        cfg = self.cfg
        if self.s_l.labels is None:
            raise ConfigError("labeled set has no labels")
        if self.s_l.dim != self.s_d.dim:
            raise ConfigError("labeled and unlabeled sets differ in feature dimension")
        if self.s_l.labels.size and self.s_l.labels.max() >= cfg.classes:
            raise ConfigError(f"labels exceed classes={cfg.classes}")
        pool = len(self.s_d) + (len(self.s_l) if cfg.classifier_uses_labeled else 0)
        if cfg.n_c > pool:
            raise ConfigError(f"n_c={cfg.n_c} exceeds the {pool} rows available to the classifier")
        if len(self.s_l) < cfg.k:
            raise ConfigError(f"{len(self.s_l)} labeled rows cannot fill k={cfg.k} teacher shards")

    # -------------------------------------------------------------- sampling

    def sample_generator(self, rng, n):
        z = rng.standard_normal((n, self.cfg.noise_dim))
        y = rng.integers(self.m, size=n)
        x = forward(self.generator, np.concatenate([z, one_hot(y, self.m)], axis=1))
        return z, y, x

    @property
    def warming_up(self):
        return self.round < self.cfg.warmup_rounds

    # -------------------------------------------------------------- teachers

    def train_teachers(self):
        """``n_k`` descent steps of the teacher loss per teacher, generator frozen.

        Real pairs come only from the teacher's own shard; fakes from the
        generator. Classifier outputs never enter here.
        """
        self.ensemble.teachers = train_teachers(
            self.ensemble,
            self.s_l,
            self.sample_generator,
            self.cfg.n_k,
            self.cfg.teacher_learning_rate,
            self.m,
            self.rng["teacher"],
        )

    # -------------------------------------------------------------- student

    def student_step(self) -> Optional[StepInfo]:
        """One hybrid-desensitised ascent step on the student; charges the ledger once."""
        if self.ledger.exhausted:
            return None
        cfg, m = self.cfg, self.m
        teachers = self.ensemble.teachers
        info = StepInfo()

        idx = self.rng["data"].choice(len(self.pool), cfg.n_c, replace=False)
        d = self.pool[idx]
        y_c = np.argmax(forward(self.classifier, d), axis=1)
        u_c = pairs(d, y_c, m)
        if self.warming_up:
            r_c = np.zeros(cfg.n_c)
        else:
            r_c = self.aggregate(collect_votes(teachers, u_c), SampleOrigin.FROM_CLASSIFIER, cfg.aggregation(), None)
            r_c = np.asarray(r_c, dtype=np.float64)

        _, y_g, x_g = self.sample_generator(self.rng["noise"], cfg.n_g)
        u_g = pairs(x_g, y_g, m)

        obj1 = BinaryLogObjective(r_c, cfg.alpha * (1.0 - r_c))
        per_ex = per_example_backward(self.student, u_c, obj1)
        g1 = self.privatize(per_ex, ClipNoiseConfig(cfg.clip_bound, cfg.noise_multiplier, cfg.n_c), self.rng["dpsgd"])
        loss_d = float(np.mean(obj1.values(forward(self.student, u_c))))

        g2 = np.zeros(self.student.n_params)
        if not self.warming_up:
            counts = collect_votes(teachers, u_g)
            dec = np.asarray(self.aggregate(counts, SampleOrigin.FROM_GENERATOR, cfg.aggregation(), self.rng["agg"]))
            keep = dec >= 0
            info.queries = cfg.n_g
            info.abstained = int(np.sum(~keep))
            info.margin_sum = float(np.sum(np.abs(counts[:, 1] - counts[:, 0])) / cfg.k)
            if np.any(keep):
                r_g = dec[keep].astype(np.float64)
                obj2 = BinaryLogObjective(r_g, (1.0 - cfg.alpha) * (1.0 - r_g))
                out, trace = forward_trace(self.student, u_g[keep])
                g2, _ = backward(self.student, trace, obj2.grad(out))
                g2 = g2 / cfg.n_g
                loss_d += float(np.sum(obj2.values(out)) / cfg.n_g)

        # ascent: the discriminator maximises its objective
        self.student = apply_update(self.student, -(g1 + g2), cfg.learning_rate)
        self.ledger.charge(self.privacy, pate=not self.warming_up)
        info.loss_d = loss_d
        return info

    # -------------------------------------------------------------- classifier

    def classifier_objective(self, batch):
        """Value and gradient of the classifier loss on a fixed batch.

        ``batch`` holds ``d`` (unlabeled features), ``xl``/``yl`` (labeled
        minibatch) and ``xg``/``yg`` (generator samples and their
        conditioning labels). The adversarial term is the expectation of
        ``log(1 - S(d, y))`` under the classifier's label distribution.
        """
        cfg, m = self.cfg, self.m
        d = batch["d"]
        n = len(d)
        s_all = np.stack([forward(self.student, pairs(d, np.full(n, c), m))[:, 0] for c in range(m)], axis=1)
        log_fake = np.log1p(-np.clip(s_all, 1e-7, 1 - 1e-7))

        p, trace = forward_trace(self.classifier, d)
        adv = cfg.alpha * np.sum(p * log_fake) / n
        grad, _ = backward(self.classifier, trace, cfg.alpha * log_fake / n)
        total = adv

        for key_x, key_y, weight in (("xl", "yl", 1.0), ("xg", "yg", cfg.alpha_p)):
            x, y = batch[key_x], batch[key_y]
            if weight == 0.0 or len(x) == 0:
                continue
            p, trace = forward_trace(self.classifier, x)
            pc = np.clip(p, 1e-7, 1 - 1e-7)
            t = one_hot(y, m)
            total += weight * float(-np.sum(t * np.log(pc)) / len(x))
            inside = (p > 1e-7) & (p < 1 - 1e-7)
            g, _ = backward(self.classifier, trace, -weight * t / pc * inside / len(x))
            grad = grad + g
        return float(total), grad

    def classifier_step(self):
        cfg = self.cfg
        d = self.pool[self.rng["data"].choice(len(self.pool), cfg.n_c, replace=False)]
        li = self.rng["data"].choice(len(self.s_l), min(cfg.n_c, len(self.s_l)), replace=False)
        _, yg, xg = self.sample_generator(self.rng["noise"], cfg.n_g)
        batch = {"d": d, "xl": self.s_l.features[li], "yl": self.s_l.labels[li], "xg": xg, "yg": yg}
        loss, grad = self.classifier_objective(batch)
        self.classifier = apply_update(self.classifier, grad, cfg.learning_rate)
        return loss

    # -------------------------------------------------------------- generator

    def generator_objective(self, z, y):
        """(1 - alpha) * mean log(1 - S(G(z|y), y)), or the non-saturating
        -(1 - alpha) * mean log S(G(z|y), y); returns (value, gradient)."""
        cfg, m = self.cfg, self.m
        n = len(z)
        g_out, g_trace = forward_trace(self.generator, np.concatenate([z, one_hot(y, m)], axis=1))
        s_out, s_trace = forward_trace(self.student, pairs(g_out, y, m))
        w = (1.0 - cfg.alpha) / n
        if cfg.non_saturating:
            obj = BinaryLogObjective(np.full(n, -w), np.zeros(n))
        else:
            obj = BinaryLogObjective(np.zeros(n), np.full(n, w))
        _, grad_in = backward(self.student, s_trace, obj.grad(s_out), input_grad=True)
        grad, _ = backward(self.generator, g_trace, grad_in[:, : self.d])
        return float(np.sum(obj.values(s_out))), grad

    def generator_step(self):
        z = self.rng["noise"].standard_normal((self.cfg.n_g, self.cfg.noise_dim))
        y = self.rng["noise"].integers(self.m, size=self.cfg.n_g)
        loss, grad = self.generator_objective(z, y)
        self.generator = apply_update(self.generator, grad, self.cfg.learning_rate)
        return loss

    # -------------------------------------------------------------- loop

    def run_round(self) -> RoundMetrics:
        self.train_teachers()
        infos = []
        for _ in range(self.cfg.n_s):
            info = self.student_step()
            if info is None:
                break
            infos.append(info)
        loss_c = self.classifier_step()
        loss_g = self.generator_step()
        self.round += 1
        queries = sum(i.queries for i in infos)
        mu = self.ledger.mu_spent
        return RoundMetrics(
            round=self.round,
            mu_spent=mu,
            epsilon=acct.mu_to_epsilon(mu, self.cfg.dp_delta) if mu > 0 else 0.0,
            loss_d=float(np.mean([i.loss_d for i in infos])) if infos else float("nan"),
            loss_c=loss_c,
            loss_g=loss_g,
            abstain_rate=(sum(i.abstained for i in infos) / queries) if queries else 0.0,
            teacher_margin_mean=(sum(i.margin_sum for i in infos) / queries) if queries else 0.0,
        )

    def run(self, max_rounds: Optional[int] = None, on_round: Optional[Callable] = None) -> RunReport:
        """Loop rounds until the ledger reports the cap is reached."""
        report = RunReport(dp_delta=self.cfg.dp_delta)
        while not self.ledger.exhausted:
            if max_rounds is not None and self.round >= max_rounds:
                break
            metrics = self.run_round()
            report.metrics.append(metrics)
            if on_round is not None:
                on_round(metrics)
        report.rounds = self.round
        report.mu_spent = self.ledger.mu_spent
        report.epsilon = acct.mu_to_epsilon(report.mu_spent, self.cfg.dp_delta) if report.mu_spent > 0 else 0.0
        hist = self.ledger.history
        report.mu_before_last_charge = hist[-2][1] if len(hist) >= 2 else 0.0
        return report


def train_teachers(ensemble: TeacherEnsemble, s_l: Dataset, sample_generator, n_k, lr, m, rng):
    """Fine-tune every teacher for ``n_k`` steps on its shard versus fresh generator fakes.

    Per step, teacher ``i`` descends the mean of
    ``-[log T_i(x, y) over its shard + log(1 - T_i(x~, y~)) over fakes]``.
    Takes no classifier: teachers never see classifier-labelled data.
    """
    teachers = list(ensemble.teachers)
    for _ in range(n_k):
        for i, shard in enumerate(ensemble.shards):
            n = len(shard)
            real = pairs(s_l.features[shard], s_l.labels[shard], m)
            _, y_f, x_f = sample_generator(rng, n)
            batch = np.concatenate([real, pairs(x_f, y_f, m)])
            lab = np.concatenate([np.ones(n), np.zeros(n)])
            obj = BinaryLogObjective(lab, 1.0 - lab, sign=-1.0)
            out, trace = forward_trace(teachers[i], batch)
            grad, _ = backward(teachers[i], trace, obj.grad(out))
            teachers[i] = apply_update(teachers[i], grad / (2 * n), lr)
    return teachers


def teacher_loss(teacher, real_pairs, fake_pairs) -> float:
    s_r = np.clip(forward(teacher, real_pairs)[:, 0], 1e-7, 1 - 1e-7)
    s_f = np.clip(forward(teacher, fake_pairs)[:, 0], 1e-7, 1 - 1e-7)
    return float(-(np.sum(np.log(s_r)) + np.sum(np.log1p(-s_f))))


def train(config: TrainConfig, dataset: Dataset, on_round=None, **hooks):
    """Split ``dataset`` by ``config.percent``, train until the budget cap; return (generator, report)."""
    from .data import split

    s_l, s_d = split(dataset, config.percent, config.seed, min_labeled=config.k)
    trainer = Trainer(config, s_l, s_d, **hooks)
    report = trainer.run(on_round=on_round)
    return trainer.generator, report
