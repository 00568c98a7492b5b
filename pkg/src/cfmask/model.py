"""Dual-head complementary-mask classifier and its training loop.

A mask generator produces the pair (m, m_comp).  The shared trunk maps both
``x * m`` and ``x * m_comp`` into one feature space; head ``main`` is fitted to
the true labels and head ``comp`` to labels drawn uniformly at random for
every sample of every minibatch, which pushes the low-ranked features toward
uninformative predictions.  The total objective is ``L_main + gamma * L_comp``
(plus ``lam * |v|_1`` for the trainable-vector mask).
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .datasets import Dataset, split
from .masks import AttentionMaskNet, MaskPair, VectorMask, full_dataset_mask, softmax_backward
from .nn import Adam, Dense, Dropout, LeakyReLU, cross_entropy, load_checkpoint, one_hot, save_checkpoint
from .tensor import Rng, ShapeError, _stable_hash, as_matrix, softmax_rows

log = logging.getLogger(__name__)

DEFAULT_GAMMA_GRID = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
METHODS = ("cfm", "fm", "dfs-cfm")


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch, batch, value):
        self.epoch, self.batch, self.value = epoch, batch, value
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")


@dataclass
class TrainingConfig:
    gamma: float | None = 1.0
    lam: float = 0.0
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    gamma_grid: tuple = DEFAULT_GAMMA_GRID
    validation_fraction: float = 0.1
    hidden: int | None = None
    trunk: tuple = (128, 64)
    dropout: float = 0.3
    alpha: float = 0.02

    def __post_init__(self):
        self.gamma_grid = tuple(float(g) for g in self.gamma_grid)
        self.trunk = tuple(int(t) for t in self.trunk)
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.gamma_grid or any(g < 0 for g in self.gamma_grid):
            raise ValueError("gamma_grid must be a non-empty list of nonnegative values")


@dataclass
class LossParts:
    main: float
    comp: float
    total: float


@dataclass
class EpochRecord:
    epoch: int
    main_loss: float
    comp_loss: float
    total_loss: float
    val_accuracy: float | None = None


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    final_masks: MaskPair | None = None
    seconds: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "config": self.config,
            "epochs": [asdict(e) for e in self.epochs],
            "seconds": self.seconds,
            "final_mask": None if self.final_masks is None else {
                "m": self.final_masks.m.tolist(),
                "m_comp": self.final_masks.m_comp.tolist(),
                "logits": self.final_masks.logits.tolist(),
            },
        }


@dataclass
class DualOutput:
    pred_main: np.ndarray
    pred_comp: np.ndarray | None
    masks: MaskPair
    cache: tuple


class CfmModel:
    """Mask generator + shared trunk + main head (+ complementary head).

    ``complementary=False`` gives the plain feature-mask baseline.  Every
    component is initialised from its own named stream derived from ``seed``,
    so the baseline and the complementary model share identical main-path
    initial weights.
    """

    def __init__(self, n_features: int, n_classes: int, mask: str = "attention", hidden: int | None = None,
                 complementary: bool = True, trunk=(128, 64), dropout: float = 0.3, alpha: float = 0.02,
                 seed: int = 0):
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.n_features = n_features
        self.n_classes = n_classes
        self.seed = seed
        self.alpha = alpha
        init = Rng(seed).derive("init")
        if mask == "attention":
            self.mask_net = AttentionMaskNet(n_features, hidden, init.derive("mask"))
        elif mask == "vector":
            self.mask_net = VectorMask(n_features, init.derive("mask"))
        else:
            raise ValueError(f"unknown mask kind {mask!r}")
        widths = (n_features,) + tuple(trunk)
        self.trunk_layers = [Dense(widths[i], widths[i + 1], init.derive(f"trunk.{i}"))
                             for i in range(len(trunk))]
        self.acts = [LeakyReLU(alpha) for _ in trunk]
        self.dropout = Dropout(dropout)
        self.head_main = Dense(widths[-1], n_classes, init.derive("head_main"))
        self.head_comp = Dense(widths[-1], n_classes, init.derive("head_comp")) if complementary else None
        self.selection_masks: MaskPair | None = None

    @property
    def complementary(self) -> bool:
        return self.head_comp is not None

    @property
    def training(self) -> bool:
        return self.dropout.training

    def train(self):
        self.dropout.training = True
        return self

    def eval(self):
        self.dropout.training = False
        return self

    def architecture(self):
        return {
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "mask": self.mask_net.architecture(),
            "trunk": [layer.n_out for layer in self.trunk_layers],
            "dropout": self.dropout.rate,
            "alpha": self.alpha,
            "complementary": self.complementary,
            "seed": self.seed,
        }

    def params(self):
        out = {f"mask.{k}": v for k, v in self.mask_net.params().items()}
        for i, layer in enumerate(self.trunk_layers):
            out[f"trunk.{i}.W"] = layer.W
            out[f"trunk.{i}.b"] = layer.b
        out["head_main.W"] = self.head_main.W
        out["head_main.b"] = self.head_main.b
        if self.head_comp is not None:
            out["head_comp.W"] = self.head_comp.W
            out["head_comp.b"] = self.head_comp.b
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())

    # -- forward pieces -------------------------------------------------

    def _gates(self, x):
        if isinstance(self.mask_net, VectorMask):
            pair = MaskPair.from_logits(self.mask_net.logits)
            return self.mask_net.logits, pair.m_comp, pair, None
        zbar, cache = self.mask_net.forward(x)
        pair = MaskPair.from_logits(zbar)
        return pair.m, pair.m_comp, pair, cache

    def _trunk(self, xg, dropout_mask):
        caches = []
        h = xg
        for layer, act in zip(self.trunk_layers, self.acts):
            h, c1 = layer.forward(h)
            h, c2 = act.forward(h)
            caches.append((c1, c2))
        h, cd = self.dropout.forward(h, mask=dropout_mask)
        return h, (caches, cd)

    def _trunk_backward(self, dh, cache):
        caches, cd = cache
        dh = self.dropout.backward(dh, cd)
        grads = {}
        for i in reversed(range(len(self.trunk_layers))):
            c1, c2 = caches[i]
            dh = self.acts[i].backward(dh, c2)
            dh, g = self.trunk_layers[i].backward(dh, c1)
            grads[f"trunk.{i}.W"] = g["W"]
            grads[f"trunk.{i}.b"] = g["b"]
        return dh, grads

    def sample_dropout_mask(self, n_rows: int, rng: Rng):
        return self.dropout.sample_mask((n_rows, self.trunk_layers[-1].n_out), rng)

    def forward_dual(self, x, dropout_mask=None, rng: Rng | None = None) -> DualOutput:
        """Both predictions for batch ``x``.

        In train mode one dropout realisation (``dropout_mask`` or a fresh draw
        from ``rng``) is shared by the main and complementary paths.
        """
        x = as_matrix(x)
        if x.shape[1] != self.n_features:
            raise ShapeError("forward_dual", x.shape, (self.n_features,))
        if self.training and dropout_mask is None:
            if rng is None:
                raise ValueError("train mode needs a dropout mask or an Rng")
            dropout_mask = self.sample_dropout_mask(x.shape[0], rng)
        if not self.training:
            dropout_mask = None
        g_main, g_comp, pair, mcache = self._gates(x)
        h_main, tc_main = self._trunk(x * g_main, dropout_mask)
        logits_main, hc_main = self.head_main.forward(h_main)
        pred_main = softmax_rows(logits_main)
        pred_comp = None
        comp = None
        if self.head_comp is not None:
            h_comp, tc_comp = self._trunk(x * g_comp, dropout_mask)
            logits_comp, hc_comp = self.head_comp.forward(h_comp)
            pred_comp = softmax_rows(logits_comp)
            comp = (tc_comp, hc_comp, g_comp)
        cache = (x, mcache, pair, (tc_main, hc_main, g_main), comp)
        return DualOutput(pred_main, pred_comp, pair, cache)

    # -- objective ------------------------------------------------------

    def loss_and_grads(self, x, y, gamma: float = 0.0, lam: float = 0.0, comp_labels=None,
                       dropout_mask=None, rng: Rng | None = None, label_rng: Rng | None = None):
        """Total loss and gradients of every parameter for one minibatch.

        ``y`` and ``comp_labels`` are 1-based.  When the model has a
        complementary head and ``comp_labels`` is None, labels are drawn from
        ``label_rng``.  With ``gamma == 0`` the complementary path contributes
        nothing to the shared parameters.
        """
        out = self.forward_dual(x, dropout_mask=dropout_mask, rng=rng)
        x, mcache, pair, (tc_main, hc_main, g_main), comp = out.cache
        loss_main, _ = cross_entropy(out.pred_main, one_hot(y, self.n_classes))
        dlogits = (out.pred_main - one_hot(y, self.n_classes)) / x.shape[0]
        grads = {}
        dh, g = self.head_main.backward(dlogits, hc_main)
        grads["head_main.W"], grads["head_main.b"] = g["W"], g["b"]
        dxg, tgrads = self._trunk_backward(dh, tc_main)
        grads.update(tgrads)
        dgate_main = (x * dxg).sum(axis=0)
        dgate_comp = None

        loss_comp = 0.0
        if comp is not None:
            if comp_labels is None:
                if label_rng is None:
                    raise ValueError("complementary path needs comp_labels or a label Rng")
                comp_labels = random_labels(x.shape[0], self.n_classes, label_rng)
            target = one_hot(comp_labels, self.n_classes)
            loss_comp, _ = cross_entropy(out.pred_comp, target)
            tc_comp, hc_comp, g_comp = comp
            if gamma != 0.0:
                dlogits_c = gamma * (out.pred_comp - target) / x.shape[0]
                dh_c, gc = self.head_comp.backward(dlogits_c, hc_comp)
                dxg_c, tgrads_c = self._trunk_backward(dh_c, tc_comp)
                for k, v in tgrads_c.items():
                    grads[k] = grads[k] + v
                dgate_comp = (x * dxg_c).sum(axis=0)
            else:
                gc = {"W": np.zeros_like(self.head_comp.W), "b": np.zeros_like(self.head_comp.b)}
            grads["head_comp.W"], grads["head_comp.b"] = gc["W"], gc["b"]

        total = loss_main + gamma * loss_comp
        if isinstance(self.mask_net, VectorMask):
            v = self.mask_net.logits
            dv = dgate_main
            if lam != 0.0:
                total += lam * float(np.abs(v).sum())
                dv = dv + lam * np.sign(v)
            if dgate_comp is not None:
                dv = dv - softmax_backward(pair.m_comp, dgate_comp)
            grads["mask.logits"] = dv
        else:
            dzbar = softmax_backward(pair.m, dgate_main)
            if dgate_comp is not None:
                dzbar = dzbar - softmax_backward(pair.m_comp, dgate_comp)
            for k, v in self.mask_net.backward(dzbar, mcache).items():
                grads[f"mask.{k}"] = v
        return LossParts(loss_main, loss_comp, total), grads

    def loss(self, x, y, gamma: float = 0.0, lam: float = 0.0, comp_labels=None, dropout_mask=None) -> LossParts:
        """Forward-only objective with frozen randomness; keeps the dtype of ``x``."""
        out = self.forward_dual(x, dropout_mask=dropout_mask)
        main, _ = cross_entropy(out.pred_main, one_hot(y, self.n_classes))
        comp = 0.0
        if out.pred_comp is not None:
            comp, _ = cross_entropy(out.pred_comp, one_hot(comp_labels, self.n_classes))
        total = main + gamma * comp
        if lam != 0.0 and isinstance(self.mask_net, VectorMask):
            total = total + lam * np.abs(self.mask_net.logits).sum()
        return LossParts(main, comp, total)

    # -- inference ------------------------------------------------------

    def eval_gate(self, X=None):
        if isinstance(self.mask_net, VectorMask):
            return self.mask_net.logits
        if self.selection_masks is not None:
            return self.selection_masks.m
        return full_dataset_mask(self.mask_net, X).m

    def predict_proba(self, X, chunk_size: int = 4096):
        """Main-head probabilities in eval mode, gated by the selection-time mask."""
        X = as_matrix(X)
        was_training = self.training
        self.eval()
        gate = self.eval_gate(X)
        out = []
        for start in range(0, X.shape[0], chunk_size):
            h, _ = self._trunk(X[start:start + chunk_size] * gate, None)
            out.append(softmax_rows(self.head_main.forward(h)[0]))
        if was_training:
            self.train()
        return np.vstack(out)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1) + 1

    def accuracy(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))

    def save(self, path):
        arch = self.architecture()
        if self.selection_masks is not None:
            arch["selection_logits"] = self.selection_masks.logits.tolist()
        save_checkpoint(path, arch, self.params())

    @classmethod
    def load(cls, path):
        arch, params = load_checkpoint(path)
        mask = arch["mask"]
        model = cls(arch["n_features"], arch["n_classes"], mask=mask["kind"], hidden=mask.get("hidden"),
                    complementary=arch["complementary"], trunk=arch["trunk"], dropout=arch["dropout"],
                    alpha=arch["alpha"], seed=arch["seed"])
        own = model.params()
        if set(own) != set(params):
            raise ValueError(f"{path}: parameter names do not match the architecture")
        for k, v in params.items():
            if own[k].shape != v.shape:
                raise ShapeError(f"load[{k}]", own[k].shape, v.shape)
            np.copyto(own[k], v)
        if "selection_logits" in arch:
            model.selection_masks = MaskPair.from_logits(arch["selection_logits"])
        return model


def random_labels(n: int, n_classes: int, rng: Rng):
    """``n`` labels drawn independently from U{1..C}."""
    if n_classes < 2:
        raise ValueError("random labels need at least two classes")
    return rng.integers(1, n_classes, size=n)


def complementary_loss(pred_comp, n_classes: int, rng: Rng):
    """Cross entropy of complementary predictions against fresh random labels.

    Returns ``(loss, grad_wrt_pred, labels)``.
    """
    pred_comp = as_matrix(pred_comp)
    if n_classes < 2:
        raise ValueError("complementary loss is undefined for fewer than two classes")
    if pred_comp.shape[1] != n_classes:
        raise ShapeError("complementary_loss", pred_comp.shape, (n_classes,))
    labels = random_labels(pred_comp.shape[0], n_classes, rng)
    loss, grad = cross_entropy(pred_comp, one_hot(labels, n_classes))
    return loss, grad, labels


def build_model(method: str, n_features: int, n_classes: int, config: TrainingConfig) -> CfmModel:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return CfmModel(n_features, n_classes, mask="vector" if method == "dfs-cfm" else "attention",
                    hidden=config.hidden, complementary=method != "fm", trunk=config.trunk,
                    dropout=config.dropout, alpha=config.alpha, seed=config.seed)


def train(model: CfmModel, dataset: Dataset, config: TrainingConfig,
          validation: Dataset | None = None) -> TrainReport:
    """Minibatch Adam training; leaves the model in eval mode with its selection mask set."""
    if dataset.n_samples == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.n_features != model.n_features:
        raise ShapeError("train", dataset.X.shape, (model.n_features,))
    start_time = time.perf_counter()
    gamma = 0.0 if config.gamma is None else float(config.gamma)
    streams = Rng(config.seed).derive("train")
    shuffle_rng = streams.derive("shuffle")
    dropout_rng = streams.derive("dropout")
    label_rng = streams.derive("labels")
    opt = Adam(lr=config.learning_rate)
    params = model.params()
    X, y = dataset.X, dataset.y
    n = dataset.n_samples
    report = TrainReport(config=asdict(config))
    for epoch in range(config.epochs):
        model.train()
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            parts, grads = model.loss_and_grads(X[idx], y[idx], gamma=gamma, lam=config.lam,
                                                rng=dropout_rng, label_rng=label_rng)
            if not np.isfinite(parts.total):
                raise NonFiniteLossError(epoch, b, parts.total)
            opt.step(params, grads)
            sums += np.array([parts.main, parts.comp, parts.total]) * idx.size
        model.eval()
        val_acc = None
        if validation is not None:
            model.selection_masks = full_dataset_mask(model.mask_net, X)
            val_acc = model.accuracy(validation.X, validation.y)
        means = sums / n
        report.epochs.append(EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]), val_acc))
        log.debug("epoch %d loss %.5f val %s", epoch, means[2], val_acc)
    model.eval()
    model.selection_masks = full_dataset_mask(model.mask_net, X)
    report.final_masks = model.selection_masks
    report.seconds = time.perf_counter() - start_time
    return report


def derive_seed(seed: int, key) -> int:
    return (int(seed) ^ _stable_hash(str(key))) & ((1 << 64) - 1)


@dataclass
class GammaSearch:
    best_gamma: float
    accuracies: dict


def _gamma_job(args):
    method, train_set, val_set, config = args
    model = build_model(method, train_set.n_features, train_set.n_classes, config)
    train(model, train_set, config)
    return model.accuracy(val_set.X, val_set.y)


def select_gamma(dataset: Dataset, config: TrainingConfig, method: str = "cfm", workers: int = 1) -> GammaSearch:
    """Grid search over ``config.gamma_grid`` on a held-out validation split.

    The validation rows are the last ``validation_fraction`` of a seeded
    shuffle.  Each gamma trains its own model with seed ``seed ^ hash(index)``;
    the highest main-path validation accuracy wins, ties going to the smaller
    gamma.
    """
    parts = split(dataset, (1.0 - config.validation_fraction, config.validation_fraction), config.seed)
    train_set, val_set = dataset.subset(parts.train), dataset.subset(parts.test)
    jobs = [(method, train_set, val_set,
             replace(config, gamma=g, seed=derive_seed(config.seed, f"gamma:{i}")))
            for i, g in enumerate(config.gamma_grid)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(_gamma_job, jobs))
    else:
        accs = [_gamma_job(j) for j in jobs]
    best = min(zip(config.gamma_grid, accs), key=lambda ga: (-ga[1], ga[0]))[0]
    return GammaSearch(best, dict(zip(config.gamma_grid, accs)))


@dataclass
class FitResult:
    model: CfmModel
    report: TrainReport
    gamma: float
    search: GammaSearch | None = None

    @property
    def masks(self) -> MaskPair:
        return self.model.selection_masks


def fit_method(method: str, dataset: Dataset, config: TrainingConfig, workers: int = 1) -> FitResult:
    """Train one feature-selection method on ``dataset``.

    ``fm`` trains the baseline with gamma 0.  ``cfm`` and ``dfs-cfm`` use
    ``config.gamma``, or grid-search it when it is None and then retrain on
    all of ``dataset`` with the chosen value.
    """
    search = None
    if method == "fm":
        gamma = 0.0
    elif config.gamma is None:
        search = select_gamma(dataset, config, method, workers)
        gamma = search.best_gamma
    else:
        gamma = float(config.gamma)
    cfg = replace(config, gamma=gamma)
    model = build_model(method, dataset.n_features, dataset.n_classes, cfg)
    report = train(model, dataset, cfg)
    return FitResult(model, report, gamma, search)
