"""Training loops for SQ-VAE and the baselines: configuration, model assembly,
Adam, plateau learning-rate halving, one optimizer step and evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import codebook as cbk
from .autodiff import NumericError, ShapeError, Tensor, exp, mul, no_grad, reshape, scale
from .codebook import Codebook, UsageStats
from .data import Dataset, batches, build_dataset, make_rng
from .metrics import MetricRow, miou, pixel_error
from .models import (
    CategoricalDecoder,
    CategoryProjection,
    Encoder,
    GaussianDecoder,
    VmfDecoder,
    one_hot,
    project_data,
    vmf_class_probs,
)
from .objectives import (
    gaussian_sq_loss,
    kappa_mle,
    nc_sq_loss,
    vae_loss,
    vmf_sq_loss,
    vq_loss,
)
from .quantizer import (
    TemperatureSchedule,
    deterministic_quantize,
    stochastic_quantize,
    temperature,
)
from .variance import VarianceParam


class ConfigError(ValueError):
    """Invalid run configuration (message names the field)."""


class TrainingDiverged(ArithmeticError):
    """A loss term became non-finite."""


GAUSSIAN_SQ = {
    "gaussian_sqvae_I": "I",
    "gaussian_sqvae_II": "II",
    "gaussian_sqvae_III": "III",
    "gaussian_sqvae_IV": "IV",
    "fixed_sigma_q": "fixed",
}
VQ_KINDS = ("vqvae", "vqvae_ema", "vqvae_ema_reset")
MODEL_KINDS = tuple(GAUSSIAN_SQ) + ("vmf_sqvae", "nc_sqvae") + VQ_KINDS + ("vae",)
CATEGORICAL_KINDS = ("vmf_sqvae", "nc_sqvae")

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
EVAL_CHUNK = 512


def _default_dataset() -> dict:
    return {"kind": "synth_continuous", "n": 2500, "side": 16, "seed": 0}


@dataclass
class TrainConfig:
    model: str = "gaussian_sqvae_I"
    dataset: dict = field(default_factory=_default_dataset)
    d_z: int = 8
    d_b: int = 16
    K: int = 32
    epochs: int = 30
    batch_size: int = 32
    lr: float | None = None  # None -> 3e-4 for VQ-VAE kinds, 1e-3 otherwise
    beta: float = 0.25
    gamma: float = 0.99
    sigma_q2: float = 1.0  # fixed dequantization variance (fixed_sigma_q)
    vq_sigma2: float = 1.0  # decoder variance in the VQ-VAE reconstruction term
    tau_min: float = 0.1
    tau_rate: float = 1e-5
    schedule_sign: float = -1.0
    seed: int = 0
    hidden: list = field(default_factory=lambda: [256, 128])
    grad_clip: float = 10.0  # global-norm clip; 0 disables
    init_sigma2: float | str = "data"  # decoder variance at step 0; "data" = pixel variance
    init_kappa: float | str = "data"  # vMF decoder concentration; "data" = vMF fit to projected pixels
    init_kappa_phi: float | str = "log_K"  # quantizer concentration; "log_K" = ln K
    lr_patience: int = 3
    projection: str = "one_hot"
    vmf_per_pixel_normalizer: bool = True
    step_rows: bool = False
    eval_split: str = "test"

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = sorted(set(raw) - known)
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(extra)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lr"] = self.learning_rate
        return out

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return float(self.lr)
        return 3e-4 if self.model in VQ_KINDS else 1e-3

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model: must be one of {', '.join(MODEL_KINDS)}")
        for name in ("d_z", "d_b", "batch_size", "lr_patience"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name}: must be a positive integer")
        if not isinstance(self.K, int) or self.K < 2:
            raise ConfigError("K: must be an integer >= 2")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError("epochs: must be an integer >= 0")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed: must be an integer >= 0")
        for name in ("beta", "sigma_q2", "vq_sigma2", "tau_min", "tau_rate"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(f"{name}: must be > 0")
        if self.lr is not None and (not isinstance(self.lr, (int, float)) or self.lr < 0):
            raise ConfigError("lr: must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma: must lie in (0, 1)")
        if self.tau_min > 1.0:
            raise ConfigError("tau_min: must be <= 1")
        if self.schedule_sign not in (-1, 1, -1.0, 1.0):
            raise ConfigError("schedule_sign: must be -1 or +1")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip: must be >= 0 (0 disables)")
        if self.init_sigma2 != "data" and (not isinstance(self.init_sigma2, (int, float))
                                           or not self.init_sigma2 > 0):
            raise ConfigError('init_sigma2: must be "data" or a positive number')
        for name, word in (("init_kappa", "data"), ("init_kappa_phi", "log_K")):
            v = getattr(self, name)
            if v != word and (isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0):
                raise ConfigError(f'{name}: must be "{word}" or a positive number')
        if self.projection not in ("one_hot", "circle"):
            raise ConfigError("projection: must be one_hot or circle")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigError("eval_split: must be train, val or test")
        if (not isinstance(self.hidden, (list, tuple)) or not self.hidden
                or any(not isinstance(h, int) or h < 1 for h in self.hidden)):
            raise ConfigError("hidden: must be a non-empty list of positive integers")
        if not isinstance(self.dataset, dict) or "kind" not in self.dataset:
            raise ConfigError("dataset: must be an object with a kind")
        categorical = self.dataset["kind"] == "synth_categorical"
        if self.model in CATEGORICAL_KINDS and not categorical:
            raise ConfigError(f"dataset: {self.model} needs categorical data")
        if self.model not in CATEGORICAL_KINDS and categorical:
            raise ConfigError(f"dataset: {self.model} needs continuous data")

    @property
    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.tau_rate, self.tau_min, float(self.schedule_sign))


# ---------------------------------------------------------------------------
# optimizer and learning-rate schedule


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3

    @classmethod
    def zeros(cls, params: dict[str, Tensor], lr: float) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0, lr)


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], st: AdamState) -> None:
    """Bias-corrected Adam step, in place.  Parameters without a gradient
    entry still advance their moments with g = 0."""
    b1, b2 = ADAM_BETAS
    st.t += 1
    c1 = 1.0 - b1 ** st.t
    c2 = 1.0 - b2 ** st.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m, v = st.m[name], st.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += ADAM_EPS
        step = m / c1
        step *= st.lr
        step /= denom
        p.data -= step


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale all gradients so their joint norm is at most ``max_norm``.
    Returns the norm before clipping."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        f = max_norm / total
        for k in grads:
            grads[k] = grads[k] * f
    return total


@dataclass
class PlateauState:
    best: float = math.inf
    bad_epochs: int = 0


def plateau_step(lr: float, plateau: PlateauState, val_loss: float, patience: int = 3) -> float:
    """Halve lr after ``patience`` epochs without a strict improvement."""
    if val_loss < plateau.best:
        plateau.best = val_loss
        plateau.bad_epochs = 0
        return lr
    plateau.bad_epochs += 1
    if plateau.bad_epochs >= patience:
        plateau.bad_epochs = 0
        return lr * 0.5
    return lr


def lr_schedule(lr: float, history, patience: int = 3) -> float:
    """Replay a validation-loss history through the plateau rule."""
    state = PlateauState()
    for v in history:
        lr = plateau_step(lr, state, float(v), patience)
    return lr


# ---------------------------------------------------------------------------
# model assembly


class RunState:
    """Everything a run owns: networks, codebook, scalar parameters, optimizer,
    schedule state, usage statistics and random streams."""

    def __init__(self, config: TrainConfig, dataset: Dataset, run_id: str = "run"):
        self.config = config
        self.dataset = dataset
        self.run_id = run_id
        c = config
        kind = c.model
        if (kind in CATEGORICAL_KINDS) != (dataset.kind == "categorical"):
            raise ConfigError(f"dataset: {kind} cannot train on {dataset.kind} data")
        rng = make_rng(c.seed, "init")
        hidden = tuple(c.hidden)
        dec_hidden = tuple(reversed(hidden))
        D = dataset.D
        d_lat = c.d_z * c.d_b
        self.proj = None
        self.cb = Codebook.init(c.K, c.d_b, rng, unit_norm=(kind == "vmf_sqvae"))
        self.params: dict[str, Tensor] = {"codebook": self.cb.entries}
        if kind == "vmf_sqvae":
            self.proj = CategoryProjection.build(dataset.C_all, c.projection)
            d_in = D * self.proj.F
        elif kind == "nc_sqvae":
            d_in = D * dataset.C_all
        else:
            d_in = D
        head = None
        if kind in GAUSSIAN_SQ and GAUSSIAN_SQ[kind] in ("II", "III", "IV"):
            head = GAUSSIAN_SQ[kind]
        if kind == "vae":
            head = "IV"  # posterior log-variances
        self.encoder = Encoder(d_in, c.d_z, c.d_b, rng, hidden, head,
                               unit_rows=(kind == "vmf_sqvae"))
        if kind == "vmf_sqvae":
            self.decoder = VmfDecoder(d_lat, D, self.proj.F, rng, dec_hidden)
        elif kind == "nc_sqvae":
            self.decoder = CategoricalDecoder(d_lat, D, dataset.C_all, rng, dec_hidden)
        else:
            self.decoder = GaussianDecoder(d_lat, D, rng, dec_hidden)
        self.params.update(self.encoder.parameters())
        self.params.update(self.decoder.parameters())

        def scalar(name):
            self.params[name] = Tensor(0.0, requires_grad=True, name=name)

        if kind in GAUSSIAN_SQ or kind == "vae":
            scalar("log_sigma2")
            self.params["log_sigma2"].data[...] = math.log(self.initial_sigma2())
        if kind in ("gaussian_sqvae_I", "nc_sqvae"):
            scalar("log_var_phi")
        if kind == "nc_sqvae":
            # same starting sharpness as vMF, through kappa_phi = 1 / sigma_phi^2
            self.params["log_var_phi"].data[...] = -math.log(self.initial_kappa_phi())
        if kind == "vmf_sqvae":
            scalar("log_kappa")
            scalar("log_kappa_phi")
            self.params["log_kappa"].data[...] = math.log(self.initial_kappa())
            self.params["log_kappa_phi"].data[...] = math.log(self.initial_kappa_phi())
        if kind == "vae" or kind in ("vqvae_ema", "vqvae_ema_reset"):
            # no codebook gradient path: the VAE ignores it, EMA maintains it
            del self.params["codebook"]
        self.adam = AdamState.zeros(self.params, c.learning_rate)
        self.plateau = PlateauState()
        self.usage = UsageStats.zeros(c.K, c.d_b)
        self.step = 0
        self.epoch = 0
        self.gumbel_rng = make_rng(c.seed, "gumbel")
        self.reset_rng = make_rng(c.seed, "reset")
        self.noise_rng = make_rng(c.seed, "noise")
        self.last_grads: dict[str, np.ndarray] = {}

    # -- small helpers ----------------------------------------------------
    def initial_sigma2(self) -> float:
        """Variance of the training pixels (the error of predicting their mean),
        or the configured constant."""
        if self.config.init_sigma2 != "data":
            return float(self.config.init_sigma2)
        v = float(np.var(self.dataset.split("train")))
        return v if v > 0 else 1.0

    def initial_kappa(self) -> float:
        """Maximum-likelihood vMF concentration of the projected training
        pixels around their mean direction, or the configured constant."""
        if self.config.init_kappa != "data":
            return float(self.config.init_kappa)
        if self.proj is None:
            raise ConfigError(f"model: {self.config.model} has no vMF decoder concentration")
        V = project_data(self.dataset.split("train"), self.proj)
        rbar = float(np.linalg.norm(V.reshape(-1, V.shape[-1]).mean(axis=0)))
        rbar = min(max(rbar, 1e-6), 1.0 - 1e-6)
        return kappa_mle(rbar, self.proj.F)

    def initial_kappa_phi(self) -> float:
        """ln K puts about half the mass on a code the latent points straight at."""
        if self.config.init_kappa_phi != "log_K":
            return float(self.config.init_kappa_phi)
        return math.log(self.config.K)

    @property
    def kind(self) -> str:
        return self.config.model

    @property
    def lr(self) -> float:
        return self.adam.lr

    def model_inputs(self, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        if self.kind == "vmf_sqvae":
            return project_data(x, self.proj).reshape(n, -1)
        if self.kind == "nc_sqvae":
            return one_hot(x, self.dataset.C_all).reshape(n, -1)
        return x

    def variance(self, log_head) -> VarianceParam:
        kind = self.kind
        if kind == "vmf_sqvae":
            return VarianceParam("vmf", self.params["log_kappa_phi"])
        if kind in ("gaussian_sqvae_I", "nc_sqvae"):
            return VarianceParam("I", self.params["log_var_phi"])
        if kind == "fixed_sigma_q":
            return VarianceParam("fixed", fixed_value=self.config.sigma_q2)
        return VarianceParam(GAUSSIAN_SQ[kind], log_head)

    def scale_summary(self, var: VarianceParam | None = None) -> dict[str, float | None]:
        """sigma2 / sigma2_phi (or kappa / kappa_phi) for logging."""
        out = {"sigma2": None, "sigma2_phi": None, "kappa": None, "kappa_phi": None}
        p = self.params
        if "log_sigma2" in p:
            out["sigma2"] = float(np.exp(p["log_sigma2"].data))
        if self.kind in VQ_KINDS:
            out["sigma2"] = float(self.config.vq_sigma2)
        if "log_var_phi" in p:
            out["sigma2_phi"] = float(np.exp(p["log_var_phi"].data))
        elif self.kind == "fixed_sigma_q":
            out["sigma2_phi"] = float(self.config.sigma_q2)
        elif var is not None and var.kind in ("II", "III", "IV"):
            out["sigma2_phi"] = var.summary()
        if "log_kappa" in p:
            out["kappa"] = float(np.exp(p["log_kappa"].data))
            out["kappa_phi"] = float(np.exp(p["log_kappa_phi"].data))
        return out


@dataclass
class StepResult:
    """Output of one forward pass."""

    objective: Tensor
    terms: dict[str, float]
    hard_indices: np.ndarray
    entropy: np.ndarray  # per-sample, per-position entropies
    prediction: np.ndarray  # reconstruction (continuous) or class map (categorical)
    variance: VarianceParam | None
    latents: np.ndarray  # encoder output Zhat


def forward(state: RunState, x: np.ndarray, train: bool, tau: float = 1.0) -> StepResult:
    """Loss for one batch.  ``train=False`` uses hard argmax assignments and
    draws no random numbers."""
    kind = state.kind
    c = state.config
    p = state.params
    inp = state.model_inputs(x)
    Zhat, log_head = state.encoder(inp)
    n = x.shape[0]

    if kind == "vae":
        var_post = exp(log_head)
        if train:
            eps = state.noise_rng.standard_normal(Zhat.shape)
            z = Zhat + mul(exp(scale(log_head, 0.5)), eps)
        else:
            z = Zhat
        xhat = state.decoder(z)
        br = vae_loss(x, reshape(Zhat, (n, -1)), reshape(var_post, (n, -1)), xhat,
                      p["log_sigma2"])
        terms = br.values()
        terms["loss"] = terms.pop("total")
        return StepResult(br.objective, terms, np.zeros((n, c.d_z), dtype=np.int64),
                          np.zeros((n, c.d_z)), xhat.data, None, Zhat.data)

    if kind in VQ_KINDS:
        quant = deterministic_quantize(Zhat, state.cb)
        xhat = state.decoder(quant.soft_code)
        br = vq_loss(x, Zhat, quant, xhat, c.beta, c.vq_sigma2,
                     dictionary_term=(kind == "vqvae"))
        terms = br.values()
        terms["loss"] = terms.pop("objective")
        return StepResult(br.objective, terms, quant.hard_indices,
                          np.zeros(quant.hard_indices.shape), xhat.data, None, Zhat.data)

    var = state.variance(log_head)
    quant = stochastic_quantize(Zhat, state.cb, var, tau, rng=state.gumbel_rng if train else None,
                                hard=not train)
    ent = quant.entropy_per_position.data
    if kind == "vmf_sqvae":
        f_dirs = state.decoder(quant.soft_code)
        V = project_data(x, state.proj)
        br = vmf_sq_loss(V, Zhat, quant, f_dirs, p["log_kappa"],
                         per_pixel_normalizer=c.vmf_per_pixel_normalizer)
        with no_grad():
            probs = vmf_class_probs(f_dirs.detach(), float(np.exp(p["log_kappa"].data)), state.proj)
        pred = np.argmax(probs.data, axis=-1)
    elif kind == "nc_sqvae":
        logits = state.decoder(quant.soft_code)
        br = nc_sq_loss(x, Zhat, quant, logits)
        pred = np.argmax(logits.data, axis=-1)
    else:
        xhat = state.decoder(quant.soft_code)
        br = gaussian_sq_loss(x, Zhat, quant, xhat, p["log_sigma2"])
        pred = xhat.data
    terms = br.values()
    terms["loss"] = terms.pop("total")
    return StepResult(br.objective, terms, quant.hard_indices, ent, pred, var, Zhat.data)


def _check_finite(terms: dict[str, float], step: int) -> None:
    for name, v in terms.items():
        if not math.isfinite(v):
            raise TrainingDiverged(f"non-finite {name} ({v}) at step {step}")


def train_step(state: RunState, x: np.ndarray) -> dict:
    """One optimizer step on batch ``x``; returns loss terms, temperature,
    mean entropy and the current scale parameters."""
    c = state.config
    tau = temperature(state.step, c.schedule)
    try:
        res = forward(state, x, train=True, tau=tau)
    except NumericError as exc:
        raise TrainingDiverged(f"{exc} at step {state.step}") from None
    _check_finite(res.terms, state.step)
    for t in state.params.values():
        t.zero_grad()
    try:
        raw = res.objective.backward()
    except NumericError as exc:
        raise TrainingDiverged(f"{exc} in backward at step {state.step}") from None
    by_id = {id(t): g for t, g in raw.items()}
    grads = {k: by_id[id(t)] for k, t in state.params.items() if id(t) in by_id}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {k} at step {state.step}")
    clip_global_norm(grads, c.grad_clip)
    state.last_grads = grads
    adam_update(state.params, grads, state.adam)
    state.cb.renormalize()

    if state.kind in ("vqvae_ema", "vqvae_ema_reset"):
        # assignments and latents from the forward pass that produced the loss
        cbk.ema_update(state.cb, state.usage, res.latents, res.hard_indices, c.gamma)
    if state.kind == "vqvae_ema_reset":
        cbk.record_usage(state.usage, res.hard_indices, c.K)
        if state.usage.window_batches >= cbk.RESET_EVERY:
            cbk.codebook_reset(state.cb, state.usage, state.reset_rng)
    state.step += 1
    out = dict(res.terms)
    out["tau"] = tau
    out["mean_entropy"] = float(np.mean(res.entropy))
    out.update(state.scale_summary(res.variance))
    return out



# ---------------------------------------------------------------------------
# evaluation and epochs


def evaluate(state: RunState, split: str) -> dict:
    """Hard-assignment metrics over a whole split (fixed order, no randomness)."""
    ds = state.dataset
    c = state.config
    idx = ds.splits.get(split)
    if idx is None or len(idx) == 0:
        raise ShapeError(f"split {split!r} is empty")
    tot = {"loss": 0.0, "reconstruction": 0.0}
    counts = np.zeros(c.K, dtype=np.int64)
    ent_sum = 0.0
    ent_n = 0
    sq_err = 0.0
    wrong = 0
    labels, preds = [], []
    var_summary = None
    with no_grad():
        for start in range(0, len(idx), EVAL_CHUNK):
            x = ds.samples[idx[start:start + EVAL_CHUNK]]
            res = forward(state, x, train=False)
            n = x.shape[0]
            for k in tot:
                tot[k] += res.terms[k] * n
            if state.kind != "vae":
                counts += cbk.usage_histogram(res.hard_indices, c.K)
            ent_sum += float(np.sum(res.entropy))
            ent_n += res.entropy.size
            if ds.kind == "continuous":
                sq_err += float(np.sum((x - res.prediction) ** 2))
            else:
                wrong += int(np.sum(x != res.prediction))
                labels.append(x)
                preds.append(res.prediction)
            if res.variance is not None and res.variance.kind in ("II", "III", "IV"):
                var_summary = res.variance
    n_all = len(idx)
    out = {k: v / n_all for k, v in tot.items()}
    out["perplexity"] = cbk.perplexity(counts) if counts.sum() else None
    out["mean_entropy"] = ent_sum / ent_n
    if ds.kind == "continuous":
        out["mse"] = sq_err / (n_all * ds.D)
    else:
        lab, pr = np.concatenate(labels), np.concatenate(preds)
        out["pixel_error"] = pixel_error(lab, pr)
        out["miou"] = miou(lab, pr, ds.C_all)
    out.update(state.scale_summary(var_summary))
    out["step"] = state.step
    out["epoch"] = state.epoch
    return out


TERM_FIELDS = ("loss", "reconstruction", "regularization", "neg_entropy",
               "decoder_variance_term", "dictionary", "commitment")


def run_epoch(state: RunState, on_step=None) -> MetricRow:
    """One pass over the training split, then validation (plateau rule) and
    evaluation on ``config.eval_split``.  Returns the epoch's MetricRow."""
    c = state.config
    ds = state.dataset
    sums: dict[str, float] = {}
    n_seen = 0
    ent = 0.0
    last = {}
    for idx in batches(ds, "train", c.batch_size, c.seed, state.epoch):
        x = ds.samples[idx]
        out = train_step(state, x)
        n = len(idx)
        for k in TERM_FIELDS:
            if k in out:
                sums[k] = sums.get(k, 0.0) + out[k] * n
        ent += out["mean_entropy"] * n
        n_seen += n
        last = out
        if on_step is not None and c.step_rows:
            on_step(MetricRow(state.run_id, state.epoch, state.step,
                              **{k: out.get(k) for k in TERM_FIELDS},
                              **{k: out.get(k) for k in ("sigma2", "sigma2_phi", "kappa", "kappa_phi")},
                              mean_entropy=out["mean_entropy"], lr=state.lr, tau=out["tau"]))
    means = {k: v / n_seen for k, v in sums.items()}
    lr_used = state.lr
    val = evaluate(state, "val")["loss"] if "val" in ds.splits else None
    if val is not None:
        state.adam.lr = plateau_step(state.adam.lr, state.plateau, val, c.lr_patience)
    ev = evaluate(state, c.eval_split)
    state.epoch += 1
    scales = state.scale_summary()
    for k in ("sigma2_phi",):
        if scales[k] is None:
            scales[k] = ev.get(k)
    return MetricRow(
        state.run_id, state.epoch, state.step,
        **{k: means.get(k) for k in TERM_FIELDS},
        val_loss=val,
        **scales,
        perplexity=ev["perplexity"],
        mean_entropy=ent / n_seen if state.kind not in VQ_KINDS + ("vae",) else None,
        test_mse=ev.get("mse"),
        pixel_error=ev.get("pixel_error"),
        miou=ev.get("miou"),
        lr=lr_used,
        tau=last.get("tau"),
    )


def train(config: TrainConfig, dataset: Dataset | None = None, run_id: str = "run",
          on_row=None) -> tuple[RunState, list[MetricRow]]:
    """Build a fresh run and train it for ``config.epochs`` epochs."""
    state = RunState(config, dataset if dataset is not None else build_dataset(config.dataset),
                     run_id)
    rows = continue_training(state, config.epochs, on_row)
    return state, rows


def continue_training(state: RunState, epochs: int, on_row=None,
                      on_epoch=None) -> list[MetricRow]:
    """Run ``epochs`` more epochs; ``on_epoch(state)`` fires after each."""
    rows = []
    for _ in range(epochs):
        row = run_epoch(state, on_row)
        rows.append(row)
        if on_row is not None:
            on_row(row)
        if on_epoch is not None:
            on_epoch(state)
    return rows


# ---------------------------------------------------------------------------
# state (de)serialization helpers used by checkpoints


def state_arrays(state: RunState) -> dict[str, np.ndarray]:
    """Every array needed to continue training bit-exactly."""
    out = {f"param/{k}": t.data for k, t in state.params.items()}
    out["codebook/entries"] = state.cb.entries.data
    for k in state.params:
        out[f"adam_m/{k}"] = state.adam.m[k]
        out[f"adam_v/{k}"] = state.adam.v[k]
    out["usage/counts"] = state.usage.counts.astype(np.float64)
    out["usage/ema_cluster_size"] = state.usage.ema_cluster_size
    out["usage/ema_cluster_sum"] = state.usage.ema_cluster_sum
    return out


def _rng_state(g: np.random.Generator) -> dict:
    s = g.bit_generator.state
    st = s["state"]
    return {
        "counter": [int(v) for v in st["counter"]],
        "key": [int(v) for v in st["key"]],
        "buffer": [int(v) for v in s["buffer"]],
        "buffer_pos": int(s["buffer_pos"]),
        "has_uint32": int(s["has_uint32"]),
        "uinteger": int(s["uinteger"]),
    }


def _set_rng_state(g: np.random.Generator, d: dict) -> None:
    g.bit_generator.state = {
        "bit_generator": "Philox",
        "state": {"counter": np.array(d["counter"], dtype=np.uint64),
                  "key": np.array(d["key"], dtype=np.uint64)},
        "buffer": np.array(d["buffer"], dtype=np.uint64),
        "buffer_pos": d["buffer_pos"],
        "has_uint32": d["has_uint32"],
        "uinteger": d["uinteger"],
    }


def state_header(state: RunState) -> dict:
    """JSON-able scalars: counters, schedule state and random-stream positions."""
    best = state.plateau.best
    return {
        "run_id": state.run_id,
        "seed": state.config.seed,
        "step": state.step,
        "epoch": state.epoch,
        "adam_t": state.adam.t,
        "lr": state.adam.lr,
        "plateau_best": None if math.isinf(best) else best,
        "plateau_bad": state.plateau.bad_epochs,
        "usage_window": state.usage.window_batches,
        "rng": {"gumbel": _rng_state(state.gumbel_rng), "reset": _rng_state(state.reset_rng),
                "noise": _rng_state(state.noise_rng)},
    }


def restore_state(config: TrainConfig, header: dict, arrays: dict[str, np.ndarray],
                  dataset: Dataset | None = None) -> RunState:
    state = RunState(config, dataset if dataset is not None else build_dataset(config.dataset),
                     header.get("run_id", "run"))
    expected = state_arrays(state)
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise ShapeError(f"checkpoint lacks arrays: {', '.join(missing[:5])}")
    for name, ref in expected.items():
        if arrays[name].shape != ref.shape:
            raise ShapeError(f"checkpoint array {name} has shape {arrays[name].shape}, "
                             f"expected {ref.shape}")
    for k, t in state.params.items():
        t.data[...] = arrays[f"param/{k}"]
        state.adam.m[k][...] = arrays[f"adam_m/{k}"]
        state.adam.v[k][...] = arrays[f"adam_v/{k}"]
    state.cb.entries.data[...] = arrays["codebook/entries"]
    state.usage.counts = arrays["usage/counts"].astype(np.int64)
    state.usage.ema_cluster_size = arrays["usage/ema_cluster_size"].copy()
    state.usage.ema_cluster_sum = arrays["usage/ema_cluster_sum"].copy()
    state.usage.window_batches = int(header["usage_window"])
    state.step = int(header["step"])
    state.epoch = int(header["epoch"])
    state.adam.t = int(header["adam_t"])
    state.adam.lr = float(header["lr"])
    best = header["plateau_best"]
    state.plateau = PlateauState(math.inf if best is None else float(best),
                                 int(header["plateau_bad"]))
    for name, g in (("gumbel", state.gumbel_rng), ("reset", state.reset_rng),
                    ("noise", state.noise_rng)):
        _set_rng_state(g, header["rng"][name])
    return state
