"""Desk-scale training harness.

A small ReLU multilayer network built from quantized linear layers, trained
with AdamW (fp32 master weights and optimizer state), gradient clipping,
linear warmup and cosine decay.  Two synthetic tasks are provided: an
unrealizable teacher-student regression and a sequence-memorization
classification task.  Everything is bit-reproducible from the master seed
through counter-based streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import qlinear, rng
from .quantizers import QUEST, RTN_ABSMAX, SR_ABSMAX, QuantScheme

FORWARD_KINDS = ("exact", "rtn", "sr", "quest")
BACKWARD_KINDS = ("exact", "rtn", "sr")
_FWD_SCHEMES = {"rtn": RTN_ABSMAX, "sr": SR_ABSMAX, "quest": QUEST}

# stream tags
_T_INIT, _T_DATA, _T_EVAL, _T_XI, _T_SRFWD, _T_TEACHER, _T_SEQ = 1, 2, 3, 4, 5, 6, 7


@dataclass(frozen=True)
class SchemePair:
    """Forward quantization scheme and backward rounding mode."""

    forward: str = "quest"
    backward: str = "rtn"

    def __post_init__(self):
        if self.forward not in FORWARD_KINDS:
            raise ValueError(f"unknown forward scheme {self.forward!r}")
        if self.backward not in BACKWARD_KINDS:
            raise ValueError(f"unknown backward rounding {self.backward!r}")

    @property
    def label(self) -> str:
        return f"{self.forward}:{self.backward}"


EXACT_PAIR = SchemePair("exact", "exact")
DEFAULT_PAIR = SchemePair("quest", "rtn")


def parse_pair(text: str) -> SchemePair:
    fwd, _, bwd = text.partition(":")
    if not bwd:
        raise ValueError(f"scheme pair must look like 'quest:rtn', got {text!r}")
    return SchemePair(fwd.strip(), bwd.strip())


@dataclass
class TrainConfig:
    steps: int = 400
    batch_size: int = 64
    lr: float = 0.02
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    warmup_frac: float = 0.1
    lr_floor: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("steps, batch_size and lr must be positive")


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to the peak at warmup_frac * steps, then cosine decay."""
    warmup = max(1, int(round(cfg.warmup_frac * cfg.steps)))
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    span = max(1, cfg.steps - 1 - warmup)
    t = min(step - warmup, span)
    return cfg.lr_floor + 0.5 * (cfg.lr - cfg.lr_floor) * (1.0 + math.cos(math.pi * t / span))


class ToyModel:
    """Bias-free ReLU stack of quantized linear layers."""

    def __init__(self, dims: list[int], seed: int = 0, pair: SchemePair = DEFAULT_PAIR):
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        for d in dims:
            if d % 32 != 0:
                raise ValueError(f"all dims must be divisible by 32, got {d}")
        self.dims = list(dims)
        self.pair = pair
        self.seed = seed
        self.weights: list[np.ndarray] = []
        for layer, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.gaussians(rng.derive_seed(seed, _T_INIT, layer), rng.DOMAIN_GAUSS,
                              0, d_out * d_in)
            self.weights.append(
                (w.reshape(d_out, d_in) * math.sqrt(2.0 / d_in)).astype(np.float32)
            )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights)

    def copy(self) -> "ToyModel":
        m = ToyModel(self.dims, seed=self.seed, pair=self.pair)
        m.weights = [w.copy() for w in self.weights]
        return m


def _layer_forward(x, w, pair: SchemePair, seed: int, layer: int, step: int):
    if pair.forward == "exact":
        policy = qlinear.GemmPolicy(accumulation="single", operand_path="exact")
        return qlinear.forward(x, w, policy=policy)
    scheme: QuantScheme = _FWD_SCHEMES[pair.forward]
    sr_seed = rng.derive_seed(seed, _T_SRFWD, step, layer) if pair.forward == "sr" else None
    return qlinear.forward(x, w, scheme=scheme, seed=sr_seed)


def model_forward(model: ToyModel, x: np.ndarray, pair: SchemePair, seed: int, step: int):
    """Returns (activations, caches): activations[l] is the input of layer l,
    activations[-1] the network output; caches hold per-layer contexts."""
    a = np.asarray(x, dtype=np.float32)
    acts = [a]
    caches = []
    for layer, w in enumerate(model.weights):
        z, ctx = _layer_forward(a, w, pair, seed, layer, step)
        caches.append(ctx)
        a = np.maximum(z, 0.0) if layer < model.n_layers - 1 else z
        acts.append(a)
    return acts, caches


def model_backward(model: ToyModel, acts, caches, dy, pair: SchemePair, xi: int):
    """Returns (weight gradients, per-layer input-activation gradients)."""
    grads_w = [None] * model.n_layers
    grads_in = [None] * model.n_layers
    g = np.asarray(dy, dtype=np.float32)
    for layer in range(model.n_layers - 1, -1, -1):
        if layer < model.n_layers - 1:
            g = g * (acts[layer + 1] > 0.0)
        dx, dw = qlinear.backward(
            g, caches[layer], xi=rng.derive_seed(xi, layer), rounding=pair.backward
        )
        grads_w[layer] = dw
        grads_in[layer] = dx
        g = dx
    return grads_w, grads_in


def activation_gradients(model: ToyModel, acts, dy, pair: SchemePair, xi: int):
    """Per-layer input gradients for a backward pass over fixed activations.

    acts must come from an exact forward; the pair's forward scheme rebuilds
    the quantized contexts from those shared activations, so the two legs of
    a comparison differ only in the backward path.
    """
    caches = []
    for layer, w in enumerate(model.weights):
        _, ctx = _layer_forward(acts[layer], w, pair, seed=rng.derive_seed(xi, _T_XI, layer),
                                layer=layer, step=0)
        caches.append(ctx)
    _, grads_in = model_backward(model, acts, caches, dy, pair, xi)
    return grads_in


# ---------------------------------------------------------------------------
# tasks


class TeacherStudentTask:
    """Regression against a fixed, wider two-layer ReLU teacher.

    The teacher is deliberately larger than the student and the targets
    carry Gaussian label noise, so every scheme pair shares a common
    irreducible loss floor (the analog of the entropy term in real loss
    curves) and relative comparisons between pairs stay meaningful.
    """

    name = "teacher"

    def __init__(self, d_in: int = 64, d_out: int = 32, hidden: int = 512,
                 noise_std: float = 0.5, seed: int = 0):
        self.d_in, self.d_out = d_in, d_out
        self.noise_std = noise_std
        self.seed = seed
        w1 = rng.gaussians(rng.derive_seed(seed, _T_TEACHER, 1), rng.DOMAIN_GAUSS, 0, hidden * d_in)
        w2 = rng.gaussians(rng.derive_seed(seed, _T_TEACHER, 2), rng.DOMAIN_GAUSS, 0, d_out * hidden)
        self.w1 = (w1.reshape(hidden, d_in) * math.sqrt(2.0 / d_in)).astype(np.float32)
        self.w2 = (w2.reshape(d_out, hidden) * math.sqrt(1.0 / hidden)).astype(np.float32)

    def _targets(self, x: np.ndarray, noise_seed: int) -> np.ndarray:
        t = np.maximum(x @ self.w1.T, 0.0) @ self.w2.T
        if self.noise_std > 0.0:
            eps = rng.gaussians(noise_seed, rng.DOMAIN_GAUSS, 0, t.size).reshape(t.shape)
            t = t + self.noise_std * eps.astype(np.float32)
        return t

    def batch(self, seed: int, step: int, n: int):
        x = rng.gaussians(rng.derive_seed(seed, _T_DATA, step), rng.DOMAIN_GAUSS,
                          0, n * self.d_in).reshape(n, self.d_in).astype(np.float32)
        return x, self._targets(x, rng.derive_seed(seed, _T_DATA, step, 1))

    def eval_batch(self, seed: int, n: int = 512):
        x = rng.gaussians(rng.derive_seed(seed, _T_EVAL), rng.DOMAIN_GAUSS,
                          0, n * self.d_in).reshape(n, self.d_in).astype(np.float32)
        return x, self._targets(x, rng.derive_seed(seed, _T_EVAL, 1))

    def loss_grad(self, y: np.ndarray, target: np.ndarray):
        diff = (y - target).astype(np.float64)
        loss = float((diff * diff).mean())
        dy = (2.0 * diff / diff.size).astype(np.float32)
        return loss, dy

    def loss(self, y: np.ndarray, target: np.ndarray) -> float:
        return self.loss_grad(y, target)[0]


class SequenceMemorizationTask:
    """Next-token memorization of one fixed random sequence, cross-entropy.

    Tokens embed through a fixed random table; the input is the
    concatenated embedding of a context window and the label is the next
    token.  vocab doubles as the model output width.
    """

    name = "sequence"

    def __init__(self, vocab: int = 32, context: int = 8, emb: int = 32,
                 length: int = 512, seed: int = 0):
        self.vocab, self.context, self.emb = vocab, context, emb
        self.d_in, self.d_out = context * emb, vocab
        self.length = length
        self.seed = seed
        h = rng.raw_at(rng.derive_seed(seed, _T_SEQ, 1), rng.DOMAIN_GAUSS,
                       np.arange(length, dtype=np.uint64))
        self.tokens = (h % np.uint64(vocab)).astype(np.int64)
        e = rng.gaussians(rng.derive_seed(seed, _T_SEQ, 2), rng.DOMAIN_GAUSS, 0, vocab * emb)
        self.table = e.reshape(vocab, emb).astype(np.float32)

    def _window(self, pos: np.ndarray):
        idx = (pos[:, None] + np.arange(self.context)[None, :]) % self.length
        x = self.table[self.tokens[idx]].reshape(len(pos), self.d_in)
        labels = self.tokens[(pos + self.context) % self.length]
        return x, labels

    def batch(self, seed: int, step: int, n: int):
        h = rng.raw_at(rng.derive_seed(seed, _T_DATA, step), rng.DOMAIN_GAUSS,
                       np.arange(n, dtype=np.uint64))
        return self._window((h % np.uint64(self.length)).astype(np.int64))

    def eval_batch(self, seed: int, n: int = 512):
        h = rng.raw_at(rng.derive_seed(seed, _T_EVAL), rng.DOMAIN_GAUSS,
                       np.arange(n, dtype=np.uint64))
        return self._window((h % np.uint64(self.length)).astype(np.int64))

    def loss_grad(self, y: np.ndarray, labels: np.ndarray):
        z = y.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        n = len(labels)
        loss = float(-np.log(p[np.arange(n), labels] + 1e-300).mean())
        p[np.arange(n), labels] -= 1.0
        return loss, (p / n).astype(np.float32)

    def loss(self, y: np.ndarray, labels: np.ndarray) -> float:
        return self.loss_grad(y, labels)[0]


def make_task(name: str, seed: int = 0, **kwargs):
    if name == "teacher":
        return TeacherStudentTask(seed=seed, **kwargs)
    if name == "sequence":
        return SequenceMemorizationTask(seed=seed, **kwargs)
    raise ValueError(f"unknown task {name!r}")


def check_model_fits_task(model: "ToyModel", task) -> None:
    if model.dims[0] != task.d_in or model.dims[-1] != task.d_out:
        raise ValueError(
            f"model dims {model.dims[0]}->{model.dims[-1]} do not match task "
            f"{task.d_in}->{task.d_out}"
        )


DEFAULT_DIMS = {"teacher": [64, 128, 128, 64, 32], "sequence": [256, 128, 64, 32]}


# ---------------------------------------------------------------------------
# optimizer and loop


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]]
    final_loss: float
    status: str
    steps_run: int
    pair_label: str
    seed: int
    clip_fired: int = 0
    clip_max_postnorm: float = 0.0
    model: ToyModel | None = None


def _global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    return math.sqrt(total)


def train(model: ToyModel, task, cfg: TrainConfig) -> TrainResult:
    """AdamW training; divergence is reported as a status, not an exception."""
    check_model_fits_task(model, task)
    m_state = [np.zeros_like(w) for w in model.weights]
    v_state = [np.zeros_like(w) for w in model.weights]
    history: list[tuple[int, float, float]] = []
    status = "ok"
    clip_fired = 0
    clip_max = 0.0
    pair = model.pair
    step = 0
    for step in range(cfg.steps):
        lr = lr_at(cfg, step)
        x, target = task.batch(cfg.seed, step, cfg.batch_size)
        acts, caches = model_forward(model, x, pair, seed=cfg.seed, step=step)
        loss, dy = task.loss_grad(acts[-1], target)
        if not math.isfinite(loss):
            status = "diverged"
            break
        if step % cfg.eval_every == 0 or step == cfg.steps - 1:
            history.append((step, loss, lr))
        grads, _ = model_backward(
            model, acts, caches, dy, pair, xi=rng.derive_seed(cfg.seed, _T_XI, step)
        )
        gnorm = _global_norm(grads)
        if gnorm > cfg.grad_clip:
            scale = np.float32(cfg.grad_clip / gnorm)
            grads = [g * scale for g in grads]
            clip_fired += 1
            clip_max = max(clip_max, _global_norm(grads))
        t = step + 1
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        ok = True
        for w, g, ms, vs in zip(model.weights, grads, m_state, v_state):
            ms *= cfg.beta1
            ms += (1.0 - cfg.beta1) * g
            vs *= cfg.beta2
            vs += (1.0 - cfg.beta2) * g * g
            w *= 1.0 - lr * cfg.weight_decay
            w -= (lr / bc1) * ms / (np.sqrt(vs / bc2) + cfg.eps)
            if not np.all(np.isfinite(w)):
                ok = False
        if not ok:
            status = "diverged"
            break

    if status == "ok":
        final_loss = evaluate(model, task)
        history.append((cfg.steps, final_loss, lr_at(cfg, cfg.steps - 1)))
    else:
        final_loss = math.inf
    return TrainResult(
        history=history, final_loss=final_loss, status=status,
        steps_run=step + 1 if status == "ok" else step,
        pair_label=pair.label, seed=cfg.seed,
        clip_fired=clip_fired, clip_max_postnorm=clip_max, model=model,
    )


def evaluate(model: ToyModel, task, n: int = 2048) -> float:
    """Loss on the task's fixed held-out batch.

    The batch is keyed to the task (not the training seed), so runs that
    share a task are scored on identical inputs.
    """
    x, target = task.eval_batch(task.seed, n=n)
    acts, _ = model_forward(model, x, model.pair,
                            seed=rng.derive_seed(task.seed, _T_EVAL), step=0)
    return task.loss(acts[-1], target)


@dataclass
class GapCell:
    pair_label: str
    ratio: float
    seeds: int
    median_gap: float
    spread: float
    median_quantized: float
    median_exact: float


def loss_gap_sweep(
    pairs: list[SchemePair],
    ratios: list[float],
    seeds: list[int],
    task_name: str = "teacher",
    dims: list[int] | None = None,
    cfg: TrainConfig | None = None,
) -> list[GapCell]:
    """Final-loss gap against the exact pair across data-to-parameter ratios.

    The ratio fixes the step count: steps = ratio * n_params / batch_size.
    """
    base = cfg or TrainConfig()
    dims = dims or DEFAULT_DIMS[task_name]
    task_kwargs = {}
    if task_name == "teacher":
        task_kwargs = {"d_in": dims[0], "d_out": dims[-1]}
    cells = []
    for ratio in ratios:
        exact_finals = {}
        for seed in seeds:
            task = make_task(task_name, seed=seed, **task_kwargs)
            n_params = ToyModel(dims, seed=seed).n_params
            steps = max(20, int(round(ratio * n_params / base.batch_size)))
            run_cfg = TrainConfig(
                steps=steps, batch_size=base.batch_size, lr=base.lr,
                weight_decay=base.weight_decay, grad_clip=base.grad_clip,
                warmup_frac=base.warmup_frac, seed=seed, eval_every=base.eval_every,
            )
            model = ToyModel(dims, seed=seed, pair=EXACT_PAIR)
            exact_finals[seed] = train(model, task, run_cfg).final_loss
        for pair in pairs:
            gaps, quants = [], []
            for seed in seeds:
                task = make_task(task_name, seed=seed, **task_kwargs)
                n_params = ToyModel(dims, seed=seed).n_params
                steps = max(20, int(round(ratio * n_params / base.batch_size)))
                run_cfg = TrainConfig(
                    steps=steps, batch_size=base.batch_size, lr=base.lr,
                    weight_decay=base.weight_decay, grad_clip=base.grad_clip,
                    warmup_frac=base.warmup_frac, seed=seed, eval_every=base.eval_every,
                )
                model = ToyModel(dims, seed=seed, pair=pair)
                res = train(model, task, run_cfg)
                quants.append(res.final_loss)
                gaps.append(res.final_loss - exact_finals[seed])
            cells.append(GapCell(
                pair_label=pair.label, ratio=ratio, seeds=len(seeds),
                median_gap=float(np.median(gaps)),
                spread=float(np.max(gaps) - np.min(gaps)),
                median_quantized=float(np.median(quants)),
                median_exact=float(np.median(list(exact_finals.values()))),
            ))
    return cells
