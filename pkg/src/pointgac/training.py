"""Teacher-student pretraining over codebook assignments."""
import csv
import io
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from . import codebook as cb
from .config import RunConfig
from .data import build_dataset
from .diffcore import autograd as ag
from .diffcore import checkpoint
from .diffcore.autograd import Tensor, no_grad
from .diffcore.gradcheck import grad_check
from .diffcore.transformer import decoder_forward, encoder_forward, init_stack
from .embedding import batch_patches, embed, init_embedding_params
from .fileio import atomic_write_text
from .transport import PartitionConfig, partition_pipeline

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "epoch", "loss", "lr", "tau_t", "dead_fraction", "codebook_drift")
TEACHER_PREFIXES = ("pn.", "pe.", "enc.")


class TrainingFault(RuntimeError):
    """Raised on a non-finite loss; ``dump_path`` points at the saved state."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


# -- masking ---------------------------------------------------------------------


@dataclass
class MaskSpec:
    ratio: float
    masked: np.ndarray
    visible: np.ndarray


def random_mask(L, ratio, rng):
    """Hide floor(L * ratio) tokens chosen uniformly without replacement."""
    if not 0 < ratio < 1:
        raise ValueError("mask ratio must be in (0, 1)")
    n_masked = int(np.floor(L * ratio))
    if n_masked < 1 or n_masked >= L:
        raise ValueError(f"ratio {ratio} leaves no masked or no visible token for L={L}")
    perm = rng.permutation(L)
    return MaskSpec(ratio, np.sort(perm[:n_masked]), np.sort(perm[n_masked:]))


# -- parameters ------------------------------------------------------------------


def init_student(cfg, rng):
    m = cfg.model
    params = {}
    init_embedding_params(params, rng, m.dim, m.point_hidden)
    init_stack(params, rng, "enc", m.dim, m.encoder_depth, m.mlp_ratio)
    init_stack(params, rng, "dec", m.dim, m.decoder_depth, m.mlp_ratio)
    params["mask_token"] = Tensor(np.zeros(m.dim), requires_grad=True)
    return params


def teacher_from_student(student):
    return {n: Tensor(p.data.copy()) for n, p in student.items() if n.startswith(TEACHER_PREFIXES)}


def ema_teacher_update(teacher, student, momentum):
    for name, t in teacher.items():
        t.data = momentum * t.data + (1.0 - momentum) * student[name].data
    return teacher


@dataclass
class AdamW:
    lr: float = 1e-3
    weight_decay: float = 0.04
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, lr=None):
        """Decoupled weight decay (skipped for vectors: biases, norms, tokens)."""
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update


def adamw_step(params, grads, moments, lr, weight_decay=0.04, betas=(0.9, 0.999), eps=1e-8):
    """Functional AdamW over plain arrays; ``moments`` is ``(m, v, t)``.

    Returns ``(new_params, (m, v, t))``.
    """
    m, v, t = moments
    t += 1
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grads
    v = b2 * v + (1 - b2) * grads * grads
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    new = params - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * params)
    return new, (m, v, t)


# -- schedules -------------------------------------------------------------------


def lr_schedule(step, total_steps, warmup_steps, lr_max=1e-3, lr_min=1e-6):
    """Linear warm-up from 0 to ``lr_max``, then cosine decay to ``lr_min``."""
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * progress))


def momentum_schedule(step, total_steps, start=0.996, end=0.9995):
    if total_steps <= 0:
        return end
    progress = min(max(step / total_steps, 0.0), 1.0)
    return end - 0.5 * (end - start) * (1.0 + np.cos(np.pi * progress))


# -- forward pieces --------------------------------------------------------------


def teacher_forward(coords, centers, teacher, cfg):
    """Encoded teacher tokens as a plain (B, L, D) array; never builds a graph."""
    with no_grad():
        tokens = embed(coords, centers, teacher)
        out = encoder_forward(tokens.F, teacher, cfg.model.encoder_depth, cfg.model.heads)
    return out.data


def student_forward(coords, centers, masks, student, cfg):
    """Encode visible tokens, refill masked slots with the mask token, decode all L."""
    m = cfg.model
    tokens = embed(coords, centers, student)
    B, L, D = tokens.F.shape
    vis = np.stack([mk.visible for mk in masks])
    bidx = np.arange(B)[:, None]
    encoded = encoder_forward(tokens.F[bidx, vis], student, m.encoder_depth, m.heads)
    base = ag.broadcast_to(student["mask_token"], (B, L, D))
    dec_in = ag.scatter_rows(base, vis, encoded) + tokens.PE
    return decoder_forward(dec_in, student, m.decoder_depth, m.heads)


def student_log_assign(rows, codes, tau, mode="cosine"):
    """Log of the student's soft assignment; the codebook is a constant."""
    if mode == "cosine":
        rows = rows / ag.sqrt((rows * rows).sum(axis=-1, keepdims=True) + 1e-12)
        codes = codes / np.maximum(np.linalg.norm(codes, axis=1, keepdims=True), 1e-12)
    return ag.log_softmax((rows @ Tensor(codes.T)) * (1.0 / tau), axis=-1)


def alignment_loss(q_teacher, log_q_student):
    """Mean over rows of KL(teacher || student)."""
    q_teacher = np.asarray(q_teacher, dtype=np.float64)
    log_q_student = ag.as_tensor(log_q_student)
    rows = q_teacher.shape[0]
    entropy_term = float(xlogy(q_teacher, q_teacher).sum())
    cross = (log_q_student * Tensor(q_teacher)).sum()
    return (cross * -1.0 + entropy_term) * (1.0 / rows)


def kl_rows(q_teacher, q_student):
    return (xlogy(q_teacher, q_teacher) - xlogy(q_teacher, q_student)).sum(axis=1)


def masked_rows(x, masks):
    B = len(masks)
    msk = np.stack([mk.masked for mk in masks])
    return x[np.arange(B)[:, None], msk]


# -- state -----------------------------------------------------------------------


@dataclass
class TrainState:
    student: dict
    teacher: dict
    codebook: cb.Codebook
    optimizer: AdamW
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    total_steps: int = 1
    warmup_steps: int = 0

    def blocks(self):
        out = {}
        for name in sorted(self.student):
            out["student." + name] = self.student[name].data
        for name in sorted(self.teacher):
            out["teacher." + name] = self.teacher[name].data
        out.update(self.codebook.blocks())
        for name in sorted(self.optimizer.m):
            out["adam.m." + name] = self.optimizer.m[name]
            out["adam.v." + name] = self.optimizer.v[name]
        out["state.counters"] = np.array(
            [self.step, self.epoch, self.optimizer.t, self.total_steps, self.warmup_steps], dtype=np.float64)
        out["state.rng"] = _rng_words(self.rng)
        return out


def _rng_words(rng):
    st = rng.bit_generator.state
    words = []
    for v in (st["state"]["state"], st["state"]["inc"]):
        words.extend((v >> (32 * i)) & 0xFFFFFFFF for i in range(4))
    words.extend([st["has_uint32"], st["uinteger"]])
    return np.array(words, dtype=np.float64)


def _rng_from_words(words):
    w = [int(x) for x in words]
    state = sum(w[i] << (32 * i) for i in range(4))
    inc = sum(w[4 + i] << (32 * i) for i in range(4))
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64", "state": {"state": state, "inc": inc},
        "has_uint32": w[8], "uinteger": w[9],
    }
    return rng


def save_state(path, state, cfg):
    checkpoint.save(path, state.blocks(), cfg.digest())


def load_state(path, cfg=None):
    """Rebuild a TrainState from a checkpoint; verifies the config digest if given."""
    blocks, digest, _ = checkpoint.load(path)
    if cfg is not None and digest != cfg.digest():
        raise checkpoint.CheckpointError("checkpoint was produced by a different config")
    student = {n[8:]: Tensor(v, requires_grad=True) for n, v in blocks.items() if n.startswith("student.")}
    teacher = {n[8:]: Tensor(v) for n, v in blocks.items() if n.startswith("teacher.")}
    opt = AdamW()
    for n, v in blocks.items():
        if n.startswith("adam.m."):
            opt.m[n[7:]] = v
        elif n.startswith("adam.v."):
            opt.v[n[7:]] = v
    step, epoch, t, total, warm = (int(x) for x in blocks["state.counters"])
    opt.t = t
    return TrainState(student, teacher, cb.Codebook.from_blocks(blocks), opt,
                      _rng_from_words(blocks["state.rng"]), step, epoch, total, warm), digest


# -- data plumbing ---------------------------------------------------------------


def partition_config(cfg):
    t, g = cfg.transport, cfg.geometry
    return PartitionConfig(t.grouping, g.k, g.mu, t.epsilon_scale, t.max_iters, t.tol, t.patch_size)


def prepare_patches(samples, cfg):
    """PatchSet per sample (GAP uses the sample's cached segmentation labels)."""
    pcfg = partition_config(cfg)
    out = []
    for s in samples:
        cloud = s.labeled() if pcfg.grouping == "gap" else s.cloud
        out.append((partition_pipeline(cloud, cfg.transport.num_patches, pcfg), s.cloud))
    return out


def init_state(cfg, patched, steps_per_epoch):
    """Fresh student/teacher, codebook seeded from initial teacher features."""
    tr = cfg.training
    rng = np.random.default_rng(tr.seed)
    student = init_student(cfg, rng)
    teacher = teacher_from_student(student)
    K = cfg.codebook.size
    L = cfg.transport.num_patches
    n_pool = min(len(patched), max(1, -(-2 * K // L)))
    pool = []
    for start in range(0, n_pool, tr.batch_size):
        coords, centers = batch_patches(patched[start:min(start + tr.batch_size, n_pool)])
        pool.append(teacher_forward(coords, centers, teacher, cfg).reshape(-1, cfg.model.dim))
    book = build_codebook(np.concatenate(pool), cfg, rng)
    total = tr.max_steps if tr.max_steps > 0 else tr.epochs * steps_per_epoch
    opt = AdamW(tr.lr, tr.weight_decay, tr.beta1, tr.beta2)
    return TrainState(student, teacher, book, opt, rng, 0, 0, total, tr.warmup_epochs * steps_per_epoch)


def build_codebook(pool, cfg, rng):
    if cfg.codebook.construction != "online-kmeans":
        raise NotImplementedError(
            f"codebook construction {cfg.codebook.construction!r} is a config stub; "
            "only online-kmeans is implemented")
    return cb.init_codebook(pool, cfg.codebook.size, rng, cfg.codebook.gamma)


# -- one step --------------------------------------------------------------------


def compute_loss(coords, centers, masks, state, cfg, tau_t, update_codebook=True):
    """Teacher pass, optional k-means update, and the student KL loss Tensor.

    Returns ``(loss, teacher_features, q_teacher)``.
    """
    # assignments read the codebook as it stood when the step began
    snapshot = state.codebook.copy()
    codes = snapshot.C
    teacher_out = teacher_forward(coords, centers, state.teacher, cfg)
    D = teacher_out.shape[-1]
    if update_codebook:
        flat = teacher_out.reshape(-1, D)
        cb.kmeans_update(state.codebook, flat, cb.nearest_code(flat, state.codebook))
    mode = cfg.codebook.similarity
    q_t = cb.soft_assign(masked_rows(teacher_out, masks).reshape(-1, D), snapshot, tau_t, mode).Q
    recon = student_forward(coords, centers, masks, state.student, cfg)
    rows = masked_rows(recon, masks)
    rows = rows.reshape(-1, D)
    log_q_s = student_log_assign(rows, codes, cfg.training.tau_s, mode)
    return alignment_loss(q_t, log_q_s), teacher_out, q_t


def pretrain_step(batch, state, cfg):
    """One optimization step on a list of ``(PatchSet, cloud)`` pairs."""
    tr = cfg.training
    coords, centers = batch_patches(batch)
    L = coords.shape[1]
    masks = [random_mask(L, tr.mask_ratio, state.rng) for _ in batch]
    tau_t = cb.teacher_temperature(state.step, state.total_steps, tr.tau_t_start, tr.tau_t_end)
    lr = lr_schedule(state.step, state.total_steps, state.warmup_steps, tr.lr, tr.min_lr)
    before = state.codebook.C.copy()
    for p in state.student.values():
        p.zero_grad()
    try:
        loss, teacher_out, _ = compute_loss(coords, centers, masks, state, cfg, tau_t)
    except ag.NonFiniteError as exc:
        raise TrainingFault(f"non-finite value at step {state.step}: {exc}",
                            _dump(state, cfg)) from exc
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingFault(f"non-finite loss at step {state.step}", _dump(state, cfg))
    loss.backward()
    state.optimizer.step(state.student, lr)
    momentum = momentum_schedule(state.step, state.total_steps, tr.ema_start, tr.ema_end)
    ema_teacher_update(state.teacher, state.student, momentum)
    drift = float(np.linalg.norm(state.codebook.C - before, axis=1).mean())
    state.step += 1
    return {
        "step": state.step,
        "epoch": state.epoch,
        "loss": value,
        "lr": lr,
        "tau_t": tau_t,
        "dead_fraction": cb.dead_fraction(state.codebook, 0.0, window=True),
        "codebook_drift": drift,
        "teacher_features": teacher_out.reshape(-1, teacher_out.shape[-1]),
    }


def _dump(state, cfg):
    path = os.path.join(os.getcwd(), "pointgac_fault_dump.ckpt")
    try:
        save_state(path, state, cfg)
    except Exception:  # noqa: BLE001 - best effort on the failure path
        return None
    return path


# -- loop ------------------------------------------------------------------------


@dataclass
class TrainResult:
    state: TrainState
    metrics: list
    maintenance: list
    dataset: object = None
    patched: list = None
    out_dir: str = None


def format_metrics(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in rows:
        writer.writerow([r["step"], r["epoch"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[2:]])
    return buf.getvalue()


def epoch_end(state, cfg, teacher_features, out_dir=None):
    """Codebook maintenance, heatmap export, count bookkeeping."""
    c = cfg.codebook
    report = None
    if c.maintenance != "off":
        eps = c.maintenance_epsilon if c.maintenance_epsilon > 0 else None
        _, report = cb.maintenance_step(state.codebook, teacher_features, eps, c.maintenance, state.rng)
    window_dead = cb.dead_fraction(state.codebook, 0.0, window=True)
    if out_dir:
        cb.utilization_export(state.codebook, c.heatmap_h, c.heatmap_w,
                              os.path.join(out_dir, f"heatmap_epoch{state.epoch:03d}.pgm"))
    state.codebook.decay_counts(c.count_decay)
    entry = {"epoch": state.epoch, "window_dead_fraction": window_dead}
    if report is not None:
        entry.update(report.summary())
    state.codebook.reset_window()
    return entry


def pretrain_loop(cfg, out_dir=None, dataset=None, patched=None, progress=None):
    """Train for ``cfg.training.epochs`` epochs; write checkpoint, metrics and heatmaps.

    ``dataset``/``patched`` may be passed in to reuse a prepared dataset.
    """
    cfg.validate()
    tr = cfg.training
    if dataset is None:
        dataset = build_dataset(_data_args(cfg), root=cfg.data.data_dir)
    if patched is None:
        patched = prepare_patches(dataset.split("train"), cfg)
    steps_per_epoch = max(1, len(patched) // tr.batch_size)
    state = init_state(cfg, patched, steps_per_epoch)
    metrics, maint = [], []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    done = False
    for epoch in range(tr.epochs):
        state.epoch = epoch
        order = state.rng.permutation(len(patched))
        teacher_features = None
        t0 = time.perf_counter()
        for b in range(steps_per_epoch):
            batch = [patched[i] for i in order[b * tr.batch_size:(b + 1) * tr.batch_size]]
            info = pretrain_step(batch, state, cfg)
            teacher_features = info.pop("teacher_features")
            metrics.append(info)
            if progress:
                progress(info)
            if tr.max_steps and state.step >= tr.max_steps:
                done = True
                break
        maint.append(epoch_end(state, cfg, teacher_features, out_dir))
        recent = [m["loss"] for m in metrics[-steps_per_epoch:]]
        log.info("epoch %d loss %.4f dead %.3f (%.1fs)", epoch, float(np.mean(recent)),
                 maint[-1]["window_dead_fraction"], time.perf_counter() - t0)
        if out_dir:
            save_state(os.path.join(out_dir, "checkpoint.ckpt"), state, cfg)
            atomic_write_text(os.path.join(out_dir, "metrics.csv"), format_metrics(metrics))
            atomic_write_text(os.path.join(out_dir, "config.ini"), cfg.to_text())
        if done:
            break
    return TrainResult(state, metrics, maint, dataset, patched, out_dir)


def pipeline_gradcheck(cfg, batch_size=2, max_entries=None, names=None, tolerance=1e-4, h=1e-5):
    """Finite-difference check of the full student loss on freshly initialised state.

    The codebook is frozen and the masks fixed so that the loss is a pure
    function of the student parameters.
    """
    cfg.validate()
    small = cfg.replace(data__per_class=max(1, -(-batch_size // cfg.data.num_classes)))
    ds = build_dataset(_data_args(small), segment=small.transport.grouping == "gap")
    patched = prepare_patches(ds.samples[:batch_size], small)
    state = init_state(small, patched, 1)
    rng = np.random.default_rng(small.training.seed)
    # a non-zero mask token so its gradient is exercised away from the origin
    state.student["mask_token"].data = 0.1 * rng.standard_normal(small.model.dim)
    coords, centers = batch_patches(patched)
    L = small.transport.num_patches
    masks = [random_mask(L, small.training.mask_ratio, rng) for _ in patched]
    tau = small.training.tau_t_start

    def loss_fn():
        return compute_loss(coords, centers, masks, state, small, tau, update_codebook=False)[0]

    return grad_check(loss_fn, state.student, tolerance=tolerance, h=h, names=names,
                      max_entries=max_entries, rng=np.random.default_rng(0))


def _data_args(cfg):
    class Args:
        pass

    a = Args()
    for k, v in vars(cfg.data).items():
        setattr(a, k, v)
    a.k = cfg.geometry.k
    a.mu = cfg.geometry.mu
    return a


# -- probing ---------------------------------------------------------------------


def encode_clouds(patched, params, cfg, batch_size=32):
    """Mean of the encoder's output tokens per cloud (all patches visible)."""
    feats = []
    with no_grad():
        for start in range(0, len(patched), batch_size):
            coords, centers = batch_patches(patched[start:start + batch_size])
            tokens = embed(coords, centers, params)
            out = encoder_forward(tokens.F, params, cfg.model.encoder_depth, cfg.model.heads)
            feats.append(out.data.mean(axis=1))
    return np.concatenate(feats)


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y, standardize=True):
    """Nearest class mean on (optionally train-standardized) features."""
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    if standardize:
        mu = train_x.mean(axis=0)
        sd = train_x.std(axis=0)
        sd[sd < 1e-12] = 1.0
        train_x = (train_x - mu) / sd
        test_x = (test_x - mu) / sd
    classes = np.unique(train_y)
    cents = np.stack([train_x[train_y == c].mean(axis=0) for c in classes])
    d = ((test_x[:, None, :] - cents[None]) ** 2).sum(axis=-1)
    pred = classes[np.argmin(d, axis=1)]
    return float((pred == np.asarray(test_y)).mean())


def linear_probe(params, dataset, cfg, train_patched=None, val_patched=None):
    """Accuracy of a nearest-centroid classifier on frozen student-encoder features."""
    train = dataset.split("train")
    val = dataset.split("val")
    train_patched = train_patched or prepare_patches(train, cfg)
    val_patched = val_patched or prepare_patches(val, cfg)
    tx = encode_clouds(train_patched, params, cfg)
    vx = encode_clouds(val_patched, params, cfg)
    ty = np.array([s.class_id for s in train])
    vy = np.array([s.class_id for s in val])
    return nearest_centroid_accuracy(tx, ty, vx, vy)
