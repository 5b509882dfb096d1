"""Training loops for segmentation, adversarial and progressive runs.

Every run draws all randomness (initialization, shuffles, augmentation,
latents, penalties, dropout) from one seeded generator, in a fixed order,
so a (config, seed) pair determines every logged number. Wall-clock
columns are written as 0 in deterministic mode.
"""

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import parse_config_text
from .data import PROFILES, BatchSampler, downsample_to, load_corpus, save_image, synthetic_blobs, upsample_to
from .losses import (WASSERSTEIN, bce, dice_loss, discriminator_total, gan_loss, generator_loss,
                     generator_total, gradient_penalty, max_abs_weight, weight_clip)
from .metrics import accuracy, confusion, dice_from_counts, normalize_latent
from .models import ProGANStage, build_dcgan, build_progan, build_srresgan, build_unet, stage_ladder
from .optim import DivergenceError
from .tensor import Tensor, backward, no_grad

GAN_LOG_HEADER = "step,epoch,d_loss,g_loss,gp_term,wall_ms"
SEG_LOG_HEADER = "epoch,train_loss,val_loss,val_accuracy,val_dice,wall_ms"
DIVERGENCE_LIMIT = 1e6
DIVERGENCE_PATIENCE = 10


class WeightClipViolation(AssertionError):
    pass


@dataclass
class RunReport:
    status: str = "ok"
    steps: int = 0
    d_steps: int = 0
    g_steps: int = 0
    output_dir: str = ""
    checkpoint: str = ""
    metrics: dict = field(default_factory=dict)

    def write(self, directory):
        Path(directory, "report.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _fmt(x):
    return f"{float(x):.9g}"


# -- builders ---------------------------------------------------------------------------

def make_corpus(cfg, value_range):
    src = cfg["data.source"]
    if src == "synthetic":
        rng = np.random.default_rng(cfg["seed"] + 7919)
        corpus = synthetic_blobs(cfg["data.n"], cfg["data.res"], cfg["data.modes"], rng, value_range)
    else:
        corpus = load_corpus(src, value_range)
    return corpus


def disc_head(cfg):
    return "linear" if cfg["loss.kind"] in WASSERSTEIN else "sigmoid"


def build_unet_from(cfg):
    return build_unet(cfg["model.base_filters"], cfg["model.use_bn"], cfg["model.dropout"],
                      input_res=cfg["data.res"])


def build_gan(cfg, stage=None):
    arch = cfg["arch"]
    if arch == "dcgan":
        return build_dcgan(cfg["model.latent"], cfg["model.base_res"], cfg["data.res"], cfg["model.g_filters"],
                           cfg["model.d_filters"], cfg["model.disc_final_res"], cfg["model.kernel"],
                           cfg["model.minibatch_std"], disc_head(cfg))
    if arch == "srresgan":
        return build_srresgan(cfg["model.latent"], cfg["model.n_res_blocks"], cfg["data.res"],
                              cfg["model.g_filters"], cfg["model.d_filters"], cfg["model.kernel"],
                              cfg["model.d_res_act"], cfg["model.minibatch_std"], disc_head(cfg))
    if arch == "progan":
        return build_progan(stage or ProGANStage(cfg["data.res"]), cfg["model.latent"], cfg["model.fbase"],
                            cfg["model.fmax"], cfg["model.kernel"], cfg["model.pixelnorm"],
                            cfg["model.minibatch_std"], disc_head(cfg))
    raise ValueError(f"architecture {arch!r} is not a GAN")


def sample_latent(rng, n, dim, kind):
    if kind == "uniform":
        z = rng.uniform(-1.0, 1.0, size=(n, dim))
    elif kind == "normal":
        z = rng.standard_normal((n, dim))
    elif kind == "normal_normalized":
        z = normalize_latent(rng.standard_normal((n, dim)))
    else:
        raise ValueError(f"unknown latent kind {kind!r}")
    return z.astype(np.float32).reshape(n, dim, 1, 1)


def generate(g, z, batch=64):
    """Eval-mode generation in fixed-size chunks; returns (N, 1, H, W) float32."""
    out = []
    with no_grad():
        for i in range(0, z.shape[0], batch):
            out.append(g(Tensor(z[i:i + batch]), train=False).data)
    return np.concatenate(out)


def tile(images, cols):
    n, _, h, w = images.shape
    rows = math.ceil(n / cols)
    grid = np.full((rows * h, cols * w), -1.0, dtype=np.float32)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = images[i, 0]
    return grid


# -- segmentation -------------------------------------------------------------------------

def _seg_loss(cfg, pred, target):
    kind = cfg["loss.kind"]
    if kind == "bce":
        return bce(pred, target)
    if kind == "dice":
        return dice_loss(pred, target, cfg["loss.dice_smooth"])
    raise ValueError(f"segmentation needs loss.kind bce or dice, got {kind!r}")


def evaluate_segmentation(model, corpus, cfg, batch=32):
    """(mean loss, accuracy, Dice) over a corpus with eval-mode predictions."""
    counts = np.zeros(4, dtype=np.int64)
    total_loss, n = 0.0, len(corpus)
    with no_grad():
        for i in range(0, n, batch):
            x = corpus.images[i:i + batch, None]
            y = corpus.masks[i:i + batch, None]
            pred = model(Tensor(x), train=False)
            total_loss += float(_seg_loss(cfg, pred, y).item()) * x.shape[0]
            counts += np.array(confusion(pred.data, y))
    counts = tuple(int(c) for c in counts)
    return total_loss / n, accuracy(counts), dice_from_counts(counts)


def train_segmentation(cfg):
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    rng = np.random.default_rng(cfg["seed"])
    corpus = make_corpus(cfg, (0.0, 1.0))
    if corpus.masks is None:
        raise ValueError("segmentation needs a corpus with masks")
    train, test = corpus.split()
    model = build_unet_from(cfg).initialize(rng, cfg.init_scheme())
    opt = cfg.optimizer("opt")
    sampler = BatchSampler(train, cfg["train.batch_size"], rng, cfg["train.steps_per_epoch"] or None,
                           PROFILES[cfg["data.augment"]])
    meta = {"arch": "unet", "config": cfg.to_text()}
    best, report = math.inf, RunReport(output_dir=str(out))
    best_path = out / "best.mrgf"
    log = out / "log.csv"
    log.write_text(SEG_LOG_HEADER + "\n")
    for epoch in range(cfg["train.epochs"]):
        t0 = time.perf_counter()
        losses = []
        for x, y in sampler.epoch():
            pred = model(Tensor(x), train=True, rng=rng)
            loss = _seg_loss(cfg, pred, y)
            if not math.isfinite(loss.item()):
                report.status = "diverged"
                report.write(out)
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, step {report.steps}")
            model.zero_grad()
            backward(loss)
            opt.step(model.trainable_params())
            losses.append(loss.item())
            report.steps += 1
        val_loss, val_acc, val_dice = evaluate_segmentation(model, test, cfg)
        wall = 0.0 if cfg["deterministic"] else (time.perf_counter() - t0) * 1e3
        with log.open("a") as f:
            f.write(",".join([str(epoch), _fmt(np.mean(losses)), _fmt(val_loss), _fmt(val_acc),
                              _fmt(val_dice), _fmt(round(wall))]) + "\n")
        if val_loss < best:
            best = val_loss
            ckpt_io.save_checkpoint(best_path, {"unet": model}, {"unet": opt}, rng, dict(meta, epoch=epoch))
    ck = ckpt_io.load_checkpoint(best_path, "unet")
    ckpt_io.restore(ck, {"unet": model}, {})
    val_loss, val_acc, val_dice = evaluate_segmentation(model, test, cfg)
    report.checkpoint = str(best_path)
    report.metrics = {"val_loss": val_loss, "accuracy": val_acc, "dice": val_dice,
                      "best_epoch": ck.meta["epoch"], "n_test": len(test)}
    report.write(out)
    return report


# -- adversarial ----------------------------------------------------------------------------

class GANRun:
    """State of one adversarial run; ``step()`` performs 1 discriminator and k generator updates.

    ``on_d_step`` callbacks receive the run after each discriminator update
    (after weight clipping for the wgan loss).
    """

    def __init__(self, cfg, g, d, rng, corpus, out_dir, opt_g=None, opt_d=None):
        self.cfg = cfg
        self.spec = cfg.loss_spec()
        self.g, self.d = g, d
        self.rng = rng
        self.corpus = corpus
        self.out = Path(out_dir)
        self.opt_g = opt_g or cfg.optimizer("g_opt")
        self.opt_d = opt_d or cfg.optimizer("d_opt")
        self.k = cfg["train.gen_disc_rate"]
        self.sampler = BatchSampler(corpus, cfg["train.batch_size"], rng, cfg["train.steps_per_epoch"] or None,
                                    PROFILES[cfg["data.augment"]])
        self.step_count = 0
        self.d_steps = self.g_steps = 0
        self.bad_streak = 0
        self.diverged = False
        self.on_d_step = []
        self.prepare_real = None
        self.stage = None
        self.log_path = self.out / "log.csv"
        self.fixed_z = sample_latent(np.random.default_rng(cfg["seed"] + 1), 16, cfg["model.latent"],
                                     cfg["train.latent"])

    @property
    def steps_per_epoch(self):
        return self.sampler.steps_per_epoch

    def latent(self, n):
        return sample_latent(self.rng, n, self.cfg["model.latent"], self.cfg["train.latent"])

    def _noisy(self, x):
        std = self.cfg["disc.input_noise_std"]
        if std > 0:
            x = (x + self.rng.normal(0.0, std, size=x.shape)).astype(np.float32)
        return x

    def _d_update(self, real):
        b = real.shape[0]
        z = self.latent(b)
        with no_grad():
            fake = self.g(Tensor(z), train=True, rng=self.rng).data
        real_in, fake_in = self._noisy(real), self._noisy(fake)
        d_real = self.d(Tensor(real_in), train=True, rng=self.rng)
        d_fake = self.d(Tensor(fake_in), train=True, rng=self.rng)
        _, l_d = gan_loss(self.spec.kind, d_real, d_fake, self.spec)
        pen = None
        if self.spec.has_penalty:
            pen = gradient_penalty(self.spec, lambda x: self.d(x, train=True, rng=self.rng),
                                   real_in, fake_in, self.rng)
        total = discriminator_total(l_d, pen, self.spec)
        self.d.zero_grad()
        backward(total)
        self.opt_d.step(self.d.trainable_params())
        if self.spec.kind == "wgan":
            c = self.spec.clip_threshold
            weight_clip(self.d.trainable_params(), c)
            if max_abs_weight(self.d.trainable_params()) > c:
                raise WeightClipViolation(f"discriminator weight exceeds clip threshold {c}")
        gp = 0.0 if pen is None else float(pen.item()) * self.spec.lambda_gp
        return float(total.item()), gp

    def _g_update(self):
        z = self.latent(self.cfg["train.batch_size"])
        with self.d.frozen():
            fake = self.g(Tensor(z), train=True, rng=self.rng)
            d_fake = self.d(fake, train=True, rng=self.rng)
            loss = generator_total(generator_loss(self.spec.kind, d_fake), self.spec)
        self.g.zero_grad()
        backward(loss)
        self.opt_g.step(self.g.trainable_params())
        return float(loss.item())

    def step(self):
        t0 = time.perf_counter()
        real, _ = self.sampler.next_batch()
        if self.prepare_real is not None:
            real = self.prepare_real(real)
        d_loss = g_loss = gp = math.nan
        ok = True
        try:
            d_loss, gp = self._d_update(real)
            self.d_steps += 1
            for cb in self.on_d_step:
                cb(self)
            g_losses = []
            for _ in range(self.k):
                g_losses.append(self._g_update())
                self.g_steps += 1
            g_loss = float(np.mean(g_losses))
        except FloatingPointError:
            ok = False
        self.step_count += 1
        bad = not ok or not (abs(d_loss) <= DIVERGENCE_LIMIT and abs(g_loss) <= DIVERGENCE_LIMIT)
        self.bad_streak = self.bad_streak + 1 if bad else 0
        if self.bad_streak >= DIVERGENCE_PATIENCE:
            self.diverged = True
        wall = 0 if self.cfg["deterministic"] else round((time.perf_counter() - t0) * 1e3)
        epoch = (self.step_count - 1) // self.steps_per_epoch
        with self.log_path.open("a") as f:
            f.write(",".join([str(self.step_count), str(epoch), _fmt(d_loss), _fmt(g_loss), _fmt(gp),
                              str(wall)]) + "\n")
        every = self.cfg["train.sample_every"]
        if every and self.step_count % every == 0:
            self.save_samples()

    def save_samples(self, name=None):
        d = self.out / "samples"
        d.mkdir(exist_ok=True)
        imgs = generate(self.g, self.fixed_z)
        save_image(tile(imgs, 4), d / (name or f"step{self.step_count:06d}.pgm"), (-1.0, 1.0))

    def meta(self):
        m = {"arch": self.cfg["arch"], "config": self.cfg.to_text(), "step": self.step_count,
             "d_steps": self.d_steps, "g_steps": self.g_steps, "bad_streak": self.bad_streak}
        if self.stage is not None:
            m["stage"] = asdict(self.stage)
        return m

    def save(self, path):
        """Write a checkpoint; returns False (and writes nothing) if any parameter is non-finite."""
        try:
            ckpt_io.save_checkpoint(path, {"g": self.g, "d": self.d}, {"g": self.opt_g, "d": self.opt_d},
                                    self.rng, self.meta(), self.sampler)
        except FloatingPointError:
            return False
        return True

    def load(self, ck):
        ckpt_io.restore(ck, {"g": self.g, "d": self.d}, {"g": self.opt_g, "d": self.opt_d})
        self.rng.bit_generator.state = ck.rng().bit_generator.state
        st = ck.sampler_state()
        if st is not None:
            self.sampler.load_state(st)
        self.step_count = ck.meta["step"]
        self.d_steps, self.g_steps = ck.meta["d_steps"], ck.meta["g_steps"]
        self.bad_streak = ck.meta.get("bad_streak", 0)

    def report(self):
        return RunReport("diverged" if self.diverged else "ok", self.step_count, self.d_steps, self.g_steps,
                         str(self.out))


def _truncate_log(path, header, keep_steps):
    lines = path.read_text().splitlines() if path.exists() else [header]
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= keep_steps]
    path.write_text("\n".join(kept) + "\n")


def _total_steps(cfg, spe):
    return cfg["train.max_steps"] or cfg["train.epochs"] * spe


def train_gan(cfg, resume=None, stop_at=None, hooks=None):
    """Adversarial training for DCGAN or SRResGAN.

    ``resume`` continues from a checkpoint written by an earlier run with
    the same config; ``stop_at`` ends the run early after that step.
    """
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    rng = np.random.default_rng(cfg["seed"])
    corpus = make_corpus(cfg, (-1.0, 1.0))
    g, d = build_gan(cfg)
    scheme = cfg.init_scheme()
    g.initialize(rng, scheme)
    d.initialize(rng, scheme)
    run = GANRun(cfg, g, d, rng, corpus, out)
    run.on_d_step.extend(hooks or [])
    if resume is not None:
        ck = ckpt_io.load_checkpoint(resume, cfg["arch"])
        run.load(ck)
        _truncate_log(run.log_path, GAN_LOG_HEADER, run.step_count)
    else:
        run.log_path.write_text(GAN_LOG_HEADER + "\n")
    total = _total_steps(cfg, run.steps_per_epoch)
    last = min(total, stop_at) if stop_at else total
    every = cfg["train.checkpoint_every"]
    while run.step_count < last and not run.diverged:
        run.step()
        if every and run.step_count % every == 0:
            run.save(out / f"step{run.step_count:06d}.mrgf")
        if run.step_count % run.steps_per_epoch == 0:
            run.save(out / "last.mrgf")
    report = run.report()
    final = out / "final.mrgf"
    if run.save(final):
        report.checkpoint = str(final)
    report.write(out)
    return report


# -- progressive growing ---------------------------------------------------------------------

def alpha_schedule(n_steps):
    """Fade-in weights for a transition of ``n_steps``: i / (n - 1), from exactly 0 to exactly 1."""
    if n_steps < 1:
        raise ValueError("transition needs at least one step")
    if n_steps == 1:
        return [1.0]
    return [i / (n_steps - 1) for i in range(n_steps)]


def progressive_phases(target_res):
    phases = []
    for res in stage_ladder(target_res):
        if res > 4:
            phases.append(("transition", res))
        phases.append(("stabilize", res))
    return phases


def blend_real(x, res, alpha, transition):
    """Real batch at stage resolution, faded from the previous resolution during transitions."""
    cur = downsample_to(x, res)
    if not transition:
        return cur
    prev = upsample_to(downsample_to(x, res // 2), res)
    return ((1.0 - alpha) * prev + alpha * cur).astype(np.float32)


def train_progressive(cfg, hooks=None, on_alpha=None):
    """Grow 4x4 -> data.res; each stage is a transition (except 4x4) followed by stabilization."""
    if cfg["arch"] != "progan":
        raise ValueError("progressive training needs arch = progan")
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    rng = np.random.default_rng(cfg["seed"])
    corpus = make_corpus(cfg, (-1.0, 1.0))
    scheme = cfg.init_scheme()
    log_path = out / "log.csv"
    log_path.write_text(GAN_LOG_HEADER + "\n")
    stages_path = out / "stages.csv"
    stages_path.write_text("resolution,phase,steps,wall_ms\n")
    run = None
    report = RunReport(output_dir=str(out))
    for phase, res in progressive_phases(cfg["data.res"]):
        trans = phase == "transition"
        stage = ProGANStage(res, phase, 0.0 if trans else 1.0)
        g, d = build_gan(cfg, stage)
        if run is None:
            g.initialize(rng, scheme)
            d.initialize(rng, scheme)
            run = GANRun(cfg, g, d, rng, corpus, out)
            run.on_d_step.extend(hooks or [])
        else:
            for new, old in ((g, run.g), (d, run.d)):
                new.initialize(rng, scheme)
                shared = {n: p.data for n, p in old.params.items()}
                new.load_params({n: v for n, v in shared.items() if n in new.params}, strict=False)
            run.g, run.d = g, d
        run.stage = stage
        spe = run.steps_per_epoch
        n = spe * (cfg["progan.transition_epochs"] if trans else cfg["progan.stabilize_epochs"])
        alphas = alpha_schedule(n) if trans else [1.0] * n
        t0 = time.perf_counter()
        for a in alphas:
            g.set_alpha(a)
            d.set_alpha(a)
            run.stage.alpha = a
            run.prepare_real = lambda x, r=res, a=a, t=trans: blend_real(x, r, a, t)
            if on_alpha is not None:
                on_alpha(res, phase, a)
            run.step()
            if run.diverged:
                break
        wall = (time.perf_counter() - t0) * 1e3
        with stages_path.open("a") as f:
            f.write(f"{res},{phase},{n},{wall:.3f}\n")
        if run.diverged:
            break
        if not trans:
            run.save(out / f"stage{res:03d}.mrgf")
    report = run.report()
    final = out / "final.mrgf"
    if not run.diverged and run.save(final):
        report.checkpoint = str(final)
    report.write(out)
    return report


# -- checkpoint consumers -----------------------------------------------------------------------

def load_generator(path):
    """Rebuild the generator stored in a GAN checkpoint; returns (generator, config)."""
    ck = ckpt_io.load_checkpoint(path)
    if ck.meta.get("arch") not in ("dcgan", "srresgan", "progan"):
        raise ckpt_io.CheckpointError(f"{path} does not hold a GAN (arch {ck.meta.get('arch')!r})")
    cfg = parse_config_text(ck.meta["config"])
    stage = ProGANStage(**ck.meta["stage"]) if "stage" in ck.meta else None
    g, _ = build_gan(cfg, stage)
    g.apply_scheme(cfg.init_scheme())
    ckpt_io.restore(ck, {"g": g}, {})
    return g, cfg
