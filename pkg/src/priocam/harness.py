"""Experiment harness: configuration, training, sweeps, CSV output.

A run is fully determined by (config, seed): the seed feeds a
SeedSequence whose children drive world generation, camera layout,
shadowing, parameter init, batch sampling, and evaluation noise in a
fixed order. Delayed cameras are realized by stacking extra attenuation
onto the link until the normalized delay crosses the configured
threshold; their observations are also stale by the corresponding
number of frames, so delay actually damages fusion instead of merely
labeling a camera as late.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import channel as ch
from . import priority as prio
from .autodiff import ParamSet, Tensor, grad_check
from .codec import decode_frame, encode_frame, quantize
from .entropy_model import EntropyModel
from .errors import ConfigurationError, TrainingError
from .losses import (Batch, CameraBatch, GateConfig, LossBreakdown, LossConfig,
                     Models, total_loss)
from .scene import (Camera, SceneConfig, World, encode_view, fuse_and_decode,
                    generate_world, init_encoder, init_fusion, make_cameras,
                    moda, moda_sequence, observe)
from .version import SCHEMA_VERSION, VERSION


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "default"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    scene: SceneConfig = field(default_factory=SceneConfig)
    channel: ch.ChannelParams = field(default_factory=ch.ChannelParams)
    payload_bits: float = 4000.0        # nominal per-frame data amount D
    delay_max_s: float = 1.0
    n_delayed: int = 0
    snr_penalty_db: float = 30.0        # attenuation step for delayed cameras
    max_lag_frames: int = 6
    coverage_lower: float = 0.0
    coverage_upper: float | None = None  # None -> full grid cell count
    lam: float = 0.01
    r_max_bits_per_element: float = 2.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    epsilon: float = 0.5
    w_target: float | None = None        # None -> 1 / (on-time camera count)
    w0_mode: str = "max"
    w0_const: float = 1.0
    tau: int = 2
    entropy_hidden: int = 8
    priority_hidden: int = 16
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 4
    lam_warmup_steps: int = 0            # ramp the rate penalty 0 -> lam
    grad_gate: bool = True
    grad_gate_samples: int = 64
    log_every: int = 100
    eval_stride: int = 1
    sweep_lambdas: tuple[float, ...] = (0.001, 0.01, 0.1)
    sweep_delayed_counts: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        if self.n_delayed < 0 or self.n_delayed > self.scene.n_cameras:
            raise ConfigurationError(
                f"n_delayed {self.n_delayed} outside [0, {self.scene.n_cameras}]")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")
        if self.tau < 1:
            raise ConfigurationError("tau must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.max_lag_frames < 0:
            raise ConfigurationError("max_lag_frames must be >= 0")
        if self.eval_stride < 1:
            raise ConfigurationError("eval_stride must be >= 1")
        if self.lam_warmup_steps < 0:
            raise ConfigurationError("lam_warmup_steps must be >= 0")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    if "scene" in doc:
        doc["scene"] = SceneConfig(**doc["scene"])
    if "channel" in doc:
        doc["channel"] = ch.ChannelParams(**doc["channel"])
    for key in ("seeds", "sweep_lambdas", "sweep_delayed_counts"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return ExperimentConfig(**doc)


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment gradient descent over a ParamSet."""

    def __init__(self, params: ParamSet, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in {name}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# run setup
# ---------------------------------------------------------------------------

def latent_shape(grid_h: int, grid_w: int) -> tuple[int, int]:
    """Spatial dims of the stride-2 encoder latent for a given grid."""
    return (grid_h - 1) // 2 + 1, (grid_w - 1) // 2 + 1


def side_shape(lat_h: int, lat_w: int) -> tuple[int, int]:
    return -(-lat_h // 4), -(-lat_w // 4)


@dataclass
class RunContext:
    config: ExperimentConfig
    seed: int
    weight_mode: str
    world: World
    cameras: list[Camera]
    links: list[ch.LinkState]
    lags: np.ndarray
    d_norm: np.ndarray
    coverage_norm: np.ndarray
    models: Models
    loss_cfg: LossConfig
    rng_batch: np.random.Generator
    eval_seed: np.random.SeedSequence  # evaluate() re-derives its stream
    first_frame: int                   # earliest frame with full history


def delayed_camera_ids(n_delayed: int, n_cameras: int) -> list[int]:
    """Camera 0 stays on-time whenever possible; delays start at index 1."""
    if n_delayed >= n_cameras:
        return list(range(n_cameras))
    return list(range(1, n_delayed + 1))


def _resolve_link(params: ch.ChannelParams, shadowing: float, delayed: bool,
                  cfg: ExperimentConfig) -> ch.LinkState:
    extra_db = 0.0
    link = ch.link_state(params, cfg.payload_bits, cfg.delay_max_s, shadowing)
    while delayed and link.delay_norm <= cfg.epsilon:
        extra_db += cfg.snr_penalty_db
        if extra_db > 400.0:
            raise ConfigurationError("cannot degrade link past the delay threshold")
        link = ch.link_state(params, cfg.payload_bits, cfg.delay_max_s,
                             shadowing + extra_db)
    return link


def setup_run(config: ExperimentConfig, seed: int,
              weight_mode: str = "learned") -> RunContext:
    ss = np.random.SeedSequence(seed)
    s_world, s_cam, s_chan, s_param, s_batch, s_eval = (
        int(child.generate_state(1)[0]) for child in ss.spawn(6))

    world = generate_world(s_world, config.scene)
    cameras = make_cameras(np.random.default_rng(s_cam), config.scene)
    k = config.scene.n_cameras

    rng_chan = np.random.default_rng(s_chan)
    delayed = set(delayed_camera_ids(config.n_delayed, k))
    links = []
    for cam in cameras:
        shadow = ch.sample_shadowing(config.channel, rng_chan)
        links.append(_resolve_link(config.channel, shadow,
                                   cam.camera_id in delayed, config))
    d_norm = np.array([ln.delay_norm for ln in links])

    frame_period = 1.0 / config.scene.fps
    lags = np.array([min(int(ln.delay // frame_period) if math.isfinite(ln.delay)
                         else config.max_lag_frames, config.max_lag_frames)
                     for ln in links])

    co_upper = (config.coverage_upper if config.coverage_upper is not None
                else float(config.scene.grid_h * config.scene.grid_w))
    coverage_norm = np.array([
        prio.normalize_coverage(cam.coverage, config.coverage_lower, co_upper)
        for cam in cameras])

    rng_param = np.random.default_rng(s_param)
    params = prio.init_theta_m(rng_param, hidden=config.priority_hidden)
    params.update(init_fusion(rng_param))
    entropy_models = []
    enc_prefixes = []
    for i in range(k):
        enc_prefixes.append(f"enc{i}")
        params.update(init_encoder(rng_param, f"enc{i}"))
        em = EntropyModel.init(rng_param, tau=config.tau,
                               hidden=config.entropy_hidden, prefix=f"entropy{i}")
        params.update(em.params)
        em.params = params
        entropy_models.append(em)
    models = Models(params=params, entropy=entropy_models,
                    enc_prefixes=enc_prefixes)

    n_on_time = k - len(delayed)
    w_target = (config.w_target if config.w_target is not None
                else 1.0 / max(n_on_time, 1))
    loss_cfg = LossConfig(
        lam=config.lam, r_max_bits_per_element=config.r_max_bits_per_element,
        alpha2=config.alpha2, alpha3=config.alpha3,
        gate=GateConfig(epsilon=config.epsilon, w_target=w_target),
        w0_mode=config.w0_mode, w0_const=config.w0_const,
        weight_mode=weight_mode)

    first_frame = config.tau + int(lags.max()) if k else config.tau
    if first_frame >= config.scene.n_frames:
        raise ConfigurationError(
            f"sequence too short: need more than {first_frame} frames, "
            f"have {config.scene.n_frames}")

    return RunContext(config=config, seed=seed, weight_mode=weight_mode,
                      world=world, cameras=cameras, links=links, lags=lags,
                      d_norm=d_norm, coverage_norm=coverage_norm, models=models,
                      loss_cfg=loss_cfg,
                      rng_batch=np.random.default_rng(s_batch),
                      eval_seed=s_eval,
                      first_frame=first_frame)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def build_batch(ctx: RunContext, n: int,
                rng: np.random.Generator | None = None) -> Batch:
    """Sample frames and assemble per-camera views, contexts, and noise.

    Contexts are hard-quantized latents of the preceding frames under the
    current encoders, carried as plain data.
    """
    rng = rng if rng is not None else ctx.rng_batch
    scn = ctx.config.scene
    occ = ctx.world.occupancy
    ts = rng.integers(ctx.first_frame, scn.n_frames, size=n)
    y = occ[ts][:, None, :, :]
    lat_h, lat_w = latent_shape(scn.grid_h, scn.grid_w)
    sv_h, sv_w = side_shape(lat_h, lat_w)

    cams = []
    for k, camera in enumerate(ctx.cameras):
        tk = ts - ctx.lags[k]
        x = np.stack([observe(occ[t], camera, rng, scn.noise_sigma,
                              scn.occlusion_rate) for t in tk])
        frames = []
        for off in range(ctx.config.tau, 0, -1):
            xp = np.stack([observe(occ[t - off], camera, rng, scn.noise_sigma,
                                   scn.occlusion_rate) for t in tk])
            zp = encode_view(xp, ctx.models.params, ctx.models.enc_prefixes[k]).data
            frames.append(quantize(zp)[:, 0, :, :].astype(np.float64))
        context = np.stack(frames, axis=1)
        cams.append(CameraBatch(
            x=x, context=context,
            noise_z=rng.uniform(-0.5, 0.5, size=(n, 1, lat_h, lat_w)),
            noise_v=rng.uniform(-0.5, 0.5, size=(n, 1, sv_h, sv_w)),
            d_norm=float(ctx.d_norm[k]), coverage_norm=float(ctx.coverage_norm[k])))
    return Batch(y=y, cameras=cams)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    ctx: RunContext
    history: list[dict]
    final: LossBreakdown | None
    grad_gate_error: float | None
    steps_run: int


def train(config: ExperimentConfig, seed: int,
          weight_mode: str = "learned") -> TrainResult:
    """Adam on total_loss; deterministic given (config, seed, weight_mode)."""
    ctx = setup_run(config, seed, weight_mode)
    adam = Adam(ctx.models.params, lr=config.lr)
    history: list[dict] = []
    breakdown: LossBreakdown | None = None

    for step in range(config.steps):
        batch = build_batch(ctx, config.batch_size)
        loss_cfg = ctx.loss_cfg
        if 0 < config.lam_warmup_steps and step < config.lam_warmup_steps:
            # easing the rate penalty in keeps early training from silencing
            # the latents before the task term has shaped them
            ramp = (step + 1) / config.lam_warmup_steps
            loss_cfg = dataclasses.replace(loss_cfg, lam=config.lam * ramp)
        try:
            total, breakdown = total_loss(batch, ctx.models, loss_cfg)
            ctx.models.params.zero_grad()
            total.backward()
            adam.step()
        except TrainingError as e:
            raise TrainingError(f"training aborted at step {step}: {e}") from e
        if step % config.log_every == 0 or step == config.steps - 1:
            history.append({
                "step": step, "total": breakdown.total, "l1": breakdown.l1,
                "l2": breakdown.l2, "l3": breakdown.l3,
                "rate_nats": float(breakdown.rate_base_per_camera.sum()),
                "w_min": float(breakdown.weights.min()),
                "w_max": float(breakdown.weights.max()),
            })

    gate_err = None
    if config.grad_gate and config.steps > 0:
        probe = build_batch(ctx, config.batch_size)

        def f() -> Tensor:
            return total_loss(probe, ctx.models, ctx.loss_cfg)[0]

        gate_err = grad_check(f, ctx.models.params, step=1e-5,
                              sample=config.grad_gate_samples,
                              rng=np.random.default_rng(seed + 7919))
    return TrainResult(ctx=ctx, history=history, final=breakdown,
                       grad_gate_error=gate_err, steps_run=config.steps)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    moda: float
    total_bits: float
    bits_estimate_total: float
    bits_per_camera: np.ndarray       # mean payload bits per frame
    n_frames: int
    weights: np.ndarray
    w0: float
    d_norm: np.ndarray
    degenerate: bool


def evaluate(ctx: RunContext) -> EvalResult:
    """Code every camera-frame, decode, fuse, and score MODA.

    Pure in ctx: the observation stream is re-derived from the stored seed,
    so repeated calls score the identical pass.
    """
    scn = ctx.config.scene
    occ = ctx.world.occupancy
    k = scn.n_cameras
    rng_eval = np.random.default_rng(ctx.eval_seed)
    if ctx.weight_mode == "equal":
        weights = np.full(k, 1.0 / k)
        w0 = 1.0 / k
    else:
        state = prio.evaluate_priorities(
            list(zip(ctx.d_norm, ctx.coverage_norm)), ctx.models.params,
            w0_mode=ctx.loss_cfg.w0_mode, w0_const=ctx.loss_cfg.w0_const)
        weights = state.weights
        w0 = state.w0
    w_t = Tensor(weights)

    bits = np.zeros(k)
    est_total = 0.0
    results = []
    frames = range(ctx.first_frame, scn.n_frames, ctx.config.eval_stride)
    for t in frames:
        latents = []
        for i, camera in enumerate(ctx.cameras):
            x = observe(occ[t - ctx.lags[i]], camera, rng_eval,
                        scn.noise_sigma, scn.occlusion_rate)
            z = encode_view(x[None], ctx.models.params, ctx.models.enc_prefixes[i])
            res = encode_frame(z.data, ctx.models.entropy[i], camera_id=i,
                               frame_index=t)
            z_hat = decode_frame(res.stream, ctx.models.entropy[i])
            bits[i] += res.stream.payload_bits
            est_total += res.z_bits_estimate + res.v_bits_estimate
            latents.append(Tensor(z_hat.astype(np.float64)))
        probs = fuse_and_decode(latents, w_t, ctx.models.params,
                                scn.grid_h, scn.grid_w)
        results.append(moda(probs.data[0, 0], ctx.world.positions[t]))
    n_frames = len(results)
    return EvalResult(
        moda=moda_sequence(results), total_bits=float(bits.sum()),
        bits_estimate_total=est_total,
        bits_per_camera=bits / max(n_frames, 1), n_frames=n_frames,
        weights=weights, w0=w0, d_norm=ctx.d_norm.copy(),
        degenerate=ctx.config.n_delayed >= k)


# ---------------------------------------------------------------------------
# records and CSV
# ---------------------------------------------------------------------------

def make_record(config: ExperimentConfig, seed: int, weight_mode: str,
                sweep_axis: str, sweep_value: float, tr: TrainResult,
                ev: EvalResult, wall_time_s: float) -> dict:
    k = config.scene.n_cameras
    rec: dict = {
        "schema_version": SCHEMA_VERSION,
        "scenario": config.scenario,
        "seed": seed,
        "sweep_axis": sweep_axis,
        "sweep_value": sweep_value,
        "weight_mode": weight_mode,
        "n_cameras": k,
        "n_delayed": config.n_delayed,
        "degenerate": int(ev.degenerate),
        "lam": config.lam,
        "moda": ev.moda,
        "total_bits": ev.total_bits,
        "bits_per_frame": ev.total_bits / max(ev.n_frames, 1),
        "bits_estimate_total": ev.bits_estimate_total,
        "n_eval_frames": ev.n_frames,
        "l1": tr.final.l1 if tr.final else float("nan"),
        "l2": tr.final.l2 if tr.final else float("nan"),
        "l3": tr.final.l3 if tr.final else float("nan"),
        "loss_total": tr.final.total if tr.final else float("nan"),
        "grad_gate_error": (tr.grad_gate_error
                            if tr.grad_gate_error is not None else float("nan")),
        "w0": ev.w0,
        "wall_time_s": wall_time_s,
    }
    for i in range(k):
        rec[f"bits_cam{i}"] = float(ev.bits_per_camera[i])
    for i in range(k):
        rec[f"weight_cam{i}"] = float(ev.weights[i])
    for i in range(k):
        rec[f"d_norm_cam{i}"] = float(ev.d_norm[i])
    return rec


def _format_cell(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def emit_csv(records: list[dict], path, columns: list[str] | None = None) -> None:
    """Header plus one line per record; floats at 9 significant digits."""
    if columns is None:
        if not records:
            raise ConfigurationError("cannot infer columns from an empty record list")
        columns = list(records[0].keys())
    lines = [",".join(columns)]
    for rec in records:
        if set(rec.keys()) != set(columns):
            raise ConfigurationError("records do not share a schema")
        lines.append(",".join(_format_cell(rec[c]) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def parse_csv(path) -> list[dict]:
    """Inverse of emit_csv; numeric cells come back as int or float."""
    text = Path(path).read_text().strip("\n")
    lines = text.split("\n") if text else []
    if not lines:
        return []
    columns = lines[0].split(",")
    out = []
    for line in lines[1:]:
        cells = line.split(",")
        rec = {}
        for col, cell in zip(columns, cells):
            try:
                rec[col] = int(cell)
            except ValueError:
                try:
                    rec[col] = float(cell)
                except ValueError:
                    rec[col] = cell
        out.append(rec)
    return out


def write_meta(path, config: ExperimentConfig, command: str, n_records: int) -> None:
    meta = {
        "schema_version": SCHEMA_VERSION,
        "version": VERSION,
        "config_hash": config_hash(config),
        "command": command,
        "n_records": n_records,
    }
    Path(str(path) + ".meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n")


def write_gnuplot(csv_path, gp_path, x_col: str, y_col: str, title: str) -> None:
    script = (
        "set datafile separator ','\n"
        "set key autotitle columnhead\n"
        f"set xlabel '{x_col}'\n"
        f"set ylabel '{y_col}'\n"
        f"set title '{title}'\n"
        "set logscale x\n"
        f"plot '{Path(csv_path).name}' using "
        f"(column('{x_col}')):(column('{y_col}')) with points pt 7\n")
    Path(gp_path).write_text(script)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def run_point(config: ExperimentConfig, seed: int, weight_mode: str,
              sweep_axis: str, sweep_value: float) -> dict:
    t0 = time.perf_counter()
    tr = train(config, seed, weight_mode)
    ev = evaluate(tr.ctx)
    return make_record(config, seed, weight_mode, sweep_axis, sweep_value,
                       tr, ev, time.perf_counter() - t0)


def sweep_rate_vs_moda(config: ExperimentConfig, out_dir) -> tuple[list[dict], Path]:
    """One trained run per (lambda, seed, weight mode); communication cost
    moves along the rate axis as lambda varies."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for lam in config.sweep_lambdas:
        cfg = dataclasses.replace(config, lam=lam)
        for mode in ("learned", "equal"):
            for seed in config.seeds:
                records.append(run_point(cfg, seed, mode, "lambda", lam))
    csv_path = out / "rate_sweep.csv"
    emit_csv(records, csv_path)
    write_meta(csv_path, config, "sweep-rate", len(records))
    write_gnuplot(csv_path, out / "rate_sweep.gp", "bits_per_frame", "moda",
                  "communication cost vs MODA")
    return records, csv_path


def sweep_delayed_cameras(config: ExperimentConfig, out_dir) -> tuple[list[dict], Path]:
    """One trained run per (delayed count, seed, weight mode)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for n in config.sweep_delayed_counts:
        cfg = dataclasses.replace(config, n_delayed=n)
        for mode in ("learned", "equal"):
            for seed in config.seeds:
                records.append(run_point(cfg, seed, mode, "n_delayed", float(n)))
    csv_path = out / "delay_sweep.csv"
    emit_csv(records, csv_path)
    write_meta(csv_path, config, "sweep-delay", len(records))
    write_gnuplot(csv_path, out / "delay_sweep.gp", "sweep_value", "moda",
                  "delayed cameras vs MODA")
    return records, csv_path
