"""Deterministic self-check battery.

Every check runs from fixed seeds and emits one row; the resulting CSV
is byte-identical across repeated runs on the same build. Nothing here
records wall time or dates.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import channel as ch
from .autodiff import ParamSet, Tensor, grad_check
from .codec import (decode_tensor, encode_tensor, quantize, rate_estimate_bits)
from .entropy_model import (ALPHABET_HI, ALPHABET_LO, DiscretizedGaussian,
                            kl_divergence, pmf_table)
from .harness import (Adam, ExperimentConfig, build_batch, emit_csv, setup_run,
                      train)
from .losses import GateConfig, loss_L3, total_loss
from .scene import SceneConfig, generate_world, moda


@dataclass(frozen=True)
class CheckRow:
    name: str
    passed: bool
    observed: str
    bound: str


def _row(name: str, passed: bool, observed: float | str, bound: str) -> CheckRow:
    obs = observed if isinstance(observed, str) else f"{observed:.9g}"
    return CheckRow(name, bool(passed), obs, bound)


def _toy_config() -> ExperimentConfig:
    return ExperimentConfig(
        scenario="verify", seeds=(0,),
        scene=SceneConfig(grid_h=8, grid_w=8, ped_min=2,
                          ped_max=4, n_frames=40, n_cameras=2,
                          noise_sigma=0.05, occlusion_rate=0.1, fps=2.0),
        steps=100, batch_size=2, grad_gate=False, log_every=10,
        entropy_hidden=4, priority_hidden=8)


def check_capacity_exact() -> CheckRow:
    got = ch.capacity(2e6, 1.0)
    return _row("capacity_snr1_exact", got == 2e6, got, "== 2e6")


def check_delay_ratio() -> CheckRow:
    worst = 0.0
    rng = np.random.default_rng(11)
    for _ in range(200):
        bits = float(rng.uniform(10.0, 1e7))
        cap = float(rng.uniform(10.0, 1e8))
        rel = abs(ch.delay(bits, cap) - bits / cap) / (bits / cap)
        worst = max(worst, rel)
    return _row("delay_is_bits_over_capacity", worst < 1e-12, worst, "< 1e-12")


def check_softmax() -> CheckRow:
    rng = np.random.default_rng(12)
    worst_sum = 0.0
    stable = True
    for _ in range(1000):
        v = rng.normal(0.0, 5.0, size=rng.integers(2, 9))
        w = ad.softmax(Tensor(v)).data
        worst_sum = max(worst_sum, abs(w.sum() - 1.0))
        w_shift = ad.softmax(Tensor(v + rng.normal())).data
        stable = stable and int(np.argmax(w)) == int(np.argmax(w_shift))
    ok = worst_sum < 1e-9 and stable
    return _row("softmax_normalized_shift_stable", ok, worst_sum, "< 1e-9")


def check_gate_example() -> CheckRow:
    w = Tensor(np.array([0.6, 0.4]))
    got = loss_L3(w, np.array([0.1, 0.9]),
                  GateConfig(epsilon=0.5, w_target=0.5)).item()
    return _row("delay_gate_worked_example", abs(got - 0.17) < 1e-12, got,
                "|x-0.17| < 1e-12")


def check_sinr_oracle() -> CheckRow:
    params = ch.ChannelParams()
    worst = 0.0
    rng = np.random.default_rng(13)
    for _ in range(100):
        shadow = float(rng.normal(0.0, params.shadowing_sigma))
        got = ch.compute_sinr(params, shadow)
        pl_db = (params.resolved_reference_loss()
                 + 10.0 * params.path_loss_exponent
                 * math.log10(params.distance / params.reference_distance)
                 + shadow)
        rx_dbm = 10.0 * math.log10(params.tx_power * 1000.0) - pl_db
        noise_dbm = params.noise_density + 10.0 * math.log10(params.bandwidth)
        want = (10.0 ** (rx_dbm / 10.0) / 1000.0) / (
            params.interference_power + 10.0 ** (noise_dbm / 10.0) / 1000.0)
        worst = max(worst, abs(got - want) / want)
    return _row("sinr_matches_db_arithmetic", worst < 1e-9, worst, "< 1e-9")


def check_pmf_normalization() -> CheckRow:
    rng = np.random.default_rng(14)
    mu = rng.uniform(-70, 70, size=500)
    sigma = np.exp(rng.uniform(math.log(1e-3), math.log(100.0), size=500))
    table = pmf_table(mu, sigma, ALPHABET_LO, ALPHABET_HI, 1.0)
    worst = float(np.abs(table.sum(axis=1) - 1.0).max())
    return _row("pmf_rows_normalized", worst < 1e-9, worst, "< 1e-9")


def check_kl_nonnegative() -> CheckRow:
    rng = np.random.default_rng(15)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 40))
        p = rng.dirichlet(np.ones(n))
        q = rng.dirichlet(np.ones(n))
        worst = min(worst, kl_divergence(p, q))
    return _row("kl_nonnegative", worst >= -1e-12, worst, ">= -1e-12")


def check_coder_roundtrip() -> CheckRow:
    rng = np.random.default_rng(16)
    ok = True
    worst_gap = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 200))
        mu = rng.uniform(-8, 8, size=n)
        sigma = np.exp(rng.uniform(math.log(0.05), math.log(8.0), size=n))
        table = pmf_table(mu, sigma, ALPHABET_LO, ALPHABET_HI, 1.0)
        vals = np.array([rng.choice(np.arange(ALPHABET_LO, ALPHABET_HI + 1),
                                    p=row / row.sum()) for row in table])
        bs = encode_tensor(vals, mu, sigma, camera_id=0, frame_index=0,
                           tau=2, model_revision=0)
        back = decode_tensor(bs, mu, sigma)
        ok = ok and np.array_equal(back, vals)
        est = rate_estimate_bits(vals, mu, sigma)
        gap = abs(bs.payload_bits - est)
        worst_gap = max(worst_gap, gap - max(128.0, 0.02 * est))
    ok = ok and worst_gap <= 0.0
    return _row("range_coder_lossless_rate_tracked", ok, worst_gap, "<= 0")


def check_quantize_rules() -> CheckRow:
    vals = quantize(np.array([0.4, -0.6, 0.5, -0.5, 1e9, -1e9, 0.0]))
    want = np.array([0, -1, 1, -1, ALPHABET_HI, ALPHABET_LO, 0])
    idem = np.array_equal(quantize(vals.astype(float)), vals)
    ok = np.array_equal(vals, want) and idem
    return _row("quantizer_rounds_half_away", ok,
                "ok" if ok else "mismatch", "exact")


def check_checkpoint_roundtrip(tmp_dir: str | None = None) -> CheckRow:
    import tempfile
    rng = np.random.default_rng(17)
    ps = ParamSet()
    ps.add("a/w", rng.normal(size=(3, 4)))
    ps.add("b/b", rng.normal(size=(5,)))
    with tempfile.TemporaryDirectory(dir=tmp_dir) as d:
        path = f"{d}/ckpt.npz"
        ps.save(path)
        ps2 = ParamSet()
        ps2.add("a/w", np.zeros((3, 4)))
        ps2.add("b/b", np.zeros(5))
        ps2.load(path)
    ok = all(np.array_equal(ps[name].data, ps2[name].data)
             for name in ps.names())
    return _row("checkpoint_bit_exact", ok, "ok" if ok else "mismatch", "exact")


def check_world_deterministic() -> CheckRow:
    cfg = SceneConfig(grid_h=8, grid_w=8, ped_min=2, ped_max=4,
                      n_frames=30, n_cameras=2)
    a = generate_world(123, cfg)
    b = generate_world(123, cfg)
    ok = (np.array_equal(a.occupancy, b.occupancy)
          and np.array_equal(a.positions, b.positions))
    return _row("world_seed_deterministic", ok, "ok" if ok else "mismatch",
                "exact")


def check_moda_cases() -> CheckRow:
    grid = np.zeros((8, 8))
    gt = np.array([[2, 3], [5, 5]])
    for r, c in gt:
        grid[r, c] = 0.9
    perfect = moda(grid, gt).score
    empty = moda(np.zeros((8, 8)), gt).score
    ok = perfect == 1.0 and empty == 0.0
    return _row("moda_perfect_and_empty", ok,
                f"{perfect:.9g}/{empty:.9g}", "1 and 0")


def check_train_smoke() -> CheckRow:
    cfg = _toy_config()
    tr = train(cfg, seed=0)
    first = tr.history[0]["total"]
    last = tr.history[-1]["total"]
    ok = math.isfinite(last) and last < first
    return _row("short_training_reduces_loss", ok,
                f"{first:.9g}->{last:.9g}", "decreasing")


def check_grad_probe() -> CheckRow:
    # seed 2 keeps every pre-activation away from its nearest kink, so
    # central differences stay on one linear piece
    cfg = dataclasses.replace(_toy_config(), steps=0, grad_gate=False)
    ctx = setup_run(cfg, seed=2)
    batch = build_batch(ctx, 2)

    def f() -> Tensor:
        return total_loss(batch, ctx.models, ctx.loss_cfg)[0]

    err = grad_check(f, ctx.models.params, step=1e-5, sample=32,
                     rng=np.random.default_rng(18))
    return _row("sampled_gradient_probe", err < 1e-4, err, "< 1e-4")


def check_train_repeatable() -> CheckRow:
    cfg = dataclasses.replace(_toy_config(), steps=20, grad_gate=False)
    a = train(cfg, seed=5)
    b = train(cfg, seed=5)
    ok = all(np.array_equal(a.ctx.models.params[n].data,
                            b.ctx.models.params[n].data)
             for n in a.ctx.models.params.names())
    return _row("training_seed_repeatable", ok, "ok" if ok else "mismatch",
                "exact")


def check_edge_bins_absorb_tails() -> CheckRow:
    table = pmf_table(np.array([200.0, -200.0]), np.array([1.0, 1.0]),
                      ALPHABET_LO, ALPHABET_HI, 1.0)
    ok = abs(table[0, -1] - 1.0) < 1e-12 and abs(table[1, 0] - 1.0) < 1e-12
    return _row("edge_bins_absorb_tails", ok,
                f"{table[0, -1]:.9g}/{table[1, 0]:.9g}", "both 1")


ALL_CHECKS = (
    check_capacity_exact,
    check_delay_ratio,
    check_softmax,
    check_gate_example,
    check_sinr_oracle,
    check_pmf_normalization,
    check_kl_nonnegative,
    check_coder_roundtrip,
    check_quantize_rules,
    check_checkpoint_roundtrip,
    check_world_deterministic,
    check_moda_cases,
    check_edge_bins_absorb_tails,
    check_grad_probe,
    check_train_smoke,
    check_train_repeatable,
)


def run_battery() -> tuple[list[CheckRow], bool]:
    rows = [fn() for fn in ALL_CHECKS]
    return rows, all(r.passed for r in rows)


def battery_records(rows: list[CheckRow]) -> list[dict]:
    return [{"name": r.name, "passed": int(r.passed), "observed": r.observed,
             "bound": r.bound} for r in rows]


def write_battery_csv(rows: list[CheckRow], path) -> None:
    emit_csv(battery_records(rows), path,
             columns=["name", "passed", "observed", "bound"])
