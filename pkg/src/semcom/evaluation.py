"""SNR sweeps, ablations and receiver latency.

Every comparison between arms reuses identical channel noise: the noise for
an SNR point comes from a generator seeded by :func:`channel_seed` and the
images are always visited in the same batches.
"""
import csv
import json
import logging
import math
import os
import statistics
import time
from dataclasses import dataclass, field

import torch

from .channel import make_rng
from .denoiser import S1_POLICIES, initial_ss
from .errors import CheckpointError
from .metrics import ms_ssim, psnr
from .pipeline import param_hash

logger = logging.getLogger(__name__)


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def add(self, snr_db, metric, values, tag, **extra):
        values = [float(v) for v in values]
        if not values:
            raise ValueError("sweep row needs at least one sample")
        row = {
            "snr_db": float(snr_db),
            "metric": metric,
            "mean": statistics.fmean(values),
            "std": statistics.pstdev(values) if len(values) > 1 else 0.0,
            "count": len(values),
            "tag": tag,
        }
        row.update(extra)
        self.rows.append(row)
        return row

    def select(self, **match):
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def value(self, snr_db, metric, tag, key="mean"):
        rows = self.select(snr_db=float(snr_db), metric=metric, tag=tag)
        if len(rows) != 1:
            raise KeyError(f"expected one row for snr={snr_db} metric={metric} tag={tag}, found {len(rows)}")
        return rows[0][key]

    def tags(self):
        return list(dict.fromkeys(r["tag"] for r in self.rows))

    def snrs(self):
        return sorted({r["snr_db"] for r in self.rows})

    def write(self, stem):
        """Write ``<stem>.jsonl`` and ``<stem>.csv``; returns both paths."""
        os.makedirs(os.path.dirname(stem) or ".", exist_ok=True)
        with open(stem + ".jsonl", "w") as fh:
            for r in self.rows:
                fh.write(json.dumps(r) + "\n")
        keys = list(dict.fromkeys(k for r in self.rows for k in r))
        with open(stem + ".csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.rows)
        return stem + ".jsonl", stem + ".csv"

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def channel_seed(seed, snr_db):
    """Noise stream for one SNR point. Keyed on the SNR value (0.01 dB
    resolution) so a point sees the same noise whatever list it sits in."""
    return seed * 100_000 + round((float(snr_db) + 200.0) * 100)


def _batches(images, batch_size):
    for i in range(0, images.shape[0], batch_size):
        yield images[i : i + batch_size]


@torch.no_grad()
def evaluate_arm(system, images, snr_db, seed, steps="adaptive", s1_policy="eq1", policy_seed=None,
                 batch_size=64, metrics=("psnr", "ms_ssim")):
    """Per-image results for one receiver configuration at one SNR.

    ``steps`` is ``"adaptive"``, a fixed step count, or 0 for no denoising.
    Returns a dict of lists: metrics, latent MSE before/after denoising, and
    step counts.
    """
    system.eval()
    rng = make_rng(seed)
    policy_rng = make_rng(policy_seed) if policy_seed is not None else None
    out = {m: [] for m in metrics}
    out.update(latent_mse_in=[], latent_mse_out=[], steps_kept=[], steps_executed=[])
    for x in _batches(images, batch_size):
        y_tx, z1 = system.transmit(x, snr_db, rng)
        s1 = None
        if s1_policy != "eq1" and system.denoiser is not None and steps != 0:
            s1 = initial_ss(snr_db, x.shape[0], s1_policy, rng=policy_rng, dtype=z1.dtype)
        x_hat, y_hat, traces = system.receive(z1, snr_db, steps=steps, s1=s1)
        if "psnr" in out:
            out["psnr"].extend(psnr(x, x_hat).tolist())
        if "ms_ssim" in out:
            out["ms_ssim"].extend(ms_ssim(x, x_hat).tolist())
        out["latent_mse_in"].extend(((z1 - y_tx) ** 2).flatten(1).mean(1).tolist())
        out["latent_mse_out"].extend(((y_hat - y_tx) ** 2).flatten(1).mean(1).tolist())
        if traces is None:
            out["steps_kept"].extend([0] * x.shape[0])
            out["steps_executed"].extend([0] * x.shape[0])
        else:
            out["steps_kept"].extend(t.steps_kept for t in traces)
            out["steps_executed"].extend(t.steps_executed for t in traces)
    return out


def _steps_extra(res):
    return {
        "steps_kept_mean": statistics.fmean(res["steps_kept"]),
        "steps_executed_mean": statistics.fmean(res["steps_executed"]),
    }


def run_snr_sweep(system, images, snr_list, seed=0, baselines=None, batch_size=64,
                  metrics=("psnr", "ms_ssim")):
    """Full pipeline with adaptive denoising versus denoiser-free arms.

    ``baselines`` maps a tag to a system evaluated with the denoiser bypassed;
    by default the sweep's own system is used with the denoiser removed.
    """
    baselines = {"jscc_t": system} if baselines is None else baselines
    result = SweepResult()
    for snr in snr_list:
        arms = [("full", system, "adaptive")] + [(tag, sysm, 0) for tag, sysm in baselines.items()]
        for tag, sysm, steps in arms:
            res = evaluate_arm(sysm, images, snr, channel_seed(seed, snr), steps=steps,
                               batch_size=batch_size, metrics=metrics)
            for m in metrics:
                result.add(snr, m, res[m], tag, **_steps_extra(res))
            result.add(snr, "latent_mse", res["latent_mse_out"], tag, **_steps_extra(res))
    return result


def ablate_initial_ss(system, images, snr_list, seed=0, policies=S1_POLICIES, policy_seed=12345,
                      batch_size=64, metrics=("psnr",)):
    """Compare initial-SS policies on identical channel noise."""
    result = SweepResult()
    for snr in snr_list:
        for policy in policies:
            res = evaluate_arm(system, images, snr, channel_seed(seed, snr), s1_policy=policy,
                               policy_seed=policy_seed, batch_size=batch_size, metrics=metrics)
            for m in metrics:
                result.add(snr, m, res[m], policy, **_steps_extra(res))
    return result


def ablate_steps(system, images, snr_list, t_max=None, seed=0, batch_size=64):
    """PSNR gain over no denoising for fixed step counts 0..t_max and for
    adaptive inference (``tag="adaptive"``)."""
    t_max = t_max or system.denoiser.cfg.t_max
    result = SweepResult()
    for snr in snr_list:
        base = evaluate_arm(system, images, snr, channel_seed(seed, snr), steps=0,
                            batch_size=batch_size, metrics=("psnr",))
        arms = [(str(k), k) for k in range(t_max + 1)] + [("adaptive", "adaptive")]
        for tag, steps in arms:
            res = base if steps == 0 else evaluate_arm(system, images, snr, channel_seed(seed, snr), steps=steps,
                                                       batch_size=batch_size, metrics=("psnr",))
            delta = [a - b for a, b in zip(res["psnr"], base["psnr"])]
            extra = _steps_extra(res)
            result.add(snr, "psnr", res["psnr"], tag, **extra)
            result.add(snr, "psnr_delta", delta, tag, **extra)
    return result


def ablate_ss_loss(system_with, system_without, images, snr_list, seed=0, export_dir=None,
                   export_count=4, batch_size=64):
    """Paired comparison of denoisers trained with and without the SS loss.

    Both systems must share the same encoder weights. With ``export_dir``,
    the first ``export_count`` images of each SNR are saved as
    original / with-SS / without-SS PNG triples.
    """
    if param_hash(system_with.encoder) != param_hash(system_without.encoder):
        raise CheckpointError("SS-loss ablation arms must share the phase-1 encoder")
    result = SweepResult()
    for snr in snr_list:
        for tag, sysm in (("with_ss", system_with), ("without_ss", system_without)):
            res = evaluate_arm(sysm, images, snr, channel_seed(seed, snr), batch_size=batch_size,
                               metrics=("psnr", "ms_ssim"))
            extra = _steps_extra(res)
            result.add(snr, "psnr", res["psnr"], tag, **extra)
            result.add(snr, "ms_ssim", res["ms_ssim"], tag, **extra)
            result.add(snr, "latent_mse", res["latent_mse_out"], tag, **extra)
        if export_dir:
            export_reconstructions(export_dir, {"with_ss": system_with, "without_ss": system_without},
                                   images[:export_count], snr, channel_seed(seed, snr))
    return result


@torch.no_grad()
def export_reconstructions(directory, systems, images, snr_db, seed):
    from .data import save_image

    os.makedirs(directory, exist_ok=True)
    paths = []
    for j in range(images.shape[0]):
        p = os.path.join(directory, f"snr{snr_db:g}_img{j}_original.png")
        save_image(p, images[j])
        paths.append(p)
    for tag, sysm in systems.items():
        _, z1 = sysm.transmit(images, snr_db, make_rng(seed))
        x_hat = sysm.receive(z1, snr_db)[0]
        for j in range(images.shape[0]):
            p = os.path.join(directory, f"snr{snr_db:g}_img{j}_{tag}.png")
            save_image(p, x_hat[j])
            paths.append(p)
    return paths


@dataclass
class LatencyTable:
    rows: list = field(default_factory=list)

    def value(self, snr_db, arm, key="mean_ms"):
        for r in self.rows:
            if r["snr_db"] == float(snr_db) and r["arm"] == arm:
                return r[key]
        raise KeyError((snr_db, arm))

    def overall(self, arm, key="mean_ms"):
        return statistics.fmean(r[key] for r in self.rows if r["arm"] == arm)

    def write(self, stem):
        return SweepResult(self.rows).write(stem)


LATENCY_ARMS = ("decode_only", "adaptive", "fixed_tmax")


@torch.no_grad()
def measure_receiver_latency(system, images, snr_list, repetitions=100, warmup=10, seed=0):
    """Wall-clock receiver time per image (denoise + decode).

    For each image and SNR the arms run interleaved, ``warmup`` untimed rounds
    then ``repetitions`` timed ones; each arm's per-image time is the median
    over repetitions. Rows report the mean and spread of those medians over
    images, the spread over repetitions, and the denoiser overhead relative to
    decode-only. Runs single-threaded.
    """
    system.eval()
    t_max = system.denoiser.cfg.t_max
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    table = LatencyTable()
    try:
        for snr in snr_list:
            rng = make_rng(channel_seed(seed, snr))
            per_arm = {a: [] for a in LATENCY_ARMS}
            rep_std = {a: [] for a in LATENCY_ARMS}
            steps = []
            for j in range(images.shape[0]):
                _, z1 = system.transmit(images[j : j + 1], snr, rng)
                runs = {
                    "decode_only": lambda: system.receive(z1, snr, steps=0),
                    "adaptive": lambda: system.receive(z1, snr, steps="adaptive"),
                    "fixed_tmax": lambda: system.receive(z1, snr, steps=t_max),
                }
                times = {a: [] for a in LATENCY_ARMS}
                for r in range(warmup + repetitions):
                    # rotate the order so no arm always runs first
                    k = r % len(LATENCY_ARMS)
                    for a in LATENCY_ARMS[k:] + LATENCY_ARMS[:k]:
                        t0 = time.perf_counter()
                        res = runs[a]()
                        dt = time.perf_counter() - t0
                        if r >= warmup:
                            times[a].append(dt * 1e3)
                        if a == "adaptive" and r == 0 and res[2] is not None:
                            steps.append(res[2][0].steps_executed)
                for a in LATENCY_ARMS:
                    per_arm[a].append(statistics.median(times[a]))
                    rep_std[a].append(statistics.pstdev(times[a]))
            decode_ms = statistics.fmean(per_arm["decode_only"])
            for a in LATENCY_ARMS:
                vals = per_arm[a]
                table.rows.append({
                    "snr_db": float(snr),
                    "arm": a,
                    "mean_ms": statistics.fmean(vals),
                    "median_ms": statistics.median(vals),
                    "std_ms_images": statistics.pstdev(vals) if len(vals) > 1 else 0.0,
                    "std_ms_repetitions": statistics.fmean(rep_std[a]),
                    "repetitions": repetitions,
                    "images": len(vals),
                    "denoise_overhead_ms": statistics.fmean(vals) - decode_ms,
                    "steps_executed_mean": (statistics.fmean(steps) if a == "adaptive"
                                            else (t_max if a == "fixed_tmax" else 0)),
                })
    finally:
        torch.set_num_threads(threads)
    return table


# ---------------------------------------------------------------- plots


def plot_sweep(result, path, metric="psnr"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for tag in result.tags():
        rows = sorted(result.select(metric=metric, tag=tag), key=lambda r: r["snr_db"])
        if rows:
            ax.errorbar([r["snr_db"] for r in rows], [r["mean"] for r in rows],
                        yerr=[r["std"] for r in rows], marker="o", capsize=2, label=tag)
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel(metric)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_bars(result, path, metric="psnr_delta"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    snrs, tags = result.snrs(), result.tags()
    width = 0.8 / max(len(tags), 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k, tag in enumerate(tags):
        vals = []
        for s in snrs:
            rows = result.select(snr_db=s, metric=metric, tag=tag)
            vals.append(rows[0]["mean"] if rows else math.nan)
        ax.bar([i + k * width for i in range(len(snrs))], vals, width=width, label=tag)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(snrs))])
    ax.set_xticklabels([f"{s:g}" for s in snrs])
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel(metric)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
