"""End-to-end stages behind the command line: prepare, attack, eval, sweep,
bound verification and plotting. Each stage reads a :class:`RunConfig` and
writes plain files (checkpoints, JSON, CSV, PNG)."""

from __future__ import annotations

import csv
import json
import logging
import multiprocessing
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from trail import checkpoint
from trail._validation import ConfigurationError, ContractError, get_device
from trail.baselines import PGDConfig, match_ssim_epsilon, pgd_attack
from trail.codec import LatentCodec, identity_codec, train_codec
from trail.config import RunConfig
from trail.data import load_dataset, make_toy_dataset, quantize, save_dataset, save_png
from trail.denoiser import DenoiserModel, pretrain
from trail.evaluation.bound import verify_bound
from trail.evaluation.metrics import jpeg_defense, ssim, transfer_matrix
from trail.evaluation.results import AttackResult, read_results, write_result
from trail.evaluation.sweep import sweep_tstar, trend
from trail.objective import ObjectiveConfig, adversarial_loss, distance_loss
from trail.schedule import build_linear_schedule
from trail.tta import TrailAttack
from trail.zoo import ModelRegistry, train_classifier

log = logging.getLogger(__name__)

METHODS = ("trail", "pgd", "reconstruct-only")
MANIFEST = "manifest.json"
REGISTRY = "zoo/registry.json"


def make_dataset(cfg):
    d = cfg.data
    splits = {
        "train": make_toy_dataset(d.n_train, d.seed),
        "val": make_toy_dataset(d.n_val, d.seed + 1),
        "test": make_toy_dataset(d.n_test, d.seed + 2),
    }
    path = cfg.path("dataset")
    save_dataset(path, splits)
    return path


def _splits(cfg):
    data = load_dataset(cfg.path("dataset"))
    missing = {"train", "val", "test"} - set(data)
    if missing:
        raise ContractError(f"dataset {cfg.path('dataset')} lacks splits {sorted(missing)}")
    return data


def _encode_all(codec, X, batch=256):
    X = torch.as_tensor(X)
    with torch.no_grad():
        return torch.cat([codec.encode(X[i : i + batch]) for i in range(0, len(X), batch)])


def _schedule(cfg):
    s = cfg.schedule
    return build_linear_schedule(s.T, s.beta_start, s.beta_end)


# -- prepare -----------------------------------------------------------------


def prepare(cfg):
    """Train codec, latent denoiser, optional pixel denoiser and the classifier zoo.

    Every stage enforces its quality gate (a :class:`TrainingGateError` names
    the stage). Writes checkpoints plus ``manifest.json`` with their hashes.
    """
    get_device()
    data = _splits(cfg)
    (Xtr, ytr), (Xva, yva), (Xte, yte) = data["train"], data["val"], data["test"]
    root = cfg.path("artifacts")
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": 1, "seed": cfg.seed}
    schedule = _schedule(cfg)

    c = cfg.codec
    log.info("prepare: codec (%s)", c.mode)
    codec = train_codec(
        Xtr, c.epochs, cfg.seed, mode=c.mode, X_val=Xva,
        width=c.width, latent_channels=c.latent_channels, batch_size=c.batch_size, lr=c.lr, kl_weight=c.kl_weight,
        max_abs_error=c.max_abs_error, min_ssim=c.min_ssim,
    )
    manifest["codec"] = {"path": "codec.ckpt", "sha256": codec.save(root / "codec.ckpt"), "metrics": codec.metrics_}

    d = cfg.denoiser
    log.info("prepare: latent denoiser")
    den = pretrain(
        _encode_all(codec, Xtr), schedule, d.epochs, cfg.seed, Z_val=_encode_all(codec, Xva),
        channels=d.channels, batch_size=d.batch_size, lr=d.lr, max_val_loss=d.max_val_loss,
    ).check_gate()
    manifest["denoiser"] = {"path": "denoiser.ckpt", "sha256": den.save(root / "denoiser.ckpt"), "metrics": den.metrics_}

    p = cfg.pixel_denoiser
    manifest["pixel_denoiser"] = None
    if p.enabled:
        log.info("prepare: pixel-space denoiser")
        pix = pretrain(
            Xtr, schedule, p.epochs, cfg.seed, Z_val=Xva, channels=p.channels, batch_size=p.batch_size, lr=p.lr,
            max_val_loss=p.max_val_loss,
        ).check_gate()
        manifest["pixel_denoiser"] = {
            "path": "pixel_denoiser.ckpt",
            "sha256": pix.save(root / "pixel_denoiser.ckpt"),
            "metrics": pix.metrics_,
        }

    z = cfg.zoo
    if z.surrogate not in z.architectures:
        raise ConfigurationError(f"surrogate {z.surrogate!r} is not in the zoo")
    registry = ModelRegistry()
    for k, arch in enumerate(z.architectures):
        log.info("prepare: classifier %s", arch)
        clf = train_classifier(
            arch, (Xtr, ytr), z.epochs, cfg.seed + k, X_test=Xte, y_test=yte,
            batch_size=z.batch_size, lr=z.lr, min_accuracy=z.min_accuracy,
        )
        rel = f"zoo/{arch}.ckpt"
        (root / "zoo").mkdir(exist_ok=True)
        sha = clf.save(root / rel)
        registry.register(clf, rel, clf.metrics_["clean_accuracy"], sha)
    registry.save(root / REGISTRY)
    manifest["zoo"] = {"registry": REGISTRY, "sha256": checkpoint.file_sha256(root / REGISTRY), "surrogate": z.surrogate}

    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class Artifacts:
    codec: LatentCodec
    denoiser: DenoiserModel
    pixel_denoiser: DenoiserModel | None
    zoo: dict
    surrogate: str


def load_artifacts(cfg, pixel=False):
    """Load every checkpoint named in the manifest, verifying its hash first."""
    root = cfg.path("artifacts")
    path = root / MANIFEST
    if not path.exists():
        raise ContractError(f"no manifest at {path}; run `trail prepare` first")
    m = json.loads(path.read_text())
    codec = LatentCodec.load(root / m["codec"]["path"], expected_sha256=m["codec"]["sha256"])
    den = DenoiserModel.load(root / m["denoiser"]["path"], expected_sha256=m["denoiser"]["sha256"])
    pix = None
    if pixel:
        if m.get("pixel_denoiser") is None:
            raise ContractError("pixel-space denoiser was not prepared")
        pix = DenoiserModel.load(root / m["pixel_denoiser"]["path"], expected_sha256=m["pixel_denoiser"]["sha256"])
    reg_path = root / m["zoo"]["registry"]
    if checkpoint.file_sha256(reg_path) != m["zoo"]["sha256"]:
        raise checkpoint.CheckpointError(f"{reg_path}: sha256 mismatch")
    zoo = ModelRegistry.read(reg_path).load_all(root)
    if m["zoo"]["surrogate"] not in zoo:
        raise ContractError(f"surrogate {m['zoo']['surrogate']!r} missing from registry")
    return Artifacts(codec, den, pix, zoo, m["zoo"]["surrogate"])


# -- attack ------------------------------------------------------------------


def build_attack(cfg, art, method):
    """Configured :class:`TrailAttack` for ``trail`` / ``reconstruct-only``."""
    o, t, a = cfg.objective, cfg.tta, cfg.attack
    if o.mode != "untargeted":
        raise ConfigurationError("the attack pipeline runs untargeted attacks only")
    params = dict(
        denoiser=art.denoiser, codec=art.codec, surrogate=art.zoo[art.surrogate], t_star=a.t_star,
        iterations=t.iterations, learning_rate=t.learning_rate, optimizer=t.optimizer,
        alpha=o.alpha, beta=o.beta, guidance_scale_tta=t.guidance_scale_tta,
        guidance_scale=a.guidance_scale, seed=cfg.seed,
    )
    if method == "reconstruct-only":
        params.update(learning_rate=0.0, guidance_scale_tta=0.0, guidance_scale=0.0, run_tta=False)
    return TrailAttack(**params)


class _Worker:
    """Everything one process needs to attack images by index."""

    def __init__(self, cfg, method, pgd_epsilon=None):
        self.cfg = cfg
        self.method = method
        self.art = load_artifacts(cfg)
        X, y = _splits(cfg)["test"]
        self.X, self.y = torch.from_numpy(X), y
        self.surrogate = self.art.zoo[self.art.surrogate]
        self.objective = ObjectiveConfig(cfg.objective.alpha, cfg.objective.beta)
        self.out = cfg.path("output") / method
        if method == "pgd":
            p = cfg.pgd
            eps = p.epsilon if pgd_epsilon is None else pgd_epsilon
            self.pgd = PGDConfig(eps, p.step_size if p.step_size is not None else eps / 4, p.steps, p.random_start, cfg.seed)
        else:
            self.attack = build_attack(cfg, self.art, method)

    def run(self, i):
        start = time.perf_counter()
        x, y = self.X[i], int(self.y[i])
        trace = None
        if self.method == "pgd":
            adv = pgd_attack(self.surrogate, x, y, self.pgd)
        else:
            adv, trace = self.attack.attack_one(x, y, i)
        adv = quantize(adv.numpy())
        png = f"images/{i:05d}.png"
        save_png(self.out / png, adv)
        xb, ab = x[None], torch.from_numpy(adv)[None]
        jpeg = jpeg_defense(adv, self.cfg.attack.jpeg_quality)[None]
        yb = torch.tensor([y])
        with torch.no_grad():
            l_adv = float(adversarial_loss(self.surrogate, ab, yb, self.objective))
        l_dis = float(distance_loss(xb, ab))
        if trace is not None:
            (self.out / "traces").mkdir(parents=True, exist_ok=True)
            trace.to_csv(self.out / "traces" / f"{i:05d}.csv")
        result = AttackResult(
            image_id=i,
            method=self.method,
            surrogate=self.art.surrogate,
            true_label=y,
            predictions={k: int(c.predict(adv[None])[0]) for k, c in self.art.zoo.items()},
            ssim=ssim(x.numpy(), adv),
            losses={"l_adv": l_adv, "l_dis": l_dis, "total": self.objective.alpha * l_adv + self.objective.beta * l_dis},
            jpeg_predictions={k: int(c.predict(jpeg)[0]) for k, c in self.art.zoo.items()},
            adversarial_png=png,
            wall_clock=time.perf_counter() - start,
        )
        write_result(self.out, result)
        return result


_worker = None


def _init_worker(cfg_dict, base_dir, method, pgd_epsilon):
    global _worker
    torch.set_num_threads(1)
    _worker = _Worker(RunConfig.from_dict(cfg_dict, base_dir), method, pgd_epsilon)


def _run_one(i):
    try:
        r = _worker.run(i)
        return i, r.wall_clock, None
    except Exception as exc:  # recorded per image; the batch carries on
        log.exception("image %d failed", i)
        return i, None, f"{type(exc).__name__}: {exc}"


def attack(cfg, method, n_images=None, pgd_epsilon=None, resume=False):
    """Attack the first ``n_images`` test images; returns ``{"done", "failed"}``.

    Per-image outputs land in ``<output>/<method>/``: ``records/``,
    ``images/``, ``traces/`` (TRAIL only), ``run.json`` and ``timings.json``
    (wall-clock is kept out of the record files so reruns compare byte-equal).
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {METHODS}")
    get_device()
    n = cfg.attack.n_images if n_images is None else n_images
    out = cfg.path("output") / method
    if not resume and out.exists():
        for sub in ("records", "images", "traces"):
            shutil.rmtree(out / sub, ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)

    load_artifacts(cfg)  # hash-check everything before starting any work
    n_test = len(_splits(cfg)["test"][1])
    if not 0 < n <= n_test:
        raise ConfigurationError(f"n_images must lie in [1, {n_test}]")
    todo = [i for i in range(n) if not (resume and (out / "records" / f"{i:05d}.jsonl").exists())]

    init = (cfg.to_dict(), cfg.base_dir, method, pgd_epsilon)
    if cfg.workers > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(cfg.workers, mp_context=ctx, initializer=_init_worker, initargs=init) as pool:
            outcomes = list(pool.map(_run_one, todo))
    else:
        _init_worker(*init)
        outcomes = [_run_one(i) for i in todo]

    timings = {str(i): t for i, t, err in outcomes if err is None}
    failed = {str(i): err for i, _, err in outcomes if err is not None}
    run = {"method": method, "n_images": n, "seed": cfg.seed, "config": cfg.to_dict()}
    if method == "pgd":
        run["pgd_epsilon"] = cfg.pgd.epsilon if pgd_epsilon is None else pgd_epsilon
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    (out / "failures.json").write_text(json.dumps(failed, indent=2, sort_keys=True) + "\n")
    return {"done": len(timings), "failed": failed}


def matched_pgd_epsilon(cfg, reference_method, n_images=None):
    """PGD epsilon whose mean SSIM on the same images matches ``reference_method``'s results."""
    results, errors = read_results(cfg.path("output") / reference_method)
    if not results:
        raise ContractError(f"no {reference_method} results to match")
    target = float(np.mean([r.ssim for r in results]))
    art = load_artifacts(cfg)
    X, y = _splits(cfg)["test"]
    ids = [r.image_id for r in results]
    eps, achieved = match_ssim_epsilon(
        art.zoo[art.surrogate], X[ids], y[ids], target, steps=cfg.pgd.steps, iters=14
    )
    log.info("matched PGD epsilon %.5f (%.2f/255): ssim %.4f vs target %.4f", eps, eps * 255, achieved, target)
    return eps, achieved, target


# -- eval --------------------------------------------------------------------


def _method_dirs(root):
    return sorted(p for p in Path(root).iterdir() if (p / "records").is_dir())


def evaluate(out_dir, dest=None):
    """Tables from every ``<out_dir>/<method>/records``; returns ``(summary, errors)``.

    Writes ``transfer_matrix.csv``, ``summary.csv``, ``defense_jpeg.csv`` and
    ``attack_results.jsonl`` into ``dest`` (default ``<out_dir>/eval``).
    """
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise ContractError(f"results directory not found: {out_dir}")
    dest = Path(dest) if dest is not None else out_dir / "eval"
    summary, errors, all_results = {}, {}, []
    for mdir in _method_dirs(out_dir):
        results, errs = read_results(mdir)
        errors.update({f"{mdir.name}/{k}": v for k, v in errs.items()})
        if not results:
            continue
        results.sort(key=lambda r: r.image_id)
        all_results.extend(results)
        by_sur = {}
        for r in results:
            by_sur.setdefault(r.surrogate, []).append(r)
        matrix, averages = transfer_matrix(by_sur)
        jpeg_matrix = {
            s: {t: float(np.mean([r.jpeg_success[t] for r in rs])) for t in sorted(rs[0].jpeg_success)}
            for s, rs in by_sur.items()
        }
        summary[mdir.name] = {
            s: {
                "n": len(by_sur[s]),
                "mean_ssim": float(np.mean([r.ssim for r in by_sur[s]])),
                "asr": matrix[s],
                "jpeg_asr": jpeg_matrix[s],
                "white_box_asr": matrix[s].get(s),
                "black_box_asr": averages[s],
                "jpeg_white_box_asr": jpeg_matrix[s].get(s),
                "jpeg_black_box_asr": _mean_or_none([v for k, v in jpeg_matrix[s].items() if k != s]),
            }
            for s in by_sur
        }
    if not summary:
        raise ContractError(f"no attack results under {out_dir}")

    dest.mkdir(parents=True, exist_ok=True)
    _write_csv(
        dest / "transfer_matrix.csv",
        ["method", "surrogate", "target", "white_box", "asr"],
        [
            [m, s, t, int(t == s), f"{v:.4f}"]
            for m, rows in summary.items()
            for s, row in rows.items()
            for t, v in row["asr"].items()
        ],
    )
    _write_csv(
        dest / "defense_jpeg.csv",
        ["method", "surrogate", "target", "white_box", "asr", "jpeg_asr"],
        [
            [m, s, t, int(t == s), f"{v:.4f}", f"{row['jpeg_asr'][t]:.4f}"]
            for m, rows in summary.items()
            for s, row in rows.items()
            for t, v in row["asr"].items()
        ],
    )
    _write_csv(
        dest / "summary.csv",
        ["method", "surrogate", "n", "mean_ssim", "white_box_asr", "black_box_asr", "jpeg_white_box_asr", "jpeg_black_box_asr"],
        [
            [m, s, row["n"], f"{row['mean_ssim']:.4f}"]
            + [_fmt(row[k]) for k in ("white_box_asr", "black_box_asr", "jpeg_white_box_asr", "jpeg_black_box_asr")]
            for m, rows in summary.items()
            for s, row in rows.items()
        ],
    )
    with open(dest / "attack_results.jsonl", "w", newline="\n") as f:
        for r in sorted(all_results, key=lambda r: (r.method, r.image_id)):
            f.write(r.to_json() + "\n")
    return summary, errors


def _mean_or_none(values):
    return float(np.mean(values)) if values else None


def _fmt(v):
    return "" if v is None else f"{v:.4f}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def format_summary(summary):
    """Plain-text tables, one labelled section per method."""
    lines = []
    for method, rows in summary.items():
        lines.append(f"[{method}]")
        for s, row in rows.items():
            cells = "  ".join(f"{t}={v:.3f}" for t, v in row["asr"].items())
            bb = _fmt(row["black_box_asr"]) or "n/a"
            lines.append(f"  surrogate={s} n={row['n']} ssim={row['mean_ssim']:.4f} black_box={bb}  {cells}")
    return "\n".join(lines)


# -- sweep, bound, plot ------------------------------------------------------


def sweep(cfg, t_stars=None, n_images=None):
    t_stars = list(cfg.sweep.t_stars if t_stars is None else t_stars)
    n = cfg.sweep.n_images if n_images is None else n_images
    art = load_artifacts(cfg)
    X, y = _splits(cfg)["test"]
    rows = sweep_tstar(build_attack(cfg, art, "trail"), X[:n], y[:n], t_stars)
    rho_asr, rho_ssim = trend(rows)
    dest = cfg.path("output") / "sweep"
    dest.mkdir(parents=True, exist_ok=True)
    _write_csv(dest / "sweep.csv", ["t_star", "asr", "ssim"], [[r["t_star"], f"{r['asr']:.4f}", f"{r['ssim']:.4f}"] for r in rows])
    report = {"rows": rows, "spearman_asr": rho_asr, "spearman_ssim": rho_ssim}
    (dest / "trend.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def bound(cfg):
    """Bound verification in latent mode and, if prepared, pixel mode."""
    b = cfg.bound
    art = load_artifacts(cfg, pixel=b.pixel_mode)
    X = _splits(cfg)["test"][0][: b.n_sample]
    schedule = _schedule(cfg)
    kw = dict(delta=b.delta, trials=b.trials, inflate=b.c_inflation, seed=cfg.seed)
    reports = {"latent": verify_bound(art.denoiser, art.codec, schedule, X, b.t_stars, **kw)}
    if b.pixel_mode:
        reports["pixel"] = verify_bound(art.pixel_denoiser, identity_codec(), schedule, X, b.t_stars, **kw)
    report = {"modes": reports, "pass": all(r["pass"] for r in reports.values())}
    dest = cfg.path("output") / "bound"
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "bound_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def read_sweep_csv(path):
    path = Path(path)
    if not path.exists():
        raise ContractError(f"sweep CSV not found: {path}")
    with open(path, newline="") as f:
        rows = [{"t_star": int(r["t_star"]), "asr": float(r["asr"]), "ssim": float(r["ssim"])} for r in csv.DictReader(f)]
    if not rows:
        raise ContractError(f"{path} has no rows")
    return rows


def plot_sweep(csv_path, png_path):
    """ASR and SSIM against t* on twin axes, saved as one static PNG."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    rows = read_sweep_csv(csv_path)
    t = [r["t_star"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(t, [r["asr"] for r in rows], "o-", color="tab:red", label="ASR (surrogate)")
    ax.set_xlabel("t*")
    ax.set_ylabel("ASR")
    ax2 = ax.twinx()
    ax2.plot(t, [r["ssim"] for r in rows], "s--", color="tab:blue", label="SSIM")
    ax2.set_ylabel("SSIM")
    handles = ax.get_lines() + ax2.get_lines()
    ax.legend(handles, [h.get_label() for h in handles], loc="center right")
    fig.tight_layout()
    Path(png_path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    return png_path
