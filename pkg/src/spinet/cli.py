"""Command-line experiment runner.

    spinet <experiment> --config FILE [--seed N] [--out DIR] [--resume CKPT] [--iters N]

Experiments: hydrogen, sfa-video, tabular, baseline-grid. Exit status is
0 on success, 2 for configuration errors, 3 for numerical failures and 1
for anything else raised by the package.
"""

from __future__ import annotations

import os

# BLAS reads these at import time, so they must be set before numpy loads
_threads = os.environ.get("SPINET_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from spinet import baseline, datasets  # noqa: E402
from spinet.checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from spinet.config import (  # noqa: E402
    EXPERIMENTS,
    ExperimentConfig,
    load_config_file,
    resolve,
    resolved_text,
)
from spinet.errors import (  # noqa: E402
    ConfigError,
    DimensionMismatch,
    NonConvergence,
    NotPositiveDefinite,
    SingularDiagonal,
    SpinError,
    SpinIOError,
)
from spinet.funcnet import ConstantFirst, Mlp, MlpSpec, TabularNet  # noqa: E402
from spinet.heatmap import export_heatmap  # noqa: E402
from spinet.linalg import sym_eig  # noqa: E402
from spinet.operators import (  # noqa: E402
    CoulombPotential,
    LocalHamiltonian,
    SlownessPairs,
    TabularMatrix,
    tabular_exact_pi,
    tabular_exact_sigma,
)
from spinet.spin import (  # noqa: E402
    BatchStatistics,
    TrainConfig,
    log_header,
    ordered_eigenfunctions,
    train_loop,
)

EVAL_CHUNK = 4096


def hydrogen_energy(index: int) -> float:
    """Exact 2-D hydrogen level of the ``index``-th state (shells of size 2n+1)."""
    n = 0
    while index >= 2 * n + 1:
        index -= 2 * n + 1
        n += 1
    return -1.0 / (2 * n + 1) ** 2


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        n_iters=cfg.iters,
        learning_rate=cfg.learning_rate,
        rmsprop_decay=cfg.rmsprop_decay,
        rmsprop_epsilon=cfg.rmsprop_epsilon,
        beta=cfg.beta,
        seed=cfg.seed,
        optimizer=cfg.optimizer,
        schedule=cfg.schedule,
        anneal_steps=cfg.anneal_steps,
    )


def _write_csv(path: Path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


# -- experiment setup ------------------------------------------------------------


def tabular_matrix(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.matrix_file:
        try:
            a = np.loadtxt(cfg.matrix_file, ndmin=2)
        except OSError as exc:
            raise SpinIOError(f"cannot read matrix {cfg.matrix_file}: {exc}") from exc
        return a
    a = np.random.default_rng(cfg.matrix_seed).standard_normal((cfg.n_states, cfg.n_states))
    return 0.5 * (a + a.T)


class Setup:
    """Kernel, network and minibatch source for one training experiment."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        getattr(self, "_" + cfg.experiment.replace("-", "_"))()

    def _tabular(self):
        cfg = self.cfg
        self.matrix = tabular_matrix(cfg)
        m = self.matrix.shape[0]
        if cfg.K > m:
            raise ConfigError(f"K={cfg.K} exceeds the number of states {m}")
        self.kernel = TabularMatrix(self.matrix, negate=cfg.negate)
        self.net = TabularNet(m, cfg.K, cfg.init_scale)
        if cfg.batch_size == 0:
            pairs = datasets.full_population_pairs(m)
            self.data = lambda rng: pairs
        else:
            self.data = lambda rng: datasets.sample_state_pairs(m, cfg.batch_size, rng)

    def _hydrogen(self):
        cfg = self.cfg
        spec = MlpSpec(
            2,
            cfg.hidden,
            cfg.K,
            block_sparse=cfg.block_sparse,
            envelope_halfwidth=cfg.halfwidth,
            input_scale=cfg.input_scale or 1.0 / cfg.halfwidth,
        )
        self.net = Mlp(spec)
        self.kernel = LocalHamiltonian(cfg.fd_step, CoulombPotential(cfg.r_min))
        batch = cfg.batch_size or 128
        self.data = lambda rng: datasets.sample_uniform_box(batch, 2, cfg.halfwidth, cfg.fd_step, rng)

    def _sfa_video(self):
        cfg = self.cfg
        self.clips = sfa_clips(cfg, cfg.n_clips, stream=3)
        f = cfg.frame_size
        spec = MlpSpec(2 * f * f, cfg.hidden, cfg.K, block_sparse=cfg.block_sparse)
        self.net = ConstantFirst(Mlp(spec))
        self.kernel = SlownessPairs()
        self.data = lambda rng: datasets.consecutive_pair_batches(
            self.clips, cfg.clips_per_batch, cfg.frames_per_clip, rng
        )


def sfa_clips(cfg: ExperimentConfig, count: int, stream: int):
    out = []
    for i in range(count):
        seed = int(np.random.SeedSequence([cfg.seed, stream, i]).generate_state(1)[0])
        out.append(
            datasets.bouncing_balls_generate(
                cfg.clip_frames, cfg.frame_size, cfg.frame_size, cfg.n_balls, cfg.radius, cfg.speed, seed
            )
        )
    return out


# -- evaluation ------------------------------------------------------------------


def hydrogen_statistics(cfg, net, params, kernel, n_samples, seed_stream=2):
    rng = np.random.default_rng([cfg.seed, seed_stream])
    sigma = pi = 0.0
    done = 0
    while done < n_samples:
        b = min(EVAL_CHUNK, n_samples - done)
        x = datasets.sample_uniform_box(b, 2, cfg.halfwidth, cfg.fd_step, rng)
        st = BatchStatistics(net, params, kernel, x)
        sigma = sigma + st.sigma * b
        pi = pi + st.pi * b
        done += b
    return sigma / n_samples, pi / n_samples


def _clip_statistics(setup, params, clips, transform=None):
    """Sigma and Pi over every stacked pair of ``clips``, one clip at a time.

    With a ``transform``, also returns the rotated features and ball
    positions of every pair for correlation checks.
    """
    sigma = pi = 0.0
    n = 0
    feats, pos = [], []
    for c in clips:
        x, xp = datasets.stacked_pairs(c.frames)
        st = BatchStatistics(setup.net, params, setup.kernel, (x, xp))
        sigma = sigma + st.sigma * len(x)
        pi = pi + st.pi * len(x)
        n += len(x)
        if transform is not None:
            feats.append(st.ua @ transform.T)
            pos.append(c.states[: len(x), 0, :2])
    if transform is None:
        return sigma / n, pi / n
    return sigma / n, pi / n, np.concatenate(feats), np.concatenate(pos)


def sfa_eigenfunctions(setup, state):
    """Ordered features with Sigma and Pi taken over every training pair."""
    sigma, pi = _clip_statistics(setup, state.params, setup.clips)
    return ordered_eigenfunctions(setup.net, state.params, sigma, pi)


def sfa_evaluate(cfg, setup, state, clips, ef=None):
    """Held-out whitening, slowness and position correlation of the learned features."""
    if ef is None:
        ef = sfa_eigenfunctions(setup, state)
    t = ef.transform
    sigma, pi, v, pos = _clip_statistics(setup, state.params, clips, t)
    whitened = t @ sigma @ t.T
    slowness = np.diag(t @ pi @ t.T)
    corr = np.zeros((v.shape[1], 2))
    for k in range(v.shape[1]):
        for a in range(2):
            if np.std(v[:, k]) > 0:
                corr[k, a] = np.corrcoef(v[:, k], pos[:, a])[0, 1]
    return whitened, slowness, corr


# -- heatmaps --------------------------------------------------------------------


def _grid(n, halfwidth):
    axis = np.linspace(-halfwidth, halfwidth, n)
    gx, gy = np.meshgrid(axis, axis[::-1])
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def hydrogen_heatmaps(cfg, ef, out: Path):
    hw = min(cfg.heatmap_halfwidth, cfg.halfwidth - cfg.fd_step)
    n = cfg.heatmap_size
    values = ef(_grid(n, hw))
    for k in range(values.shape[1]):
        export_heatmap(values[:, k].reshape(n, n), out / f"eigenfunction_{k}")


def sfa_heatmaps(cfg, setup, ef, out: Path):
    """Response of each feature to a static ball placed on a grid of positions."""
    f = cfg.frame_size
    r = cfg.radius * f
    n = min(cfg.heatmap_size, 32)
    centers = np.linspace(r, f - r, n)
    frames = []
    for cy in centers:
        for cx in centers:
            img = datasets.render_discs([(cx, cy)], r, f, f).ravel()
            frames.append(np.concatenate([img, img]))
    values = ef(np.array(frames))
    for k in range(values.shape[1]):
        export_heatmap(values[:, k].reshape(n, n), out / f"feature_{k}")


# -- runner ----------------------------------------------------------------------


class _Lock:
    def __init__(self, out: Path):
        self.path = out / ".spinet.lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise SpinIOError(f"{self.path.parent} is in use by another run ({self.path} exists)") from exc
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _open_log(path: Path, k: int, resume_step: int | None):
    header = log_header(k)
    if resume_step is None or not path.exists():
        path.write_text(header + "\n")
    else:
        keep = [header]
        for line in path.read_text().splitlines()[1:]:
            if line and int(line.split(",", 1)[0]) < resume_step:
                keep.append(line)
        path.write_text("\n".join(keep) + "\n")
    return open(path, "a")


def run_baseline(cfg: ExperimentConfig, out: Path):
    h = baseline.grid_hamiltonian_build(cfg.grid_size, cfg.halfwidth, CoulombPotential(cfg.r_min))
    values, vectors = baseline.smallest_eigs(h, cfg.K, seed=cfg.seed)
    _write_csv(
        out / "eigenvalues.csv",
        ["index", "eigenvalue", "exact"],
        [(i, float(v), hydrogen_energy(i)) for i, v in enumerate(values)],
    )
    n = cfg.grid_size
    heat = out / "heatmaps"
    heat.mkdir(exist_ok=True)
    for k in range(cfg.K):
        # node index is x * n + y; put +y at the top of the image
        export_heatmap(vectors[:, k].reshape(n, n).T[::-1], heat / f"eigenvector_{k}")
    return values


def run_experiment(cfg: ExperimentConfig, out, resume=None, progress=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with _Lock(out):
        (out / "config.resolved").write_text(resolved_text(cfg))
        if cfg.experiment == "baseline-grid":
            return run_baseline(cfg, out)
        setup = Setup(cfg)
        tcfg = train_config(cfg).validate()
        state = None
        if resume is not None:
            state = load_checkpoint(
                resume,
                beta=cfg.beta,
                decay=cfg.rmsprop_decay,
                epsilon=cfg.rmsprop_epsilon,
                learning_rate=cfg.learning_rate,
            )
            if state.params.size != setup.net.n_params or state.averages.sigma_bar.shape[0] != setup.net.n_outputs:
                raise DimensionMismatch("checkpoint does not match the configured network")
            if state.seed != cfg.seed:
                raise ConfigError(f"checkpoint seed {state.seed} differs from configured seed {cfg.seed}")
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        log = _open_log(out / "log.csv", setup.net.n_outputs, None if state is None else state.step)
        try:

            def on_record(rec):
                if rec.step % cfg.log_every == 0:
                    log.write(rec.csv_line() + "\n")
                    log.flush()
                if progress is not None:
                    progress(rec)

            start = 0 if state is None else state.step
            boundary = (start // cfg.checkpoint_every + 1) * cfg.checkpoint_every
            while state is None or state.step < cfg.iters:
                target = min(boundary, cfg.iters)
                state, _ = train_loop(
                    tcfg, setup.kernel, setup.net, setup.data, state, on_record, target, keep_records=False
                )
                if state.step % cfg.checkpoint_every == 0:
                    save_checkpoint(state, ckpt_dir / f"step_{state.step:08d}.spin")
                boundary += cfg.checkpoint_every
                if cfg.iters == 0:
                    break
        finally:
            log.close()
        save_checkpoint(state, out / "final.spin")
        return globals()["_finish_" + cfg.experiment.replace("-", "_")](cfg, setup, state, out)


def _finish_tabular(cfg, setup, state, out):
    kernel, m = setup.kernel, setup.matrix.shape[0]
    table = setup.net.table(state.params)
    sigma = tabular_exact_sigma(table)
    pi = tabular_exact_pi(kernel, table)
    ef = ordered_eigenfunctions(setup.net, state.params, sigma, pi)
    # operator eigenvalues are eig(M) / n_states under the uniform measure
    learned = ef.eigenvalues * m * kernel.sign
    oracle = sym_eig(setup.matrix)[0]
    oracle = oracle[: cfg.K] if cfg.negate else oracle[::-1][: cfg.K]
    rows = [(i, float(a), float(b), float(abs(a - b))) for i, (a, b) in enumerate(zip(learned, oracle))]
    _write_csv(out / "comparison.csv", ["index", "learned", "oracle", "abs_diff"], rows)
    _write_csv(out / "eigenvalues.csv", ["index", "eigenvalue"], [(i, float(v)) for i, v in enumerate(learned)])
    vecs = table @ ef.transform.T / np.sqrt(m)
    _write_csv(
        out / "eigenvectors.csv",
        ["state"] + [f"v_{k}" for k in range(cfg.K)],
        [[s] + [float(x) for x in vecs[s]] for s in range(m)],
    )
    heat = out / "heatmaps"
    heat.mkdir(exist_ok=True)
    export_heatmap(vecs, heat / "eigenvectors")
    return rows


def _finish_hydrogen(cfg, setup, state, out):
    sigma, pi = hydrogen_statistics(cfg, setup.net, state.params, setup.kernel, cfg.eval_samples)
    chol = ordered_eigenfunctions(setup.net, state.params, sigma, pi)
    full = ordered_eigenfunctions(setup.net, state.params, sigma, pi, "full_diagonalize")
    rows = [
        (i, float(a), float(b), hydrogen_energy(i))
        for i, (a, b) in enumerate(zip(chol.eigenvalues, full.eigenvalues))
    ]
    _write_csv(out / "eigenvalues.csv", ["index", "cholesky", "full_diagonalize", "exact"], rows)
    heat = out / "heatmaps"
    heat.mkdir(exist_ok=True)
    hydrogen_heatmaps(cfg, chol, heat)
    return rows


def _finish_sfa_video(cfg, setup, state, out):
    held = sfa_clips(cfg, cfg.heldout_clips, stream=4)
    ef = sfa_eigenfunctions(setup, state)
    whitened, slowness, corr = sfa_evaluate(cfg, setup, state, held, ef)
    rows = [
        (k, float(slowness[k]), float(whitened[k, k]), float(corr[k, 0]), float(corr[k, 1]))
        for k in range(len(slowness))
    ]
    _write_csv(out / "eigenvalues.csv", ["index", "slowness", "second_moment", "corr_x", "corr_y"], rows)
    heat = out / "heatmaps"
    heat.mkdir(exist_ok=True)
    sfa_heatmaps(cfg, setup, ef, heat)
    return rows


def build_parser():
    p = argparse.ArgumentParser(prog="spinet", description="Spectral inference network experiments")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", type=Path, default=None, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="output directory (default runs/<experiment>)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.add_argument("--iters", type=int, default=None, help="total iteration budget")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_values = load_config_file(args.config) if args.config else {}
        cfg = resolve(args.experiment, file_values, {"seed": args.seed, "iters": args.iters})
        out = args.out or Path("runs") / args.experiment
        run_experiment(cfg, out, args.resume)
    except ConfigError as exc:
        print(f"spinet: configuration error: {exc}", file=sys.stderr)
        return 2
    except (NotPositiveDefinite, SingularDiagonal, NonConvergence) as exc:
        print(f"spinet: numerical failure: {exc}", file=sys.stderr)
        return 3
    except SpinError as exc:
        print(f"spinet: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
