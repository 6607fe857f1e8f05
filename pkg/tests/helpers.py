from pathlib import Path


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


import numpy as np

from gesturefusion.dataset_io import GestureClass, SequenceRecord


def random_record(rng: np.random.Generator, max_frames: int = 60, size: tuple[int, int] = (20, 24)) -> SequenceRecord:
    """Arbitrary valid record: random length, trim, roi and full-range uint16 depth."""
    n = int(rng.integers(1, max_frames + 1))
    h, w = size
    depth = rng.integers(0, 65536, size=(n, h, w), dtype=np.uint16)
    skel = rng.uniform(-50, 300, size=(n, 22, 2))
    bw = rng.integers(1, w + 1, size=n)
    bh = rng.integers(1, h + 1, size=n)
    x = np.array([rng.integers(0, w - a + 1) for a in bw])
    y = np.array([rng.integers(0, h - b + 1) for b in bh])
    start = int(rng.integers(0, n))
    end = int(rng.integers(start, n))
    label = GestureClass(int(rng.integers(1, 15)), int(rng.integers(1, 3)))
    return SequenceRecord(int(rng.integers(1, 21)), int(rng.integers(1, 6)), label, depth, skel,
                          np.stack([x, y, bw, bh], axis=1), (start, end))


def bilinear_oracle(patch: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize with edge clamping, one output pixel at a time."""
    h, w = patch.shape
    out = np.empty((size, size))

    def taps(d, n_in):
        s = max((d + 0.5) * n_in / size - 0.5, 0.0)
        i0 = min(int(np.floor(s)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        return i0, i1, s - i0

    for r in range(size):
        y0, y1, fy = taps(r, h)
        for c in range(size):
            x0, x1, fx = taps(c, w)
            top = patch[y0, x0] * (1 - fx) + patch[y0, x1] * fx
            bottom = patch[y1, x0] * (1 - fx) + patch[y1, x1] * fx
            out[r, c] = top * (1 - fy) + bottom * fy
    return out


def check_preprocess_invariants(rng: np.random.Generator, n_records: int = 200, timestep: int = 8,
                                image_size: int = 6) -> dict[str, int]:
    """Run the four preprocessing invariants over random records; returns violation counts."""
    from gesturefusion.preprocess import build_clip, normalize_skeleton, resample_timesteps

    bad = {"range": 0, "translation": 0, "idempotence": 0, "mask_zero": 0}
    for _ in range(n_records):
        rec = random_record(rng)
        clip = build_clip(rec, timestep, image_size)
        if clip.depth.min() < 0 or clip.depth.max() > 1:
            bad["range"] += 1
        shifted = SequenceRecord(rec.subject_id, rec.trial_id, rec.label, rec.depth_frames,
                                 rec.skeleton_2d + rng.uniform(-100, 100, size=2), rec.roi, rec.trim)
        if not np.allclose(normalize_skeleton(shifted), normalize_skeleton(rec), atol=1e-9):
            bad["translation"] += 1
        for stream in (clip.depth, clip.skeleton):
            again, mask = resample_timesteps(stream, timestep, clip.mask)
            if not (np.array_equal(again, stream) and np.array_equal(mask, clip.mask)):
                bad["idempotence"] += 1
        pad = ~clip.mask
        if np.any(clip.depth[pad] != 0) or np.any(clip.skeleton[pad] != 0):
            bad["mask_zero"] += 1
        if not clip.mask[: clip.n_valid].all():
            bad["mask_zero"] += 1
    return bad


def optimizer_oracle_error(kind: str, steps: int = 200, seed: int = 0) -> float:
    """Largest per-step parameter gap between the library optimizer and a scalar loop
    on a 10-parameter least-squares problem."""
    import math

    import torch

    from gesturefusion.training import OptimizerConfig, adadelta_step, adam_step, init_optimizer_state

    rng = np.random.default_rng(seed)
    a = rng.normal(size=(20, 10))
    b = rng.normal(size=20)
    rows, target = a.tolist(), b.tolist()

    def grad_scalar(x):
        resid = [sum(r[j] * x[j] for j in range(10)) - t for r, t in zip(rows, target)]
        return [sum(rows[i][j] * resid[i] for i in range(20)) for j in range(10)]

    cfg = getattr(OptimizerConfig, kind)()
    x_ref = [0.0] * 10
    s1, s2 = [0.0] * 10, [0.0] * 10
    at, bt = torch.as_tensor(a), torch.as_tensor(b)
    params = {"x": torch.zeros(10, dtype=torch.float64)}
    state = init_optimizer_state(cfg, params)
    step = adadelta_step if kind == "adadelta" else adam_step
    worst = 0.0
    for t in range(1, steps + 1):
        g = grad_scalar(x_ref)
        for j in range(10):
            if kind == "adadelta":
                s1[j] = 0.95 * s1[j] + 0.05 * g[j] ** 2
                d = math.sqrt(s2[j] + 1e-8) / math.sqrt(s1[j] + 1e-8) * g[j]
                s2[j] = 0.95 * s2[j] + 0.05 * d * d
                x_ref[j] -= 1.0 * d
            else:
                s1[j] = 0.9 * s1[j] + 0.1 * g[j]
                s2[j] = 0.999 * s2[j] + 0.001 * g[j] ** 2
                m_hat = s1[j] / (1 - 0.9**t)
                v_hat = s2[j] / (1 - 0.999**t)
                x_ref[j] -= 0.001 * m_hat / (math.sqrt(v_hat) + 1e-8)
        x = params["x"]
        params, state = step(params, {"x": at.T @ (at @ x - bt)}, state, cfg)
        worst = max(worst, max(abs(u - v) for u, v in zip(params["x"].tolist(), x_ref)))
    return worst


def lawrfd_toy():
    """20 sequences in 28-class mode: 15 correct, 3 wrong only in finger config, 2 wrong gesture."""
    true = np.array([1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20])
    pred = true.copy()
    pred[0], pred[3], pred[8] = 2, 3, 10  # (g1,f1)->(g1,f2), (g2,f2)->(g2,f1), (g5,f1)->(g5,f2)
    pred[12], pred[19] = 27, 1  # other gestures
    return true, pred


def toy_fold_results():
    """Two 14-class folds with known errors (see test_report for the hand-computed table)."""
    from gesturefusion.training import FoldResult

    def make(network, subject, wrong):
        true = np.arange(1, 15)
        pred = true.copy()
        for t, p in wrong.items():
            pred[t - 1] = p
        scores = np.full((14, 14), 0.25 / 13)
        scores[np.arange(14), pred - 1] = 0.75
        ids = [f"g{g:02d}_f1_s{subject:02d}_e1" for g in true]
        return FoldResult(network, subject, "c14", ids, np.full(14, subject), true, scores, "toy")

    return [
        make("skeleton_lstm", 1, {1: 2}),
        make("skeleton_lstm", 2, {3: 1, 10: 11}),
        make("depth_cnn_lstm", 1, {}),
        make("depth_cnn_lstm", 2, {7: 8}),
    ]


def write_toy_run(run_dir):
    from gesturefusion.training import write_predictions

    for r in toy_fold_results():
        fold_dir = run_dir / f"fold_{r.fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        write_predictions(fold_dir / f"{r.network}.predictions.csv", r)
    return run_dir
