"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``.
"""

import json
import time

import numpy as np
import pytest

from fluxdict import actstore, cli, itda, metrics, sae, steering, whitening
from fluxdict.actstore import ActivationShard, SyntheticSpec
from fluxdict.autointerp import MockBackend, RandomDirections, score_feature_set
from fluxdict.steering import SteeringSpec
from _gradcheck import check, random_instance
from _planted import aligned_sae

pytestmark = pytest.mark.slow


# ---------------------------------------------------------------- 1


def test_c1_gradient_check(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1234)
    statuses, worst = [], 0.0
    for _ in range(100):
        inst = random_instance(rng)  # n <= 8, d <= 16, k <= 4, AuxK enabled
        status, err = check(inst)
        statuses.append(status)
        if status != "boundary":
            worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    boundary = statuses.count("boundary")
    checked = len(statuses) - boundary
    passed = statuses.count("pass")
    rate = passed / max(checked, 1)
    ok = checked >= 90 and rate >= 0.95 and elapsed < 60
    verdict("criterion 1 (finite-difference gradients)", ok,
            f"{passed}/{checked} instances within 1e-5 relative ({boundary} excluded as TopK-boundary cases), "
            f"worst rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def test_c2_pursuit_optimality_gap(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    violations, gaps = 0, []
    for _ in range(100):
        atoms = rng.normal(size=(8, 6))
        atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
        x = rng.normal(size=6)
        ito = float(itda.gradient_pursuit(atoms, x, 2).residual_norm[0])
        best = itda.omp_oracle(atoms, x, 2)
        violations += int(ito < best.residual_norm - 1e-12)
        gaps.append(ito - best.residual_norm)
    # orthonormal dictionaries: at most n = 6 orthonormal rows fit in R^6
    ortho_err = 0.0
    for _ in range(100):
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        x = rng.normal(size=6)
        ito = float(itda.gradient_pursuit(q, x, 2).residual_norm[0])
        ortho_err = max(ortho_err, abs(ito - itda.omp_oracle(q, x, 2).residual_norm))
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and ortho_err <= 1e-8 and elapsed < 60
    verdict("criterion 2 (pursuit vs best subset)", ok,
            f"{violations} violations of ito >= best-subset in 100 random cases, median gap {np.median(gaps):.3g}; "
            f"orthonormal max |diff| {ortho_err:.1e}; {elapsed:.1f}s")


# ---------------------------------------------------------------- 3


def _planted_recovery_data():
    spec = SyntheticSpec(mode="planted_dictionary", hidden_dim=16, n_rows=50_000, planted_dict_size=32,
                         planted_sparsity=3, noise_std=0.01, seed=0)
    return actstore.generate(spec)


def _greedy_match(sim):
    sim = sim.copy()
    total = []
    for _ in range(min(sim.shape)):
        i, j = np.unravel_index(np.argmax(sim), sim.shape)
        total.append(sim[i, j])
        sim[i, :] = -np.inf
        sim[:, j] = -np.inf
    return float(np.mean(total))


def test_c3_sae_recovers_planted_atoms(verdict):
    t0 = time.perf_counter()
    data = _planted_recovery_data()
    wh = whitening.fit(data.shard.data[:25_000])
    cfg = sae.SaeTrainConfig(d=32, k=3, steps=5000, batch_size=256, learning_rate=1e-3, aux_k=16,
                             dead_threshold_tokens=20_000, seed=0)
    m, _ = sae.train([data.shard], wh, cfg)
    learned = np.stack([wh.fold_direction(row) for row in m.dec_weight])
    learned /= np.linalg.norm(learned, axis=1, keepdims=True)
    sim = data.atoms @ learned.T
    mean_max = float(sim.max(axis=1).mean())
    greedy = _greedy_match(sim)
    elapsed = time.perf_counter() - t0
    ok = mean_max > 0.9 and elapsed < 300
    verdict("criterion 3a (SAE atom recovery)", ok,
            f"mean max-cosine {mean_max:.4f} (greedy one-to-one {greedy:.4f}), {elapsed:.1f}s")


def test_c3_itda_heldout_fvu(verdict):
    t0 = time.perf_counter()
    data = _planted_recovery_data()
    train = ActivationShard(data.shard.data[:40_000])
    held = data.shard.data[40_000:].astype(np.float64)
    m, _ = itda.itda_train([train], itda.ItdaConfig(threshold=0.1, k=3))
    fvu = metrics.fvu(itda.reconstruct(m, held), held)
    elapsed = time.perf_counter() - t0
    ok = fvu < 0.1 and elapsed < 300
    verdict("criterion 3b (ITDA held-out FVU)", ok, f"FVU {fvu:.4f} with {m.size} atoms, {elapsed:.1f}s")


# ---------------------------------------------------------------- 4


def test_c4_whitening_reduces_dead_latents(verdict, emit):
    t0 = time.perf_counter()
    rows = []
    for seed in (0, 1, 2):
        data = actstore.generate(SyntheticSpec(hidden_dim=64, n_rows=60_000, spectrum_exponent=2.0, seed=seed))
        train = ActivationShard(data.shard.data[:50_000])
        held = data.shard.data[50_000:]
        cfg = sae.SaeTrainConfig(d=512, k=8, steps=10_000, batch_size=256, learning_rate=1e-3, seed=seed)
        wh = whitening.fit_from_batches(actstore.sample_batches([train], 256, seed=seed), 100)
        dead = {}
        for name, w in (("whitened", wh), ("raw", None)):
            m, _ = sae.train([train], w, cfg)
            dead[name] = metrics.dead_and_l0(m, held).dead_fraction
        rows.append((seed, dead["whitened"], dead["raw"]))
    elapsed = time.perf_counter() - t0
    emit("seed  dead(whitened)  dead(raw)\n" + "\n".join(f"{s:4d}  {w:14.3f}  {r:9.3f}" for s, w, r in rows))
    ok = all(w < r and w < 0.3 for _, w, r in rows) and elapsed < 600
    verdict("criterion 4 (whitening vs dead latents)", ok,
            f"{sum(w < r and w < 0.3 for _, w, r in rows)}/3 seeds whitened < raw and < 0.3, {elapsed:.1f}s")


# ---------------------------------------------------------------- 5 and 6


@pytest.fixture(scope="module")
def frontier():
    spec = SyntheticSpec(mode="planted_dictionary", hidden_dim=32, n_rows=40_000, planted_dict_size=1024,
                         planted_sparsity=4, noise_std=0.05, seed=0)
    data = actstore.generate(spec)
    train = ActivationShard(data.shard.data[:30_000])
    held = data.shard.data[30_000:].astype(np.float64)
    table = []
    for t in (0.05, 0.1, 0.2, 0.4):
        m, _ = itda.itda_train([train], itda.ItdaConfig(threshold=t, k=4))
        table.append(("itda", f"threshold={t}", m.size, metrics.fvu(itda.reconstruct(m, held), held)))
    wh = whitening.fit(train.data[:20_000])
    for d in (64, 128, 256, 512):
        cfg = sae.SaeTrainConfig(d=d, k=4, steps=3000, batch_size=256, learning_rate=1e-3, aux_k=min(64, d),
                                 dead_threshold_tokens=50_000, seed=0)
        m, _ = sae.train([train], wh, cfg)
        table.append(("sae", f"d={d}", d, metrics.fvu(sae.reconstruct(m, held), held)))
    return table


def _weakly_monotone(points):
    """Larger dictionary never has a strictly higher FVU."""
    return all(fa <= fb for sa, fa in points for sb, fb in points if sa > sb)


def test_c5_frontier_monotone(verdict, emit, frontier):
    lines = ["method  setting         dict_size  held-out FVU"]
    lines += [f"{m:6s}  {s:14s}  {n:9d}  {f:.4f}" for m, s, n, f in frontier]
    emit("\n".join(lines))
    ok = {}
    for method in ("itda", "sae"):
        ok[method] = _weakly_monotone([(n, f) for m, _, n, f in frontier if m == method])
    verdict("criterion 5 (size vs FVU frontier)", all(ok.values()),
            f"monotone: itda={ok['itda']}, sae={ok['sae']}")


def test_c6_metric_identities(verdict, frontier):
    rng = np.random.default_rng(6)
    y = rng.normal(size=(500, 16))
    fvu_self = metrics.fvu(y, y)
    fvu_mean = metrics.fvu(np.broadcast_to(y.mean(axis=0), y.shape), y)
    pred = y + rng.normal(size=y.shape)
    ve = metrics.variance_explained(pred, y)
    ve_affine = metrics.variance_explained(-3.0 * pred + 7.0, y)
    in_range = [(m, s, f) for m, s, _, f in frontier if 0.1 <= f <= 0.5]
    ok = fvu_self == 0 and abs(fvu_mean - 1) <= 1e-9 and abs(ve - ve_affine) <= 1e-9 and len(in_range) >= 1
    verdict("criterion 6 (metric identities)", ok,
            f"fvu(y,y)={fvu_self}, mean-predictor fvu-1={fvu_mean - 1:.1e}, VE affine diff {abs(ve - ve_affine):.1e}, "
            f"{len(in_range)}/{len(frontier)} sweep points with FVU in [0.1, 0.5]")


# ---------------------------------------------------------------- 7


def test_c7_autointerp_mock(verdict):
    t0 = time.perf_counter()
    pi = actstore.generate_planted_images(n_images=400, n_features=32, hidden_dim=64, seed=0)

    def run():
        return score_feature_set(
            {"aligned": (aligned_sae(pi.atoms), [pi.shard]),
             "random": (RandomDirections(32, 64, seed=1), [pi.shard])},
            pi.images, MockBackend(pi.patch_labels), n_pos=8, n_neg=8, seed=0, fire_threshold=0.2,
        )

    first, second = run(), run()
    deterministic = json.dumps(first.to_dict(), sort_keys=True) == json.dumps(second.to_dict(), sort_keys=True)
    aligned, rand = first.mean("aligned"), first.mean("random")
    elapsed = time.perf_counter() - t0
    ok = aligned > 0.9 and rand < 0.6 and deterministic and elapsed < 120
    verdict("criterion 7 (autointerp, mock backend)", ok,
            f"aligned mean {aligned:.3f} over {len(first.scores['aligned'])} features, random mean {rand:.3f} "
            f"over {len(first.scores['random'])}, deterministic={deterministic}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 8


def test_c8_steering_algebra(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    failures = []
    for case in range(1000):
        n = int(rng.integers(2, 9))
        h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        d = int(rng.integers(1, 9))
        m = sae.init_model(n, d, 1, rng, dtype=np.float64)
        if rng.random() < 0.5:
            m.whitener = whitening.fit(rng.normal(size=(4 * n, n)) * rng.uniform(0.5, 3, size=n))
        a = int(rng.integers(0, h)); b = int(rng.integers(a + 1, h + 1))
        c = int(rng.integers(0, w)); e = int(rng.integers(c + 1, w + 1))
        f = int(rng.integers(0, d))
        alpha, beta = rng.normal(size=2) * 3
        grid = rng.normal(size=(h, w, n))
        spec = lambda s: SteeringSpec(f, scale=float(s), region=(a, b, c, e))
        out = steering.apply_steering(grid, spec(alpha), m)
        outside = np.ones((h, w), bool)
        outside[a:b, c:e] = False
        if out[outside].tobytes() != grid[outside].tobytes():
            failures.append((case, "locality"))
        two = steering.apply_steering(out, spec(beta), m)
        one = steering.apply_steering(grid, spec(alpha + beta), m)
        if not np.allclose(two, one, atol=1e-6, rtol=0):
            failures.append((case, "linearity"))
        pos = steering.apply_steering(grid, spec(abs(alpha)), m) - grid
        neg = steering.apply_steering(grid, spec(-abs(alpha)), m) - grid
        if not np.allclose(pos, -neg, atol=1e-12, rtol=0):
            failures.append((case, "additive inverse"))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 10
    verdict("criterion 8 (steering algebra)", ok,
            f"1000 randomized cases, {len(failures)} failures {failures[:3]}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 9


def test_c9_format_stability(verdict, tmp_path):
    rng = np.random.default_rng(9)
    problems = []
    for tag, dt in (("f32", np.float32), ("f16", np.float16)):
        shard = ActivationShard(rng.normal(size=(12, 5)).astype(dt), 3, 4, (2, 3), ["x", "y"], tag)
        p = tmp_path / f"s_{tag}.acts"
        actstore.write_shard(shard, p)
        back = actstore.read_shard(p)
        if back.data.tobytes() != shard.data.tobytes():
            problems.append(f"shard {tag} data")
        actstore.write_shard(back, tmp_path / "again.acts")
        if (tmp_path / "again.acts").read_bytes() != p.read_bytes():
            problems.append(f"shard {tag} bytes")

    # pipeline through the CLI, then replay every step from its manifest
    acts = tmp_path / "a.acts"
    steps = [
        ["synth", "--mode", "planted_dictionary", "--dim", "16", "--rows", "3000", "--atoms", "32",
         "--sparsity", "3", "--noise", "0.01", "--out", str(acts)],
        ["whiten-fit", "--in", str(acts), "--batch-size", "500", "--out", str(tmp_path / "w.bin")],
        ["train-sae", "--data", str(acts), "--whitener", str(tmp_path / "w.bin"), "--dim-ratio", "2",
         "--k", "3", "--steps", "300", "--batch-size", "128", "--out", str(tmp_path / "m.sae")],
        ["train-itda", "--data", str(acts), "--threshold", "0.2", "--k", "3", "--out", str(tmp_path / "m.itda")],
        ["steer", "--model", str(tmp_path / "m.sae"), "--feature", "2", "--out", str(tmp_path / "hook.json")],
        ["synth", "--mode", "planted_images", "--rows", "60", "--atoms", "6", "--dim", "24", "--noise", "0.05",
         "--out", str(tmp_path / "p.acts")],
        ["autointerp", "--data", str(tmp_path / "p.acts"), "--images", str(tmp_path / "p.acts.images"),
         "--mock", "--labels", str(tmp_path / "p.acts.labels.json"), "--baseline", str(tmp_path / "p.acts"),
         "--fire-threshold", "0.2", "--out", str(tmp_path / "ai.json")],
    ]
    for argv in steps:
        if cli.main(argv) != 0:
            problems.append(f"run failed: {argv[0]}")
            continue
        out = argv[argv.index("--out") + 1]
        manifest = out + ".manifest.json"
        replay = out + ".replay"
        if cli.main([argv[0], "--config", manifest, "--out", replay]) != 0:
            problems.append(f"replay failed: {argv[0]}")
        elif open(out, "rb").read() != open(replay, "rb").read():
            problems.append(f"replay differs: {argv[0]}")

    for path, loader, dump in ((tmp_path / "m.sae", sae.load, sae.to_bytes),
                               (tmp_path / "m.itda", itda.load, itda.to_bytes),
                               (tmp_path / "w.bin", whitening.load, whitening.to_bytes)):
        if path.exists() and dump(loader(path)) != path.read_bytes():
            problems.append(f"model bytes differ: {path.name}")
    verdict("criterion 9 (format stability)", not problems,
            "shards and models round-trip bit-exactly; 7 manifest replays identical" if not problems
            else "; ".join(problems))


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
