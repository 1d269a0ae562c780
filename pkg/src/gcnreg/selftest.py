"""Fast built-in oracles, run by ``gcnreg selftest``.

Each check returns ``(ok, detail)``; none needs the network or a dataset.
"""

import itertools

import numpy as np

from . import autodiff as ad
from .benchgen import ChallengeSpec, make_pair, split_dataset
from .errors import FormatError
from .geometry import PointCloud, knn, normalize, tps_evaluate, tps_fit
from .gradcheck import check
from .matching import CandidateGraph, LbpConfig, SourceGraph, lbp_run
from .rng import substream
from .training import AdamState, Checkpoint, adam_step, decode_checkpoint, encode_checkpoint


def random_tree(n, rng):
    """Edges of a uniformly random recursive tree on ``n`` nodes."""
    return [(i, int(rng.integers(i))) for i in range(1, n)]


def tree_diameter(n, edges):
    adj = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)

    def farthest(start):
        dist = {start: 0}
        stack = [start]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    stack.append(v)
        far = max(dist, key=dist.get)
        return far, dist[far]

    end, _ = farthest(0)
    return farthest(end)[1]


def brute_force_map(unary, cand_disp, edges, alpha):
    """Exhaustive minimiser of sum of unaries plus alpha * |u_i - u_j|^2 per edge."""
    n, k = unary.shape
    best, best_lab = np.inf, None
    for lab in itertools.product(range(k), repeat=n):
        e = sum(unary[i, lab[i]] for i in range(n))
        for a, b in edges:
            diff = cand_disp[a, lab[a]] - cand_disp[b, lab[b]]
            e += alpha * float(diff @ diff)
        if e < best:
            best, best_lab = e, lab
    return np.array(best_lab), best


def lbp_tree_trial(rng, alpha, n_max=8, k_max=4):
    """One random tree instance; returns (lbp argmins, exhaustive MAP labels)."""
    n = int(rng.integers(2, n_max + 1))
    k = int(rng.integers(2, k_max + 1))
    # keep k^n enumeration cheap
    while k**n > 70000:
        n -= 1
    edges = random_tree(n, rng)
    unary = rng.random((n, k))
    disp = rng.normal(scale=0.3, size=(n, k, 3))
    graph = SourceGraph.from_edges(n, edges)
    cand = CandidateGraph(np.zeros((n, k), dtype=np.int64), disp, ad.Tensor(unary, dtype=np.float64))
    iters = max(1, tree_diameter(n, edges))
    with ad.no_grad():
        beliefs = lbp_run(cand, graph, LbpConfig(alpha=alpha, iterations=iters, k_candidates=k, k_source=1))
    labels, _ = brute_force_map(unary, disp, edges, alpha)
    return np.argmin(beliefs.data, axis=1), labels


def check_lbp_trees(trials=20, seed=0):
    rng = substream(seed, "selftest-lbp")
    agree = 0
    for t in range(trials):
        got, want = lbp_tree_trial(rng, (0.0, 1.0, 50.0)[t % 3])
        agree += bool(np.array_equal(got, want))
    return agree == trials, f"{agree}/{trials} trees agree with exhaustive MAP"


def check_knn(seed=0):
    rng = substream(seed, "selftest-knn")
    q, r = rng.random((40, 3)), rng.random((60, 3))
    got = knn(q, r, 7)
    d = ((q[:, None] - r[None]) ** 2).sum(-1)
    want = np.argsort(d, axis=1, kind="stable")[:, :7]
    return bool(np.array_equal(got, want)), "knn matches brute-force sort"


def check_tps(seed=0):
    rng = substream(seed, "selftest-tps")
    ctrl = rng.random((6, 3))
    disp = rng.normal(size=(6, 3)) * 0.1
    interp = np.abs(tps_evaluate(tps_fit(ctrl, disp), ctrl) - (ctrl + disp)).max()
    pts = rng.random((20, 3))
    ident = np.abs(tps_evaluate(tps_fit(ctrl, np.zeros((6, 3))), pts) - pts).max()
    shift = np.array([[0.3, -0.2, 0.1]])
    trans = np.abs(tps_evaluate(tps_fit(ctrl[:1], shift), pts) - (pts + shift)).max()
    ok = interp <= 1e-6 and ident <= 1e-9 and trans <= 1e-9
    return ok, f"interp {interp:.1e}, identity {ident:.1e}, translation {trans:.1e}"


def check_autodiff(seed=0):
    rng = substream(seed, "selftest-ad")
    a = ad.Tensor(rng.normal(size=(5, 4)), requires_grad=True, dtype=np.float64, name="a")
    b = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True, dtype=np.float64, name="b")
    g = ad.Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True, dtype=np.float64, name="g")

    def fn():
        h = ad.instance_norm(ad.matmul(a, b), g, ad.Tensor(np.zeros(3)))
        w = ad.softmax(ad.leaky_relu(h), axis=1)
        return ad.sum(ad.square(w * h))

    report = check(fn, [a, b, g])
    return report.max_rel_error <= 1e-5, f"max relative error {report.max_rel_error:.1e}"


def check_benchgen(seed=0):
    rng = substream(seed, "selftest-bench")
    cloud = normalize(PointCloud(rng.normal(size=(100, 3))))
    same = make_pair(cloud, ChallengeSpec(seed=3))
    ident = np.array_equal(same.source.points, same.target.points) and np.array_equal(same.gt_map, np.arange(100))
    out = make_pair(cloud, ChallengeSpec(outlier_ratio=0.1, seed=3))
    repeat = make_pair(cloud, ChallengeSpec(deform_level=0.5, rotation_level=0.4, seed=9))
    again = make_pair(cloud, ChallengeSpec(deform_level=0.5, rotation_level=0.4, seed=9))
    det = np.array_equal(repeat.target.points, again.target.points)
    train, val = split_dataset([f"m{i}" for i in range(10)], seed=seed)
    ok = ident and len(out.target.points) == 110 and det and len(train) == 8 and len(val) == 2
    return ok, "zero spec identity, outlier count, determinism, 8/2 split"


def check_adam():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -3.0])}
    new, state = adam_step(p, g, AdamState.zeros_like(p), lr=0.1)
    ok = np.allclose(new["w"], p["w"] - 0.1 * np.sign(g["w"]), atol=1e-6) and state.step == 1
    return ok, "first Adam step moves by lr * sign(grad)"


def check_checkpoint(seed=0):
    rng = substream(seed, "selftest-ckpt")
    ck = Checkpoint({"a": rng.random((3, 4)).astype(np.float32), "b": rng.random(5)}, 7, "[train]\nseed = 1\n")
    raw = encode_checkpoint(ck)
    back = decode_checkpoint(raw)
    exact = encode_checkpoint(back) == raw and back.step == 7
    rejected = 0
    for bad in (b"XXXX" + raw[4:], raw[:-3], raw + b"\0"):
        try:
            decode_checkpoint(bad)
        except FormatError:
            rejected += 1
    return exact and rejected == 3, "bit-exact round trip, corrupt files rejected"


CHECKS = {
    "autodiff": check_autodiff,
    "knn": check_knn,
    "tps": check_tps,
    "lbp-trees": check_lbp_trees,
    "benchgen": check_benchgen,
    "adam": check_adam,
    "checkpoint": check_checkpoint,
}


def run_all(out=print):
    """Run every check; returns True when all pass."""
    ok_all = True
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing oracle is a failed oracle
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok_all
