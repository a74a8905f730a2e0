"""FLOP model, benchmark harness, gradient checker and correlation analysis."""
import numpy as np
import pytest

from saevit import ops
from saevit.analysis import gradcheck as gc
from saevit.analysis.bench import attention_bench, bench_module
from saevit.analysis.correlation import capture_activations, channel_correlation, pearson_matrix
from saevit.analysis.flops import attention_flops, count_flops, linear_macs, model_flops
from saevit.attention import attention_forward, init_attention
from saevit.blocks import init_ffn, init_lfe
from saevit.errors import ConfigError, DimensionError, VerificationError
from saevit.model import build_model, model_forward, tiny_config, variant_config
from saevit.tensor import RngState, Tensor

PROTO = dict(n=1, c=256, h=56, w=56, heads=8)


def _attn_macs(kind, **kw):
    return attention_flops(kind, PROTO["n"], PROTO["c"], PROTO["h"], PROTO["w"], PROTO["heads"], **kw).total


# -- FLOPs ----------------------------------------------------------------------------

def test_linear_macs_definition():
    assert linear_macs(10, 32, 32) == 10 * 32 ** 2


def test_t_flops_budget():
    assert abs(model_flops(variant_config("t")).total - 0.8e9) <= 0.15 * 0.8e9


def test_saa_cheaper_than_sra_cheaper_than_mhsa():
    assert _attn_macs("saa", sr=8) < _attn_macs("sra", sr=8) < _attn_macs("mhsa")


def test_window7_macs_exact():
    # four C x C projections over 3136 tokens plus 64 windows of 49 x 49 x C twice
    assert _attn_macs("window", win=7) == 4 * 3136 * 256 ** 2 + 2 * 64 * 49 * 49 * 256 == 900_759_552


def test_saa_sr1_flops_equal_mhsa():
    assert _attn_macs("saa", sr=1) == _attn_macs("mhsa")


def test_saa_flops_decrease_with_sr():
    vals = [_attn_macs("saa", sr=s) for s in (2, 4, 8)]
    assert vals[0] > vals[1] > vals[2]


def test_report_total_is_sum_and_deterministic():
    a = model_flops(variant_config("xs"))
    b = model_flops(variant_config("xs"))
    assert a.total == sum(m for _, _, m in a.entries) == sum(a.by_kind().values())
    assert sum(a.grouped(1).values()) == a.total
    assert a.to_json() == b.to_json()
    assert "1 FLOP = 1 MAC" in a.to_dict()["convention"]


@pytest.mark.parametrize("toggles", [{}, {"attn": "sra", "ffn": "ffn", "use_lfe": False},
                                     {"ffn": "dwsffn", "use_stem": False}])
def test_analytic_matches_instrumented_model(toggles):
    cfg = tiny_config(**toggles)
    p = build_model(cfg, RngState(0))
    with ops.OpCounter() as oc:
        model_forward(np.zeros((2, 3, 32, 32), np.float32), p)
    rep = model_flops(cfg, 2, 32, 32)
    assert oc.total_macs == rep.total
    assert dict(oc.elementwise) == dict(rep.elementwise)


@pytest.mark.parametrize("kind,kw", [("saa", {"sr": 4}), ("sra", {"sr": 2}), ("window", {"win": 4}),
                                     ("mhsa", {})])
def test_analytic_matches_instrumented_attention(kind, kw):
    p = init_attention(RngState(0), 16, 2, kind, **kw)
    with ops.OpCounter() as oc:
        attention_forward(np.zeros((2, 16, 8, 8), np.float32), p)
    assert oc.total_macs == count_flops(p, (2, 16, 8, 8)).total


def test_count_flops_dispatch_and_errors():
    assert count_flops(init_lfe(RngState(0), 8), (1, 8, 4, 4)).total == 8 * 16 * 9
    assert count_flops(init_ffn(RngState(0), 8, "ffn", 2), (1, 8, 4, 4)).total == 2 * 16 * 8 * 16
    with pytest.raises(DimensionError):
        count_flops(init_lfe(RngState(0), 8), (1, 4, 4, 4))
    with pytest.raises(DimensionError):
        count_flops(variant_config("t"), (1, 3, 224))
    with pytest.raises(DimensionError):
        count_flops(init_attention(RngState(0), 8, 2, "saa", sr=3), (1, 8, 4, 4))
    with pytest.raises(ConfigError):
        count_flops(object(), (1, 1, 1, 1))


# -- benchmark ------------------------------------------------------------------------

def test_bench_throughput_identity():
    rep = bench_module("id", lambda x: x * 2, (4, 3, 8, 8), warmup_secs=0.0, iters=7)
    assert len(rep.times) == 7
    assert rep.throughput == pytest.approx(4 * 7 / sum(rep.times), rel=1e-12)
    assert rep.min_ms <= rep.mean_ms


def test_bench_latency_and_throughput_modes():
    small = dict(h=8, w=8, c=16, heads=2, sr=2, warmup_secs=0.0, iters=2)
    assert attention_bench("saa", batch=1, **small).batch == 1
    assert attention_bench("saa", batch=256, **small).batch == 256


def test_bench_report_structure_deterministic():
    kw = dict(h=8, w=8, c=16, heads=2, sr=2, warmup_secs=0.0, iters=3)
    a, b = attention_bench("sra", **kw).to_dict(), attention_bench("sra", **kw).to_dict()
    timing = {"times", "mean_latency_ms", "min_latency_ms", "std_latency_ms", "throughput_img_s", "warnings"}
    assert {k: v for k, v in a.items() if k not in timing} == {k: v for k, v in b.items() if k not in timing}


def test_bench_warmup_respected():
    import time
    t0 = time.perf_counter()
    bench_module("noop", lambda x: x, (1, 1, 1, 1), warmup_secs=0.2, iters=1)
    assert time.perf_counter() - t0 >= 0.2


def test_bench_timer_warning(monkeypatch):
    import types
    from saevit.analysis import bench
    monkeypatch.setattr(bench.time, "get_clock_info", lambda name: types.SimpleNamespace(resolution=1.0))
    rep = bench_module("noop", lambda x: x, (1, 1, 1, 1), warmup_secs=0.0, iters=3)
    assert rep.warnings and "resolution" in rep.warnings[0]


def test_bench_rejects_zero_iters():
    with pytest.raises(ConfigError):
        bench_module("noop", lambda x: x, (1, 1), 0.0, 0)


# -- gradient checking ------------------------------------------------------------

def test_linear_gradcheck_tight():
    assert gc.run_target("linear").worst[1] < 1e-8


def test_saa_gradcheck():
    r = gc.run_target("saa")
    assert r.passed and r.worst[1] < 1e-6


def test_sign_flipped_backward_fails():
    g = np.random.default_rng(0)
    w = Tensor(g.standard_normal((4, 3)))

    def forward(x):
        y, back = ops.linear_vjp(x, w.data)

        def backward(dy):
            dx, dw, _ = back(dy)
            w.accumulate(-dw)
            return dx
        return y, backward

    r = gc.grad_check(forward, {"w": w}, [g.standard_normal((5, 4))])
    assert r.errors["w"] > 1e-1 and not r.passed


def test_non_finite_gradient_named():
    w = Tensor(np.ones(3))

    def forward(x):
        return x * w.data, lambda dy: (w.accumulate(np.full(3, np.nan)), dy * w.data)[1]

    with pytest.raises(VerificationError, match="w"):
        gc.grad_check(forward, {"w": w}, [np.ones(3)])


def test_unknown_target_lists_valid():
    with pytest.raises(ConfigError, match="tiny-model"):
        gc.run_target("nope")


def test_large_tensor_subsampled():
    g = np.random.default_rng(0)
    w = Tensor(g.standard_normal((30, 30)))
    fwd = gc._op_with_params(ops.linear_vjp, ("w",))({"w": w})
    r = gc.grad_check(fwd, {"w": w}, [g.standard_normal((2, 30))], check_inputs=False)
    assert r.checked["w"] == 256 and r.passed


# -- correlation ------------------------------------------------------------------

def test_duplicate_and_negated_channels():
    g = np.random.default_rng(0)
    a = g.standard_normal((2, 1, 6, 6))
    acts = np.concatenate([a, a, -a, g.standard_normal((2, 1, 6, 6))], axis=1)
    rep = channel_correlation(acts, k=4)
    m = dict(zip(rep.channels.tolist(), range(4)))
    assert rep.matrix[m[0], m[1]] == 1.0
    assert rep.matrix[m[0], m[2]] == -1.0


def test_independent_gaussians_low_abs_mean():
    acts = np.random.default_rng(42).standard_normal((1, 50, 100, 100))
    rep = channel_correlation(acts, k=50)
    assert rep.abs_mean < 0.03


def test_matrix_invariants():
    g = np.random.default_rng(5)
    base = g.standard_normal((3, 1, 8, 8))
    acts = base + 0.5 * g.standard_normal((3, 30, 8, 8))
    rep = channel_correlation(acts, k=20, rng=RngState(1))
    m = rep.matrix
    assert m.shape == (20, 20) and len(set(rep.channels.tolist())) == 20
    assert np.max(np.abs(m - m.T)) <= 1e-12
    assert np.all(np.diag(m) == 1.0)
    assert m.min() >= -1 and m.max() <= 1
    assert rep.hist_counts.sum() == 20 * 19 // 2 and len(rep.hist_counts) == 20


def test_zero_variance_flagged():
    acts = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    acts[:, 1] = 7.0
    rep = channel_correlation(acts, k=3)
    assert rep.zero_variance == [1]
    assert np.all(rep.matrix[1, [0, 2]] == 0) and rep.matrix[1, 1] == 1


def test_population_variance_pearson():
    g = np.random.default_rng(3)
    rows = g.standard_normal((4, 9))
    m, _ = pearson_matrix(rows)
    np.testing.assert_allclose(m, np.corrcoef(rows), atol=1e-12)


def test_k_capped_and_preconditions():
    g = np.random.default_rng(0)
    assert channel_correlation(g.standard_normal((1, 5, 2, 2)), k=100).k == 5
    with pytest.raises(DimensionError):
        channel_correlation(g.standard_normal((1, 1, 4, 4)))
    with pytest.raises(DimensionError):
        channel_correlation(g.standard_normal((1, 4, 1, 1)))


def test_correlation_seed_determinism():
    acts = np.random.default_rng(0).standard_normal((2, 40, 4, 4))
    a = channel_correlation(acts, 10, RngState(7))
    b = channel_correlation(acts, 10, RngState(7))
    assert a.matrix_csv() == b.matrix_csv() and a.hist_csv() == b.hist_csv()


def test_capture_stage3_shape():
    p = build_model(variant_config("t"), RngState(0))
    acts = capture_activations(p, np.zeros((2, 3, 224, 224), np.float32), stage=3)
    assert acts.shape == (2, 192, 14, 14)
    with pytest.raises(ConfigError):
        capture_activations(p, np.zeros((1, 3, 224, 224), np.float32), stage=5)


@pytest.mark.parametrize("target", [t for t in gc.TARGETS if t != "tiny-model"])
def test_every_gradcheck_target_passes(target):
    r = gc.run_target(target)
    assert r.passed, f"{target}: {r.worst}"
