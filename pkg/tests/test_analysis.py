import math

import numpy as np
import pytest

from cordic_rpe.analysis import (PUBLISHED_MAC_METRICS, InputGrid, SweepFunction, SweepSpec,
                                 mac_normalized_metrics, metrics, pareto_sweep, plateau, sweep_csv)
from cordic_rpe.fxp import Q8_4, Q16_8, Q32_16, FxpFormat, RoundingMode


def test_metrics_small_example():
    m = metrics([1.0, 2.0], [1.0, 3.0])
    assert m.mse == 0.5
    assert m.mae == 0.5
    assert m.avg_rel_err == 0.25
    assert m.n == 2 and m.max_abs_err == 1.0


def test_metrics_edge_cases():
    with pytest.raises(ValueError):
        metrics([], [])
    with pytest.raises(ValueError):
        metrics([1.0, 2.0], [1.0])
    m = metrics([0.5], [0.25])
    assert m.std_paper is None and m.std_conventional is None
    z = metrics([0.0, 0.0], [0.1, 0.1])
    assert z.avg_rel_err is None and z.rel_skipped == 2


def test_tanh_q84_row_is_frozen():
    row = pareto_sweep(SweepSpec(SweepFunction.TANH, (Q8_4,), (5, 5)))[0]
    m = row.metrics
    assert m.n == 256 and row.clamped == 0
    assert m.mse == pytest.approx(0.0009793149486590645, rel=1e-12)
    assert m.mae == pytest.approx(0.01393489595466383, rel=1e-12)
    assert m.avg_rel_err == pytest.approx(0.030097503221639507, rel=1e-12)
    assert m.rel_skipped == 1


def test_mae_squared_bounded_by_mse():
    rows = pareto_sweep(SweepSpec(SweepFunction.SIGMOID, (Q8_4,), (1, 8)))
    for r in rows:
        assert r.metrics.mae ** 2 <= r.metrics.mse + 1e-15


def test_mac_metrics_frozen():
    m = mac_normalized_metrics(Q8_4, 5)
    assert m.n_samples == 256 * 63
    assert m.normalizer == 15.5
    assert m.normalized_mean_error == pytest.approx(0.0002560163850486431, rel=1e-9)
    assert m.nmed == pytest.approx(0.009284594214029699, rel=1e-9)
    assert m.mred == pytest.approx(0.12490686057822177, rel=1e-9)
    assert m.nmax_ed == pytest.approx(0.040826612903225805, rel=1e-9)


def test_mac_metrics_near_published():
    m = mac_normalized_metrics(Q8_4, 5)
    for name in ("normalized_mean_error", "nmed", "mred", "nmax_ed"):
        ratio = getattr(m, name) / getattr(PUBLISHED_MAC_METRICS, name)
        assert 0.1 <= ratio <= 10, name


def test_mac_metrics_stop_improving_past_frac_bits():
    # steps past the fraction width are bypassed
    assert mac_normalized_metrics(Q8_4, 8) == mac_normalized_metrics(Q8_4, 5)


def test_mac_metrics_rejects_wide_format():
    with pytest.raises(ValueError):
        mac_normalized_metrics(Q16_8, 5)


@pytest.mark.parametrize("text, kind", [("exhaustive", "exhaustive"), ("uniform:-4:4:9", "uniform"),
                                        ("list:0.5,-1,2", "explicit")])
def test_grid_parse_roundtrip(text, kind):
    g = InputGrid.parse(text)
    assert g.kind == kind
    assert InputGrid.parse(str(g)) == g


@pytest.mark.parametrize("text", ["uniform:1:0:5", "uniform:a:b:c", "list:", "random"])
def test_grid_parse_rejects(text):
    with pytest.raises(ValueError):
        InputGrid.parse(text)


def test_uniform_grid_counts_clamped():
    codes, clamped = InputGrid.uniform(-20, 20, 5).realize(Q8_4, RoundingMode.TRUNCATE)
    assert clamped == 4
    assert codes.tolist() == [-128, -128, 0, 127, 127]


def test_sweep_shape_and_csv_is_deterministic():
    spec = SweepSpec(SweepFunction.TANH, (Q8_4, Q16_8), (1, 16))
    rows = pareto_sweep(spec)
    assert len(rows) == 32
    assert [(str(r.fmt), r.iterations) for r in rows[:2]] == [("Q8.4", 1), ("Q8.4", 2)]
    text = sweep_csv(rows, spec.header())
    assert text == sweep_csv(pareto_sweep(spec, jobs=2), spec.header())
    lines = text.splitlines()
    assert lines[0].startswith("# function=tanh")
    assert sum(1 for l in lines if not l.startswith("#")) == 33


def test_softmax_sweep_is_seeded():
    spec = SweepSpec(SweepFunction.SOFTMAX, (Q8_4,), (4, 4), softmax_vectors=20)
    a = pareto_sweep(spec)[0].metrics
    assert a == pareto_sweep(spec)[0].metrics
    assert a.n == 200


def test_exp_sweep_clamps_unrepresentable_inputs():
    row = pareto_sweep(SweepSpec(SweepFunction.EXP, (Q8_4,), (6, 6)))[0]
    # e**a must stay below 8, so a is capped at floor(ln 7.9375 * 16) / 16
    assert row.clamped == sum(1 for r in range(-128, 128) if r > math.floor(math.log(7.9375) * 16))


def test_plateau_report():
    p = plateau([1.0, 0.5, 0.26, 0.25, 0.255, 0.25])
    assert p.best_iteration == 4
    assert p.settled_iteration() == 3
    assert p.is_monotone()
    assert p.holds(3) and not p.holds(2)
    assert not plateau([1.0, 0.5, 0.8]).is_monotone()


def _plateau(fn, fmt):
    grid = InputGrid()
    if fmt.word_bits > 16:
        # MAC rows pair every input with every weight, so keep that grid small
        grid = InputGrid.uniform(-4, 4, 201 if fn is SweepFunction.MAC else 1001)
    rows = pareto_sweep(SweepSpec(fn, (fmt,), (1, 2 * fmt.frac_bits + 4), grid), jobs=2)
    return plateau([r.metrics.mae for r in rows])


# exp has no saturating output stage, so single iteration counts can land
# on lucky cancellations well below the eventual plateau at narrow formats.
# GELU at Q8.4 is best at one iteration for the same reason.
_ERRATIC = {("exp", "Q8.4"), ("exp", "Q16.8"), ("gelu", "Q8.4")}


@pytest.mark.parametrize("fmt", [Q8_4, Q16_8, Q32_16], ids=str)
@pytest.mark.parametrize("fn", ["tanh", "sigmoid", "mac", "softmax", "selu", "swish", "gelu", "exp"])
def test_error_plateaus_by_twice_frac_bits(fn, fmt, request):
    if (fn, str(fmt)) in _ERRATIC:
        request.applymarker(pytest.mark.xfail(strict=True, reason="erratic MAE at narrow formats"))
    assert _plateau(SweepFunction.parse(fn), fmt).holds(2 * fmt.frac_bits)


def test_wide_format_tanh_sigmoid_accuracy():
    grid = InputGrid.uniform(-4, 4, 2001)
    for fn in (SweepFunction.TANH, SweepFunction.SIGMOID):
        row = pareto_sweep(SweepSpec(fn, (Q32_16,), (30, 30), grid))[0]
        assert row.metrics.mae < 1e-4
        assert row.metrics.max_abs_err < 2e-4


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec(SweepFunction.TANH, (), (1, 2))
    with pytest.raises(ValueError):
        SweepSpec(SweepFunction.TANH, (Q8_4,), (3, 2))
    with pytest.raises(ValueError):
        SweepFunction.parse("cosine")
    assert SweepFunction.parse(" TANH ") is SweepFunction.TANH


def test_exhaustive_grid_for_wide_format_reuses_byte_codes():
    codes, _ = InputGrid().realize(FxpFormat(16, 8), RoundingMode.TRUNCATE)
    assert codes.size == 256
    assert np.array_equal(codes, np.arange(-128, 128) * 16)
