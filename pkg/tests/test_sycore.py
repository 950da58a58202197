import json
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from cordic_rpe.rpe import AfKind, RpeConfig
from cordic_rpe.sycore import (ArrayConfig, LayerKind, LayerSpec, NetworkFormatError, PruningSpec,
                               load_network, map_layer, parse_network, schedule_network,
                               simulate_cycles)

TABLE_OP_CYCLES = [1728, 36864, 18432, 36864, 18432, 36864, 36864, 18432, 36864, 36864,
                   36864, 36864, 36864, 2048, 16384, 4096]
TABLE_UTIL = [100] * 10 + [33.33] * 3 + [100, 100, 40]
TABLE_KMAC = [1728, 36864, 73728, 147456, 294912, 589824, 589824, 1179648, 2359296, 2359296,
              2359296, 2359296, 2359296, 4096, 4096, 100]


@pytest.fixture(scope="module")
def vgg(fixtures_dir):
    return load_network(fixtures_dir / "vgg16_cifar100.net")


def test_vgg_fixture_shape(vgg):
    assert len(vgg) == 22
    assert sum(l.on_array for l in vgg) == 16
    assert vgg[2].kind is LayerKind.POOL and (vgg[2].cin, vgg[2].h) == (64, 32)
    assert vgg[-1].af is AfKind.SOFTMAX


def test_table_op_cycles_and_kmac(vgg):
    rep = schedule_network(vgg)
    es = rep.array_entries()
    assert [e.op_cycles for e in es] == TABLE_OP_CYCLES
    assert [e.kmac_ops for e in es] == TABLE_KMAC


def test_table_utilization(vgg):
    es = schedule_network(vgg).array_entries()
    assert [round(e.utilization_pct, 2) for e in es] == TABLE_UTIL


def test_table_grids_and_mean(vgg):
    rep = schedule_network(vgg)
    grids = [e.grid_label() for e in rep.array_entries()]
    assert grids[:2] == ["32x32", "32x32"] and grids[-3:] == ["1024", "1024", "256"]
    assert rep.mean_utilization == pytest.approx(83.75)
    assert rep.weighted_utilization > rep.mean_utilization


def test_calibrated_rows_are_labelled(vgg):
    es = schedule_network(vgg).array_entries()
    c5, fc8 = es[10], es[15]
    assert c5.calibration and fc8.calibration
    assert c5.occupancy_pct == pytest.approx(25.0)
    assert fc8.occupancy_pct == pytest.approx(100 * 100 / 256)
    assert not es[0].calibration


def test_host_layers_take_no_array_cycles(vgg):
    rep = schedule_network(vgg)
    pools = [e for e in rep.entries if e.host]
    assert len(pools) == 6
    assert all(e.op_cycles == 0 and e.utilization_pct is None for e in pools)


def test_report_serializes(vgg):
    rep = schedule_network(vgg)
    doc = json.loads(json.dumps(rep.to_dict()))
    assert doc["totals"]["op_cycles"] == sum(TABLE_OP_CYCLES)
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("layer,")
    assert lines[-1].startswith("total,")
    assert len(lines) == 24


def test_unit_layer():
    layer = LayerSpec("u", LayerKind.CONV, k=1, cin=1, cout=1, h=1, w=1)
    e = map_layer(layer)
    assert e.op_cycles == 1
    assert e.occupancy_pct == pytest.approx(100 / 1024)


def test_fc_passes():
    e = map_layer(LayerSpec("fc", LayerKind.FC, cin=10, cout=2000))
    assert e.passes == 2 and e.op_cycles == 20


@pytest.mark.parametrize("text, frac", [("4:9", Fraction(4, 9)), ("40%", Fraction(2, 5)),
                                        ("0.25", Fraction(1, 4)), ("0", Fraction(0))])
def test_pruning_parse(text, frac):
    assert PruningSpec.parse(text).fraction == frac


@pytest.mark.parametrize("text", ["9:9", "1:0", "abc", "150%", "-0.1"])
def test_pruning_parse_rejects(text):
    with pytest.raises(ValueError):
        PruningSpec.parse(text)


def test_pruning_kept_rounds_up():
    p = PruningSpec.parse("40%")
    assert p.kept(10) == 6
    assert p.kept(9) == 6  # 5.4 rounds up


def test_four_of_nine_on_conv_layers_is_exact(vgg):
    convs = [l for l in vgg if l.kind is LayerKind.CONV]
    rep = schedule_network(convs, pruning=PruningSpec.parse("4:9"))
    assert rep.mac_ratio == Fraction(5, 9)
    assert rep.baseline_macs - rep.total_macs == Fraction(4, 9) * rep.baseline_macs


def test_four_of_nine_on_full_network(vgg):
    rep = schedule_network(vgg, pruning=PruningSpec.parse("4:9"))
    # fc reductions (512, 4096) are not multiples of nine and round up
    assert rep.mac_ratio == Fraction(11544721, 20780032)
    assert rep.cycle_ratio > 1.7


def test_parse_network_errors_carry_line_numbers():
    text = "c1 conv K=3 Cin=1 Cout=4 H=8 W=8\n\nc2 conv K=3 Cin=4 H=6 W=6\n"
    with pytest.raises(NetworkFormatError) as exc:
        parse_network(text, "net.txt")
    assert exc.value.line == 3
    assert "net.txt:3" in str(exc.value) and "cout" in str(exc.value)


@pytest.mark.parametrize("text, line", [("a blob", 1), ("a conv K=x", 1), ("# only\nb fc cin=2 foo", 2),
                                        ("a conv K=9 Cin=1 Cout=1 H=4 W=4", 1), ("", None)])
def test_parse_network_rejects(text, line):
    with pytest.raises(NetworkFormatError) as exc:
        parse_network(text)
    assert exc.value.line == line


def test_pool_inherits_shape():
    net = parse_network("c conv K=3 Cin=1 Cout=4 H=8 W=8 pad=1\np pool\nf flatten\n"
                        "d fc Cin=64 Cout=10 af=softmax")
    assert (net[1].cin, net[1].h, net[1].k, net[1].stride) == (4, 8, 2, 2)
    assert (net[1].out_h, net[2].h) == (4, 4)


def test_array_config_validation():
    with pytest.raises(ValueError):
        ArrayConfig(rows=30)
    with pytest.raises(ValueError):
        schedule_network([])


def test_bigger_array_is_not_slower(vgg):
    big = ArrayConfig(rows=64, cols=64)
    for layer in vgg:
        if layer.on_array:
            assert map_layer(layer, big).op_cycles <= map_layer(layer).op_cycles


def test_simulate_unit_layer():
    layer = LayerSpec("u", LayerKind.CONV, k=1, cin=1, cout=1, h=1, w=1)
    res = simulate_cycles(layer)
    assert res.analytic_cycles == 1
    assert res.measured_cycles == 1 + 4
    assert res.products_issued == 1


def test_simulate_respects_budget():
    layer = LayerSpec("c", LayerKind.CONV, k=3, cin=64, cout=64, h=32, w=32, pad=1)
    with pytest.raises(ValueError, match="budget"):
        simulate_cycles(layer, budget=1000)
    with pytest.raises(ValueError):
        simulate_cycles(LayerSpec("p", LayerKind.POOL, k=2, stride=2, h=4, w=4))


def test_simulate_vgg_c5():
    c5 = LayerSpec("C5", LayerKind.CONV, k=3, cin=16, cout=512, h=2, w=2, pad=1)
    res = simulate_cycles(c5)
    assert 0 <= res.overhead <= 4
    assert res.products_issued == c5.macs
    assert res.active_histogram.max() == 4 * 64


conv_layers = st.builds(
    lambda k, cin, cout, hw, stride, pad: LayerSpec("r", LayerKind.CONV, k=k, cin=cin, cout=cout,
                                                    h=hw, w=hw, stride=stride, pad=pad),
    st.integers(1, 3), st.integers(1, 4), st.integers(1, 80), st.integers(3, 40),
    st.integers(1, 2), st.integers(0, 1))
fc_layers = st.builds(lambda cin, cout: LayerSpec("r", LayerKind.FC, cin=cin, cout=cout),
                      st.integers(1, 16), st.integers(1, 3000))


@settings(max_examples=60)
@given(st.one_of(conv_layers, fc_layers), st.integers(1, 6),
       st.sampled_from(["0", "4:9", "40%"]))
def test_simulation_matches_analytic(layer, stages, prune):
    array = ArrayConfig(rpe=RpeConfig(mac_stages=stages))
    res = simulate_cycles(layer, array, PruningSpec.parse(prune))
    assert 0 <= res.overhead <= stages - 1
    assert res.products_issued == map_layer(layer, array, PruningSpec.parse(prune)).macs
