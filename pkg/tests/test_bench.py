import math

import pytest

from conftest import GRID, const_path
from meanviab.bench import benchmark_docs, builtin_benchmarks, get_benchmark, oracle_consistency_check
from meanviab.errors import ConfigError
from meanviab.hjb import constant_family, value_function
from meanviab.problem import ProblemSpec, check_A1_nonanticipativity, check_A2, check_H

IDS = ["B0", "B1", "B2", "B3", "B4"]


def test_registry_lists_every_benchmark():
    assert [b.id for b in builtin_benchmarks()] == IDS


def test_unknown_id_is_config_error():
    with pytest.raises(ConfigError) as err:
        get_benchmark("B9")
    assert err.value.field == "id"


@pytest.mark.parametrize("bid", IDS)
def test_documents_round_trip(bid):
    doc = benchmark_docs()[bid]
    spec = ProblemSpec.from_dict(doc)
    assert ProblemSpec.from_dict(spec.to_dict()).to_dict() == spec.to_dict()
    assert spec.grid == GRID


@pytest.mark.parametrize("bid", IDS)
def test_oracle_consistency(bid):
    rep = oracle_consistency_check(get_benchmark(bid), 20000, 42)
    assert rep["passed"], rep
    assert rep["clipping"]["clip_count"] == 0


@pytest.mark.parametrize("bid", IDS)
def test_structural_validators_pass(bid):
    spec = get_benchmark(bid).spec
    assert check_A1_nonanticipativity(spec).passed
    assert check_A2(spec, samples=500).passed
    assert check_H(spec.candidate, spec.grid, samples=500).passed


def test_closed_form_values():
    x = const_path(0.3)
    assert get_benchmark("B1").oracle_value(0.0, x) == 0.3
    assert get_benchmark("B2").oracle_value(0.0, const_path(0.0)) == pytest.approx(0.04)
    assert get_benchmark("B4").oracle_value(0.5, x) == pytest.approx(-0.8)
    assert get_benchmark("B3").oracle_value(0.0, x) == pytest.approx(math.sqrt(1 / math.pi), rel=1e-9)


def test_b0_with_huge_clip_is_centered_at_origin():
    spec = ProblemSpec.from_dict(benchmark_docs(clip=1e6)["B0"])
    x = const_path(0.0)
    assert spec.candidate(0.0, x.values[None])[0] == pytest.approx(0.0, abs=1e-9)
    est = value_function(spec, 0.0, x, constant_family(spec), 20000, 1)
    assert abs(est.value) <= 3 * est.stderr


def test_b0_oracle_is_clipped_gaussian_mean():
    b0 = get_benchmark("B0")
    # far above the clip level the mean saturates at the clip
    assert b0.oracle_value(0.0, const_path(50.0)) == pytest.approx(10.0, abs=1e-9)
    assert b0.oracle_value(0.0, const_path(0.3)) == pytest.approx(0.3, abs=1e-9)


def test_oracle_check_off_start_point():
    b2 = get_benchmark("B2")
    rep = oracle_consistency_check(b2, 20000, 3, t=0.5, x=const_path(-0.4))
    assert rep["oracle"] == pytest.approx(0.16 + 0.02)
    assert rep["passed"]
