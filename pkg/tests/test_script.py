from pathlib import Path

import pytest
from hypothesis import given, settings

from strategies import plans
from trainplan.layout import ParallelLayout
from trainplan.script import (EnvProfile, PlanRejected, ScriptParseError, _fmt_float,
                              debug_profile, extract, format_walltime, parse_walltime, render,
                              render_sections)

GOLDEN = Path(__file__).parent / "data" / "example_2node.sh"


def test_golden_file(plan):
    assert render(plan) == GOLDEN.read_text()


def test_exact_lines(plan):
    lines = render(plan).split("\n")
    for want in ("#SBATCH --nodes=2", "#SBATCH --gres=gpu:4", "#SBATCH --time=00:20:00",
                 "export NCCL_ASYNC_ERROR_HANDLING=1", "export NCCL_IB_TIMEOUT=50",
                 "export UCX_RC_TIMEOUT=4s", "export NCCL_IB_RETRY_CNT=10",
                 "export NCCL_SOCKET_IFNAME=ib0", "export GLOO_SOCKET_IFNAME=ib0",
                 "GAS=16", "TRAIN_SAMPLES=244_140", "wait"):
        assert want in lines, want


def test_line_endings(plan):
    text = render(plan)
    assert "\r" not in text and text.endswith("\n") and not text.endswith("\n\n")


def test_debug_group_omitted_unless_enabled(plan):
    assert "NCCL_DEBUG" not in render(plan)
    text = render(plan.__class__(**{**plan.__dict__, "env_profile": debug_profile()}))
    assert "export NCCL_DEBUG=INFO" in text.split("\n")
    assert "export CUDA_LAUNCH_BLOCKING=1" in text.split("\n")


def test_load_checkpoints_flag(plan):
    from dataclasses import replace
    assert "export LOAD_CHECKPOINTS=false" in render(plan).split("\n")
    assert "export LOAD_CHECKPOINTS=true" in render(replace(plan, load_checkpoints=True)).split("\n")


def test_sections_in_order(plan):
    names = list(render_sections(plan))
    assert names[0] == "directives" and names[-1] == "execution"
    assert "".join("\n".join(v) for v in render_sections(plan).values())


def test_rejects_invalid_plan(plan):
    from dataclasses import replace
    bad = replace(plan, layout=ParallelLayout(1, 5, 1, 4, 128, 512, 2, 4))
    with pytest.raises(PlanRejected) as e:
        render(bad)
    assert {v.code.value for v in e.value.violations} >= {"LAYERS_PP", "NGPUS_INDIVISIBLE"}


def test_parse_errors(plan):
    with pytest.raises(ScriptParseError) as e:
        extract("")
    assert e.value.line == 1
    text = render(plan).replace("NLAYERS=16\n", "")
    with pytest.raises(ScriptParseError) as e:
        extract(text)
    assert "NLAYERS" in str(e.value)
    text = render(plan).replace("TP_SIZE=1", "TP_SIZE=one")
    with pytest.raises(ScriptParseError) as e:
        extract(text)
    assert text.split("\n")[e.value.line - 1].startswith("TP_SIZE=one")


def test_env_profile_validation():
    with pytest.raises(ValueError):
        EnvProfile(groups=EnvProfile().groups[:2])
    with pytest.raises(KeyError):
        EnvProfile().with_overrides({"NOT_A_VAR": "1"})
    assert EnvProfile().with_overrides({"NCCL_IB_TIMEOUT": "22"}).variables()["NCCL_IB_TIMEOUT"] == "22"


@pytest.mark.parametrize("seconds,text", [(0, "00:00:00"), (1200, "00:20:00"), (86400, "24:00:00"),
                                          (90061, "25:01:01")])
def test_walltime_format(seconds, text):
    assert format_walltime(seconds) == text
    assert parse_walltime(text) == seconds


@pytest.mark.parametrize("x,text", [(0.00015, "0.00015"), (2.5e-05, "0.000025"), (1e-5, "0.00001"),
                                    (0.1, "0.1")])
def test_float_format(x, text):
    assert _fmt_float(x) == text
    assert float(text) == x


@settings(max_examples=200, deadline=None)
@given(plans())
def test_round_trip(p):
    assert extract(render(p)) == p


@settings(max_examples=50, deadline=None)
@given(plans())
def test_render_deterministic(p):
    assert render(p) == render(p)
