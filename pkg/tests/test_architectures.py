import numpy as np
import pytest

from app.autodiff.rng import Rng
from app.autodiff.tensor import Tensor
from app.errors import ConfigurationError, ShapeError
from app.models.arch import ArchConfig, arch_preset
from app.nn.agent import build_agent
from app.nn.layers import parameter_count
from app.nn.shared import SharedParameterStore, trainable_partition
from app.nn.vit import build_vit
from app.services.inspect_service import parameter_report

F64 = np.float64


def images(arch: ArchConfig, batch: int = 2, seed: int = 0) -> Tensor:
    gen = np.random.default_rng(seed)
    return Tensor(gen.normal(size=(batch, arch.channels, arch.image_size, arch.image_size)))


def test_vit_trace_shapes(micro_arch):
    vit = build_vit(micro_arch, Rng(0), F64)
    trace = vit.forward_traced(images(micro_arch), keep_attention=True)
    assert len(trace) == micro_arch.layers
    assert trace.shapes() == [(2, micro_arch.tokens, micro_arch.hidden)] * micro_arch.layers
    assert trace.logits.shape == (2, micro_arch.classes)
    assert trace.attention[0].shape == (2, micro_arch.heads, micro_arch.tokens + 1, micro_arch.tokens + 1)


def test_vit_rejects_wrong_image_size(micro_arch):
    vit = build_vit(micro_arch, Rng(0), F64)
    with pytest.raises(ShapeError):
        vit(Tensor(np.ones((1, 3, 16, 16))))


def test_base_agent_keeps_resolution(micro_arch):
    agent = build_agent(micro_arch, Rng(0), F64)
    trace = agent.forward_traced(images(micro_arch))
    assert trace.shapes() == [(2, micro_arch.tokens, micro_arch.hidden)] * micro_arch.layers
    assert trace.logits.shape == (2, micro_arch.classes)


@pytest.mark.parametrize("downsample", ["avg-pool", "strided-conv"])
def test_res_like_agent_halves_between_stages(downsample):
    arch = ArchConfig(layers=3, hidden=8, heads=4, patch=4, image_size=32, classes=3, mlp_ratio=1.0,
                      agent_variant="res-like", stage_depths=[1, 1, 1], stem_channels=4, downsample=downsample)
    agent = build_agent(arch, Rng(0), F64)
    assert agent.sides == [4, 2, 1]
    trace = agent.forward_traced(images(arch))
    assert trace.shapes() == [(2, 16, 8), (2, 4, 8), (2, 1, 8)]
    assert len(agent.downsamplers) == (2 if downsample == "strided-conv" else 0)


def test_res_like_default_stage_split():
    assert arch_preset("vit-s").resolved_stage_depths() == [1, 1, 4]
    assert arch_preset("vit-b").resolved_stage_depths() == [2, 2, 8]
    with pytest.raises(ConfigurationError):
        ArchConfig(layers=4, agent_variant="res-like").resolved_stage_depths()


def test_hidden_must_divide_by_heads():
    with pytest.raises(ValueError):
        ArchConfig(hidden=10, heads=4)


def test_shared_views_alias_one_array(micro_arch):
    store = SharedParameterStore(micro_arch, Rng(0).split("shared"), F64)
    vit = build_vit(micro_arch, Rng(0).split("vit"), F64, store)
    agent = build_agent(micro_arch, Rng(0).split("agent"), F64, store)
    v = store.view("vit", "blocks.0.attn.w_v")
    a = store.view("agent", "blocks.0.attn.w_v")
    assert v is not a
    assert np.shares_memory(v.data, a.data)
    v.data[0, 0] = 42.0
    assert a.data[0, 0] == 42.0
    partition = trainable_partition(vit, agent, store)
    assert set(partition.shared) == set(store.names)
    assert all(set(pair) == {"vit", "agent"} for pair in partition.shared.values())


def test_shared_scheme_counts_theta_s_once(micro_arch):
    store = SharedParameterStore(micro_arch, Rng(0).split("shared"), F64)
    shared = trainable_partition(build_vit(micro_arch, Rng(0), F64, store),
                                 build_agent(micro_arch, Rng(1), F64, store), store).counts()
    joint = trainable_partition(build_vit(micro_arch, Rng(0), F64), build_agent(micro_arch, Rng(1), F64)).counts()
    assert sum(shared.values()) < sum(joint.values())
    assert shared["shared"] == store.parameter_count()


def test_store_refuses_other_shapes(micro_arch):
    store = SharedParameterStore(micro_arch, Rng(0), F64)
    other = micro_arch.model_copy(update={"hidden": 12, "heads": 4})
    with pytest.raises(ShapeError):
        build_vit(other, Rng(0), F64, store)


def test_shared_conv_tracks_attention_weights(micro_arch):
    store = SharedParameterStore(micro_arch, Rng(0).split("shared"), F64)
    agent = build_agent(micro_arch, Rng(0).split("agent"), F64, store)
    x = images(micro_arch)
    before = agent(x).data.copy()
    store.arrays["blocks.0.attn.w_v"] *= 3.0
    assert not np.allclose(agent(x).data, before)


@pytest.mark.slow
def test_full_size_parameter_counts():
    rows = {(r["preset"], r["network"].split()[0]): r for r in parameter_report(["vit-s", "vit-b"])}
    assert abs(rows[("vit-s", "vit")]["params"] - 6.28e6) / 6.28e6 < 0.01
    assert abs(rows[("vit-b", "vit")]["params"] - 21.67e6) / 21.67e6 < 0.01
    assert abs(rows[("vit-s", "agent")]["params"] - 8.66e6) / 8.66e6 < 0.02


@pytest.mark.slow
def test_vit_s_count_is_exact():
    assert parameter_count(build_vit(arch_preset("vit-s"), Rng(0))) == 6_276_394
