import numpy as np
import pytest
import torch
import torch.nn.functional as F

from wastebench import models as md
from wastebench.errors import PrefixOutOfRange, ShapeMismatch, UnknownArchitecture
from wastebench.models import ModelSpec, ParallelEnsembleSpec


def toy(width=8, **kw):
    return md.build_model(ModelSpec("toy_cnn", toy_width=width, **kw), seed=0)


def toy_ensemble(mode="feature_concat", wa=8, wb=8, seed=0):
    spec = ParallelEnsembleSpec(ModelSpec("toy_cnn", toy_width=wa), ModelSpec("toy_cnn", toy_width=wb), mode)
    return md.build_parallel_ensemble(spec, seed=seed)


def batch(b=4, seed=0):
    return np.random.default_rng(seed).standard_normal((b, 224, 224, 3)).astype(np.float32)


def check_logprob_contract(out):
    assert out.shape[1] == 2
    assert (out.max(axis=1) <= 0).all()
    assert np.abs(np.exp(out).sum(axis=1) - 1).max() <= 1e-5


def test_toy_shape_contract():
    h = toy()
    assert h.parameter_count > 0
    out = md.forward_logprobs(h, batch(5))
    assert out.shape == (5, 2)
    check_logprob_contract(out)


def test_unknown_architecture():
    with pytest.raises(UnknownArchitecture):
        md.build_model(ModelSpec("resnet999"))


def test_spec_guards():
    with pytest.raises(ValueError):
        ModelSpec("toy_cnn", num_classes=3)
    with pytest.raises(ValueError):
        ModelSpec("toy_cnn", input_size=256)
    with pytest.raises(ValueError):
        ParallelEnsembleSpec(fusion_mode="mean")


def test_seeded_build_is_reproducible():
    a, b = toy(), toy()
    for pa, pb in zip(a.module.parameters(), b.module.parameters()):
        assert torch.equal(pa, pb)


def test_batch_independence():
    h = toy(16)
    x = batch(8, seed=3)
    full = md.forward_logprobs(h, x)
    single = md.forward_logprobs(h, x[2:3])
    assert np.allclose(full[2], single[0], atol=1e-5)


def test_accepts_nchw_and_rejects_bad_shape():
    h = toy()
    x = batch(2)
    nchw = torch.from_numpy(x).permute(0, 3, 1, 2)
    assert np.allclose(md.forward_logprobs(h, x), md.forward_logprobs(h, nchw), atol=1e-6)
    with pytest.raises(ShapeMismatch):
        md.forward_logprobs(h, np.zeros((2, 256, 256, 3), np.float32))
    with pytest.raises(ShapeMismatch):
        md.forward_logprobs(h, np.zeros((224, 224), np.float32))


def test_zero_head_is_uniform():
    h = md.zero_head(toy())
    out = md.forward_logprobs(h, batch(3))
    assert np.allclose(out, np.log(0.5), atol=1e-7)


# --- freezing ---

def test_freeze_zero_is_identity():
    h = toy()
    assert h.trainable_parameter_count == h.parameter_count


def test_freeze_prefix_counts_and_describe():
    h = toy()
    n = h.layer_count
    md.freeze_prefix(h, 2)
    rows = h.describe()
    assert [r["frozen"] for r in rows] == [True, True] + [False] * (n - 2)
    assert h.trainable_parameter_count < h.parameter_count
    assert h.trainable_parameter_count == sum(r["parameters"] for r in rows if not r["frozen"])
    assert rows[-1]["name"] == "head"
    md.freeze_prefix(h, 0)
    assert h.trainable_parameter_count == h.parameter_count


def test_freeze_out_of_range():
    h = toy()
    with pytest.raises(PrefixOutOfRange):
        md.freeze_prefix(h, h.layer_count + 1)
    with pytest.raises(PrefixOutOfRange):
        md.freeze_prefix(h, -1)


def test_full_freeze_step_changes_nothing():
    h = toy()
    md.freeze_prefix(h, h.layer_count)
    assert h.trainable_parameter_count == 0
    before = [p.detach().clone() for p in h.module.parameters()]
    all_params = list(h.module.parameters())
    opt = torch.optim.AdamW(all_params, lr=0.1)
    h.module.train()
    loss = -h.module(torch.from_numpy(batch(4)).permute(0, 3, 1, 2))[:, 1].mean()
    assert not loss.requires_grad
    opt.step()
    for p, q in zip(before, h.module.parameters()):
        assert torch.equal(p, q)


def test_mobilenet_ten_frozen_layers():
    h = md.build_model(ModelSpec("mobilenetv2_050", frozen_prefix=10), seed=0)
    assert h.frozen_prefix == 10
    assert h.trainable_parameter_count < h.parameter_count
    rows = h.describe()
    assert all(r["frozen"] for r in rows[:10]) and not any(r["frozen"] for r in rows[10:])
    check_logprob_contract(md.forward_logprobs(h, batch(2)))


@pytest.mark.slow
@pytest.mark.parametrize("arch", ["mobilenetv2_050", "mobilenetv2_100", "densenet121", "squeezenet1_0",
                                  "googlenet", "mobilevit_xs", "vit_tiny_r_s16_p8_224"])
def test_registry_architectures_build_offline(arch):
    h = md.build_model(ModelSpec(arch), seed=0)
    check_logprob_contract(md.forward_logprobs(h, batch(2)))


# --- ensemble ---

def test_ensemble_dimensional_bookkeeping():
    h = toy_ensemble(wa=8, wb=8)
    assert h.module.fc1.in_features == 16
    out = md.forward_logprobs(h, batch(3))
    assert out.shape == (3, 2)
    check_logprob_contract(out)
    h2 = toy_ensemble(wa=8, wb=12)
    assert h2.module.fc1.in_features == 20
    assert h2.module.fused_input(torch.zeros(1, 3, 224, 224)).shape == (1, 20)


def test_logit_concat_width():
    h = toy_ensemble("logit_concat")
    assert h.module.fc1.in_features == 4
    check_logprob_contract(md.forward_logprobs(h, batch(2)))


def test_ensemble_zero_fusion_uniform():
    h = md.zero_head(toy_ensemble())
    assert np.allclose(md.forward_logprobs(h, batch(4)), np.log(0.5), atol=1e-7)


def test_ensemble_all_trainable():
    h = toy_ensemble()
    assert h.trainable_parameter_count == h.parameter_count


def test_ensemble_gradient_reach():
    h = toy_ensemble()
    h.module.train()
    x = torch.from_numpy(batch(4, seed=5)).permute(0, 3, 1, 2)
    loss = F.nll_loss(h.module(x), torch.tensor([0, 1, 1, 0]))
    loss.backward()
    for part in (h.module.backbone_a, h.module.backbone_b, h.module.fc1):
        norm = torch.sqrt(sum((p.grad ** 2).sum() for p in part.parameters()))
        assert norm > 0


def test_ensemble_fd_gradient_check():
    h = toy_ensemble()
    m = h.module.double().eval()
    x = torch.from_numpy(batch(3, seed=9)).permute(0, 3, 1, 2).double()
    y = torch.tensor([1, 0, 1])

    def loss_fn():
        return F.nll_loss(m(x), y)

    m.zero_grad()
    loss_fn().backward()
    analytic = m.fc1.weight.grad.clone()
    rng = np.random.default_rng(0)
    flat = m.fc1.weight.data.view(-1)
    eps = 1e-6
    for idx in rng.choice(flat.numel(), size=10, replace=False):
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + eps
            up = loss_fn().item()
            flat[idx] = orig - eps
            down = loss_fn().item()
            flat[idx] = orig
        fd = (up - down) / (2 * eps)
        a = analytic.view(-1)[idx].item()
        assert abs(fd - a) <= 1e-3 * max(abs(fd), abs(a), 1e-8)


def test_ensemble_is_not_averaging():
    # members with their own heads; fc1 built from half of each head so the
    # ensemble logits are the mean of the member logits
    torch.manual_seed(0)
    ha, hb = toy(8), md.build_model(ModelSpec("toy_cnn", toy_width=8), seed=1)
    with torch.no_grad():
        hb.module.head.weight.mul_(5.0)
    ens = md.ParallelEnsembleModel(ha.module.backbone, 8, hb.module.backbone, 8).eval()
    with torch.no_grad():
        ens.fc1.weight.copy_(torch.cat([ha.module.head.weight, hb.module.head.weight], dim=1) / 2)
        ens.fc1.bias.copy_((ha.module.head.bias + hb.module.head.bias) / 2)
    x = torch.from_numpy(batch(4, seed=2)).permute(0, 3, 1, 2)
    with torch.no_grad():
        pa, pb = ha.module(x).exp(), hb.module(x).exp()
        pe = ens(x).exp()
    assert not torch.allclose(pa, pb, atol=1e-3)
    assert not torch.allclose(pe, (pa + pb) / 2, atol=1e-4)


# --- checkpoints ---

@pytest.mark.parametrize("make", [lambda: toy(frozen_prefix=2), lambda: toy_ensemble("logit_concat")])
def test_checkpoint_roundtrip(tmp_path, make):
    h = make()
    x = batch(3, seed=4)
    before = md.forward_logprobs(h, x)
    md.save_checkpoint(h, tmp_path / "c.pt", {"epoch": 3})
    back, meta = md.load_checkpoint(tmp_path / "c.pt")
    assert meta == {"epoch": 3}
    assert back.spec == h.spec and back.frozen_prefix == h.frozen_prefix
    assert back.trainable_parameter_count == h.trainable_parameter_count
    assert np.array_equal(md.forward_logprobs(back, x), before)


def test_checkpoint_bytes_deterministic(tmp_path):
    md.save_checkpoint(toy(), tmp_path / "a.pt", {"k": 1})
    md.save_checkpoint(toy(), tmp_path / "b.pt", {"k": 1})
    assert (tmp_path / "a.pt").read_bytes() == (tmp_path / "b.pt").read_bytes()


def test_spec_json_roundtrip():
    for spec in (ModelSpec("toy_cnn", frozen_prefix=1), ParallelEnsembleSpec()):
        assert md.spec_from_json(spec.to_json()) == spec
