"""Contrastive losses, momentum updates, the key queue, and the four frameworks."""

import collections
import math

import pytest
import torch
from torch import nn

from vidssl import (
    EncoderConfig,
    FrameworkConfig,
    MoCoQueue,
    build_model,
    cosine_sim,
    infonce_loss,
    make_framework,
    momentum_update,
    negative_cosine_loss,
    queue_push,
)
from vidssl.contrastive import FRAMEWORK_KINDS, SimCLRFramework
from vidssl.errors import ConfigError, ContractError
from vidssl.seeding import torch_generator

TINY = EncoderConfig(channel_widths=(2, 2, 2, 4), clip_length=8, crop_size=8, feature_dim=8,
                     projector_hidden=8, projector_out=4, predictor_hidden=4)


def tiny_model(with_predictor: bool = True, seed: int = 0):
    return build_model(TINY, n_spatial=5, n_temporal=5, n_playback=2, with_predictor=with_predictor, seed=seed)


def clips(n: int, seed: int = 0) -> torch.Tensor:
    gen = torch_generator(seed, "fw-clips")
    return torch.rand((n, 3, TINY.clip_length, TINY.crop_size, TINY.crop_size), generator=gen)


def unit_rows(n: int, d: int, seed: int = 0) -> torch.Tensor:
    gen = torch_generator(seed, "unit")
    x = torch.randn((n, d), generator=gen, dtype=torch.float64)
    return x / x.norm(dim=1, keepdim=True)


# ---------------------------------------------------------------- cosine


def test_cosine_sim_basics():
    x = torch.tensor([1.0, 2.0, 3.0])
    assert float(cosine_sim(x, x)) == pytest.approx(1.0, abs=1e-6)
    assert float(cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))) == pytest.approx(0.0, abs=1e-7)
    assert float(cosine_sim(2.0 * x, -3.0 * x)) == pytest.approx(-1.0, abs=1e-6)


def test_cosine_sim_rejects_bad_input():
    with pytest.raises(ContractError):
        cosine_sim(torch.zeros(3), torch.ones(3))
    with pytest.raises(ContractError):
        cosine_sim(torch.ones(3), torch.ones(4))
    with pytest.raises(ContractError):
        cosine_sim(torch.ones(2, 3), torch.ones(2, 3))


# ---------------------------------------------------------------- infonce


def test_infonce_two_orthogonal_pairs_is_log3():
    z = torch.eye(4)[:2]
    z_pos = torch.eye(4)[2:]
    loss = infonce_loss(z, z_pos)
    assert float(loss) == pytest.approx(math.log(3.0), abs=1e-6)


def test_infonce_explicit_negatives_closed_form():
    # aligned positive, three orthogonal negatives: -log(e / (e + 3))
    z = torch.eye(4)[:1]
    negatives = torch.eye(4)[1:]
    loss = infonce_loss(z, z.clone(), negatives=negatives)
    assert float(loss) == pytest.approx(math.log((math.e + 3.0) / math.e), abs=1e-6)
    assert float(loss) == pytest.approx(0.743668, abs=1e-5)


def _brute_force_infonce(z, z_pos, negatives=None, alpha=1.0):
    q = z / z.norm(dim=1, keepdim=True)
    p = z_pos / z_pos.norm(dim=1, keepdim=True)
    n = q.shape[0]
    losses = []
    for i in range(n):
        logits = [float(q[i] @ p[i]) / alpha]
        if negatives is None:
            for j in range(n):
                if j != i:
                    logits.append(float(q[i] @ q[j]) / alpha)
                    logits.append(float(q[i] @ p[j]) / alpha)
        else:
            bank = negatives / negatives.norm(dim=1, keepdim=True)
            logits.extend(float(q[i] @ row) / alpha for row in bank)
        top = max(logits)
        losses.append(-(logits[0] - top - math.log(sum(math.exp(v - top) for v in logits))))
    return sum(losses) / n


def test_infonce_matches_brute_force_enumeration():
    gen = torch_generator(11, "infonce")
    for trial in range(100):
        n = 2 + trial % 4
        d = 2 + trial % 7
        alpha = (0.5, 1.0, 2.0)[trial % 3]
        z = torch.randn((n, d), generator=gen, dtype=torch.float64)
        z_pos = torch.randn((n, d), generator=gen, dtype=torch.float64)
        got = float(infonce_loss(z, z_pos, alpha=alpha))
        assert got == pytest.approx(_brute_force_infonce(z, z_pos, alpha=alpha), abs=1e-6)
        bank = torch.randn((5, d), generator=gen, dtype=torch.float64)
        got_bank = float(infonce_loss(z, z_pos, negatives=bank, alpha=alpha))
        assert got_bank == pytest.approx(_brute_force_infonce(z, z_pos, bank, alpha), abs=1e-6)


def test_infonce_empty_bank_gives_zero_loss():
    z = unit_rows(3, 4).float()
    assert float(infonce_loss(z, z.clone(), negatives=torch.empty(0, 4))) == 0.0


def test_infonce_input_validation():
    z = unit_rows(2, 4).float()
    with pytest.raises(ContractError):
        infonce_loss(z[:1], z[:1].clone())  # in-batch negatives need N >= 2
    with pytest.raises(ContractError):
        infonce_loss(z, z[:1])
    with pytest.raises(ConfigError):
        infonce_loss(z, z.clone(), alpha=0.0)
    with pytest.raises(ContractError):
        infonce_loss(torch.zeros(2, 4), z)


def test_negative_cosine_loss_endpoints():
    q = unit_rows(4, 6).float()
    assert float(negative_cosine_loss(q, q.clone())) == pytest.approx(-1.0, abs=1e-6)
    assert float(negative_cosine_loss(q, -q)) == pytest.approx(1.0, abs=1e-6)
    a = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    b = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    assert float(negative_cosine_loss(a, b)) == pytest.approx(0.0, abs=1e-7)
    with pytest.raises(ContractError):
        negative_cosine_loss(q, q[:2])


# ---------------------------------------------------------------- momentum


def test_momentum_update_follows_exponential_law():
    gen = torch_generator(3, "ema")
    theta = [torch.randn(4, 5, generator=gen, dtype=torch.float64)]
    xi = [torch.randn(4, 5, generator=gen, dtype=torch.float64)]
    gap0 = float((xi[0] - theta[0]).norm())
    m = 0.998
    for k in range(1, 101):
        momentum_update(theta, xi, m)
        gap = float((xi[0] - theta[0]).norm())
        assert gap == pytest.approx(m**k * gap0, rel=1e-6)


def test_momentum_update_endpoints_and_modules():
    online = nn.Linear(3, 2)
    target = nn.Linear(3, 2)
    before = [p.clone() for p in target.parameters()]
    momentum_update(online, target, 1.0)  # m=1: frozen target
    for b, p in zip(before, target.parameters()):
        assert torch.equal(b, p)
    momentum_update(online, target, 0.0)  # m=0: copy online
    for po, pt in zip(online.parameters(), target.parameters()):
        assert torch.allclose(po, pt)


def test_momentum_update_structure_errors():
    with pytest.raises(ContractError):
        momentum_update(nn.Linear(3, 2), nn.Linear(4, 2), 0.9)
    with pytest.raises(ContractError):
        momentum_update([torch.zeros(2)], [torch.zeros(2), torch.zeros(2)], 0.9)
    with pytest.raises(ContractError):
        momentum_update(nn.Linear(3, 2), [torch.zeros(2)], 0.9)
    with pytest.raises(ConfigError):
        momentum_update([torch.zeros(2)], [torch.zeros(2)], 1.5)


# ---------------------------------------------------------------- queue


def test_queue_matches_deque_oracle():
    queue = MoCoQueue.create(capacity=8, dim=3)
    assert queue.contents().shape == (0, 3)
    oracle: collections.deque = collections.deque(maxlen=8)
    for push in range(6):
        keys = unit_rows(4, 3, seed=push).float()
        queue_push(queue, keys)
        oracle.extend(k.clone() for k in keys)
        expected = torch.stack(list(oracle))
        assert torch.allclose(queue.contents(), expected, atol=0)


def test_queue_push_validation():
    queue = MoCoQueue.create(capacity=8, dim=3)
    with pytest.raises(ContractError):
        queue_push(queue, torch.full((4, 3), 0.5))  # not unit norm
    with pytest.raises(ContractError):
        queue_push(queue, unit_rows(4, 2).float())  # wrong width
    with pytest.raises(ConfigError):
        queue_push(queue, unit_rows(3, 3).float())  # 3 does not divide 8


# ---------------------------------------------------------------- frameworks


def test_framework_config_validation():
    with pytest.raises(ConfigError):
        FrameworkConfig(framework="mocov3").validate()
    with pytest.raises(ConfigError):
        FrameworkConfig(temperature=0.0).validate()
    with pytest.raises(ConfigError):
        FrameworkConfig(momentum_m=1.5).validate()
    with pytest.raises(ConfigError):
        FrameworkConfig(queue_size=0).validate()
    with pytest.raises(ConfigError):
        FrameworkConfig(framework="moco", queue_size=100).validate(batch_size=16)
    FrameworkConfig(framework="moco", queue_size=96).validate(batch_size=16)


def test_make_framework_kinds_and_mismatch():
    for kind in FRAMEWORK_KINDS:
        fw = make_framework(FrameworkConfig(framework=kind))
        assert fw.kind == kind
    with pytest.raises(ContractError):
        SimCLRFramework(FrameworkConfig(framework="moco"))


def _attach(kind: str, seed: int = 0):
    fw = make_framework(FrameworkConfig(framework=kind, queue_size=8))
    model = tiny_model(with_predictor=fw.needs_predictor, seed=seed)
    fw.attach(model, seed=seed)
    return model, fw


def _loss_of(model, fw, seed=0):
    a, b = clips(2, seed=seed), clips(2, seed=seed + 1)
    return fw.contrastive_loss(model, model.encode(a), model.encode(b), a, b)


@pytest.mark.parametrize("kind", FRAMEWORK_KINDS)
def test_framework_loss_is_finite_and_backpropagates(kind):
    model, fw = _attach(kind)
    loss = _loss_of(model, fw)
    assert torch.isfinite(loss)
    loss.backward()
    assert any(p.grad is not None and torch.isfinite(p.grad).all() for p in model.encoder.parameters())
    fw.post_step(model)


@pytest.mark.parametrize("kind", ["moco", "byol"])
def test_momentum_branch_never_receives_gradients(kind):
    model, fw = _attach(kind)
    loss = _loss_of(model, fw)
    loss.backward()
    momentum_params = list(fw.momentum_encoder.parameters()) + list(fw.momentum_projector.parameters())
    assert momentum_params
    for p in momentum_params:
        assert not p.requires_grad
        assert p.grad is None


@pytest.mark.parametrize("kind", ["moco", "byol"])
def test_momentum_branch_starts_as_copy_and_tracks_updates(kind):
    model, fw = _attach(kind)
    for po, pm in zip(model.encoder.parameters(), fw.momentum_encoder.parameters()):
        assert torch.equal(po, pm)
    snapshot = [pm.clone() for pm in fw.momentum_encoder.parameters()]
    with torch.no_grad():
        for p in model.encoder.parameters():
            p.add_(1.0)
    if kind == "moco":
        fw._pending_keys = None
    fw.post_step(model)
    m = fw.cfg.momentum_m
    for old, po, pm in zip(snapshot, model.encoder.parameters(), fw.momentum_encoder.parameters()):
        assert torch.allclose(pm, m * old + (1 - m) * po, atol=1e-6)


def test_moco_queue_lifecycle():
    model, fw = _attach("moco")
    assert fw.queue.contents().shape == (0, TINY.projector_out)
    first = _loss_of(model, fw)
    assert float(first.detach()) == 0.0  # empty bank: only the positive logit
    first.backward()
    fw.post_step(model)
    assert fw.queue.fill == 2
    second = _loss_of(model, fw, seed=5)
    assert float(second.detach()) > 0.0


def test_simsiam_target_branch_is_stopped():
    model, fw = _attach("simsiam")
    a, b = clips(2), clips(2, seed=1)
    params = [p for p in model.parameters() if p.requires_grad]

    loss = fw.contrastive_loss(model, model.encode(a), model.encode(b), a, b)
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    with torch.no_grad():
        frozen_target = model.project(model.encode(b))
    manual = negative_cosine_loss(model.predict_latent(model.project(model.encode(a))), frozen_target)
    manual_grads = torch.autograd.grad(manual, params, allow_unused=True)

    for g1, g2 in zip(grads, manual_grads):
        if g1 is None or g2 is None:
            assert (g1 is None) == (g2 is None)
        else:
            assert torch.allclose(g1, g2, atol=1e-7)


@pytest.mark.parametrize("kind", ["byol", "simsiam"])
def test_symmetrized_loss_averages_both_directions(kind):
    plain_model, plain = _attach(kind, seed=4)
    sym = make_framework(FrameworkConfig(framework=kind, queue_size=8, symmetrize_byol=True))
    sym_model = tiny_model(with_predictor=sym.needs_predictor, seed=4)
    sym.attach(sym_model, seed=4)

    a, b = clips(2, seed=7), clips(2, seed=8)
    with torch.no_grad():
        ab = plain.contrastive_loss(plain_model, plain_model.encode(a), plain_model.encode(b), a, b)
        ba = plain.contrastive_loss(plain_model, plain_model.encode(b), plain_model.encode(a), b, a)
        both = sym.contrastive_loss(sym_model, sym_model.encode(a), sym_model.encode(b), a, b)
    assert float(both) == pytest.approx(0.5 * (float(ab) + float(ba)), abs=1e-6)


def test_moco_state_roundtrip():
    model, fw = _attach("moco")
    loss = _loss_of(model, fw)
    loss.backward()
    fw.post_step(model)
    state = fw.state_dict()

    other = make_framework(FrameworkConfig(framework="moco", queue_size=8))
    other_model = tiny_model(with_predictor=False, seed=9)
    other.attach(other_model, seed=9)
    other.load_state_dict(state)
    assert torch.equal(other.queue.contents(), fw.queue.contents())
    for pa, pb in zip(fw.momentum_encoder.parameters(), other.momentum_encoder.parameters()):
        assert torch.equal(pa, pb)
