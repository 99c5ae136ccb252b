import numpy as np
import pytest
import torch

from pignight.network import (
    ArchDescriptor, BranchPair, build_network, count_parameters, ema_update, forward, image_to_tensor,
    init_model, load_checkpoint, model_from_state, model_state, save_checkpoint,
)
import oracles

SMALL = ArchDescriptor(num_classes=8, widths=(4, 8, 8), decoder_width=4)


def _params(net):
    return [p.detach().clone() for p in net.parameters()]


def test_forward_shape_and_simplex(rng):
    net = build_network(SMALL, seed=0)
    out = forward(net, rng.random((64, 64, 3)))
    assert out.shape == (8, 64, 64)
    assert np.allclose(out.sum(axis=0), 1.0, atol=1e-5)
    assert out.min() >= 0


@pytest.mark.parametrize("whitening", ["instance", "fixed"])
def test_zero_head_is_uniform(rng, whitening):
    arch = ArchDescriptor(num_classes=8, widths=(4, 4, 4), decoder_width=4, whitening=whitening)
    out = forward(build_network(arch, seed=3, zero_head=True), rng.random((16, 16, 3)))
    assert np.allclose(out, 1 / 8, atol=1e-7)


def test_extent_must_divide(rng):
    with pytest.raises(ValueError, match="divisible"):
        forward(build_network(SMALL, 0), rng.random((12, 16, 3)))
    with pytest.raises(ValueError):
        forward(build_network(SMALL, 0), rng.random((2, 16, 16, 3)))


def test_forward_deterministic(rng):
    net = build_network(SMALL, 0)
    x = rng.random((16, 16, 3))
    assert np.array_equal(forward(net, x), forward(net, x))


def test_init_teacher_copies_student():
    model = init_model(SMALL, seed=5)
    for pair in model.pairs().values():
        for s, t in zip(pair.student.parameters(), pair.teacher.parameters()):
            assert torch.equal(s, t)
            assert not t.requires_grad


def test_branches_independent_and_seeded():
    a, b = init_model(SMALL, seed=1), init_model(SMALL, seed=2)
    assert not torch.equal(a.uda.student.decoder["head"].weight, a.nfnet.student.decoder["head"].weight)
    assert not torch.equal(a.uda.student.decoder["head"].weight, b.uda.student.decoder["head"].weight)
    c = init_model(SMALL, seed=1)
    assert torch.equal(a.uda.student.decoder["head"].weight, c.uda.student.decoder["head"].weight)
    # disabling the night branch leaves the UDA initialization unchanged
    d = init_model(SMALL, seed=1, with_nfnet=False)
    assert d.nfnet is None
    assert torch.equal(a.uda.student.decoder["head"].weight, d.uda.student.decoder["head"].weight)


def test_shared_architecture_shapes(rng):
    model = init_model(SMALL, seed=0)
    x = image_to_tensor(rng.random((16, 16, 3)))
    assert model.uda.student(x).shape == model.nfnet.student(x).shape


def _pair(alpha, teacher_value=None, student_value=None):
    student = build_network(SMALL, 0)
    teacher = build_network(SMALL, 1)
    pair = BranchPair(student, teacher, alpha)
    with torch.no_grad():
        if teacher_value is not None:
            for p in pair.teacher.parameters():
                p.fill_(teacher_value)
        if student_value is not None:
            for p in pair.student.parameters():
                p.fill_(student_value)
    return pair


def test_ema_constant_example():
    pair = _pair(0.999, 1.0, 0.0)
    ema_update(pair)
    for p in pair.teacher.parameters():
        assert torch.allclose(p, torch.full_like(p, 0.999), atol=1e-6, rtol=0)


def test_ema_alpha_extremes():
    pair = _pair(1.0)
    before = _params(pair.teacher)
    ema_update(pair)
    assert all(torch.equal(a, b) for a, b in zip(before, pair.teacher.parameters()))
    pair = _pair(0.0)
    ema_update(pair)
    assert all(torch.equal(s, t) for s, t in zip(pair.student.parameters(), pair.teacher.parameters()))


def test_ema_closed_form_random_trajectory():
    pair = _pair(0.9)
    t0 = torch.cat([p.detach().double().flatten() for p in pair.teacher.parameters()]).tolist()
    gen = torch.Generator().manual_seed(0)
    students = []
    for _ in range(50):
        with torch.no_grad():
            for p in pair.student.parameters():
                p.copy_(torch.randn(p.shape, generator=gen))
        students.append(torch.cat([p.detach().double().flatten() for p in pair.student.parameters()]).tolist())
        ema_update(pair)
    expected = oracles.ema_closed_form(t0, students, 0.9)[-1]
    got = torch.cat([p.detach().double().flatten() for p in pair.teacher.parameters()])
    assert float((got - torch.tensor(expected)).abs().max()) < 1e-6


def test_ema_twice_equals_alpha_squared():
    a, b = _pair(0.8), _pair(0.8 ** 2)
    with torch.no_grad():
        for pa, pb in zip(a.teacher.parameters(), b.teacher.parameters()):
            pb.copy_(pa)
    ema_update(a)
    ema_update(a)
    ema_update(b)
    for pa, pb in zip(a.teacher.parameters(), b.teacher.parameters()):
        assert torch.allclose(pa, pb, atol=1e-6, rtol=0)


def test_ema_shape_mismatch():
    pair = _pair(0.9)
    pair.teacher = build_network(ArchDescriptor(num_classes=4, widths=(4, 8, 8), decoder_width=4), 0)
    with pytest.raises(ValueError, match="shape mismatch"):
        ema_update(pair)


def test_pair_rejects_different_arch():
    with pytest.raises(ValueError):
        BranchPair(build_network(SMALL, 0), build_network(ArchDescriptor(num_classes=3), 0))


def test_teacher_gets_no_gradient(rng):
    model = init_model(SMALL, seed=0)
    x = image_to_tensor(rng.random((16, 16, 3)))
    loss = sum(pair.student(x).pow(2).sum() + pair.teacher(x).pow(2).sum() for pair in model.pairs().values())
    loss.backward()
    for pair in model.pairs().values():
        assert all(p.grad is None and not p.requires_grad for p in pair.teacher.parameters())
        assert any(p.grad is not None for p in pair.student.parameters())


def test_checkpoint_round_trip(tmp_path):
    model = init_model(SMALL, seed=9, alpha_uda=0.9, alpha_nf=0.8)
    save_checkpoint(tmp_path / "m.pt", model_state(model))
    restored = model_from_state(load_checkpoint(tmp_path / "m.pt"))
    assert restored.arch == SMALL
    assert ArchDescriptor.from_dict(SMALL.to_dict()) == SMALL
    assert restored.uda.alpha == 0.9 and restored.nfnet.alpha == 0.8
    for name, pair in model.pairs().items():
        other = restored.pairs()[name]
        for a, b in zip(pair.student.state_dict().values(), other.student.state_dict().values()):
            assert torch.equal(a, b)
        for a, b in zip(pair.teacher.state_dict().values(), other.teacher.state_dict().values()):
            assert torch.equal(a, b)


def test_checkpoint_format_tag(tmp_path):
    torch.save({"format": "something-else"}, tmp_path / "bad.pt")
    with pytest.raises(ValueError, match="unsupported checkpoint format"):
        load_checkpoint(tmp_path / "bad.pt")


def test_parameter_count_default():
    assert count_parameters(build_network(ArchDescriptor(), 0)) > 10_000
