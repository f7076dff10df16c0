import numpy as np
import pytest
import torch

from motionseg.nets import (ROLES, ArchConfigError, ArchSpec, CheckpointError, ShapeError, checksum, combined_score,
                            default_arch, discriminate, generate, init_params, load_checkpoint, save_checkpoint,
                            segment)


@pytest.mark.parametrize("role", ROLES)
def test_output_shapes_and_range(role):
    spec = default_arch(role, image_size=32, base_channels=4, noise_size=5)
    net = init_params(spec, 0)
    n = 2
    if role == "generator":
        out = net(torch.rand(n, 1, 32, 32), torch.randn(n, 5))
    else:
        out = net(torch.rand(n, spec.input_channels, 32, 32))
    want = {"disc_global": (n,), "disc_patch": (n, 4, 4)}.get(role, (n, *spec.output_shape))
    assert tuple(out.shape) == want
    if role != "generator":
        assert out.min() > 0 and out.max() < 1


def test_encoder_depths():
    assert default_arch("teacher_segmenter").encoder_depth == 5
    assert default_arch("proxy").encoder_depth == 6
    assert default_arch("student").encoder_depth == 10

    def convs(net):
        return sum(isinstance(m, torch.nn.Conv2d) for m in net.net.down.modules())

    assert convs(init_params(default_arch("student", base_channels=4), 0)) == 10


def test_init_is_seeded():
    spec = default_arch("proxy", 32, 4)
    assert checksum(init_params(spec, 1)) == checksum(init_params(spec, 1))
    assert checksum(init_params(spec, 1)) != checksum(init_params(spec, 2))


def test_init_leaves_global_rng_alone():
    torch.manual_seed(123)
    a = torch.rand(1)
    torch.manual_seed(123)
    init_params(default_arch("student", 32, 4), 9)
    assert torch.rand(1) == a


def test_generator_uses_noise_and_mask():
    net = init_params(default_arch("generator", 32, 4, noise_size=3), 0)
    m = np.zeros((32, 32))
    m[8:20, 8:20] = 1
    a = generate(net, m, [0.0, 0.0, 0.0])
    assert a.shape == (32, 32, 2)
    assert not np.allclose(a, generate(net, m, [1.0, -1.0, 2.0]))
    assert not np.allclose(a, generate(net, np.zeros((32, 32)), [0.0, 0.0, 0.0]))
    with pytest.raises(ShapeError):
        generate(net, m, [0.0])


def test_segment_and_discriminate_numpy():
    seg = init_params(default_arch("proxy", 32, 4), 0)
    x = np.random.default_rng(0).random((3, 32, 32, 3))
    p = segment(seg, x)
    assert p.shape == (3, 32, 32)
    np.testing.assert_allclose(segment(seg, x[1]), p[1], atol=1e-6)
    np.testing.assert_allclose(segment(seg, x, batch_size=1), p, atol=1e-6)
    with pytest.raises(ShapeError):
        segment(seg, x[..., :2])
    dg = init_params(default_arch("disc_global", 32, 4), 0)
    dp = init_params(default_arch("disc_patch", 32, 4), 1)
    g, pm = discriminate(dg, dp, np.zeros((2, 32, 32, 2)))
    assert g.shape == (2,) and pm.shape == (2, 4, 4)


def test_combined_score():
    g = torch.tensor([0.2, 1.0])
    p = torch.tensor([[[0.4, 0.4], [0.4, 0.4]], [[0.0, 1.0], [0.0, 1.0]]])
    assert combined_score(g, p).tolist() == pytest.approx([0.3, 0.75])


def test_checkpoint_roundtrip(tmp_path):
    net = init_params(default_arch("teacher_segmenter", 32, 4), 5)
    with torch.no_grad():
        next(net.parameters()).add_(1.0)
    save_checkpoint(tmp_path / "t.ckpt", net, {"epoch": 3})
    back, extra = load_checkpoint(tmp_path / "t.ckpt")
    assert extra == {"epoch": 3}
    assert checksum(back) == checksum(net)
    assert back.spec == net.spec


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


@pytest.mark.parametrize("kw", [dict(role="nope"), dict(role="proxy", encoder_depth=2),
                                dict(role="proxy", image_size=36), dict(role="generator", input_channels=3, noise_size=4),
                                dict(role="disc_patch", image_size=48, patch_size=4)])
def test_arch_validation(kw):
    kw.setdefault("encoder_depth", 6)
    with pytest.raises(ArchConfigError):
        ArchSpec(**kw).validate()
