import numpy as np
import pytest
import torch

from roadgraph.encoder import (
    EncoderConfig,
    GraphEncoder,
    encode,
    extract_peaks,
    pairwise_roi,
    relation_scores,
    soft_argmax,
    spatial_softmax,
    smooth_maps,
)

from gradcheck import fd_probe_errors

D = torch.float64


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(0)
    return GraphEncoder(EncoderConfig(k=5)).eval()


def test_soft_argmax_delta():
    m = torch.zeros(16, 20, dtype=D)
    m[3, 7] = 1
    assert soft_argmax(m).tolist() == pytest.approx([(7 + 0.5) / 20, (3 + 0.5) / 16])


def test_soft_argmax_uniform_is_centre():
    m = torch.full((12, 12), 1 / 144, dtype=D)
    assert soft_argmax(m).tolist() == pytest.approx([0.5, 0.5])


def test_soft_argmax_two_deltas_midpoint():
    m = torch.zeros(10, 10, dtype=D)
    m[4, 2] = m[4, 8] = 0.5
    assert soft_argmax(m).tolist() == pytest.approx([0.55, 0.45])


def test_soft_argmax_rejects_zero_map():
    with pytest.raises(ValueError):
        soft_argmax(torch.zeros(4, 4))


def test_soft_argmax_gradient_matches_fd():
    rng = np.random.default_rng(0)
    m = torch.as_tensor(rng.random((24, 24)) + 0.01, dtype=D)
    m = m / m.sum()
    w = torch.tensor([0.7, -1.3], dtype=D)
    errs = fd_probe_errors(lambda x: (soft_argmax(x) * w).sum(), m, rng.choice(m.numel(), 10, replace=False), h=1e-6)
    assert errs.max() <= 1e-3


def test_spatial_softmax_sums_to_one():
    maps = spatial_softmax(torch.randn(2, 3, 16, 16))
    assert torch.allclose(maps.sum((-2, -1)), torch.ones(2, 3), atol=1e-5)


def test_teacher_maps_normalized(encoder):
    x = torch.zeros(2, 1, 128, 128)
    x[0, 0, 64, 10:100] = 1
    maps = encoder.teacher_attend(x)
    assert maps.shape == (2, 5, 128, 128)
    assert torch.allclose(maps.sum((-2, -1)), torch.ones(2, 5), atol=1e-5)
    assert (maps >= 0).all()


def test_size_mismatch_rejected(encoder):
    with pytest.raises(ValueError):
        encoder.teacher_attend(torch.zeros(1, 1, 64, 64))
    with pytest.raises(ValueError):
        encoder.student_attend(torch.zeros(1, 1, 100, 128))


def test_student_map_in_unit_interval(encoder):
    s = encoder.student_attend(torch.rand(1, 1, 128, 128).round())
    assert s.shape == (1, 1, 128, 128)
    assert s.min() >= 0 and s.max() <= 1


def gaussian(h, w, cy, cx, sigma=2.0):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))


def test_peaks_two_gaussians():
    hm = np.maximum(gaussian(64, 64, 30, 20), 0.9 * gaussian(64, 64, 30, 40))
    peaks = extract_peaks(hm, 0.3, 5)
    assert len(peaks) == 2
    px = sorted((x * 64 - 0.5, y * 64 - 0.5) for x, y in peaks)
    assert px[0] == pytest.approx((20, 30), abs=1) and px[1] == pytest.approx((40, 30), abs=1)


def test_peaks_empty_map():
    assert extract_peaks(np.zeros((32, 32)), 0.3, 6) == []


def test_peaks_plateau_tie_break():
    hm = np.zeros((32, 32))
    hm[10, 10:13] = 0.8
    hm[11, 10] = 0.8
    peaks = extract_peaks(hm, 0.3, 6)
    assert peaks == [((10 + 0.5) / 32, (10 + 0.5) / 32)]


def test_peaks_order_descending_score():
    hm = 0.5 * gaussian(64, 64, 10, 10) + 0.9 * gaussian(64, 64, 50, 50) + 0.7 * gaussian(64, 64, 10, 50)
    peaks = extract_peaks(hm, 0.3, 6)
    assert [tuple(round(v * 64 - 0.5) for v in p) for p in peaks] == [(50, 50), (50, 10), (10, 10)]


def test_roi_shape_and_degenerate_pair():
    img = torch.rand(1, 1, 128, 128)
    a = torch.tensor([[0.5, 0.5]])
    patch = pairwise_roi(img, a, a.clone())
    assert patch.shape == (1, 1, 8, 32)
    assert torch.isfinite(patch).all()


def test_roi_samples_along_the_segment():
    img = torch.zeros(1, 1, 128, 128)
    img[0, 0, 64, :] = 1  # horizontal road through row 64 (y = 64.5 px)
    a, b = torch.tensor([[0.2, 64.5 / 128]]), torch.tensor([[0.8, 64.5 / 128]])
    patch = pairwise_roi(img, a, b)[0, 0]
    # corridor centre lies between patch rows 3 and 4
    assert patch[3:5].mean() > 0.4
    assert patch[0].max() == 0 and patch[-1].max() == 0


def test_roi_gradient_matches_fd():
    rng = np.random.default_rng(1)
    yy, xx = np.mgrid[0:128, 0:128] / 128
    smooth = sum(np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 0.01) for cx, cy in rng.random((6, 2)))
    img = torch.as_tensor(smooth, dtype=D)[None, None]
    weights = torch.as_tensor(rng.random((8, 32)), dtype=D)
    errs = []
    for _ in range(10):
        ab = torch.as_tensor(rng.uniform(0.2, 0.8, (2, 2)), dtype=D)
        errs.extend(fd_probe_errors(lambda p: (pairwise_roi(img, p[:1], p[1:])[0, 0] * weights).sum(), ab, [int(rng.integers(4))]))
    assert max(errs) <= 1e-2


def test_relation_scores_symmetric_exactly(encoder):
    img = torch.zeros(1, 1, 128, 128)
    img[0, 0, 20:100, 64] = 1
    nodes = torch.rand(1, 5, 2)
    adj = relation_scores(img, nodes, encoder.relation)
    assert torch.equal(adj, adj.transpose(1, 2))
    assert not torch.diagonal(adj, dim1=1, dim2=2).any()
    perm = torch.tensor([3, 1, 4, 0, 2])
    adj_p = relation_scores(img, nodes[:, perm], encoder.relation)
    assert torch.equal(adj_p, adj[:, perm][:, :, perm])


def test_encode_teacher_has_k_nodes(encoder):
    img = np.zeros((128, 128), dtype=np.float32)
    img[64, 10:110] = 1
    g = encode(img, encoder, "teacher")
    assert g.num_nodes == 5
    g.validate(atol=1e-6)


def test_encode_student_blank_is_empty(encoder):
    g = encode(np.zeros((128, 128), dtype=np.float32), encoder, "student")
    assert g.num_nodes == 0


def test_encode_flags_untrained(encoder):
    from roadgraph.encoder import UntrainedModelError

    with pytest.raises(UntrainedModelError):
        encode(np.zeros((128, 128), dtype=np.float32), encoder, "student", require_trained=True)
    with pytest.raises(ValueError):
        encode(np.zeros((128, 128), dtype=np.float32), encoder, "bogus")


def test_architecture_hash_is_stable():
    assert GraphEncoder().architecture_hash() == GraphEncoder().architecture_hash()
    assert GraphEncoder(EncoderConfig(k=5)).architecture_hash() != GraphEncoder().architecture_hash()


def test_road_degree_marks_ends_and_junctions():
    from roadgraph.encoder import road_degree

    img = torch.zeros(1, 1, 9, 9)
    img[0, 0, 4, 1:8] = 1
    img[0, 0, 1:4, 4] = 1  # T junction at (4, 4)
    d = road_degree(img)[0, 0] * 8
    assert d[4, 1] == 1 and d[1, 4] == 1 and d[4, 7] == 1
    assert d[4, 4] == 3 and d[4, 2] == 2
    assert d[0, 0] == 0 and d[5, 4] == 0  # background stays zero even next to roads


def test_smooth_maps_keeps_mass_and_interior_centroid():
    logits = torch.randn(2, 3, 32, 32)
    logits[..., :4, :] = -50
    logits[..., -4:, :] = -50
    logits[..., :, :4] = -50
    logits[..., :, -4:] = -50
    maps = spatial_softmax(logits, 1.0)
    smooth = smooth_maps(maps, 1.0)
    assert torch.allclose(smooth.sum(dim=(-2, -1)), torch.ones(2, 3), atol=1e-5)
    assert torch.allclose(soft_argmax(smooth), soft_argmax(maps), atol=1e-5)
    # a single-pixel peak spreads to its neighbours
    delta = torch.zeros(1, 1, 16, 16)
    delta[..., 8, 8] = 1
    out = smooth_maps(delta, 1.0)
    assert out[0, 0, 8, 9] / out[0, 0, 8, 8] == pytest.approx(np.exp(-0.5), rel=1e-4)
    assert smooth_maps(delta, 0.0) is delta


def test_road_bend_is_zero_on_straight_roads_and_peaks_at_bends():
    from roadgraph.encoder import road_bend
    img = torch.zeros(1, 1, 40, 40)
    img[0, 0, 20, 5:35] = 1
    b = road_bend(img)[0, 0]
    assert b[20, 12:28].abs().max() < 1e-6
    assert b[20, 5] > 0.5 and b[0, 0] == 0
    bent = torch.zeros(1, 1, 40, 40)
    bent[0, 0, 20, 5:21] = 1
    bent[0, 0, 5:21, 20] = 1  # right-angle bend at (20, 20)
    c = road_bend(bent)[0, 0]
    assert c[20, 20] == pytest.approx(0.58 * np.sin(np.pi / 4), abs=0.05)
    assert c[20, 20] == c[8:33, 8:33].max()
