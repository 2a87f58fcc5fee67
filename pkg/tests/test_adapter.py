import numpy as np
import pytest
from hypothesis import given, strategies as st

from xctbench import autodiff as ad
from xctbench.adapter import (BACKBONE_BLOCKS, EMBED_BLOCKS, AdapterConfig, AdapterModel, BinaryDataset, ConvLoRA,
                              DegenerateClassError, FinetuneConfig, FrozenBackbone, boundary_weights,
                              count_trainable_fraction, finetune, structure_loss)
from xctbench.autodiff import grad_check


def _conv_same(x, w):
    # direct zero-padded cross-correlation, (n, cin, h, w) * (cout, cin, k, k)
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((x.shape[0], w.shape[0]) + x.shape[2:])
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + x.shape[2], j:j + x.shape[3]]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
    return out


def _branch_oracle(x, s, prefix, n, r):
    z = np.einsum("nchw,rc->nrhw", x, s[f"{prefix}.W_E"].value[:, :, 0, 0])
    logits = _conv_same(z, s[f"{prefix}.gate.w"].value) + s[f"{prefix}.gate.b"].value[None, :, None, None]
    g = np.exp(logits - logits.max(1, keepdims=True))
    g /= g.sum(1, keepdims=True)
    mixed = 0.0
    for i in range(n):
        w = s[f"{prefix}.expert{i}.w"].value
        dw = np.zeros((r, r, 3, 3))
        dw[np.arange(r), np.arange(r)] = w[:, 0]
        e = _conv_same(z, dw) + s[f"{prefix}.expert{i}.b"].value[None, :, None, None]
        mixed = mixed + g[:, i:i + 1] * e
    return np.einsum("nrhw,or->nohw", mixed, s[f"{prefix}.W_D"].value[:, :, 0, 0])


def _make_lora(n, r=2, cin=6, cout=5, seed=0, nonzero=True):
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    lora = ConvLoRA(store, "a", cin, cout, AdapterConfig(n_experts=n, rank=r, insertion_points=()), rng)
    if nonzero:
        store["a.W_D"].value[:] = rng.standard_normal(store["a.W_D"].shape)
        for i in range(n):
            store[f"a.expert{i}.b"].value[:] = rng.standard_normal(r)
    return store, lora


@pytest.mark.parametrize("seed", range(20))
def test_branch_matches_direct_oracle(seed):
    n = [1, 2, 8][seed % 3]
    store, lora = _make_lora(n, seed=seed)
    x = np.random.default_rng(seed + 100).standard_normal((2, 6, 5, 4))
    got = lora.branch(x).value
    ref = _branch_oracle(x, store, "a", n, 2)
    assert np.max(np.abs(got - ref)) <= 1e-6 * max(1.0, np.max(np.abs(ref)))


def test_single_expert_gate_is_noop():
    store, lora = _make_lora(1, seed=3)
    x = np.random.default_rng(0).standard_normal((1, 6, 4, 4))
    z = lora.branch(x).value
    # a single expert ignores its gate entirely
    store["a.gate.w"].value[:] = 123.0
    assert np.array_equal(lora.branch(x).value, z)
    w_e, w_d = store["a.W_E"].value[:, :, 0, 0], store["a.W_D"].value[:, :, 0, 0]
    e = np.zeros((2, 2, 3, 3))
    e[[0, 1], [0, 1]] = store["a.expert0.w"].value[:, 0]
    direct = np.einsum("nrhw,or->nohw", _conv_same(np.einsum("nchw,rc->nrhw", x, w_e), e)
                       + store["a.expert0.b"].value[None, :, None, None], w_d)
    assert np.allclose(z, direct, rtol=1e-10, atol=1e-12)


def test_default_config_has_eight_experts_and_one_gate():
    model = AdapterModel(FrozenBackbone(0))
    names = list(model.trainable)
    for block in model.cfg.insertion_points:
        lora = model.adapters[block]
        assert lora.n_experts == 8 and len(lora.expert_names()) == 8
        assert sum(n.startswith(f"adapter.{block}.gate.w") for n in names) == 1


@given(st.integers(0, 10_000))
def test_gate_weights_form_a_partition_of_unity(seed):
    store, lora = _make_lora(8, seed=seed % 50)
    z = np.random.default_rng(seed).standard_normal((1, 2, 4, 4)) * 3
    g = lora.gate_weights(z).value
    assert np.all(g >= 0) and np.allclose(g.sum(axis=1), 1.0)


def test_zero_init_output_equals_frozen_path_exactly():
    bb = FrozenBackbone(1)
    model = AdapterModel(bb, AdapterConfig(seed=5))
    x = np.random.default_rng(0).standard_normal((2, 1, 16, 16))
    frozen = model.forward(x, use_adapters=False).value
    assert np.array_equal(model.forward(x).value, frozen)
    # transparent regardless of the other adapter parameters
    for name in model.trainable:
        if name.startswith("adapter.") and not name.endswith("W_D"):
            model.trainable[name].value[:] = np.random.default_rng(1).standard_normal(model.trainable[name].shape)
    assert np.array_equal(model.forward(x).value, frozen)
    emb = bb.forward(x, model.adapters)
    emb_plain = bb.forward(x)
    for k in emb:
        assert np.array_equal(emb[k].value, emb_plain[k].value)


def test_head_output_is_probability():
    model = AdapterModel(FrozenBackbone(0))
    p = model.predict_proba(np.random.default_rng(0).standard_normal((3, 16, 16)) * 5)
    assert p.shape == (3, 16, 16) and np.all((p >= 0) & (p <= 1))


def test_backbone_rejects_bad_shape_and_config_errors():
    with pytest.raises(ad.ShapeError):
        FrozenBackbone(0).forward(np.zeros((1, 2, 8, 8)))
    with pytest.raises(ValueError):
        AdapterConfig(n_experts=0)
    with pytest.raises(ValueError):
        AdapterConfig(insertion_points=("nope",))
    with pytest.raises(ValueError):
        AdapterConfig(rank=30)


def _closed_form_counts(cfg, width=8):
    chans = {name: (cin, cout) for name, cin, cout, _ in BACKBONE_BLOCKS}
    frozen = sum(cout * cin * 9 + cout for cin, cout in chans.values()) + BACKBONE_BLOCKS[-1][2]
    r, n, k = cfg.rank, cfg.n_experts, cfg.conv_kernel
    tr = sum(r * chans[b][0] + n * (9 * r + r) + n * r * k * k + n + chans[b][1] * r for b in cfg.insertion_points)
    tr += sum(width * chans[b][1] + width for b in EMBED_BLOCKS) + width * width * 9 + width + width + 1
    return tr, frozen


@pytest.mark.parametrize("cfg", [AdapterConfig(), AdapterConfig(n_experts=1, rank=1, insertion_points=("stem",)),
                                 AdapterConfig(n_experts=3, rank=2, insertion_points=("b1", "b2", "b4"),
                                               conv_kernel=5)])
def test_trainable_fraction_closed_form(cfg):
    model = AdapterModel(FrozenBackbone(0), cfg)
    tr, frozen = _closed_form_counts(cfg)
    assert model.params.count(trainable=True) == tr
    assert count_trainable_fraction(model.params) == tr / (tr + frozen)


def test_trainable_fraction_edge_cases():
    assert count_trainable_fraction(FrozenBackbone(0).params) == 0.0
    assert count_trainable_fraction(AdapterModel(FrozenBackbone(0)).params) < 0.05
    with pytest.raises(ValueError):
        count_trainable_fraction(ad.ParamStore())


def _plain_bce_iou(p, g, smooth=1.0):
    total = 0.0
    for pi, gi in zip(p, g):
        bce = -np.mean(gi * np.log(pi) + (1 - gi) * np.log(1 - pi))
        inter, union = np.sum(pi * gi), np.sum(pi + gi)
        total += bce + 1 - (inter + smooth) / (union - inter + smooth)
    return total / len(p)


def _weights_oracle(g, lam, k):
    p = k // 2
    gp = np.pad(g, p)
    local = np.array([[gp[i:i + k, j:j + k].sum() / k ** 2 for j in range(g.shape[1])] for i in range(g.shape[0])])
    return 1 + lam * np.abs(local - g)


def _structure_oracle(p, g, lam, k, smooth=1.0):
    total = 0.0
    for pi, gi in zip(p, g):
        w = _weights_oracle(gi, lam, k)
        bce = -(gi * np.log(pi) + (1 - gi) * np.log(1 - pi))
        inter, union = np.sum(w * pi * gi), np.sum(w * (pi + gi))
        total += np.sum(w * bce) / w.sum() + 1 - (inter + smooth) / (union - inter + smooth)
    return total / len(p)


@pytest.mark.parametrize("seed", range(20))
def test_structure_loss_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.02, 0.98, (2, 9, 8))
    g = (rng.random((2, 9, 8)) > 0.6).astype(float)
    lam, k = float(rng.uniform(0, 6)), int(rng.choice([3, 5, 7]))
    got = structure_loss(p, g, lam, k).item()
    assert got == pytest.approx(_structure_oracle(p, g, lam, k), rel=1e-6)
    assert np.allclose(boundary_weights(g[0], lam, k), _weights_oracle(g[0], lam, k), rtol=1e-12)


def test_structure_loss_zero_lambda_is_plain():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.05, 0.95, (3, 1, 10, 10))
    g = (rng.random(p.shape) > 0.5).astype(float)
    assert structure_loss(p, g, lam=0.0).item() == pytest.approx(_plain_bce_iou(p[:, 0], g[:, 0]), rel=1e-10)


def test_structure_loss_near_perfect_prediction():
    eps = 1e-7
    rng = np.random.default_rng(2)
    g = (rng.random((2, 16, 16)) > 0.5).astype(float)
    loss = structure_loss(g, g, eps=eps).item()
    # the clamped ideal prediction leaves only the BCE floor plus a tiny IoU gap
    assert 0 <= loss <= 2 * eps * np.log(1 / eps) + 1e-9
    with pytest.raises(ad.ShapeError):
        structure_loss(np.zeros((4, 4)), np.zeros((4, 5)))


def test_structure_loss_gradcheck():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.1, 0.9, (16, 16))
    g = (rng.random((16, 16)) > 0.5).astype(float)
    rep = grad_check(lambda q: structure_loss(q, g, 5.0, 5), [p], epsilon=1e-6, tolerance=1e-4)
    assert rep.passed, rep.worst


def _forward_wrt(model, name, x):
    def f(w):
        saved = model.trainable._params[name]
        model.trainable._params[name] = w
        try:
            return ad.reduce_sum(ad.mul(model.forward(x), np.linspace(-1, 1, 8 * 8).reshape(1, 1, 8, 8)))
        finally:
            model.trainable._params[name] = saved
    return f


def test_adapter_forward_gradcheck_wrt_low_rank_factors():
    model = AdapterModel(FrozenBackbone(2), AdapterConfig(n_experts=2, rank=2, insertion_points=("b1",)))
    rng = np.random.default_rng(0)
    model.trainable["adapter.b1.W_D"].value[:] = rng.normal(0, 0.3, model.trainable["adapter.b1.W_D"].shape)
    x = rng.standard_normal((1, 1, 8, 8))
    for name in ("adapter.b1.W_D", "adapter.b1.W_E"):
        rep = grad_check(_forward_wrt(model, name, x), [model.trainable[name].value], epsilon=1e-6, tolerance=1e-4)
        assert rep.passed, (name, rep.worst)


def test_every_trainable_parameter_receives_gradient():
    model = AdapterModel(FrozenBackbone(4))
    rng = np.random.default_rng(0)
    for block in model.cfg.insertion_points:
        w = model.trainable[f"adapter.{block}.W_D"]
        w.value[:] = rng.normal(0, 0.1, w.shape)
    x = rng.standard_normal((2, 1, 16, 16))
    y = (rng.random((2, 1, 16, 16)) > 0.7).astype(float)
    model.trainable.zero_grad()
    ad.backward(structure_loss(model.forward(x), y))
    for name in model.trainable.trainable_names:
        assert np.any(model.trainable[name].grad != 0), name
    for name in model.backbone.params:
        assert model.backbone.params[name].grad is None


def _blob_set(n, seed, size=16):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    xs, ys = [], []
    for _ in range(n):
        cy, cx = rng.uniform(4, size - 4, 2)
        m = ((yy - cy) ** 2 + (xx - cx) ** 2 < rng.uniform(2, 4) ** 2).astype(float)
        xs.append(m + rng.normal(0, 0.1, m.shape))
        ys.append(m)
    return BinaryDataset(np.array(xs)[:, None], np.array(ys))


def test_finetune_freeze_integrity_per_step():
    model = AdapterModel(FrozenBackbone(0), AdapterConfig(n_experts=2, rank=2))
    ds = _blob_set(6, 0)
    frozen_fp = model.params.fingerprint(model.params.frozen_names)
    opt = ad.Adam(model.trainable.trainable(), lr=1e-2)
    prev = model.trainable.state()
    for step in range(3):
        opt.zero_grad()
        ad.backward(structure_loss(model.forward(ds.x[:2]), ds.y[:2][:, None]))
        opt.step()
        now = model.trainable.state()
        changed = {n for n in now if not np.array_equal(now[n], prev[n])}
        assert changed <= set(model.trainable.trainable_names) and changed
        assert model.params.fingerprint(model.params.frozen_names) == frozen_fp
        prev = now


def test_finetune_toy_blobs_and_contract():
    model = AdapterModel(FrozenBackbone(0), AdapterConfig(n_experts=2, rank=2), class_name="pore")
    fp = model.backbone.fingerprint()
    res = finetune(model, _blob_set(24, 1), FinetuneConfig(epochs=20, lr=3e-3, batch_size=4),
                   val_dataset=_blob_set(8, 2))
    assert res.best_val_iou > 0.8
    assert model.backbone.fingerprint() == fp
    assert len(res.history) == 20 and res.history[res.best_epoch - 1]["val_iou"] == res.best_val_iou


def test_finetune_defaults_and_degenerate_class():
    cfg = FinetuneConfig()
    assert (cfg.epochs, cfg.lr, cfg.batch_size) == (20, 3e-4, 4)
    ds = _blob_set(4, 0)
    with pytest.raises(DegenerateClassError, match="degenerate class"):
        finetune(AdapterModel(FrozenBackbone(0)), BinaryDataset(ds.x, np.zeros_like(ds.y)))


def test_checkpoint_roundtrip_and_backbone_mismatch(tmp_path):
    model = AdapterModel(FrozenBackbone(0), class_name="material")
    model.trainable["head.out.b"].value[:] = 0.7
    model.save(tmp_path / "m")
    back = AdapterModel.load(tmp_path / "m", model.backbone)
    x = np.random.default_rng(0).standard_normal((1, 1, 16, 16))
    assert np.array_equal(back.forward(x).value, model.forward(x).value)
    with pytest.raises(ad.CheckpointError):
        AdapterModel.load(tmp_path / "m", FrozenBackbone(1))
