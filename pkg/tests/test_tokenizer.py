import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vapi import numkernel as nk
from vapi import tokenizer as tk
from vapi.numkernel import AdamW, ParamStore, SeededRng
from vapi.synthdata import DatasetSpec, downsample, make_dataset, stack_images

CFG = tk.TokenizerConfig()
TINY = tk.TINY_TOKENIZER


def _images(n=8, seed=0, size=16):
    x, _ = stack_images(make_dataset(DatasetSpec(n, seed)))
    return x if size == 16 else downsample(x, size)


@pytest.fixture(scope="module")
def params():
    return tk.init_tokenizer(CFG, SeededRng(0, 1))


def test_config_geometry():
    assert (CFG.grid, CFG.num_tokens, CFG.patch_pixels) == (4, 16, 16)
    assert TINY.num_tokens == 4


def test_encode_shape_and_mismatch(params):
    img = _images(1)[0]
    assert tk.encode(params, img, CFG).shape == (16, 8)
    with pytest.raises(ValueError, match="shape mismatch"):
        tk.encode(params, np.zeros((1, 8, 8)), CFG)


def test_encode_zero_weights_gives_zero_latents(params):
    zero = ParamStore({k: np.zeros_like(v.data) for k, v in params.items()})
    assert np.all(tk.encode(zero, _images(1)[0], CFG).data == 0.0)


def test_encode_patch_locality(params):
    img = _images(1)[3].copy()
    base = tk.encode(params, img, CFG).data
    img[0, 12:16, 0:4] += 0.3  # patch (3, 0), raster index 12
    moved = tk.encode(params, img, CFG).data
    changed = np.flatnonzero(np.any(moved != base, axis=1))
    assert changed.tolist() == [12]


def test_quantize_single_entry():
    p = ParamStore({"tok/codebook": np.ones((1, 3))})
    idx, e = tk.quantize(p, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.all(idx == 0) and e.shape == (5, 3)


def test_quantize_exact_match(params):
    cb = params["tok/codebook"].data
    idx, e = tk.quantize(params, cb[5:6])
    assert idx.tolist() == [5]
    assert np.array_equal(e[0], cb[5])


def test_quantize_ties_go_low():
    p = ParamStore({"tok/codebook": np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])})
    assert tk.quantize(p, np.array([[0.0, 0.0], [1.0, 0.0]]))[0].tolist() == [0, 0]


@given(arrays(np.float64, (6, 2), elements=st.floats(-3, 3)), arrays(np.float64, (4, 2), elements=st.floats(-3, 3)))
def test_quantize_matches_exhaustive_scan(z, cb):
    p = ParamStore({"tok/codebook": cb})
    idx, _ = tk.quantize(p, z)
    for i, row in enumerate(z):
        best, best_d = 0, None
        for k in range(4):
            d = sum((row[c] - cb[k, c]) ** 2 for c in range(2))
            if best_d is None or d < best_d:
                best, best_d = k, d
        assert idx[i] == best


@given(st.lists(st.integers(0, 31), min_size=16, max_size=16))
def test_decode_pure_and_bounded(tokens):
    p = tk.init_tokenizer(CFG, SeededRng(0, 1))
    a = tk.decode_array(p, tokens, CFG)
    b = tk.decode_array(p, tokens, CFG)
    assert a.shape == (1, 16, 16)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_decode_out_of_vocab(params):
    with pytest.raises(IndexError, match="token out of vocabulary"):
        tk.decode(params, [32] * 16, CFG)


def test_tokenize_deterministic(params):
    x = _images(2)
    assert np.array_equal(tk.tokenize(params, x, CFG), tk.tokenize(params, x, CFG))


def test_loss_zero_at_fixed_point():
    # identity-like setup: one pixel patch, latent equals codebook row, decoder reproduces the image
    cfg = tk.TokenizerConfig(image_size=4, patch=4, codebook_size=2, latent_dim=1, hidden=1, lambda_p=0.5)
    p = ParamStore({"tok/codebook": np.array([[0.0], [1.0]]),
                    "tok/enc/w1": np.zeros((16, 1)), "tok/enc/b1": np.zeros(1),
                    "tok/enc/w2": np.zeros((1, 1)), "tok/enc/b2": np.zeros(1),
                    "tok/dec/w1": np.zeros((1, 1)), "tok/dec/b1": np.zeros(1),
                    "tok/dec/w2": np.zeros((1, 16)), "tok/dec/b2": np.zeros(16)})
    img = np.full((1, 1, 4, 4), 0.5)  # sigmoid(0)
    loss, comps = tk.tokenizer_loss(p, img, cfg)
    assert loss.item() < 1e-30
    assert comps["quant"] == 0.0 and comps["mse"] < 1e-30 and comps["perceptual"] < 1e-30


def test_quant_term_has_zero_decoder_gradient(params):
    p = params.copy()
    p.zero_grad()
    _, _ = tk.tokenizer_loss(p, _images(1)[:2], CFG)
    z = tk.encode(p, _images(1)[:2], CFG)
    idx = tk.nearest_code(z.data, p["tok/codebook"].data)
    e = nk.embedding(p["tok/codebook"], idx)
    codebook_term = ((nk.stop_gradient(z) - e) ** 2).sum(axis=-1).mean()
    commit_term = ((z - nk.stop_gradient(e)) ** 2).sum(axis=-1).mean()
    p.zero_grad()
    codebook_term.backward()
    g = p.grads()
    assert all(np.all(g[k] == 0) for k in g if k.startswith("tok/enc") or k.startswith("tok/dec"))
    assert np.any(g["tok/codebook"] != 0)
    p.zero_grad()
    (commit_term * 0.25).backward()
    g = p.grads()
    assert np.all(g["tok/codebook"] == 0)
    assert all(np.all(g[k] == 0) for k in g if k.startswith("tok/dec"))


def test_loss_components_nonnegative(params):
    _, comps = tk.tokenizer_loss(params, _images(1), CFG)
    for k in ("mse", "perceptual", "quant", "codebook", "commit"):
        assert comps[k] >= 0.0


def test_tokenizer_loss_grad_check_tiny():
    p = tk.init_tokenizer(TINY, SeededRng(4, 1))
    img = _images(1, size=8)[2:3]
    err = nk.grad_check(lambda ps: tk.tokenizer_loss(ps, img, TINY)[0], p, h=1e-4)
    assert err < 1e-4


def test_zero_lr_step_leaves_params_bitwise(params):
    p = params.copy()
    before = p.arrays()
    tk.train_tokenizer_step(p, _images(1), AdamW(lr=0.0, weight_decay=1e-4), CFG)
    for k, v in p.arrays().items():
        assert np.array_equal(v, before[k])


def test_empty_batch_rejected(params):
    with pytest.raises(ValueError):
        tk.train_tokenizer_step(params.copy(), np.zeros((0, 1, 16, 16)), AdamW(lr=1e-3), CFG)


def test_short_training_reduces_mse():
    x = _images(8)
    p = tk.init_tokenizer(CFG, SeededRng(0, 1))
    r = SeededRng(0, 2)
    tk.init_codebook_from_data(p, x, CFG, r)
    opt = AdamW(lr=3e-3)
    first = tk.train_tokenizer_step(p, x[::4], opt, CFG)["mse"]
    for i in range(150):
        last = tk.train_tokenizer_step(p, x[(i % 4)::4], opt, CFG)
    assert last["mse"] < 0.5 * first
    assert 1 <= last["usage"] <= 32


def test_reseed_moves_only_dead_rows(params):
    p = params.copy()
    counts = np.ones(32, dtype=int)
    counts[[3, 7]] = 0
    before = p["tok/codebook"].data.copy()
    assert tk.reseed_dead_codes(p, _images(1), counts, CFG, SeededRng(1)) == 2
    after = p["tok/codebook"].data
    changed = np.flatnonzero(np.any(after != before, axis=1))
    assert changed.tolist() == [3, 7]


def test_nonfinite_loss_aborts(params):
    p = params.copy()
    p["tok/enc/b2"] = np.full(8, np.nan)
    before = p.arrays()
    with pytest.raises(FloatingPointError, match="diverged"):
        tk.train_tokenizer_step(p, _images(1), AdamW(lr=1e-3), CFG)
    assert np.array_equal(p["tok/enc/w1"].data, before["tok/enc/w1"])
