import numpy as np
import pytest

from inrv import numerics as nx
from inrv.bench import make_phantom
from inrv.siren import MAX_HIDDEN_LAYERS, SirenConfig, SirenModel, forward, init_siren, param_count
from inrv.trainer import TrainConfig, train_siren
from inrv.volume import Volume, coord_grid

from conftest import numeric_grad, rel_error


@pytest.mark.parametrize("layers,count", [(2, 17153), (3, 33665), (4, 50177)])
def test_param_counts_3d(layers, count):
    cfg = SirenConfig(in_dim=3, hidden_width=128, hidden_layers=layers)
    assert param_count(cfg) == count
    assert init_siren(cfg).param_count() == count


def test_param_count_closed_form():
    assert param_count(SirenConfig(in_dim=2, hidden_width=128, hidden_layers=2)) == 384 + 16512 + 129
    for in_dim in (1, 2, 3):
        for width in (4, 17):
            for layers in range(1, MAX_HIDDEN_LAYERS + 1):
                cfg = SirenConfig(in_dim, width, layers)
                dims = [in_dim] + [width] * layers + [1]
                expected = sum((a + 1) * b for a, b in zip(dims, dims[1:]))
                assert param_count(cfg) == init_siren(cfg).param_count() == expected


def test_config_validation():
    with pytest.raises(ValueError):
        SirenConfig(hidden_layers=MAX_HIDDEN_LAYERS + 1)
    with pytest.raises(ValueError):
        SirenConfig(in_dim=4)
    cfg = SirenConfig(in_dim=2, hidden_width=8, hidden_layers=3, seed=5)
    assert SirenConfig.from_dict(cfg.to_dict()) == cfg


def test_init_ranges_and_determinism():
    cfg = SirenConfig(in_dim=3, hidden_width=64, hidden_layers=2, seed=3)
    m1, m2 = init_siren(cfg), init_siren(cfg)
    np.testing.assert_array_equal(m1.flat_parameters(), m2.flat_parameters())
    w0, b0 = m1.layers[0]
    assert np.abs(w0.data).max() <= 1 / 3 and not b0.data.any()
    w1 = m1.layers[1][0].data
    assert np.abs(w1).max() <= np.sqrt(6 / 64) / 30
    assert not np.array_equal(init_siren(SirenConfig(seed=4)).flat_parameters(), init_siren(SirenConfig()).flat_parameters())


def test_zero_weights_give_final_bias():
    cfg = SirenConfig(in_dim=2, hidden_width=8, hidden_layers=2)
    flat = np.zeros(param_count(cfg))
    flat[-1] = 0.25
    model = SirenModel.from_flat(cfg, flat)
    np.testing.assert_allclose(forward(model, coord_grid((1, 5, 5)).for_dim(2)), 0.25)


def test_forward_order_and_permutation_equivariance():
    model = init_siren(SirenConfig(in_dim=3, hidden_width=16, hidden_layers=2, seed=1))
    coords = coord_grid((2, 4, 4)).coords
    perm = np.random.default_rng(0).permutation(len(coords))
    base = forward(model, coords)
    assert base.shape == (32,)
    np.testing.assert_array_equal(forward(model, coords), base)
    # BLAS blocking depends on batch size, so reordered or chunked batches agree to float32 rounding
    np.testing.assert_allclose(forward(model, coords[perm]), base[perm], rtol=0, atol=1e-6)
    np.testing.assert_allclose(forward(model, coords, chunk=5), base, rtol=0, atol=1e-6)
    with pytest.raises(nx.DimensionError):
        forward(model, coords[:, :2])


def test_flat_roundtrip():
    model = init_siren(SirenConfig(in_dim=2, hidden_width=8, hidden_layers=3, seed=2))
    again = SirenModel.from_flat(model.config, model.flat_parameters())
    np.testing.assert_array_equal(again.flat_parameters(), model.flat_parameters())
    with pytest.raises(ValueError):
        SirenModel.from_flat(model.config, model.flat_parameters()[:-1])


def test_end_to_end_gradient(rng):
    cfg = SirenConfig(in_dim=2, hidden_width=5, hidden_layers=2, omega0=3.0, omega_hidden=2.0, seed=0)
    model = init_siren(cfg, dtype=np.float64)
    coords = rng.uniform(-1, 1, size=(7, 2))
    target = rng.uniform(0, 1, size=(7, 1))
    loss = nx.mse_loss(model(nx.Tensor(coords)), nx.Tensor(target))
    nx.backward(loss)
    arrays = [p.data.copy() for p in model.parameters()]

    def f(*arrs):
        m = SirenModel([(nx.Tensor(arrs[i]), nx.Tensor(arrs[i + 1])) for i in range(0, len(arrs), 2)], cfg)
        with nx.no_grad():
            return nx.mse_loss(m(nx.Tensor(coords)), nx.Tensor(target)).item()

    for p, g in zip(model.parameters(), numeric_grad(f, arrays)):
        assert rel_error(p.grad, g) < 1e-4


def test_capacity_ordering():
    crop = make_phantom((1, 256, 256), seed=0).data[:, 96:128, 96:128]
    vol = Volume(crop)
    tcfg = TrainConfig(iterations=300, eval_interval=50, seed=7)
    best = []
    for layers in (2, 3, 4):
        _, log = train_siren(vol, SirenConfig(in_dim=2, hidden_width=32, hidden_layers=layers, seed=7), tcfg)
        best.append(log.best_psnr_db)
    assert best[2] >= best[1] >= best[0]
