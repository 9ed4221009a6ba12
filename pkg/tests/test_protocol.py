import ast
import logging
from pathlib import Path

import numpy as np
import pytest

import oracles
from nestfl import protocol as P
from nestfl.codec import quantize
from nestfl.decompose import embed, extract, index_mask, live_indices
from nestfl.nn import Dataset, ElasticArch, ElasticModel, SubNetworkSpec, accuracy, init_model
from nestfl.rng import stream
from nestfl.selection import Assignment, DeviceProfile

ARCH = ElasticArch(4, 3, 2, 2, 8, (1, 2), (2, 4, 8))
DIMS = (4, 3, 2, 2, 8)


def make_env(n_devices=4, per_device=10, server=24, seed=0):
    rng = np.random.default_rng(seed)

    def data(n):
        return Dataset(rng.normal(size=(n, 4)), rng.integers(0, 3, n))

    fleet = [DeviceProfile(u, 1e6, 16, 1e6, 100.0, "t") for u in range(n_devices)]
    return P.Environment(
        ARCH, data(server), data(server), [data(per_device) for _ in range(n_devices)],
        [data(per_device) for _ in range(n_devices)], fleet,
    )


def fixed_assignments(specs_q):
    return {u: Assignment(u, SubNetworkSpec(d, w), q, 0.0, 0.0) for u, (d, w, q) in specs_q.items()}


ASSIGN = {0: (1, 2, 3), 1: (2, 4, 8), 2: (2, 8, 16), 3: (1, 4, 5)}


def config(**kw):
    base = dict(
        rounds=3, num_devices=4, devices_per_round=2, local_epochs=2, local_lr=0.1, server_lr=0.05,
        gamma=0.5, batch_size=4, server_pretrain_epochs=0, finetune_samples=12, seed=5,
    )
    base.update(kw)
    return P.ProtocolConfig(**base)


# --- oracle equivalence ---------------------------------------------------------


def test_three_rounds_match_straight_line_oracle():
    env = make_env()
    cfg = config()
    model = init_model(ARCH, 1)
    state = P.ProtocolState(model, 0)
    assignments = fixed_assignments(ASSIGN)
    flat = model.params.copy()
    device_data = {u: (d.x, d.y) for u, d in enumerate(env.device_train)}
    for r in range(1, 4):
        state, _ = P.run_round(state, cfg, assignments, env)
        flat = oracles.protocol_round(
            flat, DIMS, ASSIGN, device_data, (env.server_train.x, env.server_train.y),
            seed=cfg.seed, round_=r, num_devices=4, per_round=2, epochs=2, local_lr=0.1,
            server_lr=0.05, gamma=0.5, batch=4, finetune_samples=12,
        )
    np.testing.assert_allclose(state.model.params, flat, rtol=0, atol=1e-6)
    # and much tighter in practice
    assert np.max(np.abs(state.model.params - flat)) < 1e-12


def test_uniform_q32_full_spec_is_textbook_fedavg():
    env = make_env()
    cfg = config(mode=P.Mode.QUANTIZED_FEDAVG_UNIFORM, uniform_q=32)
    full = ARCH.full_spec
    assignments = {u: Assignment(u, full, 32, 0.0, 0.0) for u in range(4)}
    state = P.ProtocolState(init_model(ARCH, 2), 0)
    theta = state.model.params.copy()
    shapes = oracles.layout(*DIMS)
    for r in range(1, 4):
        state, rep = P.run_round(state, cfg, assignments, env)
        picked = sorted(stream(cfg.seed, "sample", r).choice(4, size=2, replace=False).tolist())
        locals_ = []
        for u in picked:
            d = env.device_train[u]
            s = oracles._train_local(
                oracles.unflatten(theta, shapes), d.x, d.y, 2, 2, 2, 0.1, 4, stream(cfg.seed, "local", r, u)
            )
            locals_.append(oracles.flatten(s, shapes))
        theta = np.mean(locals_, axis=0)
        assert not rep.finetuned
    # only difference: 32-bit stochastic rounding of the downlink
    np.testing.assert_allclose(state.model.params, theta, atol=1e-6)


def test_single_device_round_is_local_sgd():
    env = make_env(n_devices=1)
    cfg = config(num_devices=1, devices_per_round=1, gamma=0.0, server_lr=0.0, local_epochs=1)
    model = init_model(ARCH, 3)
    a = {0: Assignment(0, ARCH.full_spec, 32, 0.0, 0.0)}
    state, rep = P.run_round(P.ProtocolState(model, 0), cfg, a, env)
    received = quantize(model.params, 32, stream(cfg.seed, "quant", 1, 0))
    from nestfl.codec import dequantize
    from nestfl.device import local_training

    expected = local_training(
        ElasticModel(ARCH, dequantize(received)), env.device_train[0], 1, 0.1, 4, stream(cfg.seed, "local", 1, 0)
    )
    assert np.array_equal(state.model.params, expected.params)
    assert rep.final_digest == rep.aggregate_digest


def test_two_device_overlap_pattern_with_no_training():
    env = make_env(n_devices=2)
    cfg = config(num_devices=2, devices_per_round=2, local_epochs=0, mode=P.Mode.FEDX_NO_FINETUNE)
    small, medium = SubNetworkSpec(1, 2), SubNetworkSpec(2, 4)
    a = {0: Assignment(0, small, 8, 0.0, 0.0), 1: Assignment(1, medium, 8, 0.0, 0.0)}
    model = init_model(ARCH, 4)
    state, _ = P.run_round(P.ProtocolState(model, 0), cfg, a, env)
    from nestfl.codec import quantize_dequantize

    t1 = embed(model, small, quantize_dequantize(extract(model, small), 8, stream(cfg.seed, "quant", 1, 0))).params
    t2 = embed(model, medium, quantize_dequantize(extract(model, medium), 8, stream(cfg.seed, "quant", 1, 1))).params
    overlap = index_mask(ARCH, small)
    only2 = index_mask(ARCH, medium) & ~overlap
    out = state.model.params
    assert np.array_equal(out[overlap], (t1[overlap] + t2[overlap]) / 2)
    assert np.array_equal(out[only2], t2[only2])
    rest = ~index_mask(ARCH, medium)
    assert np.array_equal(out[rest], model.params[rest])


# --- fine-tuning -------------------------------------------------------------------


def test_proximal_step_by_hand():
    # L = (theta - 1)^2 / 2, anchor 0, lr 0.1, gamma 1, theta 0 -> grad -1 -> 0.1
    assert P.proximal_step(np.array([0.0]), np.array([-1.0]), np.array([0.0]), 0.1, 1.0)[0] == pytest.approx(0.1)


def test_zero_gradient_decays_geometrically():
    theta, anchor = np.array([3.0, -1.0]), np.array([1.0, 1.0])
    lr, gamma = 0.2, 0.5
    x = theta
    for k in range(1, 6):
        x = P.proximal_step(x, np.zeros(2), anchor, lr, gamma)
        np.testing.assert_allclose(x - anchor, (theta - anchor) * (1 - lr * gamma) ** k, rtol=1e-14)


def test_gamma_zero_finetune_is_plain_sgd():
    env = make_env()
    model = init_model(ARCH, 5)
    data = env.server_train
    steps = len(data) // 4
    a = P.finetune(model, data, 0.1, 0.0, steps, 4, stream(0, "ft"))
    b = P.server_pretrain(model, data, 1, 0.1, 4, stream(0, "ft"))
    assert np.array_equal(a.params, b.params)


def test_finetune_anchor_is_frozen_and_pulls():
    env = make_env()
    model = init_model(ARCH, 6)
    free = P.finetune(model, env.server_train, 0.1, 0.0, 20, 4, stream(0, "a"))
    pulled = P.finetune(model, env.server_train, 0.1, 5.0, 20, 4, stream(0, "a"))
    assert np.linalg.norm(pulled.params - model.params) < np.linalg.norm(free.params - model.params)


def test_noop_training_settings():
    env = make_env()
    model = init_model(ARCH, 7)
    assert P.server_pretrain(model, env.server_train, 0, 0.1, 4, stream(0)) is model
    assert P.server_pretrain(model, env.server_train, 3, 0.0, 4, stream(0)) is model
    assert P.finetune(model, env.server_train, 0.1, 1.0, 0, 4, stream(0)) is model


def test_pretrain_learns_separable_toy():
    rng = np.random.default_rng(0)
    arch = ElasticArch(2, 2, 1, 1, 8)
    x = np.vstack([rng.normal(-2, 0.5, size=(50, 2)), rng.normal(2, 0.5, size=(50, 2))])
    y = np.repeat([0, 1], 50)
    data = Dataset(x, y)
    model = P.server_pretrain(init_model(arch, 0), data, 1, 0.1, 8, stream(0, "toy"))
    assert accuracy(model, arch.full_spec, data) >= 0.9


# --- round bookkeeping ---------------------------------------------------------------


def test_report_accounting():
    env = make_env()
    cfg = config()
    assignments = fixed_assignments(ASSIGN)
    state, rep = P.run_round(P.ProtocolState(init_model(ARCH, 8), 0), cfg, assignments, env)
    assert rep.participants == sorted(rep.participants) and len(rep.participants) == 2
    for d in rep.devices:
        size = live_indices(ARCH, d.spec).size
        assert d.bytes_up == 32 * size / 8
        assert d.bytes_down * 8 == quantize(
            extract(init_model(ARCH, 8), d.spec), d.q, stream(cfg.seed, "quant", 1, d.device_id)
        ).encoded_bits
        assert d.comm_time_s == pytest.approx((d.bytes_down + d.bytes_up) * 8 / 1e6)
    row = rep.row()
    assert row["total_bytes_down"] == sum(d.bytes_down for d in rep.devices)
    assert rep.finetuned and rep.aggregate_digest != rep.final_digest
    assert rep.finetune_proxy > 0


def test_no_finetune_mode_keeps_aggregate():
    env = make_env()
    cfg = config(mode=P.Mode.FEDX_NO_FINETUNE)
    _, rep = P.run_round(P.ProtocolState(init_model(ARCH, 8), 0), cfg, fixed_assignments(ASSIGN), env)
    assert not rep.finetuned and rep.aggregate_digest == rep.final_digest and rep.finetune_proxy == 0


def test_missing_assignment_is_skipped_with_warning():
    env = make_env()
    cfg = config(devices_per_round=4)
    partial = fixed_assignments({0: ASSIGN[0], 2: ASSIGN[2]})
    _, rep = P.run_round(P.ProtocolState(init_model(ARCH, 9), 0), cfg, partial, env)
    assert [d.device_id for d in rep.devices] == [0, 2]
    assert len(rep.warnings) == 2


def test_uplink_quantization_shrinks_upload():
    env = make_env()
    a = fixed_assignments(ASSIGN)
    _, plain = P.run_round(P.ProtocolState(init_model(ARCH, 1), 0), config(), a, env)
    _, quant = P.run_round(P.ProtocolState(init_model(ARCH, 1), 0), config(uplink_q=4), a, env)
    assert sum(d.bytes_up for d in quant.devices) < sum(d.bytes_up for d in plain.devices)


def test_parallel_workers_are_bit_identical():
    env = make_env()
    a = fixed_assignments(ASSIGN)
    s1, _ = P.run_round(P.ProtocolState(init_model(ARCH, 1), 0), config(devices_per_round=4), a, env)
    s2, _ = P.run_round(P.ProtocolState(init_model(ARCH, 1), 0), config(devices_per_round=4, workers=3), a, env)
    assert s1.model.params.tobytes() == s2.model.params.tobytes()


def test_evaluate_excludes_empty_device(caplog):
    env = make_env()
    env.device_test[1] = env.device_test[1].subset(np.array([], dtype=int))
    state = P.ProtocolState(init_model(ARCH, 0), 0)
    with caplog.at_level(logging.ERROR):
        m = P.evaluate(state, fixed_assignments(ASSIGN), env, 0)
    assert 1 in m.excluded and 1 not in m.device_acc
    assert "device 1" in caplog.text


def test_evaluate_perfect_model():
    # labels produced by the deployed models themselves give accuracy 1 everywhere
    env = make_env()
    state = P.ProtocolState(init_model(ARCH, 0), 0)
    assignments = fixed_assignments(ASSIGN)
    for u, a in assignments.items():
        deployed = P.device_model(state.model, a, 0, 0)
        test = env.device_test[u]
        env.device_test[u] = Dataset(test.x, np.argmax(
            oracles.logits(oracles.unflatten(deployed.params, oracles.layout(4, 3, 2, a.spec.depth, a.spec.width)),
                           test.x, 2, a.spec.depth), axis=1))
    m = P.evaluate(state, assignments, env, 0)
    assert all(v == 1.0 for v in m.device_acc.values()) and m.mean_device_acc == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        P.ProtocolConfig(num_devices=3, devices_per_round=4)
    with pytest.raises(ValueError):
        P.ProtocolConfig(local_lr=0.0)
    with pytest.raises(ValueError):
        P.ProtocolConfig(gamma=-1.0)


# --- whole experiment ------------------------------------------------------------------


def test_zero_rounds_returns_pretrained():
    env = make_env()
    cfg = config(rounds=0, server_pretrain_epochs=2, selection_eval_fraction=0.25)
    res = P.run_experiment(cfg, env, init_model(ARCH, 0))
    assert res.reports == [] and res.state.model is res.pretrained
    assert set(res.assignments) | set(res.infeasible) == set(range(4))


def test_experiment_is_deterministic(tmp_path):
    env = make_env()
    cfg = config(rounds=2, server_pretrain_epochs=1, selection_eval_fraction=0.25)
    a = P.run_experiment(cfg, env, init_model(ARCH, 0), rounds_csv=tmp_path / "a.csv")
    b = P.run_experiment(cfg, env, init_model(ARCH, 0), rounds_csv=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.state.model.params.tobytes() == b.state.model.params.tobytes()


def test_uniform_mode_assigns_everyone():
    env = make_env()
    cfg = config(mode=P.Mode.QUANTIZED_FEDAVG_UNIFORM, uniform_depth=1, uniform_width=4, uniform_q=6, rounds=0)
    res = P.run_experiment(cfg, env, init_model(ARCH, 0))
    assert {(a.spec, a.q) for a in res.assignments.values()} == {(SubNetworkSpec(1, 4), 6)}


@pytest.mark.slow
def test_objective_terms_decrease_on_synthetic_task():
    from nestfl.config import ExperimentConfig
    from nestfl.experiments import build_environment, run_mode

    cfg = ExperimentConfig()
    res = run_mode(cfg, P.Mode.FEDX, build_environment(cfg))
    server = [r.global_loss for r in res.reports]
    local = [r.local_loss_sum for r in res.reports]
    assert np.mean(server[40:50]) < np.mean(server[0:10])
    assert np.mean(local[40:50]) < np.mean(local[0:10])


# --- architecture ----------------------------------------------------------------------


def test_device_module_never_quantizes():
    src = Path(P.__file__).with_name("device.py").read_text()
    tree = ast.parse(src)
    forbidden = {"quantize", "quantize_dequantize", "encode_bitstream", "_encode", "stochastic_levels"}
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            imported |= {alias.name for alias in node.names}
            if node.module and node.module.endswith("protocol"):
                pytest.fail("device code must not depend on the server loop")
        if isinstance(node, ast.Attribute) and node.attr in forbidden:
            pytest.fail(f"device code touches {node.attr}")
    assert not imported & forbidden
    assert "dequantize" in imported
