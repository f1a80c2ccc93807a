from typing import List, Mapping, Sequence
from unittest.mock import Mock

import numpy as np
import pytest

from modalmix.model import init_parameters
from modalmix.roles import MODALITIES, CustomTask, Role, RoleAssignment, TaskKind, blend
from modalmix.sampling import (
    ConditioningError,
    Denoiser,
    ModelDenoiser,
    SamplerConfig,
    SamplerConfigError,
    recover_x0,
    sample,
    velocity,
)

from .conftest import make_tiny_model_config

SHAPE = (1, 2, 2, 3)


class OracleDenoiser(Denoiser):
    """Knows the clean latents and answers with the exact noise of the current state."""

    def __init__(self, clean: Mapping[str, np.ndarray]):
        self.clean = clean

    def predict(
        self,
        latents: Sequence[np.ndarray],
        roles: RoleAssignment,
        t: float,
        caption: Sequence[int],
    ) -> List[np.ndarray]:
        return [(x - t * self.clean[m]) / (1.0 - t) for m, x in zip(MODALITIES, latents)]


def make_clean(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    return {m: rng.uniform(-1.0, 1.0, size=SHAPE) for m in MODALITIES}


class TestSamplerConfig:
    def test_grid(self):
        assert SamplerConfig(steps=4).grid().tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]

    def test_grid__from_t_start(self):
        assert SamplerConfig(steps=2, t_start=0.5).grid().tolist() == [0.5, 0.75, 1.0]

    @pytest.mark.parametrize(
        "overrides", [dict(steps=0), dict(t_floor=0.0), dict(t_start=1.0), dict(t_start=-0.1)]
    )
    def test_rejects(self, overrides):
        with pytest.raises(SamplerConfigError):
            SamplerConfig(**overrides)


class TestRecoverX0:
    def test_midpoint(self):
        assert recover_x0(np.array([0.5]), np.array([1.0]), 0.5, 0.02).tolist() == [0.0]

    def test_clamps_small_t(self):
        out = recover_x0(np.array([0.3]), np.array([0.1]), 0.01, 0.02)
        assert out[0] == pytest.approx(10.05)

    def test_inverts_blend(self):
        x0, eps = make_clean(1)["rgb"], make_clean(2)["rgb"]
        x_t = blend(x0, eps, 0.3, Role.GENERATION)
        np.testing.assert_allclose(recover_x0(x_t, eps, 0.3, 0.02), x0, atol=1e-12)

    @pytest.mark.parametrize("t", [0.0, 0.01, 0.02, 0.5, 0.99])
    def test_velocity_identity(self, t):
        rng = np.random.default_rng(3)
        x_t, eps = rng.standard_normal(5), rng.standard_normal(5)
        m = max(t, 0.02)
        expected = (x_t - eps) / m + eps * (t / m - 1.0)
        np.testing.assert_allclose(velocity(x_t, eps, t, 0.02), expected, atol=1e-9)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ConditioningError):
            recover_x0(np.zeros(2), np.zeros(3), 0.5, 0.02)


class TestSample:
    @pytest.mark.parametrize("steps", [1, 10, 50])
    def test_conditioning_is_reset_every_step(self, steps):
        cond = {"depth": np.full(SHAPE, 0.25)}
        denoiser = Mock(spec=Denoiser)
        denoiser.predict.side_effect = lambda latents, roles, t, caption: [
            np.ones(SHAPE) for _ in MODALITIES
        ]
        out = sample(
            denoiser,
            TaskKind.COND_DEPTH,
            cond,
            (1,),
            SamplerConfig(steps=steps),
            np.random.default_rng(0),
            SHAPE,
        )
        assert denoiser.predict.call_count == steps
        for call in denoiser.predict.call_args_list:
            latents = call.args[0]
            assert latents[MODALITIES.index("depth")] is cond["depth"]
        assert out["depth"] is cond["depth"]

    @pytest.mark.parametrize("t_start", [0.02, 0.3, 0.9])
    @pytest.mark.parametrize("steps", [1, 5, 50])
    def test_oracle_reaches_clean_latents(self, t_start, steps):
        clean = make_clean()
        rng = np.random.default_rng(5)
        init = {
            m: blend(clean[m], rng.standard_normal(SHAPE), t_start, Role.GENERATION)
            for m in MODALITIES
        }
        out = sample(
            OracleDenoiser(clean),
            TaskKind.T2V,
            {},
            (),
            SamplerConfig(steps=steps, t_start=t_start),
            rng,
            SHAPE,
            init=init,
        )
        for m in MODALITIES:
            np.testing.assert_allclose(out[m], clean[m], atol=1e-5)

    def test_is_deterministic(self):
        model = init_parameters(make_tiny_model_config(), 0)
        denoiser = ModelDenoiser(model)
        runs = [
            sample(
                denoiser,
                TaskKind.T2V,
                {},
                (1,),
                SamplerConfig(steps=3),
                np.random.default_rng(9),
                SHAPE,
            )
            for _ in range(2)
        ]
        assert all(np.array_equal(runs[0][m], runs[1][m]) for m in MODALITIES)

    def test_model_denoiser_passes_conditions_through(self):
        model = init_parameters(make_tiny_model_config(), 0)
        cond = make_clean(4)
        cond = {"depth": cond["depth"], "seg": cond["seg"]}
        out = sample(
            ModelDenoiser(model),
            CustomTask(frozenset(cond)),
            cond,
            (1, 9),
            SamplerConfig(steps=2),
            np.random.default_rng(0),
            SHAPE,
        )
        assert np.array_equal(out["depth"], cond["depth"])
        assert np.array_equal(out["seg"], cond["seg"])
        assert out["rgb"].dtype == np.float64

    @pytest.mark.parametrize(
        "task, cond",
        [
            (TaskKind.COND_DEPTH, {}),
            (TaskKind.T2V, {"rgb": np.zeros(SHAPE)}),
            (TaskKind.COND_RGB, {"rgb": np.zeros(SHAPE), "depth": np.zeros(SHAPE)}),
            (TaskKind.COND_RGB, {"rgb": np.zeros((1, 2, 2, 4))}),
        ],
    )
    def test_rejects_bad_conditions(self, task, cond):
        with pytest.raises(ConditioningError):
            sample(
                Mock(spec=Denoiser),
                task,
                cond,
                (),
                SamplerConfig(steps=1),
                np.random.default_rng(0),
                SHAPE,
            )
