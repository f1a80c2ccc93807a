import numpy as np
import pytest

from modalmix.roles import (
    MODALITIES,
    STAGE_MIXTURES,
    CustomTask,
    Role,
    RoleAssignment,
    RoleEmbeddings,
    RoleError,
    TaskKind,
    apply_role_embedding,
    assign_roles,
    blend,
    check_mixture,
    loss_mask,
    parse_task,
    sample_task,
)

G, C = Role.GENERATION, Role.CONDITIONING


class TestAssignRoles:
    @pytest.mark.parametrize(
        "task, roles",
        [
            (TaskKind.T2V, (G, G, G, G)),
            (TaskKind.COND_RGB, (C, G, G, G)),
            (TaskKind.COND_DEPTH, (G, C, G, G)),
            (TaskKind.COND_SEG, (G, G, C, G)),
            (TaskKind.COND_EDGES, (G, G, G, C)),
            (CustomTask(frozenset({"depth", "seg"})), (G, C, C, G)),
        ],
    )
    def test_table(self, task, roles):
        assert assign_roles(task).roles == roles

    def test_all_conditioning_is_rejected(self):
        with pytest.raises(RoleError):
            assign_roles(CustomTask(frozenset(MODALITIES)))

    def test_lookup_by_modality(self):
        roles = assign_roles(TaskKind.COND_DEPTH)
        assert roles["depth"] is C
        assert roles.generation == ("rgb", "seg", "edges")
        assert roles.conditioning == ("depth",)

    def test_loss_mask(self):
        assert loss_mask(assign_roles(TaskKind.COND_SEG)) == (1.0, 1.0, 0.0, 1.0)

    def test_assignment_needs_one_role_per_modality(self):
        with pytest.raises(RoleError):
            RoleAssignment((G, G))


class TestParseTask:
    @pytest.mark.parametrize("text", ["t2v", "rgb", "depth", "seg", "edges"])
    def test_named(self, text):
        assert parse_task(text) is TaskKind(text)

    def test_combination(self):
        task = parse_task("seg+depth")
        assert task == CustomTask(frozenset({"depth", "seg"}))
        assert task.value == "depth+seg"

    @pytest.mark.parametrize("text", ["video", "depth+normals", "rgb+depth+seg+edges"])
    def test_rejects(self, text):
        with pytest.raises(RoleError):
            parse_task(text)


class TestBlend:
    def test_endpoints(self):
        x = np.full((2, 3), 0.5)
        eps = np.full((2, 3), -2.0)
        assert np.array_equal(blend(x, eps, 0.0, G), eps)
        assert np.array_equal(blend(x, eps, 1.0, G), x)
        assert blend(x, eps, 0.25, G)[0, 0] == pytest.approx(-1.375)

    @pytest.mark.parametrize("t", [0.0, 0.3, 1.0])
    def test_conditioning_is_clean(self, t):
        x = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(blend(x, np.zeros((2, 3)), t, C), x)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(RoleError):
            blend(np.zeros(3), np.zeros(4), 0.5, G)

    def test_rejects_time_out_of_range(self):
        with pytest.raises(RoleError):
            blend(np.zeros(3), np.zeros(3), 1.5, G)


class TestRoleEmbeddings:
    def test_adds_role_vector(self):
        emb = RoleEmbeddings(4, np.random.default_rng(0))
        x = np.zeros((2, 4), dtype=np.float32)
        out = apply_role_embedding(x, C, emb)
        assert np.array_equal(out.data[1], emb.cond.data)
        assert not np.array_equal(emb.gen.data, emb.cond.data)

    def test_disabled_is_identity(self):
        emb = RoleEmbeddings(4, np.random.default_rng(0))
        x = np.ones((2, 4), dtype=np.float32)
        assert np.array_equal(apply_role_embedding(x, G, emb, enabled=False).data, x)

    def test_rejects_length_mismatch(self):
        emb = RoleEmbeddings(4, np.random.default_rng(0))
        with pytest.raises(RoleError):
            apply_role_embedding(np.zeros((2, 5)), G, emb)


class TestMixture:
    def test_stage_presets(self):
        assert check_mixture(STAGE_MIXTURES[1]) == (1.0, 0.0, 0.0, 0.0, 0.0)
        assert sum(STAGE_MIXTURES[2]) == pytest.approx(1.0)

    @pytest.mark.parametrize(
        "mixture", [(0.5, 0.5), (0.5, 0.6, 0.0, 0.0, 0.0), (1.5, -0.5, 0.0, 0.0, 0.0)]
    )
    def test_rejects(self, mixture):
        with pytest.raises(RoleError):
            check_mixture(mixture)

    def test_text_only_stage_samples_t2v(self):
        rng = np.random.default_rng(0)
        assert {sample_task(rng, STAGE_MIXTURES[1]) for _ in range(50)} == {TaskKind.T2V}

    def test_uniform_mixture_covers_every_task(self):
        rng = np.random.default_rng(0)
        drawn = [sample_task(rng, STAGE_MIXTURES[2]) for _ in range(10_000)]
        for kind in TaskKind:
            # 3 sigma around 2000, sigma = sqrt(10000 * 0.2 * 0.8) = 40
            assert 1880 <= drawn.count(kind) <= 2120
