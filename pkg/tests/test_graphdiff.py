import numpy as np
import pytest
import torch

import oracles
from epiwave.errors import ConfigError
from epiwave.graphdiff import (
    DiffusionGraph,
    DiffusionStep,
    SequenceDiffuser,
    StructureLearner,
    cross_time_step,
    diffuse,
    inner_time_step,
    learn_structure,
    run_sequence,
)


def _learner(dim, theta, w1=None, w2=None, dtype=torch.float64):
    learner = StructureLearner(dim, theta).to(dtype)
    with torch.no_grad():
        if w1 is not None:
            learner.w_source.copy_(torch.as_tensor(w1, dtype=dtype))
        if w2 is not None:
            learner.w_target.copy_(torch.as_tensor(w2, dtype=dtype))
    return learner


class TestLearnStructure:
    def test_identical_vectors_score_one(self):
        h = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
        learner = _learner(3, 0.5)
        adj = learn_structure(h, h, learner)
        assert adj[0, 0].item() == pytest.approx(1.0)

    def test_orthogonal_vectors_filtered(self):
        h1 = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        h2 = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        adj = learn_structure(h1, h2, _learner(2, 0.1))
        assert adj[0, 0].item() == 0.0

    def test_zero_vector_scores_zero_not_nan(self):
        h1 = torch.zeros(2, 3, dtype=torch.float64)
        h2 = torch.randn(4, 3, dtype=torch.float64)
        adj = learn_structure(h1, h2, _learner(3, 0.1))
        assert torch.all(adj == 0)
        assert torch.isfinite(adj).all()

    def test_matches_entrywise_oracle(self, rng):
        h1 = torch.tensor(rng.normal(size=(4, 4)))
        h2 = torch.tensor(rng.normal(size=(4, 4)))
        w1 = rng.normal(size=4)
        w2 = rng.normal(size=4)
        learner = _learner(4, 0.3, w1, w2)
        adj = learn_structure(h1, h2, learner)
        expected = oracles.learn_structure(
            h1.tolist(), h2.tolist(), list(w1), list(w2), 0.3)
        np.testing.assert_allclose(adj.detach().numpy(), expected, rtol=1e-6, atol=1e-9)

    def test_diagonal_exclusion(self, rng):
        h = torch.tensor(rng.normal(size=(5, 3)))
        adj = learn_structure(h, h, _learner(3, 0.1), exclude_diagonal=True)
        assert torch.all(torch.diagonal(adj) == 0)

    def test_threshold_monotone_edge_subsets(self, rng):
        h1 = torch.tensor(rng.normal(size=(6, 5)))
        h2 = torch.tensor(rng.normal(size=(6, 5)))
        thetas = [0.05, 0.1, 0.3, 0.6, 0.9]
        edge_sets = []
        for theta in thetas:
            adj = learn_structure(h1, h2, _learner(5, theta))
            edge_sets.append({tuple(e) for e in (adj > 0).nonzero().tolist()})
        for tighter, looser in zip(edge_sets[1:], edge_sets[:-1]):
            assert tighter <= looser

    def test_scale_invariance(self, rng):
        h1 = torch.tensor(rng.normal(size=(3, 4)))
        h2 = torch.tensor(rng.normal(size=(3, 4)))
        learner = _learner(4, 0.05, rng.normal(size=4), rng.normal(size=4))
        base = learn_structure(h1, h2, learner)
        scaled = h1.clone()
        scaled[1] *= 7.3  # positive rescale of one node
        again = learn_structure(scaled, h2, learner)
        np.testing.assert_allclose(base.detach().numpy(), again.detach().numpy(), atol=1e-12)

    def test_invalid_threshold(self):
        with pytest.raises(ConfigError):
            StructureLearner(3, 0.0)


class TestDiffuse:
    def test_empty_graph_identity(self):
        h2 = torch.rand(3, 4, dtype=torch.float64)
        h1 = torch.rand(2, 4, dtype=torch.float64)
        adj = torch.zeros(2, 3, dtype=torch.float64)
        out = diffuse(adj, h1, h2, torch.eye(4, dtype=torch.float64))
        assert torch.allclose(out, h2)  # relu(nonneg) = identity

    def test_single_edge_averages(self):
        h1 = torch.tensor([[2.0, 4.0]], dtype=torch.float64)
        h2 = torch.tensor([[0.0, 2.0]], dtype=torch.float64)
        adj = torch.tensor([[1.0]], dtype=torch.float64)
        out = diffuse(adj, h1, h2, torch.eye(2, dtype=torch.float64))
        np.testing.assert_allclose(out.detach().numpy(), [[1.0, 3.0]])

    def test_matches_entrywise_oracle(self, rng):
        h1 = torch.tensor(rng.normal(size=(5, 3)))
        h2 = torch.tensor(rng.normal(size=(3, 3)))
        adj = torch.tensor(rng.random((5, 3)) * (rng.random((5, 3)) > 0.4))
        theta_mat = torch.tensor(rng.normal(size=(3, 3)))
        out = diffuse(adj, h1, h2, theta_mat)
        expected = oracles.diffuse(adj.tolist(), h1.tolist(), h2.tolist(),
                                   theta_mat.tolist())
        np.testing.assert_allclose(out.detach().numpy(), expected, rtol=1e-6, atol=1e-9)

    def test_convex_combination_bound(self, rng):
        # identity transform + nonneg inputs: pre-activation values stay inside
        # the [min, max] of the contributing coordinates
        h1 = torch.tensor(rng.random((4, 3)))
        h2 = torch.tensor(rng.random((2, 3)))
        adj = torch.tensor(rng.random((4, 2)))
        out = diffuse(adj, h1, h2, torch.eye(3, dtype=torch.float64))
        for j in range(2):
            contributors = torch.cat([h1, h2[j:j + 1]], dim=0)
            lo = contributors.min(dim=0).values
            hi = contributors.max(dim=0).values
            assert torch.all(out[j] >= lo - 1e-12)
            assert torch.all(out[j] <= hi + 1e-12)


def _step(dim, theta, exclude_diagonal, identity=False, dtype=torch.float64):
    step = DiffusionStep(dim, theta, exclude_diagonal).to(dtype)
    if identity:
        with torch.no_grad():
            step.transform.copy_(torch.eye(dim, dtype=dtype))
    return step


class TestCrossInnerSteps:
    def test_virtual_bootstrap_gives_empty_graph(self, rng):
        r1 = torch.tensor(rng.random((4, 3)))
        step = _step(3, 0.05, exclude_diagonal=False, identity=True)
        h_cr, adj = cross_time_step(torch.zeros_like(r1), r1, step)
        assert torch.all(adj == 0)
        assert torch.allclose(h_cr, r1)  # relu(r @ I) with r >= 0

    def test_self_pairs_dominate_when_equal(self, rng):
        r = torch.tensor(rng.normal(size=(3, 4)))
        step = _step(4, 0.99, exclude_diagonal=False, identity=True)
        h_cr, adj = cross_time_step(r, r, step)
        # identical features: every self-pair cosine is exactly 1 >= 0.99
        assert torch.all(torch.diagonal(adj) >= 0.99)

    def test_cross_matches_composition_oracle(self, rng):
        h_prev = torch.tensor(rng.normal(size=(4, 3)))
        r_t = torch.tensor(rng.normal(size=(4, 3)))
        step = _step(3, 0.2, exclude_diagonal=False)
        h_cr, adj = cross_time_step(h_prev, r_t, step)
        o_adj = oracles.learn_structure(
            h_prev.tolist(), r_t.tolist(),
            step.learner.w_source.tolist(), step.learner.w_target.tolist(), 0.2)
        expected = oracles.diffuse(o_adj, h_prev.tolist(), r_t.tolist(),
                                   step.transform.tolist())
        np.testing.assert_allclose(adj.detach().numpy(), o_adj, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(h_cr.detach().numpy(), expected, rtol=1e-6, atol=1e-9)

    def test_single_channel_inner_is_projection(self, rng):
        h = torch.tensor(rng.random((1, 3)))
        step = _step(3, 0.1, exclude_diagonal=True, identity=True)
        h_in, adj = inner_time_step(h, step)
        assert torch.all(adj == 0)
        assert torch.allclose(h_in, h)

    def test_two_identical_channels_average_to_shared(self, rng):
        v = torch.tensor(rng.random(4))
        h = torch.stack([v, v])
        step = _step(4, 0.5, exclude_diagonal=True, identity=True)
        h_in, adj = inner_time_step(h, step)
        assert torch.allclose(h_in[0], v) and torch.allclose(h_in[1], v)

    def test_inner_matches_composition_oracle(self, rng):
        h = torch.tensor(rng.normal(size=(6, 4)))
        step = _step(4, 0.15, exclude_diagonal=True)
        h_in, adj = inner_time_step(h, step)
        o_adj = oracles.learn_structure(
            h.tolist(), h.tolist(), step.learner.w_source.tolist(),
            step.learner.w_target.tolist(), 0.15, exclude_diagonal=True)
        expected = oracles.diffuse(o_adj, h.tolist(), h.tolist(),
                                   step.transform.tolist())
        np.testing.assert_allclose(h_in.detach().numpy(), expected, rtol=1e-6, atol=1e-9)


class TestRunSequence:
    def test_single_step_unrolls_base_case(self, rng):
        r = torch.tensor(rng.normal(size=(1, 5, 3)))
        diffuser = SequenceDiffuser(3).double()
        states, graphs = run_sequence(r, diffuser, collect_graphs=True)
        h_cr, _ = cross_time_step(torch.zeros(5, 3, dtype=torch.float64),
                                  r[0], diffuser.cross)
        h_in, _ = inner_time_step(h_cr, diffuser.inner)
        assert torch.allclose(states[0], h_in)
        assert len(graphs) == 1

    def test_constant_input_distance_shrinks(self, rng, capsys):
        r = torch.tensor(rng.random((8, 4, 3))).double()
        r[:] = r[0]
        diffuser = SequenceDiffuser(3).double()
        states, _ = run_sequence(r, diffuser)
        gaps = [(states[t + 1] - states[t]).norm().item() for t in range(7)]
        print("fixed-point probe gaps:", [round(g, 5) for g in gaps])
        # reported, not asserted: empirical contraction on constant input
        assert len(gaps) == 7

    def test_direction_symmetry_with_shared_params(self, rng):
        r = torch.tensor(rng.normal(size=(6, 4, 3)))
        diffuser = SequenceDiffuser(3).double()
        fwd, _ = run_sequence(r, diffuser, "forward")
        rev_of_flipped, _ = run_sequence(r.flip(0), diffuser, "reverse")
        # reverse(flip(input)) with shared params = flip(forward(input))
        assert torch.allclose(rev_of_flipped, fwd.flip(0), atol=1e-10)

    def test_ablation_flags_skip_steps(self, rng):
        r = torch.tensor(rng.random((4, 3, 3))).double()
        no_inner = SequenceDiffuser(3, use_inner=False).double()
        states, graphs = no_inner(r, collect_graphs=True)
        assert all(g[1] is None for g in graphs)
        no_cross = SequenceDiffuser(3, use_cross=False).double()
        states2, graphs2 = no_cross(r, collect_graphs=True)
        assert all(g[0] is None for g in graphs2)

    def test_batched_matches_loop(self, rng):
        r = torch.tensor(rng.normal(size=(3, 5, 4, 3)))
        diffuser = SequenceDiffuser(3).double()
        batched, _ = run_sequence(r, diffuser)
        for b in range(3):
            single, _ = run_sequence(r[b], diffuser)
            assert torch.allclose(batched[b], single, atol=1e-12)


class TestGradients:
    def test_structure_plus_diffusion_matches_finite_differences(self, rng):
        torch.manual_seed(4)
        dim = 3
        step = _step(dim, 0.2, exclude_diagonal=False)
        h1 = torch.tensor(rng.normal(size=(4, dim)), requires_grad=True)
        h2 = torch.tensor(rng.normal(size=(3, dim)), requires_grad=True)
        downstream = torch.tensor(rng.normal(size=(3, dim)))

        def full_loss():
            out, adj = step(h1, h2)
            return (out * downstream).sum()

        # keep the check away from the threshold dead zone and relu kinks
        with torch.no_grad():
            adj = learn_structure(h1, h2, step.learner)
            raw = learn_structure(h1, h2, _learner(dim, 1e-9,
                                                   step.learner.w_source,
                                                   step.learner.w_target))
        assert (raw - 0.2).abs().min() > 1e-4

        loss = full_loss()
        tensors = [h1, h2, step.learner.w_source, step.learner.w_target,
                   step.transform]
        grads = torch.autograd.grad(loss, tensors)

        for tensor, analytic in zip(tensors, grads):
            def scalar_fn(values, tensor=tensor):
                saved = tensor.detach().clone()
                with torch.no_grad():
                    tensor.copy_(torch.tensor(values).reshape(tensor.shape))
                try:
                    return full_loss().item()
                finally:
                    with torch.no_grad():
                        tensor.copy_(saved)

            fd = torch.tensor(oracles.central_difference(
                scalar_fn, tensor.detach().reshape(-1).tolist(), eps=1e-3))
            rel = (analytic.reshape(-1) - fd).norm() / max(
                analytic.norm().item(), fd.norm().item(), 1e-12)
            assert rel < 1e-4, f"gradient mismatch: rel={rel:.2e}"


class TestGraphExport:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        adj = rng.random((3, 4)).astype(np.float32)
        graph = DiffusionGraph(("a", "b", "c"), ("w", "x", "y", "z"), adj)
        path = graph.save(tmp_path / "g.json")
        loaded = DiffusionGraph.load(path)
        assert loaded.adjacency.dtype == np.float32
        assert np.array_equal(loaded.adjacency, adj)
        assert loaded.source_nodes == graph.source_nodes
        assert loaded.target_nodes == graph.target_nodes
