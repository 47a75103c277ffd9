import numpy as np
from django.test import SimpleTestCase, tag

from experiments.services.chain import (
    assemble_transitions,
    build_s1_iid,
    build_s1_layer,
    build_s1bar_markov,
    certificate_iid,
    certificate_layer,
    certificate_markov,
    communicating_set,
    default_depth_bound,
    enumerate_states,
    markov_witness,
    neumann_killing_norm,
    replay_markov_core,
    verify_certificate,
)
from experiments.services.deposition import (
    LayerConfig,
    apply_string,
    iid_driver,
    layer_driver,
    uniform_markov_driver,
)
from experiments.services.errors import (
    CertificateViolation,
    DepthBoundTooSmall,
    NotIrreducible,
    NotLazy,
    StateCapExceeded,
)
from experiments.services.graph import (
    build_i_ordering,
    complete_graph,
    cycle_graph,
    path_graph,
    validate_driver_graph,
)

from .fixtures import complete_arcs, cycle_arcs, four_vertex_arcs, four_vertex_graph


class IIDCommunicatingSetTests(SimpleTestCase):
    def test_path_core(self):
        self.assertEqual(
            build_s1_iid(path_graph(3)),
            [(-2, -1, 0), (0, -1, 0), (0, -1, -2)],
        )

    def test_core_state_forgets_the_start(self):
        g = complete_graph(3)
        for start in [(0, 0, 0), (0, -5, -3), (0, -1, -9)]:
            self.assertEqual(apply_string(start, g, (1, 2)), (-2, -1, 0))

    def test_ordering_drops_bound_the_depth(self):
        rng = np.random.default_rng(2)
        for g in (path_graph(5), four_vertex_graph(), cycle_graph(6)):
            for i in range(g.n):
                sequence = build_i_ordering(g, i).sequence
                for _ in range(25):
                    raw = -rng.integers(0, 15, size=g.n)
                    raw[i] = 0
                    x = apply_string(tuple(int(v) for v in raw), g, sequence)
                    self.assertGreaterEqual(min(x), -(g.n - 1))
                    self.assertEqual(x, build_s1_iid(g)[i])

    def test_path_certificate(self):
        cert = certificate_iid(path_graph(3), [1 / 3] * 3)
        self.assertAlmostEqual(cert.alpha, 1 / 9)
        self.assertAlmostEqual(cert.alpha_prime, (1 / 3) ** 6)
        self.assertEqual(cert.s, 6)
        self.assertEqual(cert.killing_time, 2)
        self.assertEqual(cert.core_depth, 2)
        self.assertEqual(len(cert.construction_log), 9)

    def test_skewed_weights(self):
        cert = certificate_iid(path_graph(3), [0.98, 0.01, 0.01])
        self.assertAlmostEqual(cert.alpha, 1e-4)

    def test_scaled_certificate_is_capped(self):
        cert = certificate_iid(path_graph(3), [1 / 3] * 3)
        self.assertAlmostEqual(cert.scaled(9.0).alpha_prime, (1 / 3) ** 4)
        self.assertEqual(cert.scaled(1e9).alpha_prime, 1.0)

    def test_single_vertex(self):
        g = path_graph(1)
        core, cert = communicating_set(g, iid_driver(g))
        self.assertEqual(core, [(0,)])
        self.assertEqual(cert.s, 0)
        self.assertEqual(cert.alpha_prime, 1.0)


class MarkovCoreTests(SimpleTestCase):
    def test_complete_arcs_strings(self):
        core = build_s1bar_markov(complete_graph(3), complete_arcs(3))
        for entry in core.entries:
            self.assertEqual(entry.string[0], entry.root)
            self.assertEqual(entry.s, 3)
            self.assertEqual(entry.sigma, 4)
        self.assertEqual(core.s_bar, 42)

    def test_four_vertex_root_string(self):
        core = build_s1bar_markov(four_vertex_graph(), four_vertex_arcs())
        entry = core.entries[0]
        self.assertEqual(entry.ordering, (1, 2, 3))
        self.assertEqual(entry.string, (0, 2, 1, 2, 3))
        self.assertEqual(entry.sigma, 6)
        self.assertEqual(entry.state, (entry.profile, 3))

    def test_replay_reaches_core_from_random_profiles(self):
        g = four_vertex_graph()
        core = build_s1bar_markov(g, four_vertex_arcs())
        report = replay_markov_core(g, core, np.random.default_rng(7), representatives=30)
        self.assertEqual(len(report), 4)
        self.assertTrue(all(row["mismatches"] == 0 for row in report))

    def test_root_strings_bound_the_depth(self):
        rng = np.random.default_rng(3)
        cases = [
            (four_vertex_graph(), four_vertex_arcs()),
            (complete_graph(3), complete_arcs(3)),
            (cycle_graph(5), cycle_arcs(5)),
        ]
        for g, arcs in cases:
            core = build_s1bar_markov(g, arcs)
            for entry in core.entries:
                self.assertGreaterEqual(min(entry.profile), -2 * entry.s)
                for _ in range(25):
                    raw = -rng.integers(0, 12, size=g.n)
                    raw[entry.root] = 0
                    x = tuple(int(v) for v in raw)
                    replayed = apply_string(x, g, (entry.root,) * entry.s + entry.string)
                    self.assertGreaterEqual(min(replayed), -2 * entry.s)

    def test_witness_has_length_s_bar(self):
        g = four_vertex_graph()
        arcs = four_vertex_arcs()
        core = build_s1bar_markov(g, arcs)
        for v in range(4):
            for i in range(4):
                for j in range(4):
                    path = markov_witness(g, arcs, core, v, i, j)
                    self.assertEqual(len(path), core.s_bar)
                    hops = (v,) + path
                    for a, b in zip(hops, hops[1:]):
                        self.assertIn((a, b), arcs.arcs)

    def test_certificate_probability_is_positive(self):
        g = four_vertex_graph()
        cert = certificate_markov(g, uniform_markov_driver(g, four_vertex_arcs()))
        self.assertGreater(cert.alpha_prime, 0.0)
        self.assertEqual(cert.killing_time, cert.s)

    def test_driver_graph_must_be_lazy_and_irreducible(self):
        with self.assertRaises(NotLazy):
            build_s1bar_markov(complete_graph(3), cycle_arcs(3, lazy=False))
        with self.assertRaises(NotIrreducible):
            build_s1bar_markov(path_graph(2), validate_driver_graph([(0, 0), (1, 1)], 2))


class LayerCoreTests(SimpleTestCase):
    def test_core_states_satisfy_exclusion(self):
        g = path_graph(3)
        core = build_s1_layer(g, 2)
        self.assertEqual(len(core), 3)
        for config in core:
            self.assertIsInstance(config, LayerConfig)
            self.assertTrue(config.satisfies_exclusion(g))
            self.assertEqual(max(config.top), 0)

    def test_certificate(self):
        g = path_graph(3)
        cert = certificate_layer(g, layer_driver(g, 2, 0.5))
        self.assertEqual(cert.s, 3 * 2 + 2 * 3)
        self.assertAlmostEqual(cert.alpha_prime, (1 / 6) ** cert.s)


class StateSpaceTests(SimpleTestCase):
    def test_complete_graph_counts(self):
        g = complete_graph(3)
        driver = iid_driver(g)
        self.assertEqual(len(enumerate_states(g, driver, 2)), 6)
        self.assertEqual(len(enumerate_states(g, driver, 3)), 18)

    def test_depth_bound_below_core(self):
        g = path_graph(3)
        with self.assertRaises(DepthBoundTooSmall):
            enumerate_states(g, iid_driver(g), 1)

    def test_state_cap(self):
        g = path_graph(4)
        with self.assertRaises(StateCapExceeded):
            enumerate_states(g, iid_driver(g), 8, cap=10)

    def test_enumeration_is_deterministic(self):
        g = path_graph(3)
        a = enumerate_states(g, iid_driver(g), 5)
        b = enumerate_states(g, iid_driver(g), 5)
        self.assertEqual(a.encodings, b.encodings)
        self.assertEqual(a.encodings, sorted(a.encodings))

    def test_rows_are_stochastic_with_leak(self):
        g = path_graph(3)
        model = assemble_transitions(enumerate_states(g, iid_driver(g), 4))
        np.testing.assert_allclose(model.row_sums(), 1.0, atol=1e-12)
        np.testing.assert_allclose(
            np.asarray(model.redistributed.sum(axis=1)).ravel(), 1.0, atol=1e-12
        )
        self.assertGreater(model.leak.max(), 0.0)

    def test_blocks_partition_the_matrix(self):
        g = path_graph(3)
        model = assemble_transitions(enumerate_states(g, iid_driver(g), 4))
        m11, m12, m21, m22 = model.blocks()
        size = len(model.space)
        self.assertEqual(m11.shape, (3, 3))
        self.assertEqual(m22.shape, (size - 3, size - 3))
        total = m11.sum() + m12.sum() + m21.sum() + m22.sum()
        self.assertAlmostEqual(total, model.redistributed.sum())

    def test_default_depth_bound(self):
        g = path_graph(3)
        cert = certificate_iid(g, [1 / 3] * 3)
        self.assertEqual(default_depth_bound(g, cert), 8)


class CertificateCheckTests(SimpleTestCase):
    def test_path_certificate_holds(self):
        g = path_graph(3)
        cert = certificate_iid(g, [1 / 3] * 3)
        model = assemble_transitions(enumerate_states(g, iid_driver(g), 8))
        check = verify_certificate(model, cert)
        self.assertTrue(check.passed)
        self.assertGreaterEqual(check.min_entry, (1 / 3) ** 6)

    def test_inflated_certificate_fails(self):
        g = path_graph(3)
        cert = certificate_iid(g, [1 / 3] * 3).scaled(1000.0)
        model = assemble_transitions(enumerate_states(g, iid_driver(g), 8))
        with self.assertRaises(CertificateViolation) as ctx:
            verify_certificate(model, cert)
        self.assertFalse(ctx.exception.check.passed)

    def test_no_interior_states(self):
        g = path_graph(3)
        cert = certificate_iid(g, [1 / 3] * 3)
        model = assemble_transitions(enumerate_states(g, iid_driver(g), 4))
        with self.assertRaises(DepthBoundTooSmall):
            verify_certificate(model, cert)

    def test_killing_norm(self):
        g = path_graph(3)
        cert = certificate_iid(g, [1 / 3] * 3)
        model = assemble_transitions(enumerate_states(g, iid_driver(g), 8))
        self.assertLessEqual(neumann_killing_norm(model, cert.killing_time), 1 - cert.alpha + 1e-12)

    @tag("slow")
    def test_layer_certificate_on_path(self):
        g = path_graph(3)
        driver = layer_driver(g, 2, 0.3)
        core, cert = communicating_set(g, driver)
        depth = max(default_depth_bound(g, cert), cert.core_depth + cert.s)
        model = assemble_transitions(enumerate_states(g, driver, depth, core=core))
        self.assertTrue(verify_certificate(model, cert).passed)
