import itertools
from collections import defaultdict

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from experiments.services.deposition import (
    LayerConfig,
    apply_string,
    changed_coordinates,
    deposit,
    encode_profile,
    flat_profile,
    initial_state,
    iid_driver,
    kernel_for,
    layer_driver,
    layer_equivalent,
    markov_driver,
    relative_deposit,
    relativize,
    step_iid,
    step_layer,
    step_markov,
    uniform_markov_driver,
)
from experiments.services.errors import DriverSpecError, NotIrreducible, NotLazy, VertexOutOfRange
from experiments.services.graph import complete_graph, cycle_graph, path_graph

from .fixtures import four_vertex_arcs, four_vertex_graph


class DepositTests(SimpleTestCase):
    def test_path_middle_drop(self):
        self.assertEqual(deposit((2, 0, 1), path_graph(3), 1), (2, 3, 1))

    def test_complete_graph_drop(self):
        self.assertEqual(deposit((5, 3, 4), complete_graph(3), 2), (5, 3, 6))

    def test_drop_outside_graph(self):
        with self.assertRaises(VertexOutOfRange):
            deposit((0, 0, 0), path_graph(3), 5)

    def test_relative_deposit_new_maximum(self):
        self.assertEqual(relative_deposit((0, 0, 0), complete_graph(3), 0), (0, -1, -1))

    def test_relative_deposit_below_maximum(self):
        self.assertEqual(relative_deposit((0, -1, -1), path_graph(3), 2), (0, -1, 0))

    def test_apply_string(self):
        g = complete_graph(3)
        self.assertEqual(apply_string(flat_profile(3), g, (0, 1, 2)), (-2, -1, 0))
        self.assertEqual(apply_string((0, -5, -3), g, (0, 1, 2)), (-2, -1, 0))

    def test_changed_coordinates(self):
        self.assertEqual(changed_coordinates((0, -1, -2), (0, -2, -3)), 2)

    def test_encoding_orders_by_depth(self):
        self.assertEqual(encode_profile((0, -1)), b"\x00\x00\x00\x01")


profiles = st.lists(st.integers(min_value=-20, max_value=20), min_size=1, max_size=7)


class DepositPropertyTests(SimpleTestCase):
    @settings(max_examples=150, deadline=None)
    @given(profiles, st.integers(min_value=-50, max_value=50), st.data())
    def test_shift_equivariance(self, h, c, data):
        g = cycle_graph(len(h)) if len(h) >= 3 else path_graph(len(h))
        i = data.draw(st.integers(min_value=0, max_value=len(h) - 1))
        shifted = tuple(v + c for v in h)
        self.assertEqual(deposit(shifted, g, i), tuple(v + c for v in deposit(h, g, i)))
        self.assertEqual(relativize(deposit(h, g, i)), relative_deposit(relativize(h), g, i))

    @settings(max_examples=150, deadline=None)
    @given(profiles, st.data())
    def test_relative_deposit_keeps_zero_maximum(self, h, data):
        g = path_graph(len(h))
        x = relativize(h)
        i = data.draw(st.integers(min_value=0, max_value=len(h) - 1))
        y = relative_deposit(x, g, i)
        self.assertEqual(max(y), 0)
        self.assertTrue(all(v <= 0 for v in y))


class DriverValidationTests(SimpleTestCase):
    def test_iid_defaults_to_uniform(self):
        self.assertEqual(iid_driver(path_graph(4)).p, (0.25,) * 4)

    def test_iid_rejects_bad_vectors(self):
        g = path_graph(3)
        with self.assertRaises(DriverSpecError):
            iid_driver(g, [0.5, 0.5, 0.0])
        with self.assertRaises(DriverSpecError):
            iid_driver(g, [0.5, 0.5])
        with self.assertRaises(DriverSpecError):
            iid_driver(g, [0.4, 0.4, 0.4])

    def test_markov_requires_lazy_chain(self):
        g = path_graph(2)
        with self.assertRaises(NotLazy):
            markov_driver(g, [[0.0, 1.0], [0.5, 0.5]])

    def test_markov_requires_irreducible_chain(self):
        g = path_graph(2)
        with self.assertRaises(NotIrreducible):
            markov_driver(g, [[1.0, 0.0], [0.5, 0.5]])

    def test_markov_rejects_bad_rows(self):
        with self.assertRaises(DriverSpecError):
            markov_driver(path_graph(2), [[0.6, 0.6], [0.5, 0.5]])
        with self.assertRaises(DriverSpecError):
            markov_driver(path_graph(2), [[1.0]])

    def test_uniform_markov_on_four_vertex_arcs(self):
        driver = uniform_markov_driver(four_vertex_graph(), four_vertex_arcs())
        np.testing.assert_allclose(driver.array.sum(axis=1), 1.0)
        self.assertAlmostEqual(driver.row(3)[1], 0.5)
        np.testing.assert_allclose(driver.stationary() @ driver.array, driver.stationary(), atol=1e-12)

    def test_driver_arrays_are_built_once(self):
        g = four_vertex_graph()
        driver = uniform_markov_driver(g, four_vertex_arcs())
        self.assertIs(driver.array, driver.array)
        self.assertFalse(driver.array.flags.writeable)
        iid = iid_driver(g)
        self.assertIs(iid.weights, iid.weights)

    def test_layer_parameters(self):
        g = path_graph(3)
        with self.assertRaises(DriverSpecError):
            layer_driver(g, 0, 0.5)
        with self.assertRaises(DriverSpecError):
            layer_driver(g, 2, 1.0)
        driver = layer_driver(g, 2, 0.5)
        self.assertAlmostEqual(driver.epsilon, 1.0 / 6.0)


class LayerConfigTests(SimpleTestCase):
    def setUp(self):
        self.g = path_graph(3)
        self.config = LayerConfig(top=(0, -2, 0), windows=(1, 1, 1), k=3)

    def test_feasible_slots(self):
        self.assertEqual(self.config.feasible_slots(self.g, 0), (1,))

    def test_fill_keeps_top(self):
        filled = self.config.fill(0, 1)
        self.assertEqual(filled.top, (0, -2, 0))
        self.assertEqual(filled.windows[0], 3)
        self.assertEqual(filled.occupied_heights(0), [0, -1])

    def test_single_layer_screen_matches_relative_deposit(self):
        g = path_graph(4)
        config = LayerConfig(top=(0, -1, -3, -2), windows=(1, 1, 1, 1), k=1)
        for v in range(4):
            self.assertEqual(config.screen(g, v).top, relative_deposit(config.top, g, v))
            self.assertEqual(config.screen(g, v).windows, (1, 1, 1, 1))

    def test_flat_ground_violates_exclusion_until_settled(self):
        self.assertFalse(LayerConfig.flat(3, 2).satisfies_exclusion(self.g))
        self.assertTrue(LayerConfig.settled(self.g, 2).satisfies_exclusion(self.g))

    def test_equivalence_ignores_bits_beyond_depth(self):
        a = LayerConfig(top=(0, -1), windows=(0b101, 1), k=3)
        b = LayerConfig(top=(0, -1), windows=(0b001, 1), k=3)
        self.assertTrue(layer_equivalent(a, b, 2))
        self.assertFalse(layer_equivalent(a, b, 3))

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(min_value=2, max_value=4),
        st.floats(min_value=0.0, max_value=0.9),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    def test_exclusion_along_random_trajectories(self, k, rho, seed):
        g = four_vertex_graph()
        kernel = kernel_for(g, layer_driver(g, k, rho))
        state = initial_state(g, kernel.driver)
        rng = np.random.default_rng(seed)
        for _ in range(60):
            state, _ = kernel.sample(state, rng)
            self.assertTrue(state.satisfies_exclusion(g))
            self.assertEqual(max(state.top), 0)


class StepTests(SimpleTestCase):
    def test_iid_step_deposits_at_the_drawn_vertex(self):
        g = path_graph(4)
        driver = iid_driver(g, [0.1, 0.2, 0.3, 0.4])
        rng = np.random.default_rng(0)
        x = (0, -1, -2, -3)
        for _ in range(50):
            nxt, dropped = step_iid(x, g, driver, rng)
            self.assertEqual(nxt, relative_deposit(x, g, dropped))
            x = nxt

    def test_same_seed_same_steps(self):
        g = cycle_graph(5)
        driver = iid_driver(g)
        a, b = np.random.default_rng(7), np.random.default_rng(7)
        self.assertEqual(
            [step_iid((0, 0, 0, 0, 0), g, driver, a)[1] for _ in range(20)],
            [step_iid((0, 0, 0, 0, 0), g, driver, b)[1] for _ in range(20)],
        )

    def test_markov_step_follows_the_arcs(self):
        g = four_vertex_graph()
        arcs = four_vertex_arcs()
        driver = uniform_markov_driver(g, arcs)
        rng = np.random.default_rng(1)
        state = ((0, -1, 0, -2), 2)
        for _ in range(100):
            (x, v), dropped = step_markov(state, g, driver, rng)
            self.assertEqual(v, dropped)
            self.assertIn((state[1], v), arcs.arcs)
            self.assertEqual(x, relative_deposit(state[0], g, v))
            state = (x, v)

    def test_layer_step_keeps_exclusion(self):
        g = path_graph(3)
        driver = layer_driver(g, 2, 0.5)
        rng = np.random.default_rng(2)
        psi = LayerConfig.settled(g, 2)
        for _ in range(100):
            psi, v = step_layer(psi, g, driver, rng)
            self.assertIn(v, range(3))
            self.assertTrue(psi.satisfies_exclusion(g))
            self.assertEqual(max(psi.top), 0)


class KernelTests(SimpleTestCase):
    def test_iid_law_sums_to_one(self):
        g = path_graph(3)
        kernel = kernel_for(g, iid_driver(g, [0.5, 0.25, 0.25]))
        law = kernel.law((0, -1, -2))
        self.assertAlmostEqual(sum(p for p, _, _ in law), 1.0)
        self.assertIn((0.25, (0, -1, -1), 2), law)

    def test_layer_law_sums_to_one(self):
        g = path_graph(3)
        kernel = kernel_for(g, layer_driver(g, 3, 0.4))
        law = kernel.law(LayerConfig(top=(0, -2, 0), windows=(1, 1, 1), k=3))
        self.assertAlmostEqual(sum(p for p, _, _ in law), 1.0)

    def test_advance_reports_rise(self):
        g = complete_graph(3)
        kernel = kernel_for(g, iid_driver(g))
        nxt, v, rose = kernel.advance((0, -1, -1), (0.9, 0.0, 0.0))
        self.assertEqual(v, 2)
        self.assertTrue(rose)
        self.assertEqual(nxt, (-1, -2, 0))

    def test_markov_kernel_respects_support(self):
        g = four_vertex_graph()
        kernel = kernel_for(g, uniform_markov_driver(g, four_vertex_arcs()))
        state = initial_state(g, kernel.driver)
        self.assertEqual(state, ((0, 0, 0, 0), 0))
        for _, (_, w), dropped in kernel.law(state):
            self.assertEqual(w, dropped)
            self.assertIn((0, w), four_vertex_arcs().arcs)


class FrequencyTests(SimpleTestCase):
    def test_iid_sites_follow_the_weights(self):
        g = path_graph(4)
        p = np.array([0.1, 0.2, 0.3, 0.4])
        driver = iid_driver(g, p.tolist())
        rng = np.random.default_rng(11)
        steps = 100_000
        x = flat_profile(4)
        counts = np.zeros(4)
        for _ in range(steps):
            x, dropped = step_iid(x, g, driver, rng)
            counts[dropped] += 1
        sigma = np.sqrt(steps * p * (1 - p))
        self.assertTrue(np.all(np.abs(counts - steps * p) <= 3 * sigma), counts)

    def test_markov_transitions_follow_the_driver_rows(self):
        g = four_vertex_graph()
        driver = uniform_markov_driver(g, four_vertex_arcs())
        rng = np.random.default_rng(12)
        counts = np.zeros((4, 4))
        state = initial_state(g, driver)
        for _ in range(100_000):
            v = state[1]
            state, dropped = step_markov(state, g, driver, rng)
            counts[v, dropped] += 1
        for v in range(4):
            row = driver.array[v]
            support = np.flatnonzero(row)
            self.assertEqual(counts[v].sum(), counts[v, support].sum())
            expected = counts[v].sum() * row[support]
            self.assertGreater(stats.chisquare(counts[v, support], expected).pvalue, 1e-3)


def _layer_configs(g, k, depth):
    """Every exclusion-respecting config whose top profile is at most ``depth`` deep."""
    for top in itertools.product(range(-depth, 1), repeat=g.n):
        if max(top) != 0:
            continue
        for windows in itertools.product(range(1, 1 << k, 2), repeat=g.n):
            config = LayerConfig(top=top, windows=windows, k=k)
            if config.satisfies_exclusion(g):
                yield config


def _class_law(kernel, config, k):
    mask = (1 << k) - 1
    law = defaultdict(float)
    for prob, nxt, v in kernel.law(config):
        law[(nxt.top, tuple(w & mask for w in nxt.windows), v)] += prob
    return dict(law)


class LayerEquivalenceTests(SimpleTestCase):
    def assert_equivalent_configs_share_law(self, g, k, junk):
        kernel = kernel_for(g, layer_driver(g, k, 0.3))
        checked = 0
        for config in _layer_configs(g, k, depth=2):
            expected = _class_law(kernel, config, k)
            for extra in itertools.product(junk, repeat=g.n):
                padded = LayerConfig(
                    top=config.top,
                    windows=tuple(w | e for w, e in zip(config.windows, extra)),
                    k=k,
                )
                self.assertTrue(layer_equivalent(config, padded, k))
                law = _class_law(kernel, padded, k)
                self.assertEqual(law.keys(), expected.keys())
                for key, prob in expected.items():
                    self.assertAlmostEqual(law[key], prob, places=12)
                checked += 1
        self.assertGreater(checked, 0)

    def test_equivalent_configs_share_one_step_law_on_p3(self):
        self.assert_equivalent_configs_share_law(path_graph(3), 2, (0, 1 << 2, 3 << 2))

    def test_equivalent_configs_share_one_step_law_on_p4(self):
        self.assert_equivalent_configs_share_law(path_graph(4), 2, (0, 1 << 2))
