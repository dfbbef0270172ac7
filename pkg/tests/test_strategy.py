import math

import numpy as np
import pytest

from splitstream import (HysteresisSelector, NetworkConditions,
                         StrategyProfile, best_strategy, crossover_bandwidth,
                         latency_regions, total_latency)

CLIENT = StrategyProfile(name="client", kind="client_only", client_infer_s=0.30)
SPLIT = StrategyProfile(name="split2", kind="split", client_infer_s=0.04,
                        client_encode_s=0.02, server_decode_s=0.01,
                        server_infer_s=0.05, payload_bytes=5e4, cut="stage2")
SERVER = StrategyProfile(name="server", kind="server_only",
                         client_encode_s=0.02, server_decode_s=0.01,
                         server_infer_s=0.02, payload_bytes=3e5)


def _net(bw, rtt=0.0):
    return NetworkConditions(bandwidth_bps=bw, rtt_s=rtt)


class TestProfile:
    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="kind"):
            StrategyProfile(name="x", kind="edge")

    def test_client_only_must_stay_local(self):
        with pytest.raises(ValueError, match="client_only"):
            StrategyProfile(name="x", kind="client_only", payload_bytes=10)
        with pytest.raises(ValueError, match="client_only"):
            StrategyProfile(name="x", kind="client_only", server_infer_s=0.1)

    def test_costs_non_negative(self):
        with pytest.raises(ValueError, match="non-negative"):
            StrategyProfile(name="x", kind="split", client_infer_s=-0.1)

    def test_fixed_cost_sums_components(self):
        assert SPLIT.fixed_cost_s == pytest.approx(0.12)

    def test_network_conditions_validated(self):
        with pytest.raises(ValueError):
            NetworkConditions(bandwidth_bps=-1.0)
        with pytest.raises(ValueError):
            NetworkConditions(bandwidth_bps=1.0, rtt_s=-0.1)
        assert NetworkConditions(bandwidth_bps=0.0).bandwidth_bps == 0.0


class TestTotalLatency:
    def test_client_only_ignores_network(self):
        for net in (_net(1.0), _net(1e9), _net(0.0), _net(1e6, rtt=5.0)):
            assert total_latency(CLIENT, net) == 0.30

    def test_split_arithmetic(self):
        p = StrategyProfile(name="s", kind="split", client_infer_s=0.1,
                            payload_bytes=1e6)
        assert total_latency(p, _net(1e7)) == pytest.approx(0.2)

    def test_high_bandwidth_asymptote(self):
        assert total_latency(SPLIT, _net(1e12)) == pytest.approx(
            SPLIT.fixed_cost_s, abs=1e-5)

    def test_dead_link_is_infinite(self):
        assert total_latency(SPLIT, _net(0.0)) == math.inf
        assert total_latency(SERVER, _net(0.0)) == math.inf

    def test_rtt_charged_to_network_strategies_only(self):
        base = total_latency(SPLIT, _net(1e6))
        assert total_latency(SPLIT, _net(1e6, rtt=0.05)) == pytest.approx(
            base + 0.05)
        assert total_latency(CLIENT, _net(1e6, rtt=0.05)) == 0.30

    def test_strictly_decreasing_in_bandwidth(self):
        lats = [total_latency(SPLIT, _net(bw))
                for bw in np.logspace(3, 9, 13)]
        assert all(b < a for a, b in zip(lats, lats[1:]))

    def test_constant_when_payload_free(self):
        p = StrategyProfile(name="s", kind="split", client_infer_s=0.1)
        assert {total_latency(p, _net(bw)) for bw in (1.0, 1e6, 1e12)} == {0.1}


class TestBestStrategy:
    def test_requires_candidates(self):
        with pytest.raises(ValueError, match="no strategies"):
            best_strategy([], _net(1e6))

    def test_regime_endpoints(self):
        profiles = [CLIENT, SPLIT, SERVER]
        assert best_strategy(profiles, _net(1.0)).name == "client"
        assert best_strategy(profiles, _net(1e12)).name == "server"
        assert best_strategy(profiles, _net(1e6)).name == "split2"

    def test_tie_prefers_smaller_payload_then_name(self):
        heavy = StrategyProfile(name="a_heavy", kind="split",
                                client_infer_s=0.1, payload_bytes=1e6)
        light = StrategyProfile(name="z_light", kind="split",
                                client_infer_s=0.2)
        assert best_strategy([heavy, light], _net(1e7)).name == "z_light"
        twin = StrategyProfile(name="b_twin", kind="split",
                               client_infer_s=0.2)
        assert best_strategy([twin, light], _net(1e7)).name == "b_twin"

    def test_matches_pointwise_minimum(self):
        profiles = [CLIENT, SPLIT, SERVER]
        for bw in np.logspace(0, 10, 41):
            net = _net(bw)
            best = best_strategy(profiles, net)
            floor = min(total_latency(p, net) for p in profiles)
            assert total_latency(best, net) == floor


class TestCrossover:
    def test_known_crossing(self):
        p1 = StrategyProfile(name="c", kind="client_only", client_infer_s=0.3)
        p2 = StrategyProfile(name="s", kind="split", client_infer_s=0.1,
                             payload_bytes=1e6)
        bstar = crossover_bandwidth(p1, p2)
        assert bstar == pytest.approx(5e6)
        net = _net(bstar)
        assert total_latency(p1, net) == pytest.approx(total_latency(p2, net))

    def test_parallel_lines(self):
        p1 = StrategyProfile(name="a", kind="split", client_infer_s=0.1,
                             payload_bytes=1e4)
        p2 = StrategyProfile(name="b", kind="split", client_infer_s=0.1,
                             payload_bytes=1e6)
        assert crossover_bandwidth(p1, p2) is None

    def test_equal_payloads_dominated(self):
        p1 = StrategyProfile(name="a", kind="split", client_infer_s=0.1,
                             payload_bytes=1e5)
        p2 = StrategyProfile(name="b", kind="split", client_infer_s=0.2,
                             payload_bytes=1e5)
        assert crossover_bandwidth(p1, p2) is None

    def test_negative_crossing_is_none(self):
        cheap = StrategyProfile(name="a", kind="split", client_infer_s=0.1)
        dear = StrategyProfile(name="b", kind="split", client_infer_s=0.3,
                               payload_bytes=1e6)
        assert crossover_bandwidth(cheap, dear) is None

    def test_rtt_shifts_network_lines_only(self):
        p1 = StrategyProfile(name="c", kind="client_only", client_infer_s=0.3)
        p2 = StrategyProfile(name="s", kind="split", client_infer_s=0.1,
                             payload_bytes=1e6)
        assert crossover_bandwidth(p1, p2, rtt_s=0.1) == pytest.approx(1e7)


class TestLatencyRegions:
    def test_rows_and_progression(self):
        grid = np.logspace(3, 9, 61)
        rows = latency_regions([CLIENT, SPLIT, SERVER], grid)
        assert len(rows) == len(grid)
        order = {"client": 0, "split2": 1, "server": 2}
        ranks = []
        for row, bw in zip(rows, grid):
            assert set(row) == {"bandwidth", "strategy", "latency"}
            assert row["bandwidth"] == float(bw)
            ranks.append(order[row["strategy"]])
        assert ranks == sorted(ranks)
        assert ranks[0] == 0 and ranks[-1] == 2

    def test_latency_matches_model(self):
        rows = latency_regions([CLIENT, SPLIT], [1e6], rtt_s=0.01)
        assert rows[0]["latency"] == total_latency(
            best_strategy([CLIENT, SPLIT], _net(1e6, rtt=0.01)),
            _net(1e6, rtt=0.01))


class TestHysteresis:
    def _client(self, infer=0.2):
        return StrategyProfile(name="client", kind="client_only",
                               client_infer_s=infer)

    def _split(self, b=0.1, d=1e6):
        return StrategyProfile(name="split", kind="split", client_infer_s=b,
                               payload_bytes=d)

    def test_parameter_validation(self):
        with pytest.raises(ValueError, match="margin"):
            HysteresisSelector(CLIENT, margin=-0.1)
        with pytest.raises(ValueError, match="dwell"):
            HysteresisSelector(CLIENT, dwell_calls=0)

    def test_switches_on_dwell_boundary(self):
        client, split = self._client(), self._split()
        sel = HysteresisSelector(client, margin=0.1, dwell_calls=3)
        fast = _net(1e9)  # split latency ~0.101, beats 0.2 by far
        picks = [sel.select([client, split], fast).name for _ in range(4)]
        assert picks == ["client", "client", "split", "split"]

    def test_margin_is_inclusive(self):
        client, split = self._client(0.2), self._split(b=0.1, d=1e6)
        sel = HysteresisSelector(client, margin=0.1, dwell_calls=2)
        at_margin = _net(1.25e7)  # split exactly 0.18 = 0.2 * (1 - margin)
        picks = [sel.select([client, split], at_margin).name for _ in range(2)]
        assert picks == ["client", "split"]

    def test_small_improvements_never_switch(self):
        client, split = self._client(0.2), self._split(b=0.1, d=1e6)
        sel = HysteresisSelector(client, margin=0.1, dwell_calls=2)
        near = _net(1e7)  # split 0.19, inside the 10% band
        for _ in range(6):
            assert sel.select([client, split], near).name == "client"

    def test_alternating_conditions_reset_streak(self):
        client, split = self._client(), self._split()
        sel = HysteresisSelector(client, margin=0.1, dwell_calls=2)
        good, bad = _net(1e9), _net(1e4)
        for i in range(8):
            picked = sel.select([client, split], good if i % 2 == 0 else bad)
            assert picked.name == "client"

    def test_challenger_change_resets_streak(self):
        client = self._client(0.5)
        s1 = StrategyProfile(name="s1", kind="split", client_infer_s=0.1,
                             payload_bytes=1e6)
        s2 = StrategyProfile(name="s2", kind="split", client_infer_s=0.05,
                             payload_bytes=1e8)
        sel = HysteresisSelector(client, margin=0.1, dwell_calls=3)
        favors_s1 = _net(1e7)   # s1: 0.2, s2: 10.05
        favors_s2 = _net(1e10)  # s2: 0.06, s1: ~0.1001
        seq = [favors_s1, favors_s2, favors_s1, favors_s1, favors_s1]
        picks = [sel.select([client, s1, s2], net).name for net in seq]
        assert picks == ["client", "client", "client", "client", "s1"]

    def test_unreachable_current_replaced_immediately(self):
        stranded = self._split()
        client = self._client()
        sel = HysteresisSelector(stranded, margin=0.1, dwell_calls=1)
        assert sel.select([stranded, client], _net(0.0)).name == "client"

    def test_settles_after_switch(self):
        client, split = self._client(), self._split()
        sel = HysteresisSelector(client, margin=0.1, dwell_calls=2)
        fast = _net(1e9)
        for _ in range(5):
            last = sel.select([client, split], fast).name
        assert last == "split"
        assert sel.current.name == "split"
