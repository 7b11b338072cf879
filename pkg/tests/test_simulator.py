import logging
import random
import time
from dataclasses import replace

import pytest

from conftest import SCENARIOS, extend_chain
from services.channel_node import ChannelNode
from services.protocol import Hash256, Violation
from services.report import REPORT_HEADER, render, render_kv, render_text
from services.scenario import HEADER, generate_scenario, load_scenario, parse_scenario
from services.simulator import InvalidChain, Simulation, oracle_replay, run_scenario, sweep

logger = logging.getLogger(__name__)


def totals(outcome):
    return sum(outcome.payouts.values()), sum(outcome.deposits.values())


class TestOracle:
    def test_empty_chain(self, config):
        result = oracle_replay([], config)
        assert result.balances == config.deposits
        assert result.chain_head == Hash256.ZERO
        assert result.final_sequence == 0

    def test_fold(self, config, make_chain, alice, bob):
        chain = make_chain([(alice, bob, 30), (bob, alice, 5)])
        result = oracle_replay(chain, config)
        assert result.balances == {config.party_a: 75, config.party_b: 75}
        assert result.chain_head == chain[-1].storage_digest
        assert result.final_sequence == 2

    def test_rejects_tampered_chain(self, config, alternating_chain):
        chain = alternating_chain(4)
        chain[1] = replace(chain[1], price=7)
        with pytest.raises(InvalidChain) as caught:
            oracle_replay(chain, config)
        assert caught.value.violation.index == 2
        assert caught.value.violation.violation is Violation.BAD_SELLER_SIGNATURE

    def test_rejects_overdraft(self, config, make_chain, alice, bob):
        with pytest.raises(InvalidChain, match="overdraws"):
            oracle_replay(make_chain([(bob, alice, 51)]), config)

    def test_rejects_foreign_channel(self, config, make_chain, alice, bob):
        with pytest.raises(InvalidChain):
            oracle_replay(make_chain([(alice, bob, 1)], channel="other"), config)

    @pytest.mark.parametrize("seed", range(3))
    def test_node_matches_oracle_on_random_chain(self, seed, make_config, make_node, alice, bob):
        config = make_config(deposit_a=1000, deposit_b=1000)
        rng = random.Random(seed)
        payments = [(alice, bob, rng.randint(1, 5)) if rng.random() < 0.5 else (bob, alice, rng.randint(1, 5))
                    for _ in range(200)]
        chain = extend_chain([], payments, seed=seed)
        node = make_node(config)
        for si in chain:
            node.ingest(si, 0)
        expected = oracle_replay(chain, config)
        assert (node.state.balances, node.state.chain_head) == (expected.balances, expected.chain_head)


def one_channel(body: str, faults: str = "", channel_fields: str = "deposit_a=100 deposit_b=100 n=8 m=5 timeout=10") -> str:
    return (
        f"{HEADER}\nname inline\nseed 1\npartitions 2\n{faults}challenge period=10\n"
        f"channel ab currency=ETH a=alice b=bob {channel_fields}\n{body}"
    )


class TestSimulation:
    def test_single_payment(self):
        report = run_scenario(parse_scenario(one_channel("1 pay ab alice 30\n")))
        outcome = report.channel("ab")
        assert outcome.node_balances == outcome.oracle_balances == outcome.payouts == {"alice": 70, "bob": 130}
        assert outcome.settled_sequence == 1
        assert report.ok and report.settlement_flags == []

    def test_no_payments_settles_deposits(self):
        report = run_scenario(parse_scenario(one_channel("3 advance\n")))
        outcome = report.channel("ab")
        assert outcome.payouts == {"alice": 100, "bob": 100}
        assert outcome.settled_sequence == 0

    def test_overdraft_is_refused_by_producer(self):
        report = run_scenario(parse_scenario(one_channel("1 pay ab alice 60\n1 pay ab alice 60\n")))
        outcome = report.channel("ab")
        assert (outcome.payments, outcome.refused) == (1, 1)
        assert any("pay refused" in line for line in report.rejections)
        assert report.ok

    def test_faulty_delivery(self):
        body = "".join(f"{1 + i // 7} pay ab {'alice' if i % 3 else 'bob'} {1 + i % 4}\n" for i in range(200))
        scenario = parse_scenario(one_channel(body, faults="faults dup=0.3 reorder=3\n"))
        report = run_scenario(scenario)
        assert report.ok, report.divergence
        assert report.settlement_flags == []
        assert report.delivery.duplicates > 0
        assert report.delivery.max_displacement <= 3
        assert report.delivery.deliveries == report.channel("ab").payments + report.delivery.duplicates

    def test_unscheduled_request_restarts_checkpoint_clock(self):
        body = "1 pay ab alice 1\n1 pay ab alice 1\n1 pay ab bob 1\n2 control ab unscheduled alice\n120 advance\n"
        fields = "deposit_a=100 deposit_b=100 n=8 m=100 timeout=50"
        report = run_scenario(parse_scenario(one_channel(body, channel_fields=fields)))
        checkpoints = [(c.tick, c.sequence, c.reason, c.outcome) for c in report.checkpoints]
        assert checkpoints == [(2, 3, "UNSCHEDULED", "ACCEPTED")]
        calls = [(c.tick, c.action, c.sequence, c.outcome) for c in report.contract_calls]
        assert calls == [(2, "REQUEST", 3, "ACCEPTED"), (121, "FINALIZE", 3, "ACCEPTED")]
        assert report.channel("ab").payouts == {"alice": 99, "bob": 101}
        assert report.ok

    def test_step_by_step(self):
        scenario = parse_scenario(one_channel("1 pay ab alice 5\n"))
        simulation = Simulation(scenario)
        simulation.step(1, scenario.schedule())
        assert simulation.nodes["ab"].state.last_applied_sequence == 1
        assert simulation.registry.get("ab").pending is None


class TestShippedScenarios:
    def test_happy(self):
        report = run_scenario(load_scenario(SCENARIOS / "happy.scn"))
        assert report.ok
        assert report.settlement_flags == []
        assert report.channel("ab").payouts == {"alice": 68, "bob": 82}
        assert report.channel("cd").payouts == {"carol": 29, "dave": 51}
        for outcome in report.channels:
            paid, deposited = totals(outcome)
            assert paid == deposited

        checkpoints = [(c.tick, c.channel, c.sequence, c.reason, c.outcome) for c in report.checkpoints]
        assert (3, "ab", 5, "MODULO", "ACCEPTED") in checkpoints
        assert (2, "cd", 3, "MODULO", "ACCEPTED") in checkpoints
        assert (13, "ab", 8, "TIMEOUT", "ACCEPTED") in checkpoints
        assert (12, "cd", 5, "TIMEOUT", "ACCEPTED") in checkpoints
        for channel in ("ab", "cd"):
            sequences = [c.sequence for c in report.checkpoints if c.channel == channel]
            assert sequences == sorted(set(sequences))
        requests = [(c.tick, c.channel, c.sequence) for c in report.contract_calls if c.action == "REQUEST"]
        assert requests == [(21, "ab", 8), (21, "cd", 5)]
        finalizes = [c for c in report.contract_calls if c.action == "FINALIZE"]
        assert [(c.tick, c.channel, c.outcome) for c in finalizes] == [(42, "ab", "ACCEPTED"), (42, "cd", "ACCEPTED")]

    def test_stale_settlement_is_overturned(self):
        report = run_scenario(load_scenario(SCENARIOS / "stale_settlement.scn"))
        calls = [(c.tick, c.action, c.sequence, c.outcome) for c in report.contract_calls]
        assert calls == [
            (3, "STALE_REQUEST", 5, "ACCEPTED"),
            (4, "DISPUTE", 9, "ACCEPTED"),
            (55, "FINALIZE", 9, "ACCEPTED"),
        ]
        outcome = report.channel("ab")
        assert outcome.payouts == outcome.oracle_balances == {"alice": 40, "bob": 160}
        assert outcome.settled_sequence == 9
        assert report.ok and report.settlement_flags == []
        assert len(report.disputes) == 1

    def test_relay_claimed(self):
        report = run_scenario(load_scenario(SCENARIOS / "relay.scn"))
        assert {h.label: h.status for h in report.htlcs} == {"relay12.down": "CLAIMED", "relay12.up": "CLAIMED"}
        assert report.channel("ar").payouts == {"alice": 70, "rita": 130}
        assert report.channel("rb").payouts == {"rita": 73, "bob": 127}
        assert report.ok and report.settlement_flags == []

    def test_relay_refunded(self):
        report = run_scenario(load_scenario(SCENARIOS / "relay_abort.scn"))
        assert {h.label: h.status for h in report.htlcs} == {"relay12.down": "REFUNDED", "relay12.up": "REFUNDED"}
        assert report.channel("ar").payouts == {"alice": 95, "rita": 105}
        assert report.channel("rb").payouts == {"rita": 98, "bob": 102}
        assert report.ok and report.settlement_flags == []

    def test_idle_channel_checkpoints_once(self):
        scenario = load_scenario(SCENARIOS / "idle_timeout.scn")
        report = run_scenario(scenario)
        checkpoints = [(c.tick, c.sequence, c.reason) for c in report.checkpoints]
        assert checkpoints == [(50, 3, "TIMEOUT")]
        assert [(c.action, c.sequence) for c in report.contract_calls] == [("REQUEST", 3), ("FINALIZE", 3)]
        finalize = report.contract_calls[-1]
        assert finalize.tick == 121 + scenario.challenge.challenge_period + 1
        assert report.channel("ab").payouts == {"alice": 49, "bob": 51}


class TestDeterminism:
    @pytest.mark.parametrize("name", ["happy", "stale_settlement", "relay"])
    def test_same_seed_same_bytes(self, name):
        scenario = load_scenario(SCENARIOS / f"{name}.scn")
        assert render_text(run_scenario(scenario)) == render_text(run_scenario(scenario))

    @pytest.mark.parametrize("name", ["happy", "stale_settlement", "relay_abort"])
    def test_parallel_matches_serial(self, name):
        scenario = load_scenario(SCENARIOS / f"{name}.scn")
        assert render_text(run_scenario(scenario, parallel=True)) == render_text(run_scenario(scenario))

    def test_seed_changes_delivery(self):
        scenario = load_scenario(SCENARIOS / "happy.scn")
        reports = [run_scenario(scenario.with_seed(seed)) for seed in (1, 2)]
        assert all(report.ok for report in reports)
        assert render_text(reports[0]) != render_text(reports[1])


class TestRendering:
    def test_text_layout(self):
        text = render_text(run_scenario(load_scenario(SCENARIOS / "happy.scn")))
        lines = text.splitlines()
        assert lines[0] == REPORT_HEADER
        assert lines[-1] == "result OK"
        assert "divergence none" in lines
        assert "settlement_flags none" in lines
        assert text.endswith("\n")

    def test_kv_records(self):
        report = run_scenario(load_scenario(SCENARIOS / "stale_settlement.scn"))
        records = dict(line.split("=", 1) for line in render_kv(report).splitlines())
        assert records["channel.ab.payout.alice"] == "40"
        assert records["channel.ab.settled_sequence"] == "9"
        assert records["result"] == "OK"

    def test_settlement_flag_fails_report(self):
        report = run_scenario(parse_scenario(one_channel("1 pay ab alice 1\n")))
        assert report.ok
        report.settlement_flags.append("ab: not finalized")
        assert not report.ok
        assert render_text(report).endswith("result FAILED\n")
        assert render_kv(report).endswith("result=FAILED\n")

    def test_unknown_format(self):
        report = run_scenario(parse_scenario(one_channel("1 pay ab alice 1\n")))
        with pytest.raises(ValueError):
            render(report, "xml")


class TestSweep:
    def test_reduced_sweep(self):
        summary = sweep(range(1, 6), max_payments=40)
        assert list(summary["seed"]) == [1, 2, 3, 4, 5]
        assert (summary["divergence"] == 0).all()
        assert (summary["settlement_flags"] == 0).all()
        assert (summary["max_displacement"] <= summary["max_reorder"]).all()

    @pytest.mark.slow
    def test_full_sweep(self):
        summary = sweep(range(1, 201), max_payments=1000)
        assert int(summary["divergence"].sum()) == 0
        assert (summary["max_displacement"] <= summary["max_reorder"]).all()

    @pytest.mark.slow
    def test_generated_parallel_matches_serial(self):
        for seed in range(1, 11):
            scenario = generate_scenario(seed, 300)
            assert render_text(run_scenario(scenario, parallel=True)) == render_text(run_scenario(scenario))


@pytest.mark.perf
def test_in_order_ingest_throughput(make_config, make_node, alice, bob):
    count = 100_000
    chain = extend_chain([], [(alice, bob, 1) if i % 2 == 0 else (bob, alice, 1) for i in range(count)])
    node: ChannelNode = make_node(make_config(n=8, m=1000))
    started = time.perf_counter()
    for si in chain:
        node.ingest(si, 0)
    elapsed = time.perf_counter() - started
    logger.warning(f"ingested {count} transactions in {elapsed:.2f}s")
    assert node.state.last_applied_sequence == count
