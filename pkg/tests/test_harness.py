import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from mpd.dialects import IDENTITY, DialectSpec
from mpd.errors import ConfigError
from mpd.harness import (REGRESSION_KEY, Action, ChannelPolicy, ScenarioConfig, Simulator,
                         acceptance_bound, attack_connect_flood, attack_fixed_dialect,
                         channel_transfer, run_scenario)
from mpd.protocols import FTP, FTP_TABLE, MQTT, MQTT_TABLE, named_table
from mpd.protocols.ftp import FtpService, ftp_parse
from mpd.protocols.mqtt import Broker, MqttService
from mpd.session import ClientSession, DialectConfig, ServerSession
from mpd.sync import DialectTable

GETS = ["rget,sample.txt", "rget,blog.css", "rget,template.pdf", "rget,sample.txt"]


def outcomes(result):
    return [rec["outcome"] for rec in result.trace]


def test_channel_transfer_basics():
    policy = ChannelPolicy(drop={2}, modify={3: (0, b"\xff")}, replay={4})
    assert channel_transfer(policy, 1, b"abc") == channel_transfer(ChannelPolicy(), 1, b"abc")
    assert channel_transfer(policy, 1, b"abc").action is Action.DELIVER
    assert channel_transfer(policy, 2, b"abc").payloads == ()
    assert channel_transfer(policy, 3, b"abc").payloads == (b"\xffbc",)
    assert channel_transfer(policy, 4, b"abc").payloads == (b"abc", b"abc")


def test_channel_sub_frame_targeting():
    policy = ChannelPolicy(drop={"5:2"})
    assert channel_transfer(policy, 5, b"x", part=1).action is Action.DELIVER
    assert channel_transfer(policy, 5, b"x", part=2).action is Action.DROP


def test_policy_disjoint_and_round_trip():
    with pytest.raises(ConfigError):
        ChannelPolicy(drop={2}, replay={2})
    with pytest.raises(ConfigError):
        ChannelPolicy(loss_rate=1.5)
    policy = ChannelPolicy(drop={1, "3:2"}, modify={"4": (1, "ff00")}, replay={6}, loss_rate=0.1, seed=3)
    again = ChannelPolicy.from_dict(json.loads(json.dumps(policy.to_dict())))
    assert again == policy
    with pytest.raises(ConfigError):
        ChannelPolicy.from_dict({"dorp": [1]})


def test_seeded_loss_is_deterministic():
    policy = ChannelPolicy(loss_rate=0.3, seed=9)
    first = [channel_transfer(policy, i, b"x").action for i in range(200)]
    assert first == [channel_transfer(policy, i, b"x").action for i in range(200)]
    assert 30 < first.count(Action.DROP) < 90


def test_drop_first_request_h1():
    result = run_scenario({"protocol": "ftp", "depth": 1, "channel": {"drop": [1]},
                           "workload": {"messages": GETS}})
    assert outcomes(result) == ["timeout", "rejected", "accepted", "accepted"]
    assert result.trace[0]["client_timeout"] and result.trace[1]["client_timeout"]
    assert result.client.state.snapshot() == result.server.state.snapshot()
    assert result.metrics.resync_lag == [(1, 1)]
    assert result.metrics.timeouts == 1 and result.metrics.rejected == 1


@pytest.mark.parametrize("h", [1, 2, 3])
@pytest.mark.parametrize("fault, where", [("drop", 1), ("modify", 3)])
def test_single_fault_law(h, fault, where):
    # with the regression key no desynchronized index happens to collide here,
    # so the rejection count is exactly h
    channel = {"drop": [where]} if fault == "drop" else {"modify": {str(where): [0, "ff"]}}
    result = run_scenario({"protocol": "ftp", "depth": h, "channel": channel,
                           "workload": {"count": where + h + 4, "seed": 7}})
    got = outcomes(result)
    assert set(got[:where - 1]) <= {"accepted"}
    assert got[where - 1] == ("timeout" if fault == "drop" else "rejected")
    assert got[where:where + h] == ["rejected"] * h
    assert set(got[where + h:]) == {"accepted"}
    assert result.metrics.resync_lag == [(where, h)]


@settings(max_examples=25, deadline=None)
@given(st.binary(min_size=1, max_size=12), st.integers(1, 3), st.integers(1, 5), st.booleans())
def test_single_fault_law_random_keys(key, h, where, drop):
    # another key can land a desynchronized handshake on a compatible index
    # by chance, so fewer than h rejections is allowed; recovery after h is not optional
    channel = {"drop": [where]} if drop else {"modify": {str(where): [0, "ff"]}}
    result = run_scenario({"protocol": "ftp", "key": key.hex(), "depth": h, "channel": channel,
                           "workload": {"count": where + h + 4, "seed": 2}})
    got = outcomes(result)
    assert set(got[:where - 1]) <= {"accepted"}
    assert got[where - 1] in ("timeout", "rejected", "accepted")
    assert got[where:where + h].count("rejected") <= h
    assert set(got[where + h:]) == {"accepted"}
    assert result.trace[-1]["synced"]


@pytest.mark.parametrize("h", [1, 2, 3])
def test_replay(h):
    # the duplicate is cached by the server only, so the buffers differ until it
    # ages out: the replay itself plus h - 1 genuine handshakes are rejected
    shuffle_only = named_table("ftp-shuffle")
    cfg = {"protocol": "ftp", "depth": h, "table": "ftp-shuffle", "channel": {"replay": [2]},
           "workload": {"count": h + 5, "seed": 1}}
    result = run_scenario(cfg)
    assert result.client.table == shuffle_only
    rec = result.trace[1]
    assert rec["outcome"] == "accepted"
    assert [e["outcome"] for e in rec["extra"]] == ["rejected"]
    assert rec["faults"] == [[1, "duplicate"]]
    # at depth 1 the duplicate displaces the genuine copy, which is identical
    assert rec["synced"] == (h == 1)
    got = outcomes(result)
    assert got[2:2 + h - 1] == ["rejected"] * (h - 1)
    assert set(got[2 + h - 1:]) == {"accepted"}
    total_rejected = 1 + got.count("rejected")
    assert total_rejected == h


def test_clean_channel_many_messages():
    result = run_scenario({"protocol": "ftp", "workload": {"count": 1000, "seed": 8}})
    assert result.metrics.accepted == 1000 and result.metrics.resync_lag == []


def test_loss_one_percent_resyncs():
    result = run_scenario({"protocol": "ftp", "channel": {"loss_rate": 0.01, "seed": 7},
                           "workload": {"count": 1000, "seed": 3}})
    m = result.metrics
    assert m.timeouts > 0 and m.accepted + m.rejected + m.timeouts == 1000
    assert all(lag <= 1 for _, lag in m.resync_lag)
    assert result.client.state.snapshot() == result.server.state.snapshot()


def test_trace_is_deterministic():
    cfg = {"protocol": "ftp", "depth": 2, "channel": {"loss_rate": 0.05, "seed": 1, "drop": [3]},
           "workload": {"count": 200, "seed": 5}}
    assert run_scenario(cfg).trace_lines() == run_scenario(cfg).trace_lines()
    mqtt = {"protocol": "mqtt", "channel": {"drop": [2]}, "workload": {"count": 20, "seed": 5}}
    assert run_scenario(mqtt).trace_lines() == run_scenario(mqtt).trace_lines()


def test_index_sequence_regression():
    # frozen from the regression key and the default mixed table
    result = run_scenario({"protocol": "ftp", "workload": {"messages": [GETS[0], GETS[0], GETS[1], GETS[2]]}})
    assert [r["client_index"] for r in result.trace] == [5, 2, 2, 6]
    assert set(outcomes(result)) == {"accepted"}


def test_split_sub_frame_drop():
    table = DialectTable((DialectSpec.split(1, 2, 2),))
    cfg = ScenarioConfig(table=table, channel=ChannelPolicy(drop={"2:3"}), workload={"count": 5, "seed": 1})
    got = outcomes(run_scenario(cfg))
    # with a single entry the index cannot disagree; only the broken handshake fails
    assert got == ["accepted", "rejected", "accepted", "accepted", "accepted"]


def test_mqtt_scenario():
    result = run_scenario({"protocol": "mqtt", "channel": {"drop": [1]}, "workload": {"count": 4, "seed": 2}})
    assert outcomes(result) == ["timeout", "rejected", "accepted", "accepted"]
    assert result.metrics.broker_registered_peak == 1


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"protocol": "http"})
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"surprise": 1})
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"protocol": "mqtt", "table": "ftp"})
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"depth": 0})
    with pytest.raises(ConfigError):
        ScenarioConfig.load(tmp_path / "missing.json")
    (tmp_path / "t.tbl").write_text("shuffle 0 1 1\n")
    (tmp_path / "k.hex").write_text("6b6579\n")
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"table_path": "t.tbl", "key_path": "k.hex", "workload": {"count": 3}}))
    cfg = ScenarioConfig.load(path)
    assert cfg.key == b"key" and cfg.table.n_max == 1
    assert run_scenario(cfg).metrics.accepted == 3


def ftp_target(root, table=FTP_TABLE, key=REGRESSION_KEY):
    cfg = DialectConfig(key, table)
    return lambda: cfg.server(FtpService(root))


def test_fixed_dialect_attack(ftp_root):
    m = attack_fixed_dialect(ftp_target(ftp_root), 100)
    assert m.accepted == 0 and m.rejected == 100
    identity_only = named_table("identity")
    m = attack_fixed_dialect(ftp_target(ftp_root, identity_only), 100)
    assert m.accepted == 100


def test_fixed_dialect_attack_with_genuine_client(ftp_root):
    cfg = DialectConfig(REGRESSION_KEY, FTP_TABLE)
    genuine = (cfg.client(FTP), cfg.server(FtpService(ftp_root)))
    m = attack_fixed_dialect(ftp_target(ftp_root), 200, spoofed_spec=DialectSpec.shuffle(1, 1, 3),
                             genuine=genuine)
    assert m.accepted == 0 and m.genuine_accepted == m.genuine_sent == 200


def test_acceptance_bound_sweep():
    identity = IDENTITY
    assert acceptance_bound(FTP_TABLE, b"rget,secret.txt", identity, ftp_parse) == 0
    # a spoofed entry from the table is accepted whenever the server picks it
    assert acceptance_bound(FTP_TABLE, b"rget,secret.txt", DialectSpec.shuffle(1, 1, 3), ftp_parse) == 1 / 8
    # short commands most entries cannot transform travel as identity
    assert acceptance_bound(FTP_TABLE, b"ls", identity, ftp_parse) == 7 / 8


@pytest.mark.parametrize("command, spoof", [
    (b"rget,secret.txt", IDENTITY),
    (b"rget,secret.txt", DialectSpec.shuffle(1, 1, 3)),
    (b"rget,secret.txt", DialectSpec.split(1, 2, 1)),
    (b"ls", IDENTITY),
])
def test_random_key_acceptance_within_bound(ftp_root, command, spoof):
    bound = acceptance_bound(FTP_TABLE, command, spoof, ftp_parse)
    rng = random.Random(31)
    accepted = 0
    trials = 10_000
    for _ in range(trials):
        server = DialectConfig(rng.randbytes(16), FTP_TABLE).server(FtpService(ftp_root))
        rec = Simulator(ClientSession(FTP, fixed_spec=spoof), server).handshake(command, 1)
        accepted += rec["outcome"] == "accepted"
    freq = accepted / trials
    # three standard errors of slack over the exact per-entry bound
    slack = 3 * (bound * (1 - bound) / trials) ** 0.5 + 1e-9
    assert freq <= bound + slack


def mqtt_target(broker, key=REGRESSION_KEY, table=MQTT_TABLE):
    cfg = DialectConfig(key, table)
    return lambda: cfg.server(MqttService(broker))


def test_connect_flood_against_mpd_broker():
    broker = Broker()
    cfg = DialectConfig(REGRESSION_KEY, MQTT_TABLE)
    genuine = (cfg.client(MQTT), cfg.server(MqttService(broker)))
    m = attack_connect_flood(mqtt_target(broker), 2000, genuine=genuine, genuine_every=50)
    assert m.accepted == 0 and m.connacks == 0 and m.broker_registered_peak == 0
    assert m.genuine_accepted == m.genuine_sent == 40


def test_connect_flood_against_plain_broker():
    broker = Broker(capacity=64)
    m = attack_connect_flood(lambda: ServerSession(MqttService(broker)), 200)
    assert m.broker_registered_peak == 64 == broker.peak
    assert m.connacks == 200 and m.accepted == 200
    assert len(broker.clients) == 64


def test_wall_time_recorded():
    m = run_scenario({"workload": {"count": 2}}).metrics
    assert m.wall_time >= 0 and m.accepted + m.rejected <= m.sent
