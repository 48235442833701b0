"""Racing resolver over the virtual-time transport, plus one loopback round."""

import json
import math
import random

import pytest

from dnsrace.codec import QuerySpec, encode_query
from dnsrace.resolver import (
    UNREACHABLE,
    AllSendsFailed,
    AllServersUnreachable,
    RankedServerList,
    ResolverError,
    UdpTransport,
    UpstreamServer,
    load_servers,
    probe_and_rank,
    resolve_raced,
    save_servers,
)
from dnsrace.simulator import (
    Constant,
    LoopbackSimServer,
    SimTransport,
    SimUpstream,
    SimWorld,
)


def constant_world(latencies_ms, **overrides):
    upstreams = tuple(
        SimUpstream(f"u{i}", Constant(ms), seed=i, **overrides) for i, ms in enumerate(latencies_ms)
    )
    return SimWorld(upstreams, master_seed=7)


def ranked_over(world):
    transport = SimTransport(world)
    return RankedServerList.unranked(transport.servers), transport


def test_probe_and_rank_sorts_by_mean():
    world = constant_world([80.0, 20.0, 50.0])
    transport = SimTransport(world)
    ranked = probe_and_rank(
        transport.servers, ["probe.test"], probes_per_server=3, transport=transport,
        rng=random.Random(1),
    )
    assert [s.label for s in ranked.servers] == ["u1", "u2", "u0"]
    assert ranked.probe_mean_ms == pytest.approx((20.0, 50.0, 80.0))


def test_probe_and_rank_tie_keeps_input_order():
    world = constant_world([30.0, 30.0])
    transport = SimTransport(world)
    ranked = probe_and_rank(transport.servers, ["probe.test"], transport=transport)
    assert [s.label for s in ranked.servers] == ["u0", "u1"]


def test_probe_and_rank_lossy_server_ranked_last():
    world = SimWorld(
        (
            SimUpstream("dead", Constant(5.0), loss_probability=1.0, seed=0),
            SimUpstream("alive", Constant(40.0), seed=1),
        ),
        master_seed=3,
    )
    transport = SimTransport(world)
    ranked = probe_and_rank(transport.servers, ["probe.test"], transport=transport)
    assert [s.label for s in ranked.servers] == ["alive", "dead"]
    assert ranked.probe_mean_ms[1] == UNREACHABLE


def test_probe_and_rank_all_unreachable():
    world = constant_world([10.0, 20.0], loss_probability=1.0)
    transport = SimTransport(world)
    with pytest.raises(AllServersUnreachable):
        probe_and_rank(transport.servers, ["probe.test"], transport=transport)


def test_probe_and_rank_argument_validation():
    world = constant_world([10.0])
    transport = SimTransport(world)
    with pytest.raises(ResolverError):
        probe_and_rank([], ["probe.test"], transport=transport)
    with pytest.raises(ResolverError):
        probe_and_rank(transport.servers, [], transport=transport)
    with pytest.raises(ResolverError):
        probe_and_rank(transport.servers, ["probe.test"], probes_per_server=0, transport=transport)


def test_single_server_latency_and_bytes():
    ranked, transport = ranked_over(constant_world([40.0]))
    query = QuerySpec("example.test", id=0x1234)
    result = resolve_raced(query, ranked, k=1, deadline_ms=500.0, transport=transport)
    assert result.winner_index == 0
    assert result.latency_ms == pytest.approx(40.0)
    assert not result.timed_out
    assert result.query_bytes == len(encode_query(query))
    assert result.bytes_sent_total == result.query_bytes
    assert result.response is not None and result.response.rcode == 0


def test_race_picks_faster_server():
    ranked, transport = ranked_over(constant_world([90.0, 25.0, 60.0]))
    result = resolve_raced(QuerySpec("a.test", id=7), ranked, k=3, deadline_ms=500.0, transport=transport)
    assert result.winner_index == 1
    assert result.latency_ms == pytest.approx(25.0)


def test_same_query_bytes_to_every_server():
    ranked, transport = ranked_over(constant_world([10.0, 20.0, 30.0]))
    query = QuerySpec("example.test", id=99)
    result = resolve_raced(query, ranked, k=3, deadline_ms=500.0, transport=transport)
    wire = len(encode_query(query))
    assert [s.bytes_sent for s in result.per_server] == [wire] * 3
    assert result.bytes_sent_total == 3 * wire


def test_stragglers_counted_until_deadline():
    world = constant_world([10.0, 50.0], response_bytes=120)
    ranked, transport = ranked_over(world)
    result = resolve_raced(QuerySpec("a.test", id=1), ranked, k=2, deadline_ms=100.0, transport=transport)
    assert result.winner_index == 0
    # the loser's reply lands inside the window and still costs bytes
    assert [s.bytes_received for s in result.per_server] == [120, 120]
    assert result.bytes_received_total == 240
    assert result.per_server[1].reply_latency_ms == pytest.approx(50.0)


def test_reply_after_deadline_is_timeout():
    ranked, transport = ranked_over(constant_world([300.0]))
    result = resolve_raced(QuerySpec("a.test", id=1), ranked, k=1, deadline_ms=200.0, transport=transport)
    assert result.timed_out
    assert result.winner_index is None and result.latency_ms is None
    assert result.response is None
    assert result.bytes_received_total == 0


def test_all_lost_times_out_with_zero_received():
    ranked, transport = ranked_over(constant_world([10.0, 20.0], loss_probability=1.0))
    result = resolve_raced(QuerySpec("a.test", id=1), ranked, k=2, deadline_ms=200.0, transport=transport)
    assert result.timed_out
    assert result.bytes_received_total == 0
    assert all(not s.replied for s in result.per_server)


def test_error_rcode_never_wins():
    world = SimWorld(
        (
            SimUpstream("fast-servfail", Constant(5.0), seed=0, rcode=2),
            SimUpstream("slow-good", Constant(80.0), seed=1),
        ),
        master_seed=1,
    )
    ranked, transport = ranked_over(world)
    result = resolve_raced(QuerySpec("a.test", id=1), ranked, k=2, deadline_ms=500.0, transport=transport)
    assert result.winner_index == 1
    assert result.latency_ms == pytest.approx(80.0)
    # the error reply still counts as a reply and as received bytes
    fast = result.per_server[0]
    assert fast.replied and fast.reply_latency_ms is None and fast.bytes_received > 0


def test_all_error_rcodes_time_out():
    ranked, transport = ranked_over(constant_world([5.0, 10.0], rcode=3))
    result = resolve_raced(QuerySpec("a.test", id=1), ranked, k=2, deadline_ms=200.0, transport=transport)
    assert result.timed_out and result.winner_index is None
    assert all(s.replied for s in result.per_server)
    assert result.bytes_received_total > 0


def test_winner_latency_never_exceeds_recorded_replies():
    world = constant_world([35.0, 15.0, 55.0, 25.0])
    ranked, transport = ranked_over(world)
    result = resolve_raced(QuerySpec("a.test", id=1), ranked, k=4, deadline_ms=500.0, transport=transport)
    recorded = [s.reply_latency_ms for s in result.per_server if s.reply_latency_ms is not None]
    assert result.latency_ms == min(recorded)
    assert all(result.latency_ms <= r for r in recorded)


def test_k_and_deadline_validation():
    ranked, transport = ranked_over(constant_world([10.0, 20.0]))
    query = QuerySpec("a.test", id=1)
    for bad_k in (0, 3, -1):
        with pytest.raises(ResolverError):
            resolve_raced(query, ranked, k=bad_k, transport=transport)
    with pytest.raises(ResolverError):
        resolve_raced(query, ranked, k=1, deadline_ms=0.0, transport=transport)


def test_all_sends_failed():
    transport = SimTransport(constant_world([10.0]))
    ranked = RankedServerList.unranked([UpstreamServer("203.0.113.9")])
    with pytest.raises(AllSendsFailed):
        resolve_raced(QuerySpec("a.test", id=1), ranked, k=1, transport=transport)


def test_upstream_server_validation():
    server = UpstreamServer("8.8.8.8")
    assert server.port == 53 and server.endpoint == ("8.8.8.8", 53)
    v6 = UpstreamServer("2001:db8::1")
    assert ":" in v6.address
    with pytest.raises(ValueError):
        UpstreamServer("not-an-ip")
    with pytest.raises(ValueError):
        UpstreamServer("8.8.8.8", port=0)
    with pytest.raises(ValueError):
        UpstreamServer("8.8.8.8", port=70000)


def test_ranked_list_validation():
    a, b = UpstreamServer("192.0.2.1"), UpstreamServer("192.0.2.2")
    with pytest.raises(ValueError):
        RankedServerList(())
    with pytest.raises(ValueError):
        RankedServerList((a, UpstreamServer("192.0.2.1")))
    with pytest.raises(ValueError):
        RankedServerList((a, b), (50.0, 20.0))
    with pytest.raises(ValueError):
        RankedServerList((a, b), (20.0,))
    with pytest.raises(ValueError):
        RankedServerList((a, b), (-1.0, 20.0))


def test_server_file_round_trip(tmp_path):
    ranked = RankedServerList(
        (UpstreamServer("192.0.2.1", label="fast"), UpstreamServer("192.0.2.2")),
        (12.5, UNREACHABLE),
    )
    path = tmp_path / "servers.json"
    save_servers(ranked, path)
    data = json.loads(path.read_text())
    # unreachable serializes as null, not Infinity
    assert data["servers"][1]["probe_mean_ms"] is None
    loaded = load_servers(path)
    assert loaded.servers == ranked.servers
    assert loaded.probe_mean_ms[0] == 12.5 and math.isinf(loaded.probe_mean_ms[1])


def test_load_servers_plain_array(tmp_path):
    path = tmp_path / "servers.json"
    path.write_text(json.dumps([{"address": "192.0.2.1"}, {"address": "192.0.2.2", "port": 5353}]))
    ranked = load_servers(path)
    assert ranked.probe_mean_ms is None
    assert ranked.servers[1].port == 5353
    bad = tmp_path / "bad.json"
    bad.write_text('{"nope": 1}')
    with pytest.raises(ResolverError):
        load_servers(bad)


def test_loopback_race_over_real_sockets():
    world = SimWorld(
        (
            SimUpstream("slow", Constant(80.0), seed=0),
            SimUpstream("fast", Constant(20.0), seed=1),
        ),
        master_seed=11,
    )
    with LoopbackSimServer(world) as loop:
        ranked = RankedServerList.unranked(loop.servers)
        result = resolve_raced(
            QuerySpec("loop.test", id=0x4242), ranked, k=2,
            deadline_ms=1500.0, transport=UdpTransport(),
        )
    assert result.winner_index == 1
    assert not result.timed_out
    # real sleeps plus socket overhead; bound loosely
    assert 15.0 <= result.latency_ms <= 500.0
    assert result.bytes_received_total >= result.winner_wire_bytes
