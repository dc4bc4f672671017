import csv
import io
import subprocess
import sys
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cichlid_sim.bench import EXPERIMENTS, BenchReport, CacheModel, Rng, strip_wallclock
from cichlid_sim.cli import main, parse_overrides
from cichlid_sim.machine import load_machine
from cichlid_sim.physmem import PAGE_2M, PAGE_4K
from cichlid_sim.trace import Trace

MiB = 1 << 20


@pytest.fixture(scope="module")
def ivy():
    return load_machine("ivybridge")


# -- rng ----------------------------------------------------------------------------


def xorshift_star_np(state, n):
    """Reference xorshift64* in numpy uint64 arithmetic."""
    x = np.uint64(state)
    out = []
    with np.errstate(over="ignore"):
        for _ in range(n):
            x ^= x >> np.uint64(12)
            x ^= x << np.uint64(25)
            x ^= x >> np.uint64(27)
            out.append(int(x * np.uint64(0x2545F4914F6CDD1D)))
    return out


@given(st.integers(0, 2 ** 63))
def test_xorshift_matches_reference(seed):
    r = Rng(seed)
    state = r.state
    assert [r.next() for _ in range(8)] == xorshift_star_np(state, 8)


def test_xorshift_from_unit_state():
    r = Rng(0)
    r.state = 1
    # (1 ^ 1 << 25) * multiplier, truncated to 64 bits
    assert r.next() == (0x2000001 * 0x2545F4914F6CDD1D) % (1 << 64)


def test_lcg_and_helpers():
    r = Rng(5, kind="lcg")
    s = r.state
    assert r.next() == (s * 6364136223846793005 + 1442695040888963407) % (1 << 64)
    with pytest.raises(ValueError):
        Rng(1, kind="mt")
    r = Rng(3)
    assert all(0 <= r.below(10) < 10 for _ in range(1000))
    picks = r.sample(100, 30)
    assert len(set(picks)) == 30 and all(0 <= p < 100 for p in picks)
    items = list(range(50))
    r.shuffle(items)
    assert sorted(items) == list(range(50))
    assert sum(r.chance(0.25) for _ in range(4000)) in range(800, 1200)
    g = Rng(9)
    assert list(Rng(9).stream(4)) == [g.next() for _ in range(4)]


def test_rng_is_deterministic_and_seed_sensitive():
    assert list(Rng(42).stream(5)) == list(Rng(42).stream(5))
    assert list(Rng(42).stream(5)) != list(Rng(43).stream(5))


# -- cache model against an OrderedDict LRU ----------------------------------------------


class LruOracle:
    def __init__(self, nsets, ways, line):
        self.sets = [OrderedDict() for _ in range(nsets)]
        self.ways, self.line = ways, line

    def access(self, pa):
        tag = pa // self.line
        s = self.sets[tag % len(self.sets)]
        if tag in s:
            s.move_to_end(tag)
            return True
        s[tag] = None
        if len(s) > self.ways:
            s.popitem(last=False)
        return False


@settings(max_examples=80, deadline=None)
@given(st.sampled_from([(1, 1), (4, 2), (8, 4), (2, 8)]),
       st.lists(st.integers(0, 1 << 16), max_size=300))
def test_cache_model_matches_lru_oracle(geom, addrs):
    nsets, ways = geom
    c = CacheModel(nsets * ways * 64, ways, 64)
    o = LruOracle(nsets, ways, 64)
    for a in addrs:
        assert c.access(a) == o.access(a)
    assert c.lookups == len(addrs)


def test_cache_model_basics():
    c = CacheModel(4 * 64, 2, 64)
    assert c.nsets == 2 and c.set_of(64) == 1
    assert [c.access(a) for a in (0, 8, 128, 256, 0)] == [False, True, False, False, False]
    c.clear()
    assert c.lookups == 0 and not c.access(0)
    with pytest.raises(ValueError):
        CacheModel(100, 3, 64)


# -- reports --------------------------------------------------------------------------


def test_report_csv_and_wallclock_stripping(tmp_path):
    r = BenchReport("x", {})
    r.rows = [{"a": 1, "t_ns": 123, "f": 0.123456789}, {"a": 2, "b": "y", "t_ns": 5}]
    assert r.columns() == ["a", "t_ns", "f", "b"]
    assert r.columns(wallclock=False) == ["a", "f", "b"]
    text = r.to_csv()
    assert text.splitlines()[1] == "1,123,0.123457,"
    assert strip_wallclock(text) == "a,f,b\n1,0.123457,\n2,,y"
    r.check("good", True)
    assert r.ok
    r.check("bad", False, "why")
    assert not r.ok and [c.name for c in r.failures()] == ["bad"]
    r.write_csv(tmp_path / "x.csv")
    assert (tmp_path / "x.csv").read_text() == text


# -- experiments at small scale ------------------------------------------------------------


def test_appel_li_counts(ivy):
    rep = EXPERIMENTS["appel-li"](ivy, 1, pages=32, flush_modes=("default",))
    rows = {r["variant"]: r for r in rep.rows if r["flush_mode"] == "default"}
    assert (rows["trap-only"]["upcalls"], rows["trap-only"]["inv_map"]) == (1, 0)
    assert rows["prot1-trap-unprot"]["inv_modify_flags"] == 64
    assert rows["protN-trap-unprot"]["upcalls"] == 32
    assert rows["protN-trap-unprot"]["inv_modify_flags"] == 2
    assert rep.ok, rep.failures()


def test_pager_experiment_sequential_oracle(ivy):
    rep = EXPERIMENTS["pager"](ivy, 2, region_pages=16, resident=(2, 4, 8), accesses=64)
    assert rep.ok, rep.failures()
    for row in rep.rows:
        if row["pattern"] == "sequential":
            assert row["evictions"] == row["touched"] - row["resident"]
        if row["pattern"] == "readonly":
            assert row["store_writes"] == 0


def test_gc_tracking_small(ivy):
    rep = EXPERIMENTS["gc-tracking"](ivy, 3, heap_pages=512, rounds=3)
    assert rep.ok, rep.failures()
    a = [r for r in rep.rows if r["tracker"] == "A"]
    b = [r for r in rep.rows if r["tracker"] == "B"]
    assert all(r["match"] for r in rep.rows)
    assert all(r["upcalls"] == r["distinct"] for r in a)
    assert all(r["upcalls"] == 0 and r["clear_dirty_bits"] == r["tables_scanned"] == 1 for r in b)


def test_gups_walk_depth(ivy):
    rep = EXPERIMENTS["gups"](ivy, 4, table_bytes=(64 * MiB,), page_sizes=(PAGE_4K, PAGE_2M),
                              updates=20_000)
    per = {r["page_size"]: r["walk_reads_per_miss"] for r in rep.rows}
    assert per == {PAGE_4K: 4.0, PAGE_2M: 3.0}


def test_experiments_are_deterministic(ivy):
    kw = {"small_ws": 2 * MiB, "large_ws": 8 * MiB, "accesses": 3000, "warmup": 3000}
    a = EXPERIMENTS["coloring"](ivy, 7, **kw).to_csv()
    b = EXPERIMENTS["coloring"](ivy, 7, **kw).to_csv()
    assert strip_wallclock(a) == strip_wallclock(b)


# -- command line ------------------------------------------------------------------------


def test_parse_overrides():
    got = parse_overrides("gups", ["table_bytes=1M,16M", "page_sizes=4K", "updates=500"])
    assert got == {"table_bytes": (MiB, 16 * MiB), "page_sizes": (PAGE_4K,), "updates": 500}
    assert parse_overrides("gc-tracking", ["write-fraction=0.5"]) == {"write_fraction": 0.5}
    with pytest.raises(SystemExit):
        parse_overrides("gups", ["bogus=1"])


def test_cli_bench_writes_csv_and_trace(tmp_path, capsys):
    out, tr = tmp_path / "p.csv", tmp_path / "p.jsonl"
    rc = main(["bench", "pager", "--seed", "3", "--csv", str(out), "--trace", str(tr),
               "--set", "region_pages=16", "--set", "resident=4", "--set", "accesses=64"])
    assert rc == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert {r["pattern"] for r in rows} == {"sequential", "random", "readonly"}
    records = Trace.load(tr)
    assert records and {"seq", "run", "pid", "name", "args", "result", "delta"} <= set(records[0])
    per_run = {}
    for rec in records:
        # the read-back verification runs outside any labelled run
        if rec["name"] == "upcall" and rec["run"] is not None:
            per_run[rec["run"]] = per_run.get(rec["run"], 0) + 1
    assert per_run == {f'{r["pattern"]}/{r["resident"]}': int(r["upcalls"]) for r in rows}
    assert "checks passed" in capsys.readouterr().out


def test_cli_failed_check_exit_code(tmp_path):
    # too few updates to amortise cold misses, so the <1% miss check fails
    rc = main(["bench", "gups", "--csv", str(tmp_path / "g.csv"), "-q",
               "--set", "table_bytes=1M", "--set", "page_sizes=4K", "--set", "updates=2000"])
    assert rc == 1


def test_cli_bad_machine(tmp_path):
    assert main(["bench", "pager", "--machine", "nonesuch", "--csv", str(tmp_path / "x.csv")]) == 2


def test_cli_entry_point_lists(tmp_path):
    p = subprocess.run([sys.executable, "-m", "cichlid_sim.cli", "list"], capture_output=True, text=True,
                       check=True)
    assert "gups:" in p.stdout and "machines: ivybridge, ivybridge-linux, opteron6378" in p.stdout


def test_cli_plot(tmp_path):
    pytest.importorskip("matplotlib")
    svg = tmp_path / "p.svg"
    rc = main(["bench", "pager", "--csv", str(tmp_path / "p.csv"), "--plot", str(svg), "-q",
               "--set", "region_pages=8", "--set", "resident=2,4", "--set", "accesses=32"])
    assert rc == 0 and svg.read_text().lstrip().startswith("<?xml")
