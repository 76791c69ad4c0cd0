import csv
import io
from fractions import Fraction
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpx.errors import LoadError, MergeError, ReportError
from mpx.profiler import ROOT_NAME, FunctionStats, format_profile
from mpx import prof_cli
from mpx.prof_cli import (
    AggRow,
    aggregate,
    format_count,
    format_ticks,
    load_profile,
    load_profiles,
    merge_traces,
    parse_profile_text,
    report,
    sort_rows,
    split_merged,
    validate,
)


def write_profile(directory, name, rows, comments=()):
    path = Path(directory) / name
    path.write_text(format_profile(rows, comments), encoding="utf-8")
    return path


def balanced_rows(excl_by_name):
    """Rows whose exclusive times sum to a matching root row."""
    rows = [FunctionStats(n, 1, 0, e, e) for n, e in excl_by_name.items()]
    total = sum(excl_by_name.values())
    rows.append(FunctionStats(ROOT_NAME, 1, len(rows), 0, total))
    return rows


# -- discovery and parsing ------------------------------------------------------


def test_discovery_takes_only_wellformed_profile_names(tmp_path):
    write_profile(tmp_path, "profile.0.0.0", [FunctionStats("f", 1, 0, 5, 5)])
    write_profile(tmp_path, "profile.1.0.0", [FunctionStats("f", 1, 0, 7, 7)])
    (tmp_path / "profile.0.0.x").write_text("junk")
    (tmp_path / "trace.0.0.0").write_text('1 0 enter "f"\n')
    (tmp_path / "notes.txt").write_text("irrelevant")
    pset = load_profiles(tmp_path)
    assert len(pset) == 2
    assert [p.identity.node for p in pset.profiles] == [0, 1]


def test_discovery_orders_by_identity(tmp_path):
    for name in ("profile.1.0.0", "profile.0.0.1", "profile.0.0.0"):
        write_profile(tmp_path, name, [])
    pset = load_profiles(tmp_path)
    assert [p.identity.filename() for p in pset.profiles] == [
        "profile.0.0.0",
        "profile.0.0.1",
        "profile.1.0.0",
    ]


def test_load_profile_rejects_foreign_filenames(tmp_path):
    path = tmp_path / "stats.out"
    path.write_text("0 functions\n0 aggregates\n")
    with pytest.raises(LoadError) as excinfo:
        load_profile(path)
    assert "not a profile filename" in str(excinfo.value)


def test_empty_profile_parses(tmp_path):
    rows, comments = parse_profile_text("0 functions\n0 aggregates\n")
    assert rows == []
    assert comments == []


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("0 functions\n0 aggregates", "missing trailing newline"),
        ("", "line 1: empty file"),
        ("functions 0\n0 aggregates\n", "line 1: expected '<F> functions'"),
        ("2 functions\n\"f\" 1 0 2 2\n0 aggregates\n", "line 3"),
        ('1 functions\n"f" 1 0 2\n0 aggregates\n', "line 2: expected 4 counters"),
        ('1 functions\n"f" 1 0 x 2\n0 aggregates\n', "line 2: non-integer counter"),
        (
            '2 functions\n"f" 1 0 2 2\n"f" 1 0 3 3\n0 aggregates\n',
            "line 3: duplicate function",
        ),
        ('1 functions\nf 1 0 2 2\n0 aggregates\n', "line 2: expected quoted name"),
        ('1 functions\n"f 1 0 2 2\n0 aggregates\n', "line 2: unterminated"),
        ('1 functions\n"f" 1 0 2 2\n', "line 3: expected '0 aggregates'"),
        ('0 functions\n0 aggregates\ntrailing\n', "line 3: junk after"),
    ],
)
def test_parse_errors_carry_source_and_line(tmp_path, text, fragment):
    path = tmp_path / "profile.0.0.0"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(LoadError) as excinfo:
        load_profile(path)
    message = str(excinfo.value)
    assert fragment in message
    assert str(path) in message


tricky_names = st.one_of(
    st.sampled_from(['"', "\\", 'a"b\\c', " spaced out ", ".application"]),
    st.text(
        st.characters(min_codepoint=32, max_codepoint=0x2FFF, blacklist_categories=("Cs",)),
        min_size=1,
        max_size=8,
    ),
)

row_strategy = st.builds(
    FunctionStats,
    name=tricky_names,
    calls=st.integers(0, 10**6),
    subrs=st.integers(0, 10**6),
    excl_us=st.integers(0, 10**9),
    incl_us=st.integers(0, 10**9),
)


@settings(max_examples=120)
@given(
    rows=st.lists(row_strategy, max_size=6, unique_by=lambda r: r.name),
    comments=st.lists(
        st.text(
            st.characters(min_codepoint=32, max_codepoint=0x2FFF, blacklist_categories=("Cs",)),
            max_size=10,
        ),
        max_size=2,
    ),
)
def test_write_parse_write_is_byte_stable(rows, comments):
    text = format_profile(rows, comments)
    parsed_rows, parsed_comments = parse_profile_text(text)
    assert format_profile(parsed_rows, parsed_comments) == text
    assert sorted(parsed_rows, key=lambda r: r.name) == sorted(
        rows, key=lambda r: r.name
    )
    assert parsed_comments == list(comments)


def test_rewrite_is_identity_on_disk(tmp_path):
    rows = [FunctionStats("f", 3, 1, 10, 25), FunctionStats('g"h', 1, 0, 15, 15)]
    path = write_profile(tmp_path, "profile.0.0.0", rows, ["note one"])
    data = load_profile(path)
    assert prof_cli.rewrite_profile(data) == path.read_text(encoding="utf-8")


# -- aggregation ------------------------------------------------------------------


def make_set(tmp_path, per_identity):
    for name, rows in per_identity.items():
        write_profile(tmp_path, name, rows)
    return load_profiles(tmp_path)


def test_mean_is_exact(tmp_path):
    pset = make_set(
        tmp_path,
        {
            "profile.0.0.0": [FunctionStats("f", 2, 0, 10, 10)],
            "profile.1.0.0": [FunctionStats("f", 2, 0, 20, 20)],
        },
    )
    (row,) = aggregate(pset, "mean")
    assert row.excl_us == 15
    assert row.calls == 2


def test_absent_function_counts_as_zero(tmp_path):
    pset = make_set(
        tmp_path,
        {
            "profile.0.0.0": [FunctionStats("f", 8, 0, 8, 8)],
            "profile.1.0.0": [FunctionStats("g", 2, 0, 2, 2)],
        },
    )
    rows = {r.name: r for r in aggregate(pset, "mean")}
    assert rows["f"].calls == Fraction(4)
    assert rows["f"].excl_us == Fraction(4)
    assert rows["g"].calls == Fraction(1)


def test_mean_over_single_identity_matches_the_rows(tmp_path):
    raw = [FunctionStats("f", 3, 1, 10, 25), FunctionStats("g", 5, 0, 15, 15)]
    pset = make_set(tmp_path, {"profile.0.0.0": raw})
    mean_rows = {r.name: r for r in aggregate(pset, "mean")}
    for stats in raw:
        agg = mean_rows[stats.name]
        assert (agg.calls, agg.subrs, agg.excl_us, agg.incl_us) == (
            stats.calls,
            stats.subrs,
            stats.excl_us,
            stats.incl_us,
        )


@settings(max_examples=40)
@given(
    data=st.lists(
        st.lists(
            st.tuples(st.sampled_from("fgh"), st.integers(0, 1000)),
            max_size=3,
            unique_by=lambda t: t[0],
        ),
        min_size=1,
        max_size=5,
    )
)
def test_total_equals_mean_times_count(tmp_path_factory, data):
    tmp_path = tmp_path_factory.mktemp("agg")
    per_identity = {}
    for node, rows in enumerate(data):
        per_identity[f"profile.{node}.0.0"] = [
            FunctionStats(n, 1, 0, e, e) for n, e in rows
        ]
    pset = make_set(tmp_path, per_identity)
    totals = {r.name: r for r in aggregate(pset, "total")}
    means = {r.name: r for r in aggregate(pset, "mean")}
    n = len(pset.profiles)
    assert set(totals) == set(means)
    for name in totals:
        assert totals[name].excl_us == means[name].excl_us * n
        assert totals[name].calls == means[name].calls * n


def test_aggregate_refuses_an_empty_set(tmp_path):
    pset = load_profiles(tmp_path)
    with pytest.raises(ReportError):
        aggregate(pset, "mean")


def test_sort_rows_orders_by_field_then_name():
    rows = [
        AggRow("b", 1, 0, 10, 10),
        AggRow("a", 2, 0, 10, 10),
        AggRow("c", 3, 0, 20, 20),
    ]
    assert [r.name for r in sort_rows(rows, "excl")] == ["c", "a", "b"]
    assert [r.name for r in sort_rows(rows, "calls")] == ["c", "a", "b"]
    with pytest.raises(ReportError):
        sort_rows(rows, "bogus")


# -- formatting -------------------------------------------------------------------


def test_count_formatting():
    assert format_count(7) == "7"
    assert format_count(Fraction(15, 1)) == "15"
    assert format_count(Fraction(10, 3)) == "3.333"
    assert format_count(Fraction(5, 2)) == "2.500"


def test_tick_units_round_half_to_even():
    assert format_ticks(1500, "us") == "1500"
    assert format_ticks(1500, "ms") == "1.500"
    assert format_ticks(1_500_000, "s") == "1.500"
    # 0.5 us and 1.5 us in ms land exactly between 3-decimal steps
    assert format_ticks(Fraction(1, 2), "ms") == "0.000"
    assert format_ticks(Fraction(3, 2), "ms") == "0.002"
    # counts tie the same way at the third decimal
    assert format_count(Fraction(1, 16)) == "0.062"
    assert format_count(Fraction(3, 16)) == "0.188"


def test_report_table_layout(tmp_path):
    rows = [FunctionStats("main", 1, 2, 50, 100), FunctionStats("w", 2, 0, 100, 100)]
    pset = make_set(tmp_path, {"profile.0.0.0": rows})
    text = report(pset, scope="mean", sort_key="excl", units="us")
    expected = (
        "== mean over 1 profiles ==\n"
        "function  calls  subrs  excl_us  incl_us\n"
        + '"w"' + " " * 11 + "2" + " " * 6 + "0" + " " * 6 + "100" + " " * 6 + "100\n"
        + '"main"' + " " * 8 + "1" + " " * 6 + "2" + " " * 7 + "50" + " " * 6 + "100\n"
    )
    assert text == expected


def test_report_csv_round_trips_through_the_csv_module(tmp_path):
    rows = [FunctionStats("f", 1, 0, 10, 10)]
    pset = make_set(
        tmp_path, {"profile.0.0.0": rows, "profile.1.0.0": rows}
    )
    parsed = list(csv.reader(io.StringIO(report(pset, fmt="csv"))))
    assert parsed[0] == ["function", "calls", "subrs", "excl_us", "incl_us"]
    assert parsed[1] == ['"f"', "1", "0", "10", "10"]

    per_thread = list(
        csv.reader(io.StringIO(report(pset, scope="per-thread", fmt="csv")))
    )
    assert per_thread[0][:3] == ["node", "context", "thread"]
    assert [row[0] for row in per_thread[1:]] == ["0", "1"]


def test_report_per_thread_sections(tmp_path):
    rows = [FunctionStats("f", 1, 0, 10, 10)]
    pset = make_set(tmp_path, {"profile.0.0.0": rows, "profile.3.0.0": rows})
    text = report(pset, scope="per-thread")
    assert "== profile.0.0.0 ==" in text
    assert "== profile.3.0.0 ==" in text


def test_report_rejects_bad_options(tmp_path):
    pset = make_set(tmp_path, {"profile.0.0.0": [FunctionStats("f", 1, 0, 1, 1)]})
    with pytest.raises(ReportError):
        report(pset, units="ns")
    with pytest.raises(ReportError):
        report(pset, fmt="xml")
    with pytest.raises(ReportError):
        report(pset, scope="median")


# -- validation -------------------------------------------------------------------


def test_validate_accepts_a_conserving_profile(tmp_path):
    pset = make_set(
        tmp_path, {"profile.0.0.0": balanced_rows({"f": 30, "g": 12})}
    )
    assert validate(pset) == []


def test_validate_flags_broken_conservation(tmp_path):
    rows = balanced_rows({"f": 30})
    rows[0] = FunctionStats("f", 1, 0, 31, 31)  # breaks the exclusive sum
    pset = make_set(tmp_path, {"profile.0.0.0": rows})
    violations = validate(pset)
    assert violations == ["profile.0.0.0: exclusive sum 31 != root inclusive 30"]


def test_validate_flags_negative_and_inverted_counters(tmp_path):
    rows = [
        FunctionStats("f", -1, 0, 5, 5),
        FunctionStats("g", 1, 0, 9, 4),
    ]
    pset = make_set(tmp_path, {"profile.0.0.0": rows})
    violations = validate(pset)
    assert 'profile.0.0.0: "f" negative calls -1' in violations
    assert 'profile.0.0.0: "g" inclusive 4 < exclusive 9' in violations


def test_validate_is_vacuous_without_a_root_row(tmp_path):
    pset = make_set(
        tmp_path, {"profile.0.0.0": [FunctionStats("f", 1, 0, 10, 10)]}
    )
    assert validate(pset) == []


# -- trace merging ----------------------------------------------------------------


def write_trace(directory, name, lines):
    path = Path(directory) / name
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def test_merge_orders_globally_and_breaks_ties_by_node(tmp_path):
    write_trace(tmp_path, "trace.0.0.0", ['3 0 enter "f"', '7 0 exit "f"'])
    write_trace(tmp_path, "trace.1.0.0", ['1 0 enter "g"', '7 0 exit "g"'])
    out = tmp_path / "merged.txt"
    count = merge_traces(tmp_path, out)
    assert count == 4
    assert out.read_text(encoding="utf-8") == (
        '1 1 0 enter "g"\n'
        '3 0 0 enter "f"\n'
        '7 0 0 exit "f"\n'
        '7 1 0 exit "g"\n'
    )


def test_split_merged_recovers_the_inputs(tmp_path):
    first = ['3 0 enter "f"', '5 0 enter "q q"', '6 0 exit "q q"', '7 0 exit "f"']
    second = ['1 0 enter "g"', '9 0 exit "g"']
    write_trace(tmp_path, "trace.0.0.0", first)
    write_trace(tmp_path, "trace.2.0.0", second)
    out = tmp_path / "merged.txt"
    count = merge_traces(tmp_path, out)
    parts = split_merged(out)
    assert parts == {(0, 0): first, (2, 0): second}
    assert sum(len(v) for v in parts.values()) == count


def test_merge_rejects_thread_mismatch(tmp_path):
    write_trace(tmp_path, "trace.0.0.0", ['3 1 enter "f"'])
    with pytest.raises(MergeError) as excinfo:
        merge_traces(tmp_path, tmp_path / "merged.txt")
    assert "thread 1 does not match filename thread 0" in str(excinfo.value)


@pytest.mark.parametrize(
    "line",
    ['3 0 enter', '3 0 jump "f"', 'x 0 enter "f"', '3 0 enter unquoted'],
)
def test_merge_rejects_malformed_lines(tmp_path, line):
    write_trace(tmp_path, "trace.0.0.0", [line])
    with pytest.raises(MergeError) as excinfo:
        merge_traces(tmp_path, tmp_path / "merged.txt")
    assert "line 1" in str(excinfo.value)


def test_merge_requires_at_least_one_trace(tmp_path):
    with pytest.raises(MergeError) as excinfo:
        merge_traces(tmp_path, tmp_path / "merged.txt")
    assert "no trace files" in str(excinfo.value)


# -- the command line -------------------------------------------------------------


def test_cli_report(tmp_path, capsys):
    make_set(tmp_path, {"profile.0.0.0": balanced_rows({"f": 10})})
    assert prof_cli.main(["report", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("== mean over 1 profiles ==")
    assert '"f"' in out


def test_cli_validate_clean_and_dirty(tmp_path, capsys):
    make_set(tmp_path, {"profile.0.0.0": balanced_rows({"f": 10})})
    assert prof_cli.main(["validate", str(tmp_path)]) == 0
    assert capsys.readouterr().out == "clean: 1 profiles\n"

    bad = tmp_path / "bad"
    bad.mkdir()
    rows = balanced_rows({"f": 30})
    rows[0] = FunctionStats("f", 1, 0, 31, 31)
    make_set(bad, {"profile.0.0.0": rows})
    assert prof_cli.main(["validate", str(bad)]) == 1
    out = capsys.readouterr().out
    assert "exclusive sum 31 != root inclusive 30" in out


def test_cli_merge(tmp_path, capsys):
    write_trace(tmp_path, "trace.0.0.0", ['1 0 enter "f"', '2 0 exit "f"'])
    out_path = tmp_path / "merged.txt"
    assert prof_cli.main(["merge", str(tmp_path), "-o", str(out_path)]) == 0
    assert capsys.readouterr().out == f"merged 2 events into {out_path}\n"


def test_cli_reports_errors_on_stderr(tmp_path, capsys):
    (tmp_path / "profile.0.0.0").write_text("garbage\n")
    assert prof_cli.main(["report", str(tmp_path)]) == 1
    captured = capsys.readouterr()
    assert captured.out == ""
    assert captured.err.startswith("mpxprof: ")


def test_cli_usage_error(capsys):
    assert prof_cli.main([]) == 2
