#!/usr/bin/env python3
"""Smoke test for the cvdstore_py extension module.

Build and stage the module first:

    cargo build -p cvdstore-py --release --features extension-module
    cp target/release/libcvdstore_py.so python/cvdstore_py.so

Then run:  python3 python/smoke_test.py
"""

import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import cvdstore_py  # noqa: E402


def main() -> None:
    with tempfile.TemporaryDirectory() as root:
        store = cvdstore_py.Store(root)

        schema = [("id", "int"), ("name", "text"), ("price", "decimal")]
        rows = [[1, "apple", 1.5], [2, "banana", 0.5], [3, "pear", 2.0]]
        ds = store.init("fruit", schema, rows, pk=["id"])
        assert store.list() == ["fruit"], store.list()
        assert ds.versions() == [1]

        # checkout v1, edit one row, commit
        names, out_rows, cost = ds.checkout([1], "work")
        assert names == ["id", "name", "price"]
        assert len(out_rows) == 3 and cost == 3
        edited = [list(r) for r in out_rows]
        edited[1][1] = "mango"
        v2 = ds.commit("work", "rename banana", rows=edited)
        assert v2 == 2

        # exactly one record replaced
        only_a, only_b = ds.diff(1, 2)
        assert len(only_a) == 1 and len(only_b) == 1, (only_a, only_b)

        # predicate scan sees the edit
        hits = ds.scan(2, ["price<1"])
        assert len(hits) == 1 and hits[0]["name"] == "mango", hits

        # unchanged commit adds a version but no records
        ds.checkout([2], "copy")
        v3 = ds.commit("copy", "no changes")
        a, b = ds.diff(2, v3)
        assert a == [] and b == []

        # layout optimization runs end to end
        report = ds.optimize(gamma=2.0, mu=1.5)
        assert report["partitions"] >= 1 and report["storage"] >= 4, report

        # helper round-trips
        assert cvdstore_py.rlist_diff([1, 2, 3], [2, 3, 4]) == ([1], [4])

        # an uncommitted checkout is reported when the CVD is dropped
        ds.checkout([1], "dangling")
        purged = store.drop("fruit")
        assert store.list() == []
        assert purged == ["dangling"], purged

    print("smoke test passed")


if __name__ == "__main__":
    main()
