"""Convert the LINQS Cora release (cora.content / cora.cites) to subsel's input formats.

Writes ``cora.edges`` (0-based ids, one citation per line) and
``cora.features.gz`` (one row of 1433 binary word indicators per node).
Node ids follow the row order of ``cora.content``.
"""

import argparse
import gzip
from pathlib import Path


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("src", type=Path, help="directory holding cora.content and cora.cites")
    ap.add_argument("dst", type=Path)
    args = ap.parse_args()

    ids = {}
    rows = []
    with open(args.src / "cora.content") as fh:
        for line in fh:
            parts = line.split()
            ids[parts[0]] = len(ids)
            rows.append(" ".join(parts[1:-1]))

    args.dst.mkdir(parents=True, exist_ok=True)
    skipped = 0
    with open(args.src / "cora.cites") as fh, open(args.dst / "cora.edges", "w") as out:
        out.write(f"# nodes={len(ids)} source=LINQS cora.cites (cited citing)\n")
        for line in fh:
            a, b = line.split()
            if a not in ids or b not in ids:
                skipped += 1
                continue
            out.write(f"{ids[a]} {ids[b]}\n")
    with gzip.open(args.dst / "cora.features.gz", "wt", compresslevel=9) as out:
        out.write("\n".join(rows) + "\n")
    print(f"nodes={len(ids)} features={len(rows[0].split())} skipped_citations={skipped}")


if __name__ == "__main__":
    main()
