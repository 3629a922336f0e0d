"""Build one target of the sample app into out/<target>/."""

import json
import os
import shutil
import sys

SOURCES = {
    "backend": ("src/backend", "data.json"),
    "frontend": ("src/frontend", "index.html"),
}


def main(argv):
    if len(argv) != 2 or argv[1] not in SOURCES:
        print("usage: build.py {%s}" % "|".join(sorted(SOURCES)), file=sys.stderr)
        return 2
    target = argv[1]
    src_dir, entry = SOURCES[target]
    entry_path = os.path.join(src_dir, entry)
    if target == "backend":
        with open(entry_path) as f:
            data = json.load(f)
        if not isinstance(data.get("items"), list):
            print("data.json has no items list", file=sys.stderr)
            return 1
    dest = os.path.join("out", target)
    os.makedirs(dest, exist_ok=True)
    shutil.copy(entry_path, os.path.join(dest, entry))
    print("BUILD OK %s (commit %s)" % (target, os.environ.get("COMMIT_ID", "unknown")))
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
