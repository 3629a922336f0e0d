"""Unknown paths answer 404."""

import _common  # noqa: F401
from junit import get, run_case


def check():
    status, _ = get("/nope")
    assert status == 404, "status %d" % status


run_case(check)
