"""The front page is served as HTML."""

import _common  # noqa: F401
from junit import get, run_case


def check():
    status, body = get("/")
    assert status == 200, "status %d" % status
    assert b"<h1>Inventory</h1>" in body


run_case(check)
