"""Minimal JUnit XML writer for the sample test cases."""

import os
import sys
import time
import traceback
import urllib.error
import urllib.request
from xml.sax.saxutils import escape, quoteattr


def endpoint():
    return os.environ["TARGET_ENDPOINT"].rstrip("/")


def get(path):
    """GET a path on the target. Returns (status, body bytes)."""
    try:
        with urllib.request.urlopen(endpoint() + path, timeout=10) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as err:
        return err.code, err.read()


def run_case(check):
    """Run one check, write results/<CASE_NAME>.xml, exit 0 when it passed."""
    name = os.environ.get("CASE_NAME", check.__name__)
    started = time.monotonic()
    inner = ""
    try:
        check()
        outcome = "passed"
    except AssertionError as err:
        outcome = "failed"
        inner = "<failure message=%s>%s</failure>" % (quoteattr(str(err) or "assertion failed"), escape(traceback.format_exc()))
    except Exception as err:  # noqa: BLE001
        outcome = "errored"
        inner = "<error message=%s>%s</error>" % (quoteattr(repr(err)), escape(traceback.format_exc()))
    elapsed = time.monotonic() - started
    results = os.environ.get("RESULTS_DIR", "results")
    os.makedirs(results, exist_ok=True)
    with open(os.path.join(results, name + ".xml"), "w") as f:
        f.write('<?xml version="1.0" encoding="UTF-8"?>\n')
        f.write('<testsuite name=%s tests="1">\n' % quoteattr(name))
        f.write('  <testcase classname="api" name=%s time="%.3f">%s</testcase>\n' % (quoteattr(name), elapsed, inner))
        f.write("</testsuite>\n")
    print("%s: %s" % (name, outcome))
    sys.exit(0 if outcome == "passed" else 1)
