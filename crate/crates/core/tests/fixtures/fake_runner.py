#!/usr/bin/env python3
"""Minimal JSON-lines test runner used by the process sandbox tests."""
import json
import os
import subprocess
import sys
import tempfile
import time

VERSION = "fake-runner/0.1"
LIMIT = 8192


def normalize(s):
    return "\n".join(line.rstrip() for line in s.split("\n")).rstrip("\n")


def run_test(source, test, limit_ms, comparison):
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "solution.py")
        if test["mode"] == "assertion":
            body, stdin = source + "\n\n" + test["input"] + "\n", ""
        else:
            body, stdin = source, test["input"]
        with open(path, "w") as f:
            f.write(body)
        start = time.monotonic()
        try:
            proc = subprocess.run([sys.executable, path], input=stdin, capture_output=True,
                                  text=True, cwd=tmp, timeout=limit_ms / 1000.0)
        except subprocess.TimeoutExpired as e:
            out = e.stdout.decode() if isinstance(e.stdout, bytes) else (e.stdout or "")
            return "timeout", out, "", int((time.monotonic() - start) * 1000)
        took = int((time.monotonic() - start) * 1000)
    if proc.returncode != 0:
        status = "error"
    elif test["mode"] == "assertion":
        status = "pass"
    else:
        want, got = test.get("expected_output", ""), proc.stdout
        if comparison == "normalized":
            want, got = normalize(want), normalize(got)
        status = "pass" if want == got else "fail"
    return status, proc.stdout, proc.stderr, took


def handle(line):
    try:
        req = json.loads(line)
        source, tests = req["solution_source"], req["tests"]
        limit, comparison = int(req["time_limit_ms"]), req["comparison"]
        if not tests or not 100 <= limit <= 60000 or comparison not in ("exact", "normalized"):
            raise ValueError("request out of range")
        for t in tests:
            t["id"], t["mode"], t["input"]
    except Exception as e:
        return {"error": "MalformedRequest", "message": str(e)}
    results = []
    for t in tests:
        status, out, err, took = run_test(source, t, limit, comparison)
        results.append({"test_id": t["id"], "status": status, "stdout": out[:LIMIT],
                        "stderr": err[:LIMIT], "duration_ms": took})
    return {"results": results, "runner_version": VERSION}


def main():
    print(json.dumps({"runner_version": VERSION, "protocol_version": 1}), flush=True)
    for line in sys.stdin:
        if line.strip():
            print(json.dumps(handle(line)), flush=True)


if __name__ == "__main__":
    main()
