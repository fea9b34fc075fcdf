"""Run a Python program under a line tracer and write an LCOV report.

usage: python3 tools/lcov_trace.py --out FILE [--source DIR ...] -- (-m MODULE | SCRIPT) [ARGS ...]

Executable lines come from the compiled code objects of every ``.py`` file
below the source directories; hit counts come from ``sys.settrace`` line
events. The exit status is the traced program's.
"""

import argparse
import os
import runpy
import sys
import threading
import traceback

SKIP_DIRS = {".git", "__pycache__", ".use-engine", ".pytest_cache", "tools"}


def executable_lines(path):
    try:
        with open(path, encoding="utf-8") as fh:
            code = compile(fh.read(), path, "exec")
    except (OSError, SyntaxError, ValueError):
        return set()
    lines, stack = set(), [code]
    while stack:
        co = stack.pop()
        for _, _, line in co.co_lines():
            if line:
                lines.add(line)
        stack.extend(c for c in co.co_consts if hasattr(c, "co_lines"))
    return lines


def source_files(root, dirs):
    found = set()
    for d in dirs:
        top = os.path.join(root, d)
        for base, subdirs, files in os.walk(top):
            subdirs[:] = sorted(s for s in subdirs if s not in SKIP_DIRS)
            for name in files:
                if name.endswith(".py"):
                    found.add(os.path.relpath(os.path.join(base, name), root))
    return found


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", required=True)
    parser.add_argument("--source", action="append", default=[])
    parser.add_argument("rest", nargs=argparse.REMAINDER)
    args = parser.parse_args()
    rest = args.rest[1:] if args.rest[:1] == ["--"] else args.rest
    if not rest:
        parser.error("missing program to run")

    root = os.path.realpath(os.getcwd())
    tools_dir = os.path.join(root, "tools") + os.sep
    hits = {}
    rel_cache = {}

    def rel_of(filename):
        rel = rel_cache.get(filename, False)
        if rel is False:
            path = os.path.realpath(filename)
            rel = None
            if path.startswith(root + os.sep) and not path.startswith(tools_dir):
                rel = os.path.relpath(path, root)
            rel_cache[filename] = rel
        return rel

    def tracer(frame, event, arg):
        rel = rel_of(frame.f_code.co_filename)
        if rel is None:
            return None

        def local(frame, event, arg):
            if event == "line":
                key = (rel, frame.f_lineno)
                hits[key] = hits.get(key, 0) + 1
            return local

        return local(frame, event, arg)

    if rest[0] == "-m":
        if len(rest) < 2:
            parser.error("-m needs a module name")
        sys.argv = [rest[1]] + rest[2:]
        run = lambda: runpy.run_module(rest[1], run_name="__main__", alter_sys=True)
    else:
        sys.argv = rest
        run = lambda: runpy.run_path(rest[0], run_name="__main__")
    sys.path[0] = root

    status = 0
    threading.settrace(tracer)
    sys.settrace(tracer)
    try:
        run()
    except SystemExit as exc:
        if exc.code is None:
            status = 0
        elif isinstance(exc.code, int):
            status = exc.code
        else:
            print(exc.code, file=sys.stderr)
            status = 1
    except BaseException:
        traceback.print_exc()
        status = 1
    finally:
        sys.settrace(None)
        threading.settrace(None)

    files = source_files(root, args.source or ["."]) | {rel for rel, _ in hits}
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as out:
        for rel in sorted(files):
            lines = executable_lines(os.path.join(root, rel))
            lines |= {n for (r, n) in hits if r == rel}
            out.write("TN:\nSF:%s\n" % rel)
            for n in sorted(lines):
                out.write("DA:%d,%d\n" % (n, hits.get((rel, n), 0)))
            out.write("end_of_record\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
