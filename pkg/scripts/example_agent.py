#!/usr/bin/env python3
"""Minimal external agent for `ivln run --policy ext:...`.

Speaks the line-delimited JSON protocol on stdin/stdout: acks reset,
episode, and passive observation messages; on active observations walks
forward a fixed number of steps per episode and then stops.  On graph
scenes it stops immediately since it has no view of the adjacency.

Useful as a template for wiring in a real policy: replace decide()
and keep the message loop.
"""

import argparse
import json
import sys


def decide(msg: dict, steps_left: int) -> dict:
    if steps_left > 0 and "cell" in msg:
        return {"type": "act", "action": "forward"}
    return {"type": "act", "action": "stop"}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "--forward-steps",
        type=int,
        default=3,
        metavar="N",
        help="forward moves per episode before stopping (default 3)",
    )
    args = parser.parse_args()

    steps_left = args.forward_steps
    for line in sys.stdin:
        if not line.strip():
            continue
        msg = json.loads(line)
        kind = msg.get("type")
        if kind == "close":
            break
        if kind == "episode":
            steps_left = args.forward_steps
            reply = {"type": "ack"}
        elif kind == "observe" and not msg.get("passive"):
            reply = decide(msg, steps_left)
            if reply.get("action") == "forward":
                steps_left -= 1
        else:
            reply = {"type": "ack"}
        sys.stdout.write(json.dumps(reply, sort_keys=True, separators=(",", ":")) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
