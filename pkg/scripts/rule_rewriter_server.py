"""
Reference line-protocol rewriter: reads one JSON request per line on stdin
and answers with one JSON response per line on stdout.

    REWRITER_KIND=subprocess REWRITER_COMMAND="python scripts/rule_rewriter_server.py"
"""

import argparse
import logging
import sys
from pathlib import Path

project_root = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(project_root))

from backend.captionaug import RewriterRequest, RewriterResponse, load_rulesets  # noqa: E402
from backend.rewriters import RuleBasedRewriter  # noqa: E402

logger = logging.getLogger("rule_rewriter_server")


def serve(rulesets_path=None, stdin=sys.stdin, stdout=sys.stdout) -> int:
    rulesets = {rs.ruleset_id: rs for rs in load_rulesets(rulesets_path)}
    rewriter = RuleBasedRewriter()
    handled = 0
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = RewriterRequest.from_wire(line)
            ruleset = rulesets[request.ruleset]
            response = rewriter.rewrite(request, ruleset)
        except Exception as e:
            logger.error(f"Bad request: {e}")
            response = RewriterResponse(text="", status="error")
        stdout.write(response.to_wire())
        stdout.flush()
        handled += 1
    return handled


def main() -> None:
    parser = argparse.ArgumentParser(description="Rule-based caption rewriter over stdin/stdout")
    parser.add_argument("--rulesets", default=None, help="Path to a rule set JSON file")
    args = parser.parse_args()
    # stdout carries the protocol; logs go to stderr
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    serve(args.rulesets)


if __name__ == "__main__":
    main()
