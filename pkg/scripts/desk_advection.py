"""Train the advection preset from scratch and compare against persistence."""

import argparse
import json
import logging

from calmpde.experiments import desk_learning

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default="advection1d")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    print(json.dumps(desk_learning(args.config), indent=2))
