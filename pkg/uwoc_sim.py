import argparse
import json
import sys
from pathlib import Path

import settings
from models.errors import InfeasibleError, ScenarioValidationError, UwocError
from models.ooc import generate_family, write_family
from scenario import load_scenario, run, validate

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3


def run_command(args):
    """Runs one scenario file and writes its CSV."""
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
    workers = args.workers if args.workers is not None else settings.WORKERS
    frame = run(scenario, workers=workers)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False)
    print(f"✅ {scenario.kind}: {len(frame)} rows written to {out}")
    print(json.dumps({"scenario": str(args.scenario), "kind": scenario.kind, "seed": scenario.seed,
                      "rows": len(frame), "columns": list(frame.columns), "out": str(out)}, indent=2))
    return EXIT_OK


def validate_command(args):
    """Prints the diagnostics of a scenario file; exit 2 when any constraint fails."""
    diagnostics = validate(load_scenario(args.scenario))
    if diagnostics:
        print(f"❌ {args.scenario}: {len(diagnostics)} violated constraint(s)")
    else:
        print(f"✅ {args.scenario}: ok")
    print(json.dumps({"ok": not diagnostics, "diagnostics": diagnostics}, indent=2))
    return EXIT_INVALID if diagnostics else EXIT_OK


def codes_command(args):
    """Generates an OOC family and prints it as JSON."""
    family = generate_family(args.F, args.W, args.rho, args.count,
                             seed=args.seed if args.seed is not None else settings.SEED)
    if family.shortfall:
        print(f"⚠️ only {len(family)} of {args.count} codes found for ({args.F}, {args.W}, {args.rho})")
    if args.out:
        write_family(family, args.out)
    print(json.dumps({"F": family.length, "W": family.weight, "rho": family.max_correlation,
                      "shortfall": family.shortfall, "codes": [list(c.marks) for c in family]}, indent=2))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(description="Underwater optical CDMA network simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="Run a scenario file and write its CSV")
    run_parser.add_argument("scenario", help="Scenario JSON file")
    run_parser.add_argument("--out", required=True, help="Output CSV path")
    run_parser.add_argument("--seed", type=int, help="Override the scenario seed")
    run_parser.add_argument("--workers", type=int, help="Worker processes (default UWOC_WORKERS)")
    run_parser.set_defaults(handler=run_command)

    validate_parser = sub.add_parser("validate", help="Check scenario cross-constraints")
    validate_parser.add_argument("scenario", help="Scenario JSON file")
    validate_parser.set_defaults(handler=validate_command)

    codes_parser = sub.add_parser("codes", help="Optical orthogonal code tools")
    codes_sub = codes_parser.add_subparsers(dest="action", required=True)
    gen_parser = codes_sub.add_parser("gen", help="Generate an (F, W, rho) code family")
    gen_parser.add_argument("F", type=int, help="Code length")
    gen_parser.add_argument("W", type=int, help="Code weight")
    gen_parser.add_argument("rho", type=int, help="Maximum correlation")
    gen_parser.add_argument("count", type=int, help="Number of codes wanted")
    gen_parser.add_argument("--seed", type=int, help="Search seed (default UWOC_SEED)")
    gen_parser.add_argument("--out", help="Write the family in the code-file format")
    gen_parser.set_defaults(handler=codes_command)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    settings.configure_logging()
    try:
        return args.handler(args)
    except ScenarioValidationError as e:
        print(f"❌ invalid scenario: {e}")
        print(json.dumps({"error": str(e), "diagnostics": e.diagnostics}, indent=2))
        return EXIT_INVALID
    except InfeasibleError as e:
        print(f"❌ infeasible: {e}")
        print(json.dumps({"error": str(e), "ring": e.ring}, indent=2))
        return EXIT_INFEASIBLE
    except (UwocError, OSError) as e:
        print(json.dumps({"error": str(e)}, indent=2))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
