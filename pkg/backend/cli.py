"""Command-line front end: one workflow per subcommand, outputs under --out.

Exit codes: 0 success, 2 usage or configuration error, 3 domain error,
4 numerical failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from engine.errors import SwitchingError
from .analysis_service import AnalysisService
from .config_service import ConfigService
from .models import PolicyFile, RunConfig
from .optimization_service import OptimizationService
from .services.manifest_service import ManifestService
from .services.output_service import OutputService
from .simulation_service import SimulationService

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='coarse-switch',
        description='Optimal switching policies for bistable surface reaction models.'
    )
    parser.add_argument('--config', help='run configuration JSON')
    parser.add_argument('--seed', type=int, help='master seed (overrides the config)')
    parser.add_argument('--out', help='output directory (overrides the config)')
    parser.add_argument('--threads', type=int, default=1, help='worker threads; never changes results')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    parser.add_argument('--print-schema', action='store_true', help='print the RunConfig JSON schema and exit')
    sub = parser.add_subparsers(dest='command')

    bifurcation = sub.add_parser('bifurcation', help='steady states over a parameter range')
    bifurcation.add_argument('--param', help='rate constant to scan (default: first manipulated)')
    bifurcation.add_argument('--range', nargs=2, type=float, required=True, metavar=('LO', 'HI'))
    bifurcation.add_argument('--resolution', type=int, default=201)

    simulate = sub.add_parser('simulate', help='one ODE trajectory or KMC realization')
    simulate.add_argument('--t-end', type=float, required=True)
    simulate.add_argument('--sample-dt', type=float, required=True)
    simulate.add_argument('--policy', help='policy JSON applied from t=0 (default: nominal parameters)')

    roll = sub.add_parser('rollout', help='coarse rollout of a policy')
    roll.add_argument('--policy', help='policy JSON (default: the configured initial policy)')

    sub.add_parser('optimize', help='search for an optimal switching policy')

    refine = sub.add_parser('refine', help='resample a policy onto a shorter interval length')
    refine.add_argument('--policy', required=True)
    refine.add_argument('--new-T', dest='new_T', type=float, required=True)
    refine.add_argument('--name', default='refined_policy.json')

    separatrix = sub.add_parser('separatrix', help='stable manifold of the CO saddle')
    separatrix.add_argument('--delta', type=float, default=1e-6)
    separatrix.add_argument('--max-arc', type=float, default=10.0)

    evaluation = sub.add_parser('evaluate', help='objective statistics of a stored policy')
    evaluation.add_argument('--policy', required=True)
    evaluation.add_argument('--repeats', type=int, default=10)
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, force=True)


def _cmd_bifurcation(args, config: RunConfig, services, output: OutputService, manifest: ManifestService) -> None:
    param = args.param or config.manipulated[0]
    frame = services['analysis'].bifurcation(config, param, tuple(args.range), args.resolution)
    output.write_frame('bifurcation.csv', frame)


def _cmd_simulate(args, config, services, output, manifest) -> None:
    policy = None
    if args.policy:
        stored = services['config'].load_policy(args.policy)
        services['config'].check_policy(stored, config)
        policy = stored.to_policy()
    frame = services['simulation'].simulate(
        config, args.t_end, args.sample_dt, manifest.seed_for('simulate'), policy
    )
    output.write_frame('trajectory.csv', frame)


def _cmd_rollout(args, config, services, output, manifest) -> None:
    config_service = services['config']
    problem = config_service.build_problem(config)
    if args.policy:
        stored = config_service.load_policy(args.policy)
        config_service.check_policy(stored, config)
        policy = stored.to_policy()
    else:
        policy = config_service.initial_policy(config, problem)
    frame = services['simulation'].rollout(config, policy, manifest.seed_for('rollout'), args.threads)
    output.write_frame('rollout.csv', frame)


def _cmd_optimize(args, config, services, output, manifest) -> None:
    outcome = services['optimization'].optimize(config, manifest, args.threads)
    seed = manifest.stage_seeds.get('search:0')
    output.write_json('policy.json', PolicyFile.from_policy(outcome.policy, config.mechanism, config.manipulated, seed))
    output.write_jsonl('trace.jsonl', outcome.trace_records())
    output.append_run_log(outcome.run_record('optimize', config.master_seed))
    logger.info(
        f"Best objective {outcome.report.total:.6g} "
        f"(q={outcome.report.q_part:.6g}, w={outcome.report.w_part:.6g}, legacy={outcome.legacy_report.total:.6g})"
    )


def _cmd_refine(args, config, services, output, manifest) -> None:
    stored = services['config'].load_policy(args.policy)
    refined = services['optimization'].refine(config, stored, args.new_T)
    output.write_json(args.name, refined)


def _cmd_separatrix(args, config, services, output, manifest) -> None:
    frame = services['analysis'].separatrix_frame(config, args.delta, args.max_arc)
    output.write_frame('separatrix.csv', frame)
    output.write_frame('steady_states.csv', services['analysis'].steady_states(config))


def _cmd_evaluate(args, config, services, output, manifest) -> None:
    stored = services['config'].load_policy(args.policy)
    stats = services['optimization'].evaluate(config, stored, args.repeats, manifest, args.threads)
    output.write_json('evaluation.json', stats)


COMMANDS = {
    'bifurcation': _cmd_bifurcation,
    'simulate': _cmd_simulate,
    'rollout': _cmd_rollout,
    'optimize': _cmd_optimize,
    'refine': _cmd_refine,
    'separatrix': _cmd_separatrix,
    'evaluate': _cmd_evaluate,
}


def _check_usage(parser: argparse.ArgumentParser, args) -> None:
    if args.threads < 1:
        parser.error('--threads must be at least 1')
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        parser.error('--seed must be an unsigned 64-bit integer')
    if args.command == 'bifurcation':
        lo, hi = args.range
        if hi < lo:
            parser.error(f'empty range [{lo}, {hi}]')
        if args.resolution < 1 or (args.resolution < 2 and lo != hi):
            parser.error('--resolution must be at least 2 for a non-degenerate range')
    if args.command == 'simulate' and (args.t_end <= 0 or args.sample_dt <= 0):
        parser.error('--t-end and --sample-dt must be positive')
    if args.command == 'evaluate' and args.repeats < 1:
        parser.error('--repeats must be at least 1')


def main(argv: Optional[List[str]] = None, environ=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)

    if args.print_schema:
        print(json.dumps(RunConfig.model_json_schema(by_alias=True), indent=2))
        return 0
    if args.command is None:
        parser.error('a subcommand is required')
    if args.config is None:
        parser.error('--config is required')
    _check_usage(parser, args)

    config_service = ConfigService(environ=environ)
    services = {
        'config': config_service,
        'analysis': AnalysisService(config_service),
        'simulation': SimulationService(config_service),
        'optimization': OptimizationService(config_service),
    }
    try:
        _, snapshot = config_service.read_raw(args.config)
        config = config_service.load(args.config, {'master_seed': args.seed, 'output_dir': args.out})
        output = OutputService(Path(config.output_dir))
        manifest = ManifestService(args.command, config, snapshot)
        COMMANDS[args.command](args, config, services, output, manifest)
        output.write_json('manifest.json', manifest.finish(output.written))
    except SwitchingError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except ValueError as e:
        logger.error(f"{args.command}: invalid argument: {e}")
        return 2
    return 0


if __name__ == '__main__':
    sys.exit(main())
