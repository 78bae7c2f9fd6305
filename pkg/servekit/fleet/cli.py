import sys
import argparse

import pandas as pd

from servekit.fleet.controller import Controller, InvalidVersion, \
    NoCapacity, UnknownModel, load_fleet_config
from servekit.fleet.synchronizer import HttpTransport, Synchronizer
from servekit.sources import PathUnreadable, VersionSelection


def build_parser():
    parser = argparse.ArgumentParser(
        prog='fleetctl', description='Manage models across serving jobs')
    parser.add_argument('--journal', default='fleet_journal.jsonl')
    parser.add_argument('--fleet_config', required=True)
    parser.add_argument('--sync_rounds', type=int, default=5)
    parser.add_argument('--sync_interval_s', type=float, default=0.5)
    verbs = parser.add_subparsers(dest='verb', required=True)

    add_model = verbs.add_parser('add-model')
    add_model.add_argument('--name', required=True)
    add_model.add_argument('--path', required=True)
    add_model.add_argument('--selection', default='latest:1')

    remove_model = verbs.add_parser('remove-model')
    remove_model.add_argument('--name', required=True)

    for verb in ('add-version', 'rollback'):
        sub = verbs.add_parser(verb)
        sub.add_argument('--name', required=True)
        sub.add_argument('--version', type=int, required=True)
        if verb == 'add-version':
            sub.add_argument('--selection')

    canary = verbs.add_parser('canary')
    canary.add_argument('--name', required=True)
    canary.add_argument('--version', type=int, required=True)
    canary.add_argument('--fraction', type=float, required=True)

    status = verbs.add_parser('status')
    status.add_argument('--name')
    return parser


def run_command(controller: Controller, args):
    if args.verb == 'add-model':
        return controller.add_model(args.name, args.path,
                                    VersionSelection.parse(args.selection))
    elif args.verb == 'remove-model':
        return controller.remove_model(args.name)
    elif args.verb == 'add-version':
        selection = None if args.selection is None else \
            VersionSelection.parse(args.selection)
        return controller.add_version(args.name, args.version, selection)
    elif args.verb == 'rollback':
        return controller.rollback(args.name, args.version)
    elif args.verb == 'canary':
        return controller.canary(args.name, args.version, args.fraction)
    raise ValueError('Unknown verb {}'.format(args.verb))


def replica_frame(sync: Synchronizer, name=None) -> pd.DataFrame:
    rows = []
    for server in sorted(sync.reports):
        for model, report in sorted(sync.reports[server].items()):
            if name is not None and model != name:
                continue
            for row in report:
                rows.append({'server': server, 'model': model,
                             'version': row['version'],
                             'state': row['state'],
                             'error': row.get('error_message', '')})
    return pd.DataFrame(rows, columns=['server', 'model', 'version',
                                       'state', 'error'])


def main(argv=None, transport=None, out=sys.stdout):
    args = build_parser().parse_args(argv)
    try:
        config = load_fleet_config(args.fleet_config)
        controller = Controller.from_config(config, args.journal)
        if args.verb != 'status':
            run_command(controller, args)
    except (NoCapacity, UnknownModel, InvalidVersion, PathUnreadable,
            ValueError, OSError) as e:
        print('fleetctl: {}: {}'.format(type(e).__name__, e), file=sys.stderr)
        return 1

    sync = Synchronizer(controller, transport or HttpTransport())
    code = 0
    if args.verb == 'status':
        sync.refresh()
    else:
        rounds = sync.run(args.sync_rounds, interval=args.sync_interval_s)
        if rounds is None:
            print('fleetctl: not converged after {} sync rounds'
                  .format(args.sync_rounds), file=sys.stderr)
            code = 3

    models = controller.status_frame()
    name = getattr(args, 'name', None)
    if args.verb == 'status' and name is not None:
        models = models[models['name'] == name]
    print(models.to_string(index=False), file=out)
    print(replica_frame(sync, name if args.verb == 'status' else None)
          .to_string(index=False), file=out)
    return code


if __name__ == '__main__':
    sys.exit(main())
