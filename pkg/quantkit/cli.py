""" quantkit command line

    quantkit ptq --model m.json [--calib c.json] [--data d.json] --out q.json
    quantkit qat --model m.json --data train.json --out q.json
    quantkit diagnose --model m.json --calib c.json [--out report.json]
    quantkit eval --model q.json --data d.json --engine int
    quantkit make-data --dataset two-moons --out d.json
    quantkit make-model --model-kind mlp --data d.json --out m.json

Configuration precedence: defaults < flags < --config file.
Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
import argparse
import logging
import os
import sys

from .configuration import Configuration
from .datasets import DATASETS, load_batches, load_dataset, make_dataset, save_dataset, split
from .exceptions import NumericalError, QuantkitError
from .models import MODELS, build, input_metadata, pretrained
from .pipelines.diagnose import Diagnose
from .pipelines.evaluate import ENGINES, Evaluate
from .pipelines.ptq import PTQ
from .pipelines.qat import QAT
from .serialization import load_model, save_model


EXIT_OK = 0
EXIT_CONFIGURATION = 2
EXIT_NUMERICAL = 3


def _config_flags(args):
    flags = {
        'environment': args.environment,
        'weight_bitwidth': args.wbits,
        'act_bitwidth': args.abits,
        'weight_range': args.weight_range,
        'act_range': args.act_range,
        'bias_correction': args.bias_corr,
        'adaround': args.adaround,
        'seed': args.seed,
    }
    if args.per_channel:
        flags['weight_granularity'] = 'per-channel'
    if args.no_cle:
        flags['cle'] = False
    return flags


def configuration(args):
    return Configuration.merged(_config_flags(args), args.config)


def _calibration(path):
    if path is None:
        return None
    return [inputs for inputs, _ in load_batches(path)]


def _report_path(args, default_suffix):
    if args.report:
        return args.report
    root, _ = os.path.splitext(args.out)
    return root + default_suffix


def _emit(report, path):
    if path:
        report.write(path)
    else:
        sys.stdout.write(report.dumps())


def cmd_ptq(args):
    config = configuration(args)
    graph = load_model(args.model)
    evaluation = load_dataset(args.data) if args.data else None
    quantized, report = PTQ(config).run(graph, _calibration(args.calib), evaluation)
    save_model(quantized, args.out)
    report.write(_report_path(args, '.report.json'))


def cmd_qat(args):
    config = configuration(args)
    graph = load_model(args.model)
    dataset = load_dataset(args.data)
    evaluation = load_dataset(args.eval) if args.eval else None
    trained, report = QAT(config).run(
        graph, dataset, _calibration(args.calib), evaluation, metrics_path=args.metrics,
    )
    save_model(trained, args.out)
    report.write(_report_path(args, '.report.json'))


def cmd_diagnose(args):
    config = configuration(args)
    graph = load_model(args.model)
    report = Diagnose(config).run(graph, load_dataset(args.calib))
    _emit(report, args.out)


def cmd_eval(args):
    config = configuration(args)
    graph = load_model(args.model)
    report = Evaluate(config).run(graph, load_dataset(args.data), engine=args.engine)
    _emit(report, args.out)


def cmd_make_data(args):
    inputs, labels = make_dataset(args.dataset, count=args.count, seed=args.seed or 0)
    if args.holdout:
        (inputs, labels), held = split(inputs, labels, args.holdout_fraction, seed=args.seed or 0)
        save_dataset(args.holdout, held[0], held[1], args.batch_size)
    save_dataset(args.out, inputs, labels, args.batch_size)


def cmd_make_model(args):
    inputs, labels = load_dataset(args.data)
    options = {'seed': args.seed or 0}
    if inputs.ndim == 2:
        options['in_features'] = inputs.shape[1]
    else:
        options['channels'] = inputs.shape[1]
        options['size'] = inputs.shape[2]
    options['classes'] = int(labels.max()) + 1
    graph = build(args.model_kind, **options)
    if args.epochs:
        graph = pretrained(graph, (inputs, labels), {'epochs': args.epochs, 'seed': args.seed or 0})
    else:
        graph.metadata.update(input_metadata(inputs))
    save_model(graph, args.out)


def _add_config_flags(parser):
    parser.add_argument('--config', help='JSON configuration file, overrides flags')
    parser.add_argument('--environment', help='bit-width preset, e.g. W8A8, W4A8, W4A4, W8A8PerChannel')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--wbits', type=int, help='weight bit-width')
    parser.add_argument('--abits', type=int, help='activation bit-width')
    parser.add_argument('--per-channel', action='store_true', help='per-channel weight quantization')
    parser.add_argument('--no-cle', action='store_true', help='skip cross-layer equalization')
    parser.add_argument('--adaround', dest='adaround', action='store_true', default=None)
    parser.add_argument('--no-adaround', dest='adaround', action='store_false')
    parser.add_argument('--bias-corr', choices=('empirical', 'analytic', 'off'))
    parser.add_argument('--act-range', choices=('mse', 'minmax', 'bn', 'xent-last'))
    parser.add_argument('--weight-range', choices=('mse', 'minmax'))


def parser():
    root = argparse.ArgumentParser(prog='quantkit', description='Neural network quantization toolkit')
    root.add_argument('-v', '--verbose', action='store_true')
    root.add_argument('-q', '--quiet', action='store_true')
    commands = root.add_subparsers(dest='command')
    commands.required = True

    ptq = commands.add_parser('ptq', help='post-training quantization')
    ptq.add_argument('--model', required=True)
    ptq.add_argument('--calib', help='calibration batches; omit for the data-free path')
    ptq.add_argument('--data', help='labeled evaluation data for per-step metrics')
    ptq.add_argument('--out', required=True, help='quantized model manifest')
    ptq.add_argument('--report', help='report path (default: <out>.report.json)')
    _add_config_flags(ptq)
    ptq.set_defaults(handler=cmd_ptq)

    qat = commands.add_parser('qat', help='quantization-aware training')
    qat.add_argument('--model', required=True)
    qat.add_argument('--data', required=True, help='labeled training data')
    qat.add_argument('--calib', help='range initialization batches (default: training inputs)')
    qat.add_argument('--eval', help='labeled evaluation data')
    qat.add_argument('--metrics', help='JSON-lines training metrics')
    qat.add_argument('--out', required=True)
    qat.add_argument('--report')
    _add_config_flags(qat)
    qat.set_defaults(handler=cmd_qat)

    diagnose = commands.add_parser('diagnose', help='locate quantization error')
    diagnose.add_argument('--model', required=True)
    diagnose.add_argument('--calib', required=True, help='data with labels, or unlabeled for output MSE')
    diagnose.add_argument('--out', help='report path (default: stdout)')
    _add_config_flags(diagnose)
    diagnose.set_defaults(handler=cmd_diagnose)

    evaluate = commands.add_parser('eval', help='score a model with one engine')
    evaluate.add_argument('--model', required=True)
    evaluate.add_argument('--data', required=True)
    evaluate.add_argument('--engine', choices=sorted(ENGINES), default='sim')
    evaluate.add_argument('--out', help='report path (default: stdout)')
    _add_config_flags(evaluate)
    evaluate.set_defaults(handler=cmd_eval)

    data = commands.add_parser('make-data', help='generate a desk-scale dataset')
    data.add_argument('--dataset', choices=sorted(DATASETS), required=True)
    data.add_argument('--count', type=int, default=1000)
    data.add_argument('--batch-size', type=int, default=64)
    data.add_argument('--holdout', help='also write a held-out split here')
    data.add_argument('--holdout-fraction', type=float, default=0.2)
    data.add_argument('--seed', type=int)
    data.add_argument('--out', required=True)
    data.set_defaults(handler=cmd_make_data)

    model = commands.add_parser('make-model', help='build (and FP-train) a toy model')
    model.add_argument('--model-kind', choices=sorted(MODELS), required=True)
    model.add_argument('--data', required=True, help='labeled data fixing the input shape and classes')
    model.add_argument('--epochs', type=int, default=30, help='FP training epochs, 0 for untrained')
    model.add_argument('--seed', type=int)
    model.add_argument('--out', required=True)
    model.set_defaults(handler=cmd_make_model)
    return root


def main(argv=None):
    args = parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s')

    try:
        args.handler(args)
    except NumericalError as e:
        logging.error('Numerical failure: {}'.format(e))
        return EXIT_NUMERICAL
    except QuantkitError as e:
        logging.error('{}: {}'.format(type(e).__name__, e))
        return EXIT_CONFIGURATION
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
