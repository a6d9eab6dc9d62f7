#!/usr/bin/env python3
"""
TransNets - review-based rating prediction
Prepares review corpora, trains TransNet models and baselines, evaluates them and
retrieves the reviews closest to a predicted representation.
"""

import argparse
import logging
import sys

from src.config import Config
from src.errors import ConfigError
from src.pipeline import TransNetsPipeline

logger = logging.getLogger(__name__)

# argparse dest -> TrainConfig field, for every flag that maps onto one
TRAIN_FLAGS = ('model', 'batch_size', 'eval_every', 'lr', 'keep_prob', 'max_len', 'filters', 'window', 'latent_dim',
               'embedding_dim', 'fm_rank', 'vocab_size', 'seed', 'max_epochs', 'loss_trans', 'conv_activation',
               'transform_activation', 'dtype', 'profile_shuffle', 'reuse_dropout_mask', 'transform_dropout',
               'joint_training', 'include_test_reviews', 'thread_count')


def parse_layers(value: str):
    """'2' -> [2]; '1..10' -> [1, 2, ..., 10]."""
    try:
        if '..' in value:
            low, high = (int(part) for part in value.split('..', 1))
            if low > high:
                raise ValueError(f"empty range {value}")
            return list(range(low, high + 1))
        return [int(value)]
    except ValueError as e:
        raise ConfigError(f"--layers expects N or A..B, got {value!r}") from e


def add_common_arguments(parser: argparse.ArgumentParser):
    parser.add_argument('--config', help='Path to a JSON config file')
    parser.add_argument('--env', help='Path to .env file with TRANSNETS_* variables')
    parser.add_argument('--desk', action='store_true', default=None, help='Use the CPU-scale desk profile')
    parser.add_argument('--data-dir', help='Prepared dataset directory (default: data)')
    parser.add_argument('-o', '--output-dir', help='Output directory (default: output)')
    parser.add_argument('--embeddings', help='Word embedding text file (default: seeded random vectors)')
    parser.add_argument('-v', '--verbose', action='store_true', help='Log per-batch detail')

    group = parser.add_argument_group('model and training')
    group.add_argument('-m', '--model', choices=['mf', 'deepconn', 'deepconn-revab', 'transnet', 'transnet-ext'])
    group.add_argument('--layers', help='Transform depth L, or a range A..B for a sweep')
    group.add_argument('--batch-size', type=int)
    group.add_argument('--eval-every', type=int, help='Batches between evaluations')
    group.add_argument('--lr', type=float)
    group.add_argument('--keep-prob', type=float)
    group.add_argument('--max-len', type=int, help='Profile length T')
    group.add_argument('--filters', type=int, help='Convolution filters m')
    group.add_argument('--window', type=int, help='Convolution window t')
    group.add_argument('--latent-dim', type=int, help='Latent width n')
    group.add_argument('--embedding-dim', type=int, help='Word embedding width d')
    group.add_argument('--fm-rank', type=int, help='FM factor rank k')
    group.add_argument('--vocab-size', type=int, help='Vocabulary size M')
    group.add_argument('--seed', type=int)
    group.add_argument('--max-epochs', type=int)
    group.add_argument('--loss-trans', choices=['squared', 'norm'])
    group.add_argument('--conv-activation', choices=['tanh', 'relu', 'identity'])
    group.add_argument('--transform-activation', choices=['tanh', 'relu', 'identity'])
    group.add_argument('--dtype', choices=['float64', 'float32'])
    group.add_argument('--profile-shuffle', choices=['once', 'epoch'])
    group.add_argument('--fresh-dropout-mask', dest='reuse_dropout_mask', action='store_false', default=None,
                       help='Draw a new dropout mask for the FM_S sub-step')
    group.add_argument('--no-transform-dropout', dest='transform_dropout', action='store_false', default=None,
                       help='Match z_L instead of its dropped-out version in the transform loss')
    group.add_argument('--joint-training', action='store_true', default=None,
                       help='Diagnostic: optimise all three losses in one step')
    group.add_argument('--include-test-reviews', action='store_true', default=None,
                       help='Diagnostic: let held-out reviews into held-out profiles (deepconn only)')
    group.add_argument('-t', '--threads', dest='thread_count', type=int, help='Evaluation threads')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Review-based rating prediction with TransNets and baselines')
    commands = parser.add_subparsers(dest='command', required=True)

    prepare = commands.add_parser('prepare', help='Split a raw dataset and build the vocabulary')
    prepare.add_argument('-i', '--input', required=True, help='Raw JSON-lines review file')
    prepare.add_argument('--format', default='jsonl', choices=['jsonl', 'yelp', 'amazon'])

    commands.add_parser('train', help='Train a model and keep the best-validation checkpoint')

    evaluate = commands.add_parser('evaluate', help='MSE of a checkpoint on one split')
    evaluate.add_argument('--split', default='test', choices=['train', 'validation', 'test'])
    evaluate.add_argument('--checkpoint', help='Checkpoint file (default: <output>/checkpoint.tnsn)')

    predict = commands.add_parser('predict', help='Predict the rating of one user for one item')
    predict.add_argument('--user', required=True)
    predict.add_argument('--item', required=True)
    predict.add_argument('--checkpoint')

    similar = commands.add_parser('similar', help='Rank training reviews of an item by closeness to z_L')
    similar.add_argument('--user', required=True)
    similar.add_argument('--item', required=True)
    similar.add_argument('-k', type=int, default=None, help='Keep only the top K reviews in the report')
    similar.add_argument('--checkpoint')

    gradcheck = commands.add_parser('gradcheck', help='Finite-difference check of every layer')
    gradcheck.add_argument('--instances', type=int, default=100)

    synth = commands.add_parser('synth', help='Write a synthetic review corpus')
    synth.add_argument('--out', required=True, help='Output JSON-lines file')
    synth.add_argument('--users', type=int, default=500)
    synth.add_argument('--items', type=int, default=200)
    synth.add_argument('--reviews', type=int, default=5000)

    for sub in commands.choices.values():
        add_common_arguments(sub)
    return parser


def main(argv=None):
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(levelname)s - %(message)s')

    try:
        layers = parse_layers(args.layers) if args.layers else None
        overrides = {name: getattr(args, name, None) for name in TRAIN_FLAGS}
        if layers:
            overrides['layers'] = layers[0]

        # Load configuration with command line overrides
        config = Config(env_file=args.env, config_file=args.config, overrides=overrides, desk=bool(args.desk),
                        data_dir=args.data_dir, output_dir=args.output_dir, embeddings=args.embeddings)
        pipeline = TransNetsPipeline(config)

        if args.command == 'prepare':
            stats = pipeline.prepare(args.input, args.format)
            logger.info(f"Prepared dataset: {stats}")

        elif args.command == 'train':
            if layers and len(layers) > 1:
                rows = pipeline.train_layers_sweep(layers)
                logger.info(f"Trained {len(rows)} models")
            else:
                checkpoint = pipeline.train()
                logger.info(f"Best validation MSE {checkpoint.best_val_mse:.6f}, "
                            f"test MSE {checkpoint.test_mse_at_best:.6f}")

        elif args.command == 'evaluate':
            report = pipeline.evaluate(args.split, args.checkpoint)
            print(report.to_text(args.split), end='')

        elif args.command == 'predict':
            print(f"{pipeline.predict(args.user, args.item, args.checkpoint):.6f}")

        elif args.command == 'similar':
            result = pipeline.similar(args.user, args.item, args.k, args.checkpoint)
            print('rank\treview_id\tdistance')
            print('\n'.join(result.to_lines(args.k)))

        elif args.command == 'gradcheck':
            report = pipeline.gradcheck(args.instances)
            print(report.to_text(), end='')

        elif args.command == 'synth':
            corpus = pipeline.synth(args.out, args.users, args.items, args.reviews)
            logger.info(f"Synthetic corpus: {len(corpus.reviews)} reviews")

    except Exception as e:
        logger.error(f"Error: {e}")
        message = ' '.join(str(e).split())
        print(f"error\t{type(e).__name__}\t{message}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
