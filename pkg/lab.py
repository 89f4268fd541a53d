"""
(©) EDQ Lab

This file defines the main Lab class, the command-line entry point of the laboratory.
It parses arguments, loads the experiment config, dispatches to the command plugins
and maps errors to exit codes.
"""

import argparse
import importlib
import platform
import sys
from dataclasses import replace
from datetime import datetime

import numpy as np

# Import our custom configuration
import config
from edq.errors import ArtifactError, ConfigError, EdqError, VerificationFailure
from helper_func import get_readable_time

# --- Startup Banner ---
ASCII_ART = """
╔══════════════════════════════════════════════════════════╗
║        EDQ LAB - Earliest-Disagreement Q-Evaluation      ║
║   Off-policy evaluation on marked decision processes     ║
║   simulate • train • evaluate • verify • graph-check     ║
╚══════════════════════════════════════════════════════════╝
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFICATION = 3
EXIT_RUNTIME = 4

PLUGINS = ("simulate", "train", "evaluate", "verify", "graph_check")
DEFAULT_CONFIG = "settings.json"


class Lab:
    """
    The main Lab class.

    Plugins register their subcommands with `@Lab.on_command(...)`; each handler
    receives the Lab and the parsed arguments and returns an exit code.
    """

    commands: dict = {}

    def __init__(self):
        self.config = config
        self.LOGGER = config.LOGGER
        self.uptime: datetime = None
        self.experiment = None

    @classmethod
    def on_command(cls, name: str, help: str = "", arguments: tuple = ()):
        """Registers a subcommand handler; `arguments` are (flags, kwargs) pairs for argparse."""
        def decorator(func):
            cls.commands[name] = (func, help, arguments)
            return func
        return decorator

    @staticmethod
    def load_plugins():
        for name in PLUGINS:
            importlib.import_module(f"plugins.{name}")

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog="edq-lab", description="Earliest-Disagreement Q-Evaluation laboratory.")
        parser.add_argument("--quiet", action="store_true", help="Do not print the startup banner.")
        sub = parser.add_subparsers(dest="command", required=True)
        for name, (_, help_text, arguments) in self.commands.items():
            p = sub.add_parser(name, help=help_text)
            p.add_argument("--config", default=DEFAULT_CONFIG, help="Experiment config JSON (default: settings.json).")
            p.add_argument("--seed", type=int, default=None, help="Run with this single seed instead of the config's seeds.")
            p.add_argument("--jobs", type=int, default=None, help="Parallel workers for evaluation grids.")
            p.add_argument("--out", default=None, help="Run directory (default: <output_dir>/<name>).")
            for flags, kwargs in arguments:
                p.add_argument(*flags, **kwargs)
        return parser

    def load_experiment(self, args):
        """Loads the config named by --config and applies the --seed/--jobs overrides."""
        from plugins import resolve_path
        experiment = config.load_experiment_config(resolve_path(args.config))
        if args.seed is not None:
            experiment = replace(experiment, seeds=(args.seed,))
        if args.jobs is not None:
            experiment = replace(experiment, jobs=args.jobs)
        self.experiment = experiment
        return experiment

    def main(self, argv=None) -> int:
        self.load_plugins()
        parser = self.build_parser()
        args = parser.parse_args(argv)
        self.uptime = datetime.now()
        log = self.LOGGER(__name__)
        if not args.quiet:
            print(ASCII_ART, file=sys.stderr)
        log.info(f"Python {sys.version.split()[0]} / numpy {np.__version__} on {platform.node()}")

        handler = self.commands[args.command][0]
        try:
            code = handler(self, args)
        except ConfigError as e:
            log.error(f"Configuration error: {e}")
            return EXIT_CONFIG
        except VerificationFailure as e:
            log.error(f"Verification failed: {e}")
            return EXIT_VERIFICATION
        except ArtifactError as e:
            log.error(f"Artifact error: {e}")
            return EXIT_RUNTIME
        except EdqError as e:
            log.error(f"{args.command} failed: {e}", exc_info=True)
            return EXIT_RUNTIME
        except (OSError, ValueError, ArithmeticError) as e:
            log.critical(f"Unexpected error in {args.command}: {e}", exc_info=True)
            return EXIT_RUNTIME

        elapsed = (datetime.now() - self.uptime).total_seconds()
        log.info(f"{args.command} finished in {get_readable_time(elapsed)} with exit code {code}")
        return code

    def run(self, argv=None):
        sys.exit(self.main(argv))
