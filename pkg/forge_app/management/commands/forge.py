import json
import logging

from django.core.management.base import BaseCommand, CommandError

from forge_app.config import load_config
from forge_app.exceptions import ConfigurationError, ForgeError
from forge_app.models import Stage
from forge_app.pipeline import Pipeline, resume, stats


logger = logging.getLogger('forge_app')


STAGE_ACTIONS = {
    'run': Stage.ASSEMBLE,
    'classify': Stage.CLASSIFY,
    'transform': Stage.TRANSFORM,
    'generate': Stage.GENERATE,
    'filter': Stage.FILTER,
}

ACTIONS = [*STAGE_ACTIONS, 'assemble', 'resume', 'stats', 'validate']


class Command(BaseCommand):
    help = "Turn a VQA corpus into a reasoning-based image editing dataset"

    def add_arguments(self, parser):
        parser.add_argument('action', choices=ACTIONS)
        parser.add_argument('--config', help="Run config (JSON)")
        parser.add_argument('--workdir', help="Work dir holding the ledger; overrides the config")
        parser.add_argument('--seed', type=int, help="Run seed (unsigned 64-bit)")
        parser.add_argument('--mock', action='store_true', help="Use the deterministic mock backends")
        parser.add_argument('--max-concurrency', type=int, help="Admission limit for every backend")
        parser.add_argument('--json', action='store_true', help="stats: print the JSON report")

    def handle(self, *args, **options):
        action = options['action']
        try:
            self._dispatch(action, options)
        except ConfigurationError as e:
            logger.error(f"Configuration error: {e}")
            raise CommandError(str(e), returncode=2)
        except ForgeError as e:
            logger.error(f"{action} failed: {e}")
            raise CommandError(str(e), returncode=1)

    def _config(self, options, required=True):
        if not options['config']:
            if required:
                raise ConfigurationError("--config is required for this action")
            return None
        config = load_config(options['config'])
        return config.with_overrides(
            work_dir=options['workdir'],
            seed=options['seed'],
            mock=options['mock'],
            max_concurrency=options['max_concurrency'],
        )

    def _work_dir(self, options, config):
        if options['workdir']:
            return options['workdir']
        if config is None:
            raise ConfigurationError("Give --workdir or --config")
        return config.work_dir

    def _dispatch(self, action, options):
        if action == 'validate':
            config = self._config(options)
            self.stdout.write(f"Config OK, hash {config.config_hash()}")
            return

        if action == 'stats':
            config = self._config(options, required=False)
            text, report = stats(self._work_dir(options, config))
            self.stdout.write(json.dumps(report, indent=2, sort_keys=True) if options['json'] else text)
            return

        if action == 'resume':
            config = self._config(options, required=False)
            manifest = resume(self._work_dir(options, config), config)
        elif action == 'assemble':
            manifest = Pipeline(self._config(options)).assemble_only()
        else:
            manifest = Pipeline(self._config(options)).run(STAGE_ACTIONS[action])

        counts = ', '.join(f"{status}={count}" for status, count in sorted(manifest.status_counts().items()))
        self.stdout.write(self.style.SUCCESS(
            f"{action}: {len(manifest.records)} records ({counts or 'none'})"
        ))
