"""
Django management command that generates a synthetic multi-center dataset.
Writes one ``.fhv`` file per volume plus ``manifest.json`` below ``--out``.
"""

import shutil
from pathlib import Path

from django.core.management.base import CommandError

from simulation.experiment_config import load_profiles
from simulation.management.base import FhsimCommand
from simulation.phantomdata import Label, PhantomConstants, default_profiles, generate_center
from simulation.previews import write_previews
from simulation.volume_io import MANIFEST, write_dataset_tree


class Command(FhsimCommand):
    help = 'Generate synthetic cardiac MRI phantoms for every center profile'

    def add_arguments(self, parser):
        parser.add_argument(
            '--profiles',
            help='Center profile TOML file (default: the built-in four centers)'
        )
        parser.add_argument(
            '--seed',
            type=int,
            default=0,
            help='Generation seed'
        )
        parser.add_argument(
            '--out',
            required=True,
            help='Output directory for the dataset tree'
        )
        parser.add_argument(
            '--previews',
            action='store_true',
            help='Also write PNG mid-slice previews of the first subject per center'
        )
        parser.add_argument(
            '--force',
            action='store_true',
            help='Replace an existing dataset tree'
        )

    def run_command(self, **options):
        out = Path(options['out'])
        if out.exists() and any(out.iterdir()):
            if not options['force']:
                raise CommandError(f"{out} is not empty; use --force to replace it")
            if not (out / MANIFEST).exists():
                raise CommandError(f"{out} does not look like a generated dataset, refusing to replace it")
            shutil.rmtree(out)

        if options['profiles']:
            profiles, constants = load_profiles(options['profiles'])
        else:
            profiles, constants = default_profiles(), PhantomConstants()

        seed = options['seed']
        self.stdout.write(f"🧪 Generating {len(profiles)} centers with seed {seed}...")
        datasets = []
        for profile in profiles:
            dataset = generate_center(profile, seed, constants)
            counts = dataset.label_counts()
            self.stdout.write(f"  {dataset.center_id}: {len(dataset.subjects)} subjects "
                              f"({counts[Label.NOR]} NOR, {counts[Label.HCM]} HCM)")
            datasets.append(dataset)

        write_dataset_tree(datasets, out, metadata={'seed': seed})
        if options['previews']:
            write_previews(datasets, out, seed)
        self.stdout.write(self.style.SUCCESS(f"✅ Dataset written to {out}"))
