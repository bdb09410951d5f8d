"""Scenarios, file formats, simulation and the command-line interface."""
from .cli import EXIT_FALSIFIED, EXIT_OK, EXIT_UNKNOWN, EXIT_USAGE, cli, main
from .io import (
    CONFIG_SCHEMA,
    ConfigError,
    bundle_from_dict,
    bundle_to_dict,
    budget_from,
    csv_text,
    default_config,
    dumps,
    load_checkpoint,
    load_config,
    read_csv,
    save_checkpoint,
    train_config,
    write_csv,
)
from .scenarios import SCENARIOS, Bundle, Scenario, build, example1_bundle, get_scenario
from .sim import RoaSlice, Trajectory, VolumeEstimate, mc_volume, roa_slice, rollout_batch, simulate
