import logging

import click

from pbns import __version__

logger = logging.getLogger(__name__)


def create_cli() -> click.Group:
    """
    Command-line factory that creates the ``pbns`` command group and registers every command.

    Returns:
        click.Group: The configured command group
    """

    @click.group(name="pbns", context_settings={"help_option_names": ["-h", "--help"]})
    @click.version_option(__version__, prog_name="pbns")
    def cli() -> None:
        """Unsupervised pose space deformation of rigged garments."""

    # Register commands
    from pbns.commands.fixture_commands import make_fixture_command
    from pbns.commands.infer_commands import bench_command, infer_command, resize_infer_command
    from pbns.commands.train_commands import resize_train_command, train_command
    from pbns.commands.validate_commands import describe_command, validate_command, validate_poses_command

    cli.add_command(train_command)
    cli.add_command(infer_command)
    cli.add_command(validate_command)
    cli.add_command(resize_train_command)
    cli.add_command(resize_infer_command)
    cli.add_command(bench_command)
    cli.add_command(describe_command)
    cli.add_command(validate_poses_command)
    cli.add_command(make_fixture_command)

    return cli
