import logging

from pbns.cli_factory import create_cli

logger = logging.getLogger(__name__)

# Create the command group using the factory function
cli = create_cli()


def main() -> None:
    cli(prog_name="pbns")


if __name__ == "__main__":
    main()
