from src.routes.simctl import cli


if __name__ == "__main__":
    cli()
