"""Project tasks."""

from __future__ import annotations

from duty import duty  # pyright: ignore[reportMissingImports]


SYNTHETIC = "configs/synthetic.yaml"


def _join(args: tuple[str, ...]) -> str:
    return " " + " ".join(args) if args else ""


@duty(capture=False)
def docs(ctx, *args: str):
    """Build the documentation site."""
    ctx.run(f"uv run mknodes build{_join(args)}")


@duty(capture=False)
def serve(ctx, *args: str):
    """Serve the documentation site locally."""
    ctx.run(f"uv run mknodes serve{_join(args)}")


@duty(capture=False)
def test(ctx, *args: str):
    """Run the fast test suite."""
    ctx.run(f"uv run pytest{_join(args)}")


@duty(capture=False)
def acceptance(ctx, workers: int = 4):
    """Run the slow directional checks on the synthetic scenario."""
    ctx.run(f"QUADFAULT_WORKERS={workers} uv run pytest -m slow tests/test_acceptance.py")


@duty(capture=False)
def scenario(ctx, config: str = SYNTHETIC, out: str = "results", *sets: str):
    """Run a method comparison and write its bundle."""
    overrides = "".join(f" --set {s}" for s in sets)
    ctx.run(f"uv run quadfault scenario -c {config} -o {out}{overrides}")


@duty(capture=False)
def ablate(ctx, config: str = SYNTHETIC, out: str = "results", *sets: str):
    """Run the preset and beta grid and write its bundle."""
    overrides = "".join(f" --set {s}" for s in sets)
    ctx.run(f"uv run quadfault ablate -c {config} -o {out}{overrides}")


@duty(capture=False)
def profile(ctx, config: str = SYNTHETIC):
    """Profile one training run of LSTM-QDM."""
    ctx.run(
        "uv run --group benchmark pyinstrument -m quadfault.cli"
        f" train model.npz -c {config} --method qdm"
    )


@duty(capture=False)
def clean(ctx):
    """Remove result bundles, checkpoints and build output."""
    ctx.run("rm -rf results ckpt site dist model.npz")


@duty(capture=False)
def update(ctx):
    """Update the lock file and sync every group."""
    ctx.run("uv lock --upgrade")
    ctx.run("uv sync --all-groups")


@duty(capture=False)
def lint(ctx):
    """Lint the code and fix issues if possible."""
    ctx.run("uv run ruff check --fix --unsafe-fixes .")
    ctx.run("uv run ruff format .")
    ctx.run("uv run mypy src/quadfault/")


@duty(capture=False)
def lint_check(ctx):
    """Lint the code."""
    ctx.run("uv run ruff check .")
    ctx.run("uv run ruff format --check .")
    ctx.run("uv run mypy src/quadfault/")
