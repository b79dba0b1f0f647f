from rich.console import Console
from rich.table import Table
from rich.text import Text

console = Console(highlight=False)


def log(tag: str, message: str, style: str = "bold cyan"):
    """One tagged line, e.g. ``[Train] epoch=3 | loss=0.412``."""
    console.print(Text.assemble((f"[{tag}] ", style), message))


def warn(tag: str, message: str):
    log(tag, message, style="bold yellow")


def fail(tag: str, message: str):
    log(tag, message, style="bold red")


def fields(**values) -> str:
    parts = []
    for key, value in values.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        parts.append(f"{key}={value}")
    return " | ".join(parts)


def table(title: str, columns: list[str], rows: list[list]) -> Table:
    out = Table(title=title)
    for col in columns:
        out.add_column(col)
    for row in rows:
        out.add_row(*(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row))
    console.print(out)
    return out
