"""
Spinner and Progress Bar Utilities for crowdcount
-------------------------------------------------
from .spinner_progress_utils import spinner, progress_bar

This module provides decorators for adding loading indicators to functions.

-----------------------------------
Spinners (for unknown loading time)
-----------------------------------

Example usage:
    @spinner(spinner_type="dots", message="[cyan]Loading checkpoint...")
    def load():
        ...

--------------------------
Progress Bar (for loops whose length is known)
--------------------------

Example usage:
    @progress_bar(description="Training...")
    def train():
        for step in range(1, total + 1):
            # do work
            yield step, total
        return result

NOTE: progress bars wrap generators, not plain functions. Each yielded
(done, total) pair moves the bar; the generator's return value becomes the
return value of the decorated call.
"""

from functools import wraps

from rich.console import Console
from rich.progress import Progress


#--------SPINNER-------
def spinner(spinner_type="dots", message=" [cyan]Working..."):
    """Decorator for CLI spinners.

    Args:
        spinner_type: Spinner style
        message: Display message

    Returns:
        Decorator function
    """

    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            console = Console(stderr=True)
            with console.status(f"{message}", spinner=spinner_type):
                return func(*args, **kwargs)
        return wrapper
    return decorator

#--------PROGRESS BAR-------
def progress_bar(description="Working..."):
    """Decorator for progress bars.

    Args:
        description: Progress label

    Returns:
        Decorator function returning whatever the wrapped generator returns
    """

    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            # The wrapped function must yield (done, total) tuples
            steps = func(*args, **kwargs)
            with Progress(console=Console(stderr=True), transient=True) as progress:
                task = None
                while True:
                    try:
                        done, total = next(steps)
                    except StopIteration as stop:
                        return stop.value
                    if task is None:
                        # Create the progress bar with the real total
                        task = progress.add_task(description, total=total)
                    progress.update(task, completed=done)
        return wrapper
    return decorator
