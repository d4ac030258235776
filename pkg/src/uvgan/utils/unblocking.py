import asyncio
import functools
import typing
from collections.abc import Callable
from typing import Any

__all__ = ("gather_blocking", "run_blocking")

T = typing.TypeVar("T")


async def run_blocking(function: Callable[..., T], *args: Any, **kwargs: Any) -> T:
    """Takes a blocking function and runs it in a thread, returning the result.

    Use this for CPU-bound numpy work (rendering, baking) that should not hold up the event loop.

    ??? example
        ```py
        import asyncio
        from uvgan.utils import run_blocking
        from uvgan.render import rasterize

        async def main():
            fragments = await run_blocking(rasterize, mesh, camera, 128)
            print(fragments.coverage.mean())

        asyncio.run(main())
        ```

    :param function: The function to call. Make sure you do not call it, just pass it.
    :param args: The arguments to pass to the function.
    :param kwargs: The keyword arguments to pass to the function.
    :returns: The result of the function.
    """
    if asyncio.iscoroutinefunction(function):
        raise TypeError("Cannot run a coroutine function in a thread.")
    obj = functools.partial(function, *args, **kwargs)
    loop = asyncio.get_running_loop()
    return await loop.run_in_executor(None, obj)


async def gather_blocking(function: Callable[..., T], items: typing.Iterable[Any], **kwargs: Any) -> typing.List[T]:
    """Calls ``function(item, **kwargs)`` for every item in worker threads, returning results in input order.

    :param function: The blocking function to call once per item.
    :param items: The first positional argument for each call.
    :param kwargs: Keyword arguments passed to every call.
    :returns: A list of results, in the same order as ``items``.
    """
    return list(await asyncio.gather(*(run_blocking(function, item, **kwargs) for item in items)))
