"""Name -> callable table for FUNCTION payloads. No code is ever serialized."""

from __future__ import annotations

from collections.abc import Callable
from typing import Any

_REGISTRY: dict[str, Callable[..., Any]] = {}


def register(name: str | None = None):
    """Decorator registering a callable under ``name`` (default: its ``__name__``)."""

    def deco(fn):
        _REGISTRY[name or fn.__name__] = fn
        return fn

    return deco


def register_function(name: str, fn: Callable[..., Any]) -> None:
    _REGISTRY[name] = fn


def lookup(name: str) -> Callable[..., Any]:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise LookupError(f"function {name!r} is not registered") from None


def registered() -> list[str]:
    return sorted(_REGISTRY)


@register("echo")
def _echo(*args, **kwargs):
    if kwargs:
        return [*args, kwargs]
    return args[0] if len(args) == 1 else list(args)


@register("add")
def _add(*xs):
    return sum(xs)


@register("fail")
def _fail(message="requested failure"):
    raise RuntimeError(message)
