import os

from dotenv import load_dotenv

from app.core.exceptions import ConfigError

load_dotenv()


def threads() -> int:
    """PHASEKIT_THREADS caps batch parallelism (default 1)."""
    raw = os.getenv("PHASEKIT_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"PHASEKIT_THREADS must be an integer, got '{raw}'") from None
    if value < 1:
        raise ConfigError("PHASEKIT_THREADS must be >= 1")
    return value


def verbose() -> bool:
    return os.getenv("PHASEKIT_VERBOSE", "1") not in ("0", "false", "False", "")


def status(message: str) -> None:
    """Progress line, silenced by PHASEKIT_VERBOSE=0."""
    if verbose():
        print(message)


_warned = set()


def warn_once(key: str, message: str) -> None:
    if key in _warned:
        return
    _warned.add(key)
    status(f"⚠️ {message}")
