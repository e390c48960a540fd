"""
时钟抽象

SystemClock 使用墙上时间；SimulatedClock 是由驱动方推进的逻辑时间，
场景回放靠它保证超时判定、封块间隔与锚定窗口完全确定。
"""
import threading
from datetime import datetime, timedelta
from typing import Union

import pytz

from src.core.model import parse_instant, utc_instant


class Clock:
    """时钟接口"""

    def now(self) -> datetime:
        raise NotImplementedError

    def wait_budget(self, seconds: float) -> float:
        """route_request 等待响应时真实阻塞的秒数"""
        return seconds


class SystemClock(Clock):

    def now(self) -> datetime:
        return utc_instant(datetime.now(pytz.utc))


class SimulatedClock(Clock):
    """逻辑时钟，只会向前走"""

    def __init__(self, start: Union[datetime, str] = "2025-05-17T09:42:17Z", real_wait: float = 1.0):
        if isinstance(start, str):
            start = parse_instant(start)
        self._now = utc_instant(start)
        self._lock = threading.Lock()
        self.real_wait = real_wait

    def now(self) -> datetime:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> datetime:
        if seconds < 0:
            raise ValueError(f"时钟不能倒退: {seconds}")
        with self._lock:
            self._now = utc_instant(self._now + timedelta(seconds=seconds))
            return self._now

    def advance_to(self, instant: datetime) -> datetime:
        instant = utc_instant(instant)
        with self._lock:
            if instant > self._now:
                self._now = instant
            return self._now

    def wait_budget(self, seconds: float) -> float:
        # 超时由响应时间戳判定；真实等待只覆盖其他线程正在投递的情形
        return min(seconds, self.real_wait)


def elapsed_seconds(start: datetime, end: datetime) -> float:
    return (end - start).total_seconds()
