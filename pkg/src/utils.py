import os
import json
import logging
import threading
from datetime import datetime
from typing import Any, Dict, List, Optional


def setup_logging(log_dir='logs', log_level=logging.INFO):
    """
    配置日志

    Args:
        log_dir: 日志目录
        log_level: 日志级别
    """
    # 确保日志目录存在
    os.makedirs(log_dir, exist_ok=True)

    # 创建日志文件名，包含时间戳
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    log_file = os.path.join(log_dir, f"modx_{timestamp}.log")

    # 配置日志
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file, encoding='utf-8'),
            logging.StreamHandler()
        ]
    )
    logging.getLogger().setLevel(log_level)

    return logging.getLogger()


def convert_numpy_types(obj):
    """将 NumPy 标量和数组转换为 Python 标准类型"""
    if hasattr(obj, 'tolist'):  # NumPy 数组
        return obj.tolist()
    if hasattr(obj, 'item'):  # NumPy 标量
        return obj.item()
    if isinstance(obj, dict):
        return {k: convert_numpy_types(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [convert_numpy_types(i) for i in obj]
    return obj


def load_json(path: str) -> Any:
    """读取 JSON 文件"""
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def dump_json(doc: Any, indent: int = 2) -> str:
    """稳定排序的 JSON 文本，用于报告和 CLI 输出"""
    return json.dumps(convert_numpy_types(doc), indent=indent, sort_keys=True, ensure_ascii=False)


def save_json(path: str, doc: Any, indent: int = 2) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(dump_json(doc, indent=indent))
        f.write("\n")


class EventLog:
    """
    JSON-lines 事件日志

    每次状态迁移记录一行 JSON。给出 path 时同时追加写入文件，
    否则只保存在内存中供报告汇总。
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._events: List[Dict[str, Any]] = []
        self._lock = threading.Lock()
        if path:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)

    def emit(self, event: str, **fields) -> Dict[str, Any]:
        record = {"event": event, **convert_numpy_types(fields)}
        with self._lock:
            record["seq"] = len(self._events)
            self._events.append(record)
            if self.path:
                with open(self.path, mode='a', encoding='utf-8') as file:
                    file.write(json.dumps(record, sort_keys=True, ensure_ascii=False))
                    file.write("\n")
        return record

    def events(self, event: Optional[str] = None) -> List[Dict[str, Any]]:
        with self._lock:
            if event is None:
                return list(self._events)
            return [e for e in self._events if e["event"] == event]

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)
