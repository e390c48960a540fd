"""
概念映射翻译

按概念映射表把一个本体下的文档改写成另一个本体下的文档：
结构重命名、取值映射、查表对齐（如机场代码 → 城市名）、上下文注入，
以及单位、货币、日期格式转换。未映射的字段原样透传。

路径写法：点号分隔，段名后缀 `[]` 表示逐个元素展开，例如
`flightOptions[].departure.airport`。
"""
import copy
import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

from src.core.errors import (
    InvalidConceptTable, MalformedDocument, MissingLookupKey, PathConflict,
)
from src.core.model import canonicalize
from src.utils import load_json

logger = logging.getLogger(__name__)

TRANSFORMS = ("copy", "rename", "lookup", "inject", "scale", "currency", "date")
# 不消耗源字段的变换
_NON_CONSUMING = ("copy", "inject")

Step = Tuple[str, bool]
_REMOVE = object()


def parse_path(path: str) -> List[Step]:
    if not isinstance(path, str) or not path:
        raise InvalidConceptTable(f"非法的文档路径: {path!r}")
    steps: List[Step] = []
    for segment in path.split("."):
        is_array = segment.endswith("[]")
        key = segment[:-2] if is_array else segment
        if not key:
            raise InvalidConceptTable(f"非法的文档路径: {path!r}")
        steps.append((key, is_array))
    return steps


def _array_depth(steps: Sequence[Step]) -> int:
    return sum(1 for _, is_array in steps if is_array)


def _value_key(value: Any) -> str:
    return value if isinstance(value, str) else canonicalize(value).decode("utf-8")


@dataclass(frozen=True)
class ConceptEntry:
    target_path: str
    source_path: Optional[str] = None
    transform: str = "rename"
    value_map: Optional[Dict[str, Any]] = None
    passthrough: bool = False
    lookup: Optional[str] = None
    value: Any = None
    factor: Optional[float] = None
    rates: Optional[str] = None
    from_unit: Optional[str] = None
    to_unit: Optional[str] = None
    round_digits: Optional[int] = None

    @classmethod
    def from_doc(cls, doc: Dict[str, Any]) -> "ConceptEntry":
        if not isinstance(doc, dict) or "targetPath" not in doc:
            raise InvalidConceptTable(f"映射条目缺少 targetPath: {doc!r}")
        transform = doc.get("transform", "rename")
        if transform not in TRANSFORMS:
            raise InvalidConceptTable(f"不支持的变换: {transform}", transform=transform)
        if transform != "inject" and "sourcePath" not in doc:
            raise InvalidConceptTable(f"{transform} 条目缺少 sourcePath", targetPath=doc["targetPath"])
        if transform == "inject" and "value" not in doc:
            raise InvalidConceptTable("inject 条目缺少 value", targetPath=doc["targetPath"])
        if transform == "lookup" and "lookup" not in doc:
            raise InvalidConceptTable("lookup 条目缺少字典名", targetPath=doc["targetPath"])
        if transform == "scale" and "factor" not in doc:
            raise InvalidConceptTable("scale 条目缺少 factor", targetPath=doc["targetPath"])
        if transform in ("currency", "date") and ("from" not in doc or "to" not in doc):
            raise InvalidConceptTable(f"{transform} 条目需要 from 和 to", targetPath=doc["targetPath"])
        return cls(
            target_path=doc["targetPath"],
            source_path=doc.get("sourcePath"),
            transform=transform,
            value_map=doc.get("valueMap"),
            passthrough=bool(doc.get("passthrough", False)),
            lookup=doc.get("lookup"),
            value=copy.deepcopy(doc.get("value")),
            factor=doc.get("factor"),
            rates=doc.get("rates", "fx" if transform == "currency" else None),
            from_unit=doc.get("from"),
            to_unit=doc.get("to"),
            round_digits=doc.get("round", 2 if transform == "currency" else None),
        )


@dataclass
class ConceptMapTable:
    """概念映射表：有序条目 + 命名查找字典"""

    entries: List[ConceptEntry] = field(default_factory=list)
    lookups: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    name: str = "anonymous"

    def __post_init__(self):
        targets: Set[str] = set()
        for entry in self.entries:
            if entry.target_path in targets:
                raise InvalidConceptTable(f"多个条目写入同一目标路径: {entry.target_path}",
                                          targetPath=entry.target_path)
            targets.add(entry.target_path)
            target_steps = parse_path(entry.target_path)
            if entry.transform != "inject":
                source_steps = parse_path(entry.source_path)
                if _array_depth(source_steps) != _array_depth(target_steps):
                    raise InvalidConceptTable(
                        f"源路径与目标路径的数组层数不一致: {entry.source_path} → {entry.target_path}")
            needed = entry.lookup if entry.transform == "lookup" else entry.rates if entry.transform == "currency" else None
            if needed is not None and needed not in self.lookups:
                raise InvalidConceptTable(f"引用了不存在的查找字典: {needed}", lookup=needed)

    @classmethod
    def from_doc(cls, doc: Dict[str, Any]) -> "ConceptMapTable":
        if not isinstance(doc, dict):
            raise InvalidConceptTable("概念映射表必须是 JSON 对象")
        entries = [ConceptEntry.from_doc(e) for e in doc.get("entries", [])]
        return cls(entries, dict(doc.get("lookups", {})), str(doc.get("name", "anonymous")))

    @classmethod
    def load(cls, path: str) -> "ConceptMapTable":
        return cls.from_doc(load_json(path))

    def to_doc(self) -> Dict[str, Any]:
        docs = []
        for e in self.entries:
            doc = {"targetPath": e.target_path, "transform": e.transform}
            optional = {
                "sourcePath": e.source_path, "valueMap": e.value_map, "lookup": e.lookup,
                "factor": e.factor, "rates": e.rates, "from": e.from_unit, "to": e.to_unit,
                "round": e.round_digits,
            }
            doc.update({k: v for k, v in optional.items() if v is not None})
            if e.transform == "inject":
                doc["value"] = e.value
            if e.passthrough:
                doc["passthrough"] = True
            docs.append(doc)
        return {"name": self.name, "entries": docs, "lookups": self.lookups}


# ---------------------------------------------------------------------------
# 路径读写
# ---------------------------------------------------------------------------

def _collect(node: Any, steps: Sequence[Step], index: Tuple[int, ...] = ()) -> List[Tuple[Tuple[int, ...], Any]]:
    if not steps:
        return [(index, node)]
    key, is_array = steps[0]
    if not isinstance(node, dict) or key not in node:
        return []
    child = node[key]
    if not is_array:
        return _collect(child, steps[1:], index)
    if not isinstance(child, list):
        return []
    found = []
    for i, element in enumerate(child):
        found.extend(_collect(element, steps[1:], index + (i,)))
    return found


def _delete(node: Any, steps: Sequence[Step], index: Tuple[int, ...], touched: Set[int]) -> None:
    k = 0
    for key, is_array in steps[:-1]:
        if not isinstance(node, dict) or key not in node:
            return
        node = node[key]
        if is_array:
            node = node[index[k]]
            k += 1
    key, is_array = steps[-1]
    # 同一字段可能被多个条目消耗
    if not isinstance(node, dict) or key not in node:
        return
    if is_array:
        node[key][index[k]] = _REMOVE
        touched.add(id(node[key]))
    else:
        del node[key]
        touched.add(id(node))


def _prune(node: Any, touched: Set[int]) -> Any:
    """删除因字段被消耗而变空的容器，原本就为空的容器保留"""
    if isinstance(node, dict):
        kept = {}
        for key, value in node.items():
            value = _prune(value, touched)
            if value is _REMOVE:
                touched.add(id(node))
            else:
                kept[key] = value
        if not kept and id(node) in touched:
            return _REMOVE
        return kept
    if isinstance(node, list):
        items = [_prune(item, touched) for item in node]
        if items and all(item is _REMOVE for item in items):
            return _REMOVE
        return [{} if item is _REMOVE else item for item in items]
    return node


def _write(out: Dict[str, Any], steps: Sequence[Step], index: Tuple[int, ...], value: Any, path: str) -> None:
    node: Any = out
    k = 0
    for n, (key, is_array) in enumerate(steps):
        last = n == len(steps) - 1
        if not isinstance(node, dict):
            raise PathConflict(f"目标路径 {path} 穿过了非对象值", path=path)
        if is_array:
            array = node.setdefault(key, [])
            if not isinstance(array, list):
                raise PathConflict(f"目标路径 {path} 上已有非数组值", path=path)
            i = index[k] if k < len(index) else 0
            k += 1
            while len(array) <= i:
                array.append({})
            if last:
                if array[i] != {} and array[i] != value:
                    raise PathConflict(f"目标路径 {path}[{i}] 已有不同的值", path=path)
                array[i] = value
                return
            node = array[i]
        elif last:
            if key in node and node[key] != value:
                raise PathConflict(f"目标路径 {path} 已有不同的值", path=path)
            node[key] = value
        else:
            node = node.setdefault(key, {})


def _inject(node: Any, steps: Sequence[Step], value: Any, path: str) -> None:
    key, is_array = steps[0]
    rest = steps[1:]
    if not isinstance(node, dict):
        raise PathConflict(f"注入路径 {path} 穿过了非对象值", path=path)
    if is_array:
        array = node.get(key)
        if not isinstance(array, list) or not rest:
            return
        for element in array:
            _inject(element, rest, value, path)
        return
    if not rest:
        if key in node and node[key] != value:
            raise PathConflict(f"注入路径 {path} 已有不同的值", path=path)
        node[key] = copy.deepcopy(value)
        return
    _inject(node.setdefault(key, {}), rest, value, path)


def merge_documents(base: Any, overlay: Any, path: str = "$") -> Any:
    """深度合并，两边同一位置的标量不相等时抛出 PathConflict"""
    if isinstance(base, dict) and isinstance(overlay, dict):
        merged = dict(base)
        for key, value in overlay.items():
            merged[key] = merge_documents(base[key], value, f"{path}.{key}") if key in base else value
        return merged
    if isinstance(base, list) and isinstance(overlay, list):
        size = max(len(base), len(overlay))
        return [
            merge_documents(base[i], overlay[i], f"{path}[{i}]") if i < len(base) and i < len(overlay)
            else (base[i] if i < len(base) else overlay[i])
            for i in range(size)
        ]
    if base == overlay:
        return overlay
    raise PathConflict(f"透传字段与映射结果冲突: {path}", path=path)


# ---------------------------------------------------------------------------
# 取值变换
# ---------------------------------------------------------------------------

def _map_value(mapping: Dict[str, Any], value: Any, passthrough: bool, path: str, dictionary: str) -> Any:
    key = _value_key(value)
    if key in mapping:
        return copy.deepcopy(mapping[key])
    if passthrough:
        return value
    raise MissingLookupKey(f"{path} 的取值 {key!r} 不在 {dictionary} 中", path=path, value=key, lookup=dictionary)


def _as_number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedDocument(f"{path} 需要数值，实际为 {value!r}", path=path)
    return value


def _rounded(value: float, digits: Optional[int]) -> Any:
    return round(value, digits) if digits is not None else value


def apply_transform(entry: ConceptEntry, value: Any, table: ConceptMapTable) -> Any:
    path = entry.source_path or entry.target_path
    if entry.transform == "lookup":
        value = _map_value(table.lookups[entry.lookup], value, entry.passthrough, path, entry.lookup)
    elif entry.transform == "scale":
        value = _rounded(_as_number(value, path) * float(entry.factor), entry.round_digits)
    elif entry.transform == "currency":
        rates = table.lookups[entry.rates]
        for code in (entry.from_unit, entry.to_unit):
            if code not in rates:
                raise MissingLookupKey(f"汇率表 {entry.rates} 中没有 {code}", path=path, value=code, lookup=entry.rates)
        value = _rounded(_as_number(value, path) / float(rates[entry.from_unit]) * float(rates[entry.to_unit]),
                         entry.round_digits)
    elif entry.transform == "date":
        try:
            value = datetime.strptime(value, entry.from_unit).strftime(entry.to_unit)
        except (TypeError, ValueError) as e:
            raise MalformedDocument(f"{path} 的日期 {value!r} 不符合 {entry.from_unit}: {e}", path=path)
    if entry.value_map is not None:
        value = _map_value(entry.value_map, value, entry.passthrough, path, "valueMap")
    return value


def translate(doc: Any, table: ConceptMapTable) -> Any:
    """
    按映射表翻译文档

    参数:
        doc: 源文档
        table: 概念映射表
    返回:
        新文档；输入不被修改，结果只由 (doc, table) 决定
    """
    if not table.entries:
        return copy.deepcopy(doc)
    if not isinstance(doc, dict):
        raise MalformedDocument("只有 JSON 对象可以按映射表翻译")

    remnant = copy.deepcopy(doc)
    mapped: Dict[str, Any] = {}
    consumed: List[Tuple[List[Step], Tuple[int, ...]]] = []

    for entry in table.entries:
        if entry.transform == "inject":
            continue
        source_steps = parse_path(entry.source_path)
        target_steps = parse_path(entry.target_path)
        for index, value in _collect(doc, source_steps):
            _write(mapped, target_steps, index, apply_transform(entry, copy.deepcopy(value), table),
                   entry.target_path)
            if entry.transform not in _NON_CONSUMING:
                consumed.append((source_steps, index))

    touched: Set[int] = set()
    for steps, index in consumed:
        _delete(remnant, steps, index, touched)
    remnant = _prune(remnant, touched)
    if remnant is _REMOVE:
        remnant = {}

    result = merge_documents(remnant, mapped)
    for entry in table.entries:
        if entry.transform == "inject":
            _inject(result, parse_path(entry.target_path), entry.value, entry.target_path)
    logger.debug(f"按映射表 {table.name} 翻译完成，{len(consumed)} 个字段被映射")
    return result
