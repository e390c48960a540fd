#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Mod-X 命令行入口

子命令:
    config init      生成默认配置文件
    broker serve     启动消息总线的 WebSocket/HTTP 服务
    agent register   生成身份并登记 AIDL 能力声明
    discover         按能力需求查询排名
    run              回放场景并输出报告
    ledger verify    校验账本文件并输出锚点
    translate        按概念映射表翻译文档
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from src.config_system import ModxConfig, ServiceFactory
from src.core.errors import ModxError
from src.utils import dump_json, load_json, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """解析命令行参数"""
    parser = argparse.ArgumentParser(description='Mod-X 多智能体互操作命令行工具')

    # 通用选项
    common_group = parser.add_argument_group('通用选项')
    common_group.add_argument('--config', type=str, default='config/modx_config.json',
                              help='运行参数配置文件路径(JSON格式)')
    common_group.add_argument('--json', action='store_true',
                              help='在标准输出上打印机器可读的 JSON')
    common_group.add_argument('--verbose', action='store_true',
                              help='输出调试日志')
    common_group.add_argument('--log-dir', type=str, default='logs',
                              help='日志目录')

    subparsers = parser.add_subparsers(dest='command', metavar='<command>')
    subparsers.required = True

    # config
    config_parser = subparsers.add_parser('config', help='配置文件管理')
    config_sub = config_parser.add_subparsers(dest='config_command', metavar='<action>')
    config_sub.required = True
    init_parser = config_sub.add_parser('init', help='生成默认配置文件')
    init_parser.add_argument('path', nargs='?', default='config/modx_config.json', help='输出路径')

    # broker
    broker_parser = subparsers.add_parser('broker', help='消息总线服务')
    broker_sub = broker_parser.add_subparsers(dest='broker_command', metavar='<action>')
    broker_sub.required = True
    serve_parser = broker_sub.add_parser('serve', help='启动 WebSocket 流与 HTTP 回退端点')
    serve_group = serve_parser.add_argument_group('监听选项')
    serve_group.add_argument('--host', type=str, default=None, help='监听地址，默认取配置中的 bindHost')
    serve_group.add_argument('--port', type=int, default=None, help='监听端口，默认取配置中的 bindPort')

    # agent
    agent_parser = subparsers.add_parser('agent', help='智能体管理')
    agent_sub = agent_parser.add_subparsers(dest='agent_command', metavar='<action>')
    agent_sub.required = True
    register_parser = agent_sub.add_parser('register', help='生成身份并登记 AIDL 声明')
    register_parser.add_argument('aidl', type=str, help='AIDL 声明文件')
    register_parser.add_argument('--seed', type=int, default=None, help='确定性密钥派生种子')
    register_parser.add_argument('--ledger-out', type=str, default=None, help='把账本写入 JSON-lines 文件')

    # discover
    discover_parser = subparsers.add_parser('discover', help='按能力需求查询排名')
    discover_parser.add_argument('need', type=str, help='能力需求文件')
    discover_group = discover_parser.add_argument_group('候选选项')
    discover_group.add_argument('--agents', type=str, nargs='+', default=None,
                                help='AIDL 文件或目录，默认取配置中的 paths.agents')
    discover_group.add_argument('--dimension', type=int, default=None,
                                help='覆盖嵌入维度（直接给出低维嵌入的需求和声明时使用）')
    discover_group.add_argument('--seed', type=int, default=7, help='确定性密钥派生种子')

    # run
    run_parser = subparsers.add_parser('run', help='回放场景')
    run_parser.add_argument('scenario', type=str, help='场景文件')
    run_group = run_parser.add_argument_group('回放选项')
    run_group.add_argument('--seed', type=int, default=7, help='随机种子')
    run_group.add_argument('--variant', type=str, default=None, help='场景变体名')
    run_group.add_argument('--out', type=str, default=None, help='报告输出路径')
    run_group.add_argument('--trace', type=str, default=None, help='JSON-lines 事件追踪输出路径')
    run_group.add_argument('--ledger-out', type=str, default=None, help='账本 JSON-lines 输出路径')

    # ledger
    ledger_parser = subparsers.add_parser('ledger', help='账本工具')
    ledger_sub = ledger_parser.add_subparsers(dest='ledger_command', metavar='<action>')
    ledger_sub.required = True
    verify_parser = ledger_sub.add_parser('verify', help='校验账本文件')
    verify_parser.add_argument('ledger', type=str, help='账本 JSON-lines 文件')

    # translate
    translate_parser = subparsers.add_parser('translate', help='按概念映射表翻译文档')
    translate_parser.add_argument('doc', type=str, help='源文档')
    translate_parser.add_argument('--table', type=str, required=True, help='概念映射表文件')

    return parser.parse_args(argv)


def emit(args: argparse.Namespace, doc: Any, text: Optional[str] = None) -> None:
    """--json 时打印稳定排序的 JSON，否则打印可读文本"""
    if args.json or text is None:
        print(dump_json(doc))
    else:
        print(text)


# ---------------------------------------------------------------------------
# 子命令
# ---------------------------------------------------------------------------

def cmd_config_init(args: argparse.Namespace, config: ModxConfig) -> int:
    ModxConfig().save_config(args.path)
    emit(args, {"path": args.path, "sections": ModxConfig().get_all_sections()},
         f"已生成默认配置文件: {args.path}")
    return EXIT_OK


def cmd_broker_serve(args: argparse.Namespace, config: ModxConfig) -> int:
    from src.broker.transport_server import run_server
    from src.state.context_state import CONTEXT_SERVICE_ID, ContextService, ContextStore

    factory = ServiceFactory(config)
    clock = factory.create_clock('system')
    trust = factory.create_trust(clock)
    broker = factory.create_broker(trust)
    registry = factory.create_registry(trust)
    registry.attach(broker)
    _, context_key = trust.generate_identity(CONTEXT_SERVICE_ID)
    ContextService(ContextStore(clock), context_key).attach(broker)
    run_server(broker, args.host, args.port)
    return EXIT_OK


def aidl_documents(refs: List[str]) -> List[Dict[str, Any]]:
    """
    展开 AIDL 来源

    支持目录（按文件名排序读取其中的 .json）、单个声明、声明数组，
    以及场景智能体文件 {"aidl": {...}, "behavior": {...}}。
    """
    files: List[str] = []
    for ref in refs:
        if os.path.isdir(ref):
            files.extend(os.path.join(ref, name) for name in sorted(os.listdir(ref)) if name.endswith('.json'))
        else:
            files.append(ref)
    documents = []
    for path in files:
        doc = load_json(path)
        for item in doc if isinstance(doc, list) else [doc]:
            documents.append(item["aidl"] if isinstance(item, dict) and "aidl" in item else item)
    return documents


def cmd_agent_register(args: argparse.Namespace, config: ModxConfig) -> int:
    factory = ServiceFactory(config)
    trust = factory.create_trust(factory.create_clock('system'), seed=args.seed)
    registry = factory.create_registry(trust)
    acknowledgements = []
    for aidl in aidl_documents([args.aidl]):
        identity, key = trust.generate_identity(aidl.get("agentId", ""))
        ack = registry.register(aidl, key.sign_doc(aidl))
        acknowledgements.append({"identity": identity.to_doc(), **ack})
        logger.info(f"{identity.agent_id} 登记了 {len(ack['registered'])} 个能力")
    if args.ledger_out:
        trust.save(args.ledger_out)
    lines = [f"{a['agentId']}: " + ", ".join(f"{r['capability']}@{r['version']}" for r in a['registered'])
             for a in acknowledgements]
    emit(args, {"agents": acknowledgements}, "\n".join(lines))
    return EXIT_OK


def cmd_discover(args: argparse.Namespace, config: ModxConfig) -> int:
    from src.discovery.aidl import CapabilityNeed
    from src.discovery.capability_registry import matches_to_listing

    if args.dimension is not None:
        config.update_params({'embedder': {'dimension': args.dimension}})
    factory = ServiceFactory(config)
    trust = factory.create_trust(factory.create_clock('system'), seed=args.seed)
    registry = factory.create_registry(trust)
    for aidl in aidl_documents(args.agents or [config.get_section('paths')['agents']]):
        _, key = trust.generate_identity(aidl.get("agentId", ""))
        registry.register(aidl, key.sign_doc(aidl))
    need = CapabilityNeed.from_doc(load_json(args.need))
    results = registry.discover(need)
    listing = matches_to_listing(results)
    listing["scores"] = [r.to_doc() for r in results]
    lines = [f"{i + 1}. {m['agentId']}/{m['capability']}  confidence={m['confidence']:.4f}"
             for i, m in enumerate(listing["matches"])]
    emit(args, listing, "\n".join(lines) or "没有高于阈值的匹配")
    return EXIT_OK


def cmd_run(args: argparse.Namespace, config: ModxConfig) -> int:
    from src.scenario.harness import ScenarioRunner, ScenarioSpec, report_bytes

    runner = ScenarioRunner(ScenarioSpec.load(args.scenario), args.seed, args.variant, args.trace)
    report = runner.run()
    data = report_bytes(report)
    if args.out:
        directory = os.path.dirname(args.out)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(args.out, 'wb') as f:
            f.write(data)
            f.write(b"\n")
        logger.info(f"报告已保存到: {args.out}")
    if args.ledger_out:
        runner.trust.save(args.ledger_out)

    failed = [a for a in report["assertions"] if not a["passed"]]
    if args.json or not args.out:
        sys.stdout.write(data.decode("utf-8"))
        sys.stdout.write("\n")
    else:
        workflow = report["workflow"]
        print(f"场景 {report['scenario']} (variant={report['variant']}, seed={report['seed']}): "
              f"{workflow['status']}，花费 {workflow['spent']}")
        print(f"断言: {len(report['assertions']) - len(failed)}/{len(report['assertions'])} 通过")
        for assertion in failed:
            print(f"  失败 {assertion['name']}: 期望 {assertion['expected']!r}，实际 {assertion['actual']!r}")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_ledger_verify(args: argparse.Namespace, config: ModxConfig) -> int:
    from src.trust.ledger import load_ledger, verify_ledger_file

    bad_height = verify_ledger_file(args.ledger)
    blocks, _ = load_ledger(args.ledger)
    anchors = [[b.height, b.block_hash] for b in blocks if bad_height is None or b.height < bad_height]
    doc = {"ledger": args.ledger, "intact": bad_height is None, "firstBadHeight": bad_height,
           "anchors": anchors}
    if bad_height is None:
        text = "\n".join([f"账本完好，共 {len(blocks)} 个区块"] + [f"  {h}\t{digest}" for h, digest in anchors])
        emit(args, doc, text)
        return EXIT_OK
    emit(args, doc, f"账本在高度 {bad_height} 处校验失败")
    return EXIT_FAILURE


def cmd_translate(args: argparse.Namespace, config: ModxConfig) -> int:
    from src.translation.translator import ConceptMapTable, translate

    result = translate(load_json(args.doc), ConceptMapTable.load(args.table))
    print(dump_json(result))
    return EXIT_OK


COMMANDS = {
    ('config', 'init'): cmd_config_init,
    ('broker', 'serve'): cmd_broker_serve,
    ('agent', 'register'): cmd_agent_register,
    ('discover', None): cmd_discover,
    ('run', None): cmd_run,
    ('ledger', 'verify'): cmd_ledger_verify,
    ('translate', None): cmd_translate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码"""
    args = parse_args(argv)
    setup_logging(args.log_dir, logging.DEBUG if args.verbose else logging.INFO)

    action = getattr(args, f"{args.command}_command", None)
    handler = COMMANDS[(args.command, action)]
    try:
        config = ModxConfig.load_config(args.config)
        return handler(args, config)
    except ModxError as e:
        logger.error(f"{args.command} 失败: {e}")
        if args.json:
            print(json.dumps(e.to_doc(), sort_keys=True, ensure_ascii=False))
        else:
            print(str(e), file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, ValueError) as e:
        logger.error(f"{args.command} 失败: {e}")
        if args.json:
            print(json.dumps({"error": type(e).__name__, "message": str(e)}, ensure_ascii=False))
        else:
            print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
