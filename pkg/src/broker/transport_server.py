"""
总线的网络传输

- GET  /stream?agent=...   WebSocket 长连接，双向传输 JSON 帧
- POST /publish            发布信封
- POST /subscribe          订阅主题模式
- POST /unsubscribe        取消订阅
- GET  /poll?agent=&cursor= 轮询回退
- POST /ack                确认游标
- POST /register           登记远程智能体公钥
"""
import asyncio
import logging
from typing import Any, Dict, Optional

import aiohttp
from aiohttp import web

from src.broker.umb_broker import UMBBroker
from src.core.errors import (
    InvalidSignature, MalformedDocument, ModxError, NoSubscriber,
    UnknownAgent, UnknownSender, UnknownSubscription,
)
from src.core.model import MessageEnvelope, b64url_decode, canonicalize, parse_doc

logger = logging.getLogger(__name__)

_NOT_FOUND = (UnknownAgent, UnknownSender, UnknownSubscription, NoSubscriber)


def status_for(error: ModxError) -> int:
    if isinstance(error, InvalidSignature):
        return 401
    if isinstance(error, _NOT_FOUND):
        return 404
    return 400


def json_response(doc: Any, status: int = 200) -> web.Response:
    return web.Response(body=canonicalize(doc), status=status, content_type="application/json")


def frame(op: str, **fields) -> str:
    return canonicalize({"op": op, **fields}).decode("utf-8")


class TransportServer:
    """把 UMBBroker 暴露为 WebSocket 流和 HTTP 回退端点"""

    def __init__(self, broker: UMBBroker):
        self.broker = broker

    def create_app(self) -> web.Application:
        app = web.Application()
        app.router.add_get("/stream", self.handle_stream)
        app.router.add_post("/publish", self.handle_publish)
        app.router.add_post("/subscribe", self.handle_subscribe)
        app.router.add_post("/unsubscribe", self.handle_unsubscribe)
        app.router.add_get("/poll", self.handle_poll)
        app.router.add_post("/ack", self.handle_ack)
        app.router.add_post("/register", self.handle_register)
        return app

    # ---- HTTP 回退 ----
    async def _body(self, request: web.Request) -> Any:
        return parse_doc(await request.read())

    async def _guarded(self, handler, request: web.Request) -> web.Response:
        try:
            return json_response(await handler(request))
        except ModxError as e:
            logger.warning(f"{request.method} {request.path} 失败: {e}")
            return json_response(e.to_doc(), status=status_for(e))

    async def handle_publish(self, request: web.Request) -> web.Response:
        async def publish(req):
            env = MessageEnvelope.from_doc(await self._body(req))
            return {"receipts": [r.to_doc() for r in self.broker.publish(env)]}
        return await self._guarded(publish, request)

    async def handle_subscribe(self, request: web.Request) -> web.Response:
        async def subscribe(req):
            body = await self._body(req)
            if not isinstance(body, dict) or "subscriber" not in body or "pattern" not in body:
                raise MalformedDocument("订阅请求需要 subscriber 和 pattern")
            return self.broker.subscribe(body["subscriber"], body["pattern"]).to_doc()
        return await self._guarded(subscribe, request)

    async def handle_unsubscribe(self, request: web.Request) -> web.Response:
        async def unsubscribe(req):
            body = await self._body(req)
            if not isinstance(body, dict) or "subscriptionId" not in body:
                raise MalformedDocument("取消订阅需要 subscriptionId")
            return self.broker.unsubscribe(body["subscriptionId"]).to_doc()
        return await self._guarded(unsubscribe, request)

    async def handle_poll(self, request: web.Request) -> web.Response:
        async def poll(req):
            agent = req.query.get("agent", "")
            try:
                cursor = int(req.query.get("cursor", "0"))
            except ValueError:
                raise MalformedDocument(f"游标必须是整数: {req.query.get('cursor')}")
            result = self.broker.fallback_poll(agent, cursor)
            return {"envelopes": [e.to_doc() for e in result.envelopes], "cursor": result.cursor}
        return await self._guarded(poll, request)

    async def handle_ack(self, request: web.Request) -> web.Response:
        async def ack(req):
            body = await self._body(req)
            if not isinstance(body, dict) or not isinstance(body.get("cursor"), int):
                raise MalformedDocument("确认需要 agent 和整数 cursor")
            return {"released": self.broker.acknowledge(body.get("agent", ""), body["cursor"])}
        return await self._guarded(ack, request)

    async def handle_register(self, request: web.Request) -> web.Response:
        async def register(req):
            body = await self._body(req)
            try:
                identity = self.broker.trust.register_external(
                    body["agentId"], b64url_decode(body["publicKey"]), b64url_decode(body["keyProof"]))
            except (KeyError, TypeError, ValueError) as e:
                raise MalformedDocument(f"登记请求格式错误: {e}")
            return identity.to_doc()
        return await self._guarded(register, request)

    # ---- WebSocket 流 ----
    async def handle_stream(self, request: web.Request) -> web.WebSocketResponse:
        agent_id = request.query.get("agent", "")
        ws = web.WebSocketResponse()
        await ws.prepare(request)

        loop = asyncio.get_running_loop()
        outbox: asyncio.Queue = asyncio.Queue()

        def sink(env: MessageEnvelope) -> None:
            loop.call_soon_threadsafe(outbox.put_nowait, frame("deliver", envelope=env.to_doc()))

        writer = asyncio.create_task(self._write_frames(ws, outbox))
        try:
            self.broker.connect(agent_id, sink)
        except ModxError as e:
            await outbox.put(frame("error", error=e.to_doc()))
            await outbox.put(None)
            await writer
            await ws.close()
            return ws

        try:
            async for msg in ws:
                if msg.type == aiohttp.WSMsgType.TEXT:
                    await outbox.put(self._handle_frame(agent_id, msg.data))
                elif msg.type == aiohttp.WSMsgType.ERROR:
                    logger.error(f"{agent_id} 的 WebSocket 出错: {ws.exception()}")
                    break
        finally:
            self.broker.disconnect(agent_id)
            await outbox.put(None)
            await writer
        return ws

    async def _write_frames(self, ws: web.WebSocketResponse, outbox: asyncio.Queue) -> None:
        while True:
            text = await outbox.get()
            if text is None or ws.closed:
                return
            await ws.send_str(text)

    def _handle_frame(self, agent_id: str, data: str) -> str:
        try:
            doc = parse_doc(data)
            if not isinstance(doc, dict):
                raise MalformedDocument("帧必须是 JSON 对象")
            op = doc.get("op")
            if op == "subscribe":
                return frame("subscribed", subscription=self.broker.subscribe(agent_id, doc["pattern"]).to_doc())
            if op == "unsubscribe":
                self.broker.unsubscribe(doc["subscriptionId"])
                return frame("unsubscribed", subscriptionId=doc["subscriptionId"])
            if op == "publish":
                receipts = self.broker.publish(MessageEnvelope.from_doc(doc["envelope"]))
                return frame("published", receipts=[r.to_doc() for r in receipts])
            if op == "ack":
                return frame("acked", released=self.broker.acknowledge(agent_id, int(doc["cursor"])))
            raise MalformedDocument(f"未知的帧类型: {op!r}")
        except ModxError as e:
            return frame("error", error=e.to_doc())
        except (KeyError, TypeError, ValueError) as e:
            return frame("error", error=MalformedDocument(f"帧字段缺失或非法: {e}").to_doc())


class StreamClient:
    """远程智能体一侧的 WebSocket 客户端"""

    def __init__(self, base_url: str, agent_id: str, session: Optional[aiohttp.ClientSession] = None):
        self.base_url = base_url.rstrip("/")
        self.agent_id = agent_id
        self._session = session
        self._owns_session = session is None
        self.websocket = None

    async def __aenter__(self) -> "StreamClient":
        if self._session is None:
            self._session = aiohttp.ClientSession()
        self.websocket = await self._session.ws_connect(f"{self.base_url}/stream?agent={self.agent_id}")
        logger.info(f"{self.agent_id} 已连接到 {self.base_url}")
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        if self.websocket is not None:
            await self.websocket.close()
        if self._owns_session and self._session is not None:
            await self._session.close()

    async def send(self, op: str, **fields) -> None:
        await self.websocket.send_str(frame(op, **fields))

    async def receive(self, timeout: float = 5.0) -> Dict[str, Any]:
        msg = await self.websocket.receive(timeout=timeout)
        if msg.type != aiohttp.WSMsgType.TEXT:
            raise ConnectionError(f"流已关闭: {msg.type}")
        return parse_doc(msg.data)


def run_server(broker: UMBBroker, host: Optional[str] = None, port: Optional[int] = None) -> None:
    host = host or broker.config.bind_host
    port = port or broker.config.bind_port
    logger.info(f"UMB 服务监听 {host}:{port}")
    web.run_app(TransportServer(broker).create_app(), host=host, port=port)
