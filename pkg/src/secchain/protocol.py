"""Control-plane message vocabulary exchanged between MD, vSwitch and nodes."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any


class MessageKind(str, enum.Enum):
    REQ_QUERY = "ReqQuery"
    RES_QUERY = "ResQuery"
    REQ_REPORT = "ReqReport"
    RES_REPORT = "ResReport"
    REQ_RELEASE = "ReqRelease"
    RES_RELEASE = "ResRelease"
    REQ_HEARTBEAT = "ReqHeartbeat"
    RES_HEARTBEAT = "ResHeartbeat"
    REQ_INFORM = "ReqInform"
    RES_INFORM = "ResInform"
    REQ_REPLACE = "ReqReplace"
    RES_REPLACE = "ResReplace"

    @property
    def is_request(self) -> bool:
        return self.value.startswith("Req")


RESPONSE_FOR = {
    MessageKind.REQ_QUERY: MessageKind.RES_QUERY,
    MessageKind.REQ_REPORT: MessageKind.RES_REPORT,
    MessageKind.REQ_RELEASE: MessageKind.RES_RELEASE,
    MessageKind.REQ_HEARTBEAT: MessageKind.RES_HEARTBEAT,
    MessageKind.REQ_INFORM: MessageKind.RES_INFORM,
    MessageKind.REQ_REPLACE: MessageKind.RES_REPLACE,
}


@dataclass
class Message:
    """One protocol message. ``body`` carries the variant's payload fields,
    e.g. ``ID_Node``/``CPU``/``memory``/``sessions`` for a query response."""

    kind: MessageKind
    sender: str
    receiver: str
    body: dict[str, Any] = field(default_factory=dict)
    sent_ms: int = 0
    msg_id: int = 0
    reply_to: int | None = None

    def reply(self, kind: MessageKind, **body: Any) -> Message:
        return Message(kind, self.receiver, self.sender, body, reply_to=self.msg_id)
