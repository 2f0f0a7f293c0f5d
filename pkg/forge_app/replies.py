"""
Pull the JSON payload out of a chat reply.

Models wrap their JSON in code fences or prose often enough that a plain
json.loads is useless, so the reply is scanned for the first balanced object.
"""
import json
import re

from .exceptions import ReplyParseError


_TRAILING_COMMA = re.compile(r',(\s*[}\]])')
_BARE_YES_NO = re.compile(r'(:\s*)(yes|no)(\s*[,}])', re.IGNORECASE)


def _balanced_spans(text):
    """Yield (start, end) for every top-level {...} span, string and escape aware"""
    start = text.find('{')
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        end = None
        for index in range(start, len(text)):
            char = text[index]
            if in_string:
                if escaped:
                    escaped = False
                elif char == '\\':
                    escaped = True
                elif char == '"':
                    in_string = False
                continue
            if char == '"':
                in_string = True
            elif char == '{':
                depth += 1
            elif char == '}':
                depth -= 1
                if depth == 0:
                    end = index + 1
                    break
        if end is not None:
            yield start, end
        start = text.find('{', start + 1)


def _decode(candidate):
    try:
        return json.loads(candidate)
    except json.JSONDecodeError:
        pass
    # The judges' own output templates show a trailing comma and an unquoted <yes_no>
    repaired = _TRAILING_COMMA.sub(r'\1', candidate)
    repaired = _BARE_YES_NO.sub(r'\1"\2"\3', repaired)
    return json.loads(repaired)


def extract_json_object(text):
    """
    Return the first JSON object found in a model reply.

    Args:
        text (str): raw reply, possibly fenced or surrounded by prose

    Returns:
        dict: the decoded object

    Raises:
        ReplyParseError: no decodable object in the reply
    """
    if not isinstance(text, str) or not text.strip():
        raise ReplyParseError("Empty reply")

    for start, end in _balanced_spans(text):
        try:
            payload = _decode(text[start:end])
        except json.JSONDecodeError:
            continue
        if isinstance(payload, dict):
            return payload

    raise ReplyParseError(f"No JSON object found in reply: {text[:200]!r}")


def format_errors(errors):
    """Flatten serializer errors into one line for logs and ledger reasons"""
    parts = []
    for field_name, messages in errors.items():
        if isinstance(messages, (list, tuple)):
            messages = '; '.join(str(m) for m in messages)
        parts.append(f"{field_name}: {messages}")
    return ', '.join(parts)
