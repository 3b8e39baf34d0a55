"""Forge event records (JSON lines) -> typed temporal tuples."""

from __future__ import annotations

import datetime as dt
import gzip
import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, NamedTuple, TextIO

from .kg import EntityType

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RawEvent:
    event_type: str
    action: str
    created_at: dt.datetime
    actor: dict = field(default_factory=dict)
    repo: dict = field(default_factory=dict)
    payload: dict = field(default_factory=dict)

    @property
    def day(self) -> dt.date:
        return self.created_at.date()


@dataclass(frozen=True)
class ExtractionRule:
    code: str
    event_types: frozenset[str]
    actions: frozenset[str]  # empty means any action
    head_role: str
    head_type: EntityType
    tail_role: str
    tail_type: EntityType
    label: str = ""
    default: bool = False

    def matches(self, event: RawEvent) -> bool:
        return event.event_type in self.event_types and (not self.actions or event.action in self.actions)


class ExtractedTuple(NamedTuple):
    head: str
    head_type: EntityType
    relation: str
    tail: str
    tail_type: EntityType
    day: int


class RuleTableError(ValueError):
    pass


class RuleTable:
    def __init__(self, rules: Iterable[ExtractionRule]):
        self.rules: list[ExtractionRule] = []
        codes: set[str] = set()
        for rule in rules:
            if rule.code in codes:
                raise RuleTableError(f"duplicate relation code {rule.code!r}")
            _check_code_grammar(rule)
            codes.add(rule.code)
            self.rules.append(rule)
        self._by_event: dict[str, list[ExtractionRule]] = {}
        for rule in self.rules:
            for et in rule.event_types:
                self._by_event.setdefault(et, []).append(rule)

    def __len__(self) -> int:
        return len(self.rules)

    @property
    def codes(self) -> list[str]:
        return [r.code for r in self.rules]

    def default_subset(self) -> RuleTable:
        return RuleTable(r for r in self.rules if r.default)

    def subset(self, codes: Iterable[str]) -> RuleTable:
        wanted = set(codes)
        return RuleTable(r for r in self.rules if r.code in wanted)

    def matching(self, event: RawEvent) -> list[ExtractionRule]:
        if not self.rules:
            raise RuleTableError("rule table is empty")
        return [r for r in self._by_event.get(event.event_type, ()) if r.matches(event)]


def _check_code_grammar(rule: ExtractionRule) -> None:
    parts = rule.code.split("_")
    if len(parts) < 2:
        raise RuleTableError(f"{rule.code}: relation code needs at least two components")
    if parts[0] != rule.head_type.code:
        raise RuleTableError(f"{rule.code}: head component {parts[0]!r} != {rule.head_type.code!r}")
    # a trailing action letter (e.g. the push rule) is tolerated; a trailing type code must agree
    if parts[-1] in {t.code for t in EntityType} and parts[-1] != rule.tail_type.code:
        raise RuleTableError(f"{rule.code}: tail component {parts[-1]!r} != {rule.tail_type.code!r}")


def _split_alias(value: str) -> frozenset[str]:
    if value in ("", "*"):
        return frozenset()
    return frozenset(v.strip() for v in value.split("|"))


def build_rule_table(spec_file: str | Path | None = None) -> RuleTable:
    """Load a rule table from a TSV file; ``None`` loads the shipped 80-rule table."""
    if spec_file is None:
        text = resources.files("rtkge").joinpath("data/rules.tsv").read_text(encoding="utf-8")
    else:
        text = Path(spec_file).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        return RuleTable([])
    header = lines[0].split("\t")
    rules = []
    for ln in lines[1:]:
        row = dict(zip(header, ln.split("\t")))
        try:
            rules.append(ExtractionRule(
                code=row["code"],
                event_types=_split_alias(row["event_type"]),
                actions=_split_alias(row["action"]),
                head_role=row["head_role"],
                head_type=EntityType.parse(row["head_type"]),
                tail_role=row["tail_role"],
                tail_type=EntityType.parse(row["tail_type"]),
                label=row.get("label", ""),
                default=row.get("default", "0").strip() in ("1", "true", "yes"),
            ))
        except KeyError as exc:
            raise RuleTableError(f"rule row missing column {exc}: {ln!r}") from None
        for role in (rules[-1].head_role, rules[-1].tail_role):
            if role not in ROLES:
                raise RuleTableError(f"{rules[-1].code}: unknown role {role!r}")
    return RuleTable(rules)


# -- payload roles -------------------------------------------------------------
# Each role maps an event to zero or more entity labels.

def _user_label(user: Any) -> str | None:
    if not isinstance(user, dict):
        return None
    if user.get("id") is not None:
        return str(user["id"])
    return user.get("login")


def _repo_name(ev: RawEvent) -> str | None:
    return ev.repo.get("name") or ev.payload.get("repository", {}).get("full_name")


def _issue_number(ev: RawEvent) -> int | None:
    return (ev.payload.get("issue") or {}).get("number")


def _pr_number(ev: RawEvent) -> int | None:
    pr = ev.payload.get("pull_request") or {}
    return pr.get("number", ev.payload.get("number"))


def _one(value: str | None) -> list[str]:
    return [value] if value else []


def _role_actor(ev):
    return _one(_user_label(ev.actor) or _user_label(ev.payload.get("sender")))


def _role_repo(ev):
    return _one(_repo_name(ev))


def _role_forkee(ev):
    forkee = ev.payload.get("forkee") or {}
    return _one(forkee.get("full_name"))


def _role_issue(ev):
    n = _issue_number(ev)
    return [f"{_repo_name(ev)}#{n}"] if n is not None else []


def _role_pull_request(ev):
    n = _pr_number(ev)
    return [f"{_repo_name(ev)}!{n}"] if n is not None else []


def _comment_id(ev):
    return (ev.payload.get("comment") or {}).get("id")


def _role_issue_comment(ev):
    cid, n = _comment_id(ev), _issue_number(ev)
    return [f"{_repo_name(ev)}#{n}:ic{cid}"] if cid is not None and n is not None else []


def _role_review_comment(ev):
    cid, n = _comment_id(ev), _pr_number(ev)
    return [f"{_repo_name(ev)}!{n}:prc{cid}"] if cid is not None and n is not None else []


def _role_commit_comment(ev):
    cid = _comment_id(ev)
    return [f"{_repo_name(ev)}:cc{cid}"] if cid is not None else []


def _role_review(ev):
    rid, n = (ev.payload.get("review") or {}).get("id"), _pr_number(ev)
    return [f"{_repo_name(ev)}!{n}:prr{rid}"] if rid is not None and n is not None else []


def _users(single: Any, many: Any) -> list[str]:
    if single:
        return _one(_user_label(single))
    out = [_user_label(u) for u in (many or [])]
    return [u for u in dict.fromkeys(out) if u]


def _role_assignee(ev):
    artifact = ev.payload.get("issue") or ev.payload.get("pull_request") or {}
    return _users(ev.payload.get("assignee"), artifact.get("assignees"))


def _role_requested_reviewer(ev):
    pr = ev.payload.get("pull_request") or {}
    return _users(ev.payload.get("requested_reviewer"), pr.get("requested_reviewers"))


def _role_member(ev):
    return _one(_user_label(ev.payload.get("member")))


ROLES: dict[str, Callable[[RawEvent], list[str]]] = {
    "actor": _role_actor,
    "repo": _role_repo,
    "forkee": _role_forkee,
    "issue": _role_issue,
    "pull_request": _role_pull_request,
    "issue_comment": _role_issue_comment,
    "review_comment": _role_review_comment,
    "commit_comment": _role_commit_comment,
    "review": _role_review,
    "assignee": _role_assignee,
    "requested_reviewer": _role_requested_reviewer,
    "member": _role_member,
}


# -- parsing -----------------------------------------------------------------

@dataclass
class ParseReport:
    events: list[RawEvent]
    skipped: int = 0


def _parse_time(value: str) -> dt.datetime:
    ts = dt.datetime.fromisoformat(value.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=dt.timezone.utc)
    return ts.astimezone(dt.timezone.utc)


def parse_record(record: dict) -> RawEvent:
    event_type = record.get("type") or record.get("event_type")
    if not isinstance(event_type, str) or not event_type:
        raise ValueError("event without a type")
    payload = record.get("payload") or {}
    return RawEvent(
        event_type=event_type,
        action=str(payload.get("action") or record.get("action") or ""),
        created_at=_parse_time(record["created_at"]),
        actor=record.get("actor") or {},
        repo=record.get("repo") or {},
        payload=payload,
    )


def parse_events(stream: TextIO | Iterable[str]) -> ParseReport:
    """Parse newline-delimited JSON; malformed lines are skipped and counted."""
    report = ParseReport(events=[])
    for line in stream:
        if not line.strip():
            continue
        try:
            report.events.append(parse_record(json.loads(line)))
        except (ValueError, KeyError, TypeError, AttributeError):
            report.skipped += 1
    if report.skipped:
        log.info("skipped %d malformed event lines", report.skipped)
    return report


def open_events(path: str | Path) -> TextIO:
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8")


def parse_event_file(path: str | Path) -> ParseReport:
    try:
        fh = open_events(path)
    except OSError as exc:
        raise OSError(f"cannot read events from {path}: {exc}") from exc
    with fh:
        return parse_events(fh)


# -- extraction --------------------------------------------------------------

def day_index(day: dt.date, epoch: dt.date) -> int:
    return (day - epoch).days


def extract(event: RawEvent, rules: RuleTable, epoch: dt.date | None = None) -> list[ExtractedTuple]:
    """Apply every matching rule to one event.

    ``epoch`` is day 0; by default the event's own year starts at day 0.
    """
    epoch = epoch or dt.date(event.day.year, 1, 1)
    day = day_index(event.day, epoch)
    out = []
    for rule in rules.matching(event):
        heads = ROLES[rule.head_role](event)
        tails = ROLES[rule.tail_role](event)
        for h in heads:
            for t in tails:
                out.append(ExtractedTuple(h, rule.head_type, rule.code, t, rule.tail_type, day))
    return out


@dataclass
class ExtractionReport:
    tuples: list[ExtractedTuple]
    per_relation: Counter
    unmatched: int
    skipped: int = 0

    def entity_types(self) -> dict[str, EntityType]:
        types: dict[str, EntityType] = {}
        for tup in self.tuples:
            for label, etype in ((tup.head, tup.head_type), (tup.tail, tup.tail_type)):
                prev = types.setdefault(label, etype)
                if prev != etype:
                    raise ValueError(f"label {label!r} typed both {prev.value} and {etype.value}")
        return types


def extract_all(events: Iterable[RawEvent], rules: RuleTable, epoch: dt.date | None = None) -> ExtractionReport:
    events = list(events)
    if epoch is None and events:
        epoch = min(ev.day for ev in events)
    tuples: list[ExtractedTuple] = []
    unmatched = 0
    for ev in events:
        got = extract(ev, rules, epoch)
        if not got:
            unmatched += 1
        tuples.extend(got)
    return ExtractionReport(tuples, Counter(t.relation for t in tuples), unmatched)
