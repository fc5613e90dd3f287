"""Turn commit histories into streams of function-level changes.

Two sources are supported: newline-delimited JSON commit dumps (schema
"cd1") and local git checkouts. Both produce CommitRecord streams from
which FunctionChange records are extracted for Python files.

A function qualifies when more than 80% of its own lines were added or
changed by the commit. "Own" lines exclude the spans of any nested
functions, which are attributed to the innermost enclosing def; the
emitted code text still contains the full (nested) body so each record
stays a self-contained block.
"""

from __future__ import annotations

import ast
import difflib
import hashlib
import io
import json
import subprocess
import textwrap
import tokenize as _tokenize
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional

DUMP_SCHEMA = "cd1"

# Inclusion rule: strictly more than 80% of a function's lines modified.
MODIFIED_FRACTION_THRESHOLD = 0.80


class DumpError(Exception):
    """Fatal dump problem: unreadable file or schema mismatch."""


@dataclass
class FileChange:
    path: str
    is_python: bool
    old_text: Optional[str]
    new_text: Optional[str]
    added_lines: frozenset[int] = frozenset()    # 1-based lines of new_text
    deleted_lines: frozenset[int] = frozenset()  # 1-based lines of old_text

    def __post_init__(self):
        if self.old_text is None and self.new_text is None:
            raise ValueError(f"{self.path}: old_text and new_text both absent")


@dataclass
class CommitRecord:
    commit_id: str
    user_id: str
    project_id: str
    timestamp: datetime
    files: list[FileChange]
    country: Optional[str] = None


@dataclass
class FunctionChange:
    function_id: str
    commit_id: str
    user_id: str
    project_id: str
    timestamp: datetime
    code: str
    modified_fraction: float
    imports_added: frozenset[str]
    is_new_function: bool


@dataclass
class IngestDiagnostics:
    """Skip counters; never fatal."""

    malformed_lines: int = 0
    unparseable_files: int = 0
    unlexable_files: int = 0
    skipped_functions: int = 0
    merge_commits_skipped: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def function_identity(project_id: str, path: str, qualname: str) -> str:
    """Stable function id: hash of (project, module path, qualified name)."""
    key = "\x00".join((project_id, path, qualname))
    return hashlib.sha1(key.encode("utf-8")).hexdigest()


def line_diff(old_text: Optional[str], new_text: Optional[str]) -> tuple[frozenset[int], frozenset[int]]:
    """Added (new-text) and deleted (old-text) 1-based line numbers.

    'replace' opcodes count on both sides, so changed lines appear as added.
    """
    old_lines = old_text.splitlines() if old_text is not None else []
    new_lines = new_text.splitlines() if new_text is not None else []
    if old_text is None:
        return frozenset(range(1, len(new_lines) + 1)), frozenset()
    if new_text is None:
        return frozenset(), frozenset(range(1, len(old_lines) + 1))
    added: set[int] = set()
    deleted: set[int] = set()
    matcher = difflib.SequenceMatcher(a=old_lines, b=new_lines, autojunk=False)
    for tag, i1, i2, j1, j2 in matcher.get_opcodes():
        if tag in ("replace", "insert"):
            added.update(range(j1 + 1, j2 + 1))
        if tag in ("replace", "delete"):
            deleted.update(range(i1 + 1, i2 + 1))
    return frozenset(added), frozenset(deleted)


# ---------------------------------------------------------------------------
# Imports
# ---------------------------------------------------------------------------

def extract_imports(source: str, only_lines: Optional[set[int]] = None,
                    diagnostics: Optional[IngestDiagnostics] = None) -> set[str]:
    """First path segments of import statements; relative imports excluded.

    Needs the text to lex, not to parse. When `only_lines` is given, an
    import statement counts only if its first physical line is in the set.
    Unlexable text yields an empty set and bumps the diagnostics counter.
    """
    names: set[str] = set()
    try:
        tokens = list(_tokenize.generate_tokens(io.StringIO(source).readline))
    except (_tokenize.TokenError, IndentationError, SyntaxError, ValueError):
        if diagnostics is not None:
            diagnostics.unlexable_files += 1
        return set()

    i = 0
    n = len(tokens)
    while i < n:
        tok = tokens[i]
        if tok.type != _tokenize.NAME or tok.string not in ("import", "from"):
            i += 1
            continue
        # Only statement-initial keywords: previous significant token must
        # end a logical line (or be start of file / indent).
        j = i - 1
        while j >= 0 and tokens[j].type in (_tokenize.COMMENT, _tokenize.NL):
            j -= 1
        if j >= 0 and tokens[j].type not in (
            _tokenize.NEWLINE, _tokenize.INDENT, _tokenize.DEDENT, _tokenize.ENCODING,
        ) and tokens[j].exact_type != _tokenize.SEMI:
            i += 1
            continue
        if only_lines is not None and tok.start[0] not in only_lines:
            i += 1
            continue
        if tok.string == "from":
            k = i + 1
            if k < n and tokens[k].exact_type == _tokenize.DOT:
                i = k  # relative import
                continue
            if k < n and tokens[k].type == _tokenize.NAME:
                names.add(tokens[k].string)
            i = k + 1
            continue
        # plain `import a.b as c, d.e`
        k = i + 1
        expect_name = True
        while k < n and tokens[k].type not in (_tokenize.NEWLINE, _tokenize.NL, _tokenize.COMMENT):
            t = tokens[k]
            if expect_name and t.type == _tokenize.NAME:
                names.add(t.string)
                expect_name = False
            elif t.exact_type == _tokenize.COMMA:
                expect_name = True
            elif t.type == _tokenize.NAME and t.string == "as":
                k += 1  # skip alias name
            k += 1
        i = k + 1
    return names


# ---------------------------------------------------------------------------
# Function extraction
# ---------------------------------------------------------------------------

def modified_line_fraction(old_fn_text: Optional[str], new_fn_text: str,
                           changed_new_lines: Iterable[int]) -> float:
    """Share of the new function body's lines that were added or changed.

    `changed_new_lines` holds 1-based line numbers of new_fn_text. A missing
    old text is a creation and scores 1.0.
    """
    n_lines = len(new_fn_text.splitlines())
    if n_lines == 0:
        raise ValueError("empty function body")
    if old_fn_text is None:
        return 1.0
    changed = set(changed_new_lines) & set(range(1, n_lines + 1))
    return len(changed) / n_lines


def _function_nodes(tree: ast.AST):
    """(node, qualname) for every def in the tree, outermost first."""
    out = []

    def walk(node, prefix):
        for child in ast.iter_child_nodes(node):
            if isinstance(child, (ast.FunctionDef, ast.AsyncFunctionDef)):
                qual = f"{prefix}{child.name}"
                out.append((child, qual))
                walk(child, qual + ".")
            elif isinstance(child, ast.ClassDef):
                walk(child, f"{prefix}{child.name}.")
            else:
                walk(child, prefix)

    walk(tree, "")
    return out


def _span(node) -> tuple[int, int]:
    """Inclusive line span of a def, decorators included."""
    start = node.lineno
    for dec in getattr(node, "decorator_list", []):
        start = min(start, dec.lineno)
    return start, node.end_lineno


def extract_function_changes(commit: CommitRecord,
                             diagnostics: Optional[IngestDiagnostics] = None,
                             threshold: float = MODIFIED_FRACTION_THRESHOLD) -> list[FunctionChange]:
    """One FunctionChange per function with modified fraction > threshold.

    Lines inside nested defs are attributed to the innermost def only;
    brand-new functions score 1.0 and are flagged as new.
    """
    diagnostics = diagnostics if diagnostics is not None else IngestDiagnostics()
    out: list[FunctionChange] = []
    for fc in commit.files:
        if not fc.is_python or fc.new_text is None:
            continue
        try:
            tree = ast.parse(fc.new_text)
        except (SyntaxError, ValueError):
            diagnostics.unparseable_files += 1
            continue

        added = set(fc.added_lines)
        if fc.old_text is None:
            added = set(range(1, len(fc.new_text.splitlines()) + 1))

        old_qualnames: set[str] = set()
        old_parsed = fc.old_text is None
        if fc.old_text is not None:
            try:
                old_tree = ast.parse(fc.old_text)
                old_qualnames = {q for _, q in _function_nodes(old_tree)}
                old_parsed = True
            except (SyntaxError, ValueError):
                diagnostics.unparseable_files += 1

        file_imports = extract_imports(fc.new_text, only_lines=added, diagnostics=diagnostics)

        nodes = _function_nodes(tree)
        spans = {id(node): _span(node) for node, _ in nodes}
        new_lines = fc.new_text.splitlines()
        for node, qualname in nodes:
            start, end = spans[id(node)]
            own = set(range(start, end + 1))
            for inner in ast.walk(node):
                if inner is node:
                    continue
                if isinstance(inner, (ast.FunctionDef, ast.AsyncFunctionDef)):
                    s, e = _span(inner)
                    own -= set(range(s, e + 1))
            if not own:
                diagnostics.skipped_functions += 1
                continue
            is_new = fc.old_text is None or (old_parsed and qualname not in old_qualnames)
            if is_new:
                fraction = 1.0
            else:
                fraction = len(own & added) / len(own)
            if fraction <= threshold:
                continue
            code = textwrap.dedent("\n".join(new_lines[start - 1:end]) + "\n")
            out.append(FunctionChange(
                function_id=function_identity(commit.project_id, fc.path, qualname),
                commit_id=commit.commit_id,
                user_id=commit.user_id,
                project_id=commit.project_id,
                timestamp=commit.timestamp,
                code=code,
                modified_fraction=fraction,
                imports_added=frozenset(file_imports),
                is_new_function=is_new,
            ))
    return out


def commit_added_imports(commit: CommitRecord,
                         diagnostics: Optional[IngestDiagnostics] = None) -> set[str]:
    """Union of libraries added by the commit across its Python files."""
    libs: set[str] = set()
    for fc in commit.files:
        if not fc.is_python or fc.new_text is None:
            continue
        added = set(fc.added_lines)
        if fc.old_text is None:
            added = set(range(1, len(fc.new_text.splitlines()) + 1))
        libs |= extract_imports(fc.new_text, only_lines=added, diagnostics=diagnostics)
    return libs


# ---------------------------------------------------------------------------
# Commit dumps (schema cd1)
# ---------------------------------------------------------------------------

def _parse_ts(value: str) -> datetime:
    ts = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def _record_from_json(obj: dict) -> CommitRecord:
    files = []
    for f in obj["files"]:
        old = f.get("old")
        new = f.get("new")
        added, deleted = line_diff(old, new)
        files.append(FileChange(
            path=f["path"],
            is_python=f["path"].endswith(".py"),
            old_text=old,
            new_text=new,
            added_lines=added,
            deleted_lines=deleted,
        ))
    return CommitRecord(
        commit_id=obj["commit_id"],
        user_id=obj["user_id"],
        project_id=obj["project_id"],
        timestamp=_parse_ts(obj["ts"]),
        files=files,
        country=obj.get("country"),
    )


class CommitDumpReader:
    """Iterate CommitRecords from a cd1 dump; malformed lines are counted."""

    def __init__(self, path: str | Path, diagnostics: Optional[IngestDiagnostics] = None):
        self.path = Path(path)
        self.diagnostics = diagnostics if diagnostics is not None else IngestDiagnostics()

    def __iter__(self) -> Iterator[CommitRecord]:
        try:
            fh = open(self.path, "r", encoding="utf-8")
        except OSError as exc:
            raise DumpError(f"cannot read dump {self.path}: {exc}") from exc
        with fh:
            header = fh.readline()
            if not header:
                return  # empty file: empty stream
            try:
                head = json.loads(header)
                found = head.get("schema")
            except json.JSONDecodeError:
                found = None
            if found != DUMP_SCHEMA:
                raise DumpError(f"dump schema mismatch: expected {DUMP_SCHEMA!r}, found {found!r}")
            for line in fh:
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    yield _record_from_json(obj)
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    self.diagnostics.malformed_lines += 1


def load_commit_dump(path: str | Path,
                     diagnostics: Optional[IngestDiagnostics] = None) -> Iterator[CommitRecord]:
    yield from CommitDumpReader(path, diagnostics)


def write_commit_dump(path: str | Path, records: Iterable[CommitRecord]) -> int:
    """Serialize records in the cd1 schema; returns record count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": DUMP_SCHEMA}) + "\n")
        for rec in records:
            obj = {
                "commit_id": rec.commit_id,
                "user_id": rec.user_id,
                "project_id": rec.project_id,
                "ts": rec.timestamp.astimezone(timezone.utc).isoformat(),
                "country": rec.country,
                "files": [
                    {"path": f.path, "old": f.old_text, "new": f.new_text}
                    for f in rec.files
                ],
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# Local git checkouts
# ---------------------------------------------------------------------------

def _git(repo: Path, *args: str) -> str:
    res = subprocess.run(["git", "-C", str(repo), *args],
                         capture_output=True, text=True)
    if res.returncode != 0:
        raise RuntimeError(f"git {' '.join(args)} failed: {res.stderr.strip()}")
    return res.stdout


def _git_blob(repo: Path, rev: str, path: str) -> Optional[str]:
    res = subprocess.run(["git", "-C", str(repo), "show", f"{rev}:{path}"],
                         capture_output=True, text=True)
    return res.stdout if res.returncode == 0 else None


def mine_repository(repo_dir: str | Path,
                    diagnostics: Optional[IngestDiagnostics] = None) -> Iterator[CommitRecord]:
    """CommitRecords from a local checkout, oldest first.

    Merge commits (more than one parent) are skipped; diffs are taken
    against the single parent. user_id is the author email.
    """
    repo = Path(repo_dir)
    diagnostics = diagnostics if diagnostics is not None else IngestDiagnostics()
    log = _git(repo, "log", "--reverse", "--format=%H|%P|%ae|%at")
    for row in log.splitlines():
        sha, parents_s, email, at = row.split("|", 3)
        parents = parents_s.split()
        if len(parents) > 1:
            diagnostics.merge_commits_skipped += 1
            continue
        parent = parents[0] if parents else None
        if parent:
            diff = _git(repo, "diff-tree", "--no-commit-id", "--name-status", "-r", sha)
        else:
            diff = _git(repo, "show", "--name-status", "--format=", sha)
        files = []
        for entry in diff.splitlines():
            if not entry.strip():
                continue
            parts = entry.split("\t")
            status, path = parts[0], parts[-1]
            if not path.endswith(".py"):
                continue
            old = _git_blob(repo, parent, path) if (parent and status[0] != "A") else None
            new = _git_blob(repo, sha, path) if status[0] != "D" else None
            if old is None and new is None:
                continue
            added, deleted = line_diff(old, new)
            files.append(FileChange(path=path, is_python=True, old_text=old,
                                    new_text=new, added_lines=added, deleted_lines=deleted))
        yield CommitRecord(
            commit_id=sha,
            user_id=email,
            project_id=repo.name,
            timestamp=datetime.fromtimestamp(int(at), tz=timezone.utc),
            files=files,
        )


# ---------------------------------------------------------------------------
# NDJSON output for downstream stages
# ---------------------------------------------------------------------------

def function_change_to_json(fn: FunctionChange) -> dict:
    return {
        "function_id": fn.function_id,
        "commit_id": fn.commit_id,
        "user_id": fn.user_id,
        "project_id": fn.project_id,
        "ts": fn.timestamp.astimezone(timezone.utc).isoformat(),
        "code": fn.code,
        "modified_fraction": fn.modified_fraction,
        "imports_added": sorted(fn.imports_added),
        "is_new_function": fn.is_new_function,
    }


def function_change_from_json(obj: dict) -> FunctionChange:
    return FunctionChange(
        function_id=obj["function_id"],
        commit_id=obj["commit_id"],
        user_id=obj["user_id"],
        project_id=obj.get("project_id", ""),
        timestamp=_parse_ts(obj["ts"]),
        code=obj["code"],
        modified_fraction=obj["modified_fraction"],
        imports_added=frozenset(obj.get("imports_added", [])),
        is_new_function=obj["is_new_function"],
    )
