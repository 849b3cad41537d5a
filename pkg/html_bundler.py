"""
FatBeacon HTML Bundler
======================
Turns an HTML page with external stylesheets, scripts, images and icons into a
single atomic document that a FatBeacon can serve over one connection, and
builds the fixed-size test corpora used by the benchmarks.

Stylesheets and scripts move into the document's <head>; images and icons become
base64 data URIs.
"""

import base64
import hashlib
import logging
import mimetypes
import random
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from urllib.parse import unquote, urlsplit

import requests
from bs4 import BeautifulSoup
from bs4.builder import ParserRejectedMarkup

logger = logging.getLogger(__name__)

# Configuration
MAX_TITLE_BYTES = 26
DEFAULT_CORPUS_SEED = 2018
REMOTE_TIMEOUT_S = 10
NON_NETWORK_PREFIXES = ("#", "data:", "mailto:", "tel:", "javascript:", "about:")
RESOURCE_ATTRIBUTES = ("src", "href", "poster", "data")
ICON_RELS = {"icon", "shortcut", "apple-touch-icon", "mask-icon"}
FETCHING_LINK_RELS = ICON_RELS | {"stylesheet", "preload", "prefetch", "modulepreload", "manifest"}
NAVIGATION_TAGS = {"a", "area", "base"}
CLOSING_TAG_RE = re.compile(r"</(style|script)", re.IGNORECASE)

CSS_URL_RE = re.compile(r"""url\(\s*['"]?([^'")\s]+)['"]?\s*\)""", re.IGNORECASE)
CSS_IMPORT_RE = re.compile(r"""@import\s+['"]([^'"]+)['"]""", re.IGNORECASE)


class BundleError(Exception):
    """Base class for bundling failures"""


class UnresolvedResource(BundleError, KeyError):
    def __init__(self, url):
        super().__init__(url)
        self.url = url

    def __str__(self):
        return f"no resolver entry for {self.url!r}"


class MalformedHtml(BundleError, ValueError):
    pass


class MimeMismatch(BundleError, ValueError):
    pass


class NotAtomic(BundleError, ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        listing = ", ".join(str(v) for v in self.violations)
        super().__init__(f"document still references the network: {listing}")


class ResourceKind(Enum):
    STYLESHEET = "stylesheet"
    SCRIPT = "script"
    IMAGE = "image"


@dataclass(frozen=True)
class ResourceRef:
    kind: ResourceKind
    url: str
    resolved_bytes: bytes = None
    mime: str = ""

    def __post_init__(self):
        if not self.url:
            raise ValueError("resource url must be non-empty")

    @property
    def is_resolved(self):
        return self.resolved_bytes is not None


@dataclass(frozen=True)
class Violation:
    tag: str
    url: str

    def __str__(self):
        return f"<{self.tag}> {self.url}"


@dataclass(frozen=True)
class ContentBundle:
    """A self-contained HTML document plus the metadata a FatBeacon advertises"""

    html: str
    size_bytes: int
    content_hash: bytes
    title: str = ""

    @classmethod
    def from_html(cls, html, title=None):
        if title is None:
            title = extract_title(html)
        data = html.encode("utf-8")
        return cls(
            html=html,
            size_bytes=len(data),
            content_hash=hashlib.sha256(data).digest(),
            title=truncate_utf8(title, MAX_TITLE_BYTES),
        )

    @property
    def payload(self):
        return self.html.encode("utf-8")


def truncate_utf8(text, max_bytes):
    """Cut text to at most max_bytes of UTF-8 without splitting a character"""
    data = text.encode("utf-8")
    if len(data) <= max_bytes:
        return text
    return data[:max_bytes].decode("utf-8", errors="ignore")


def is_external(url):
    candidate = (url or "").strip().lower()
    if not candidate:
        return False
    return not candidate.startswith(NON_NETWORK_PREFIXES)


def encode_data_uri(data, mime):
    if not mime:
        raise ValueError("mime type must be non-empty")
    payload = base64.b64encode(bytes(data)).decode("ascii")
    return f"data:{mime};base64,{payload}"


def _parse(html):
    if isinstance(html, bytes):
        try:
            html = html.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedHtml(f"document is not valid UTF-8: {e}") from e
    if not isinstance(html, str):
        raise MalformedHtml(f"expected HTML text, got {type(html).__name__}")
    try:
        return html, BeautifulSoup(html, "html.parser")
    except (ParserRejectedMarkup, AssertionError) as e:
        raise MalformedHtml(str(e)) from e


def extract_title(html):
    _, soup = _parse(html)
    if soup.title is None or soup.title.string is None:
        return ""
    return soup.title.string.strip()


def _rels(tag):
    rel = tag.get("rel") or []
    if isinstance(rel, str):
        rel = rel.split()
    return {r.lower() for r in rel}


def _refs_in_soup(soup):
    refs = []
    for tag in soup.find_all("link"):
        href = tag.get("href", "")
        if not is_external(href):
            continue
        rels = _rels(tag)
        if "stylesheet" in rels:
            refs.append((tag, ResourceRef(ResourceKind.STYLESHEET, href)))
        elif rels & ICON_RELS:
            refs.append((tag, ResourceRef(ResourceKind.IMAGE, href)))
    for tag in soup.find_all("script"):
        if is_external(tag.get("src", "")):
            refs.append((tag, ResourceRef(ResourceKind.SCRIPT, tag["src"])))
    for tag in soup.find_all("img"):
        if is_external(tag.get("src", "")):
            refs.append((tag, ResourceRef(ResourceKind.IMAGE, tag["src"])))
    return refs


def find_external_refs(html):
    """Inlinable references: stylesheets, external scripts, images and icons"""
    _, soup = _parse(html)
    return [ref for _, ref in _refs_in_soup(soup)]


def _css_urls(css):
    found = CSS_URL_RE.findall(css or "") + CSS_IMPORT_RE.findall(css or "")
    return [u for u in found if is_external(u)]


def _loads_href(tag):
    """False for hyperlinks and for link rels that fetch nothing (canonical, alternate)"""
    if tag.name in NAVIGATION_TAGS:
        return False
    if tag.name == "link":
        return bool(_rels(tag) & FETCHING_LINK_RELS)
    return True


def find_violations(html):
    _, soup = _parse(html)
    violations = []
    for tag in soup.find_all(True):
        for attr in RESOURCE_ATTRIBUTES:
            if attr == "href" and not _loads_href(tag):
                continue
            value = tag.get(attr)
            if isinstance(value, str) and is_external(value):
                violations.append(Violation(tag.name, value))
        srcset = tag.get("srcset")
        if isinstance(srcset, str):
            for candidate in srcset.split(","):
                parts = candidate.split()
                if parts and is_external(parts[0]):
                    violations.append(Violation(tag.name, parts[0]))
        for url in _css_urls(tag.get("style")):
            violations.append(Violation(tag.name, url))
        if tag.name == "style":
            for url in _css_urls(tag.get_text()):
                violations.append(Violation("style", url))
    return violations


def validate_atomic(bundle):
    """Every element still pointing at a fetchable resource; empty means atomic"""
    html = bundle.html if isinstance(bundle, ContentBundle) else bundle
    return find_violations(html)


def _resolve(ref, resolver):
    try:
        data, mime = resolver[ref.url]
    except KeyError:
        raise UnresolvedResource(ref.url) from None
    if ref.kind is ResourceKind.IMAGE and not (mime or "").startswith("image/"):
        guessed = mimetypes.guess_type(urlsplit(ref.url).path)[0] or ""
        if not guessed.startswith("image/"):
            raise MimeMismatch(f"{ref.url} resolved to {mime!r}, expected image/*")
        mime = guessed
    return ResourceRef(ref.kind, ref.url, bytes(data), mime)


def _ensure_head(soup):
    if soup.head is not None:
        return soup.head
    head = soup.new_tag("head")
    if soup.html is not None:
        soup.html.insert(0, head)
    else:
        soup.insert(0, head)
    logger.debug("synthesized missing <head>")
    return head


def inline_bundle(html, resolver):
    """Inline every external stylesheet, script, image and icon of html"""
    html, soup = _parse(html)
    refs = _refs_in_soup(soup)

    if not refs:
        violations = find_violations(html)
        if violations:
            raise NotAtomic(violations)
        return ContentBundle.from_html(html)

    head = _ensure_head(soup)
    for tag, ref in refs:
        resolved = _resolve(ref, resolver)
        if resolved.kind is ResourceKind.IMAGE:
            tag["href" if tag.name == "link" else "src"] = encode_data_uri(
                resolved.resolved_bytes, resolved.mime
            )
            continue

        text = resolved.resolved_bytes.decode("utf-8", errors="replace")
        # a literal </script> or </style> would end the inline element early
        text = CLOSING_TAG_RE.sub(r"<\\/\1", text)
        if resolved.kind is ResourceKind.STYLESHEET:
            inline = soup.new_tag("style")
            if tag.get("media"):
                inline["media"] = tag["media"]
        else:
            inline = soup.new_tag("script")
            if tag.get("type"):
                inline["type"] = tag["type"]
        inline.string = text

        if tag.find_parent("head") is head:
            tag.replace_with(inline)
        else:
            tag.extract()
            head.append(inline)
        logger.debug("inlined %s %s (%d bytes)", resolved.kind.value, ref.url,
                     len(resolved.resolved_bytes))

    output = str(soup)
    violations = find_violations(output)
    if violations:
        raise NotAtomic(violations)
    return ContentBundle.from_html(output)


class DirectoryResolver:
    """Resolves resource URLs against a directory, optionally over HTTP too"""

    def __init__(self, root, fetch_remote=False, session=None):
        self.root = Path(root).resolve()
        self.fetch_remote = fetch_remote
        self.session = session or requests.Session()

    def __getitem__(self, url):
        parts = urlsplit(url)
        if parts.scheme in ("http", "https") or (not parts.scheme and parts.netloc):
            if not self.fetch_remote:
                raise KeyError(url)
            # protocol-relative //host/path
            return self._fetch(url if parts.scheme else f"https:{url}")
        if parts.scheme not in ("", "file"):
            raise KeyError(url)

        path = (self.root / unquote(parts.path).lstrip("/")).resolve()
        if self.root not in path.parents or not path.is_file():
            raise KeyError(url)
        mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
        return path.read_bytes(), mime

    def _fetch(self, url):
        try:
            response = self.session.get(url, timeout=REMOTE_TIMEOUT_S)
            response.raise_for_status()
        except requests.RequestException as e:
            logger.warning("could not fetch %s: %s", url, e)
            raise KeyError(url) from e
        content_type = response.headers.get("Content-Type", "")
        mime = content_type.split(";")[0].strip()
        if not mime:
            mime = mimetypes.guess_type(urlsplit(url).path)[0] or "application/octet-stream"
        return response.content, mime


# Deterministic filler for the benchmark corpus
CORPUS_SENTENCES = [
    "The trail climbs gently through a pine forest before reaching the ridge.",
    "Stay on the marked path and follow the painted stakes at each junction.",
    "Water is available at the spring next to the old shepherd hut.",
    "From the viewpoint the whole valley and the reservoir can be seen.",
    "The section after the bridge is steep and can be slippery after rain.",
    "Mobile coverage is not available for most of the route.",
    "Please carry your litter back to the trail head.",
    "The chapel at the crossroads dates from the sixteenth century.",
    "Birds of prey nest in the cliffs during spring, keep noise low.",
    "The return loop joins the forest track two kilometres further on.",
]

CORPUS_HEAD = (
    "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n"
    "<title>{title}</title>\n"
    "<style>body{{font-family:sans-serif;margin:1em}}h1{{color:#2e7d32}}</style>\n"
    "</head>\n<body>\n<h1>{title}</h1>\n"
)
CORPUS_TAIL = "</body>\n</html>\n"
PAD_OPEN, PAD_CLOSE = "<!-- ", " -->"


def _corpus_document(size_kb, seed):
    target = size_kb * 1024
    rng = random.Random(f"{seed}:{size_kb}")
    title = f"Trail POI {size_kb} kb"

    parts = [CORPUS_HEAD.format(title=title)]
    used = len(parts[0]) + len(CORPUS_TAIL) + len(PAD_OPEN) + len(PAD_CLOSE)
    while True:
        paragraph = "<p>" + " ".join(rng.choice(CORPUS_SENTENCES) for _ in range(4)) + "</p>\n"
        if used + len(paragraph) > target:
            break
        parts.append(paragraph)
        used += len(paragraph)

    padding = max(0, target - used)
    parts.append(PAD_OPEN + "." * padding + PAD_CLOSE)
    parts.append(CORPUS_TAIL)
    return "".join(parts)


def generate_corpus(target_sizes_kb, seed=DEFAULT_CORPUS_SEED):
    """One atomic bundle per requested size, each size_kb * 1024 bytes"""
    bundles = []
    for size_kb in target_sizes_kb:
        if size_kb < 1:
            raise ValueError(f"corpus sizes must be >= 1 kb, got {size_kb}")
        bundles.append(ContentBundle.from_html(_corpus_document(size_kb, seed)))
    return bundles
