import base64
import hashlib

import pytest
from bs4 import BeautifulSoup
from hypothesis import given
from hypothesis import strategies as st

from conftest import DOT_PNG
from html_bundler import (
    ContentBundle,
    DirectoryResolver,
    MalformedHtml,
    NotAtomic,
    ResourceKind,
    UnresolvedResource,
    Violation,
    encode_data_uri,
    extract_title,
    find_external_refs,
    generate_corpus,
    inline_bundle,
    is_external,
    truncate_utf8,
    validate_atomic,
)

PAGE = """<!DOCTYPE html>
<html>
<head>
<title>Ruta del Bosque</title>
<link rel="stylesheet" href="css/site.css" media="screen">
<script src="js/app.js"></script>
</head>
<body>
<h1>Ruta del Bosque</h1>
<img src="img/dot.png" alt="dot">
<a href="#map">Map</a> <a href="mailto:info@example.org">Mail</a>
</body>
</html>
"""

SITE_CSS = b"body{margin:0;padding:0}h1{color:#2e7d32}"
APP_JS = b"document.title = document.title + ' (offline)';"

RESOLVER = {
    "css/site.css": (SITE_CSS, "text/css"),
    "js/app.js": (APP_JS, "application/javascript"),
    "img/dot.png": (DOT_PNG, "image/png"),
}


def data_uri_payload(uri):
    header, _, payload = uri.partition(",")
    assert header.endswith(";base64")
    return base64.b64decode(payload, validate=True)


def test_encode_data_uri_examples():
    assert encode_data_uri(b"", "image/png") == "data:image/png;base64,"
    assert encode_data_uri(b"Man", "text/plain") == "data:text/plain;base64,TWFu"
    payload = encode_data_uri(b"abc", "text/plain").split(",", 1)[1]
    assert len(payload) == 4 and "=" not in payload


def test_encode_data_uri_rejects_empty_mime():
    with pytest.raises(ValueError):
        encode_data_uri(b"x", "")


@given(st.binary(max_size=2048))
def test_data_uri_payload_round_trips(data):
    uri = encode_data_uri(data, "application/octet-stream")
    assert data_uri_payload(uri) == data
    assert len(uri.split(",", 1)[1]) == -(-len(data) // 3) * 4


@pytest.mark.parametrize("url, external", [
    ("css/site.css", True),
    ("https://example.com/a.js", True),
    ("//cdn.example.com/a.js", True),
    ("#top", False),
    ("data:image/png;base64,AAAA", False),
    ("mailto:someone@example.org", False),
    ("", False),
])
def test_is_external(url, external):
    assert is_external(url) is external


def test_truncate_utf8_keeps_whole_characters():
    assert truncate_utf8("Café", 4) == "Caf"
    assert truncate_utf8("Café", 5) == "Café"
    assert truncate_utf8("é" * 20, 26) == "é" * 13


def test_content_bundle_from_html():
    bundle = ContentBundle.from_html(PAGE)
    assert bundle.size_bytes == len(PAGE.encode("utf-8"))
    assert bundle.content_hash == hashlib.sha256(PAGE.encode("utf-8")).digest()
    assert bundle.title == "Ruta del Bosque"


def test_title_is_truncated_to_advertisement_size():
    html = "<html><head><title>" + "Sendero " * 10 + "</title></head></html>"
    bundle = ContentBundle.from_html(html)
    assert len(bundle.title.encode("utf-8")) <= 26
    assert ContentBundle.from_html(html, title="Trail").title == "Trail"


def test_extract_title_missing():
    assert extract_title("<html><body>no title</body></html>") == ""


def test_find_external_refs():
    refs = find_external_refs(PAGE)
    assert [(r.kind, r.url) for r in refs] == [
        (ResourceKind.STYLESHEET, "css/site.css"),
        (ResourceKind.SCRIPT, "js/app.js"),
        (ResourceKind.IMAGE, "img/dot.png"),
    ]


def test_inline_bundle_moves_resources_into_head():
    bundle = inline_bundle(PAGE, RESOLVER)
    soup = BeautifulSoup(bundle.html, "html.parser")

    styles = soup.head.find_all("style")
    assert len(styles) == 1
    assert styles[0].string == SITE_CSS.decode()
    assert styles[0]["media"] == "screen"
    assert soup.head.find("script").string == APP_JS.decode()
    assert soup.find("link", rel="stylesheet") is None

    img = soup.find("img")
    assert img["src"] == "data:image/png;base64," + base64.b64encode(DOT_PNG).decode()
    assert validate_atomic(bundle) == []
    assert bundle.title == "Ruta del Bosque"


def test_hundred_byte_stylesheet_becomes_one_style_element():
    css = (b"p{margin:0}" * 10)[:100]
    html = '<html><head><title>T</title><link rel="stylesheet" href="a.css"></head><body></body></html>'
    bundle = inline_bundle(html, {"a.css": (css, "text/css")})
    styles = BeautifulSoup(bundle.html, "html.parser").head.find_all("style")
    assert len(styles) == 1
    assert styles[0].string == css.decode()


def test_inline_bundle_without_references_is_identity():
    html = "<html><head><title>x</title><style>p{}</style></head><body><p>hi</p></body></html>"
    assert inline_bundle(html, {}).html == html


def test_inline_bundle_is_idempotent():
    once = inline_bundle(PAGE, RESOLVER)
    twice = inline_bundle(once.html, {})
    assert twice.html == once.html
    assert twice.content_hash == once.content_hash


def test_inline_bundle_synthesizes_head():
    html = '<html><body><link rel="stylesheet" href="css/site.css"><p>x</p></body></html>'
    bundle = inline_bundle(html, RESOLVER)
    soup = BeautifulSoup(bundle.html, "html.parser")
    assert soup.head is not None
    assert soup.head.find("style").string == SITE_CSS.decode()


def test_inline_bundle_inlines_icons():
    html = '<html><head><link rel="icon" href="img/dot.png"></head><body></body></html>'
    bundle = inline_bundle(html, RESOLVER)
    link = BeautifulSoup(bundle.html, "html.parser").find("link")
    assert data_uri_payload(link["href"]) == DOT_PNG


def test_unresolved_resource():
    with pytest.raises(UnresolvedResource) as excinfo:
        inline_bundle(PAGE, {})
    assert excinfo.value.url == "css/site.css"
    assert isinstance(excinfo.value, KeyError)


def test_css_urls_that_are_not_rewritten_are_reported():
    html = "<html><head><style>body{background:url(http://x/y.png)}</style></head></html>"
    with pytest.raises(NotAtomic) as excinfo:
        inline_bundle(html, {})
    assert excinfo.value.violations == [Violation("style", "http://x/y.png")]


def test_validate_atomic_examples():
    assert validate_atomic('<img src="http://x/y.png">') == [Violation("img", "http://x/y.png")]
    inline_only = (
        "<html><head><style>p{color:red}</style><script>var a = 1;</script></head>"
        '<body><img src="data:image/png;base64,AAAA"><a href="#top">top</a></body></html>'
    )
    assert validate_atomic(inline_only) == []


def test_hyperlinks_are_not_violations():
    html = ('<html><head><link rel="canonical" href="https://www.tenerife.es/trail">'
            '<link rel="alternate" hreflang="es" href="https://www.tenerife.es/es/trail"></head>'
            '<body><a href="https://www.tenerife.es/">Tenerife</a> <a href="page2.html">Next</a>'
            '<map name="m"><area href="https://example.org/peak" alt="peak"></map></body></html>')
    assert validate_atomic(html) == []

    fetched = ('<link rel="preload" href="x.js" as="script">'
               '<link rel="manifest" href="app.webmanifest">')
    assert validate_atomic(fetched) == [
        Violation("link", "x.js"),
        Violation("link", "app.webmanifest"),
    ]


def test_inline_bundle_keeps_outbound_links():
    html = ('<html><head><title>Mirador</title></head><body>'
            '<img src="img/dot.png"><a href="https://www.tenerife.es/">more</a></body></html>')
    bundle = inline_bundle(html, RESOLVER)
    soup = BeautifulSoup(bundle.html, "html.parser")
    assert soup.find("a")["href"] == "https://www.tenerife.es/"
    assert data_uri_payload(soup.find("img")["src"]) == DOT_PNG
    assert validate_atomic(bundle) == []


@pytest.mark.parametrize("link, kind, url, mime, source", [
    ('<script src="w.js"></script>', "script", "w.js", "application/javascript",
     b'document.write("</script><b>x</b>");'),
    ('<link rel="stylesheet" href="w.css">', "style", "w.css", "text/css",
     b'p::after{content:"</STYLE><b>x</b>"}'),
])
def test_inlined_text_cannot_close_its_element(link, kind, url, mime, source):
    html = f"<html><head><title>T</title>{link}</head><body><p>end</p></body></html>"
    bundle = inline_bundle(html, {url: (source, mime)})

    soup = BeautifulSoup(bundle.html, "html.parser")
    elements = soup.find_all(kind)
    assert len(elements) == 1
    assert "<\\/" in elements[0].string
    assert soup.find("b") is None
    assert soup.find("p").string == "end"


def test_validate_atomic_checks_srcset_and_style_attributes():
    html = ('<img srcset="small.png 1x, big.png 2x">'
            '<div style="background: url(\'tile.png\')"></div>')
    assert validate_atomic(html) == [
        Violation("img", "small.png"),
        Violation("img", "big.png"),
        Violation("div", "tile.png"),
    ]


def test_malformed_html():
    with pytest.raises(MalformedHtml):
        inline_bundle(b"\xff\xfe<html>", {})


def atomicity_document(index):
    """Page `index` of a corpus with a varying mix of external CSS, JS and images"""
    resolver, head, body = {}, [], []
    for n in range(index % 3 + 1):
        url = f"style{n}.css"
        resolver[url] = (f".c{index}-{n}{{margin:{n}px}}".encode(), "text/css")
        head.append(f'<link rel="stylesheet" href="{url}">')
    for n in range(index % 2 + 1):
        url = f"js/lib{n}.js"
        resolver[url] = (f"var v{n} = {index};".encode(), "application/javascript")
        body.append(f'<script src="{url}"></script>')
    for n in range(index % 4):
        url = f"img/p{n}.png"
        resolver[url] = (DOT_PNG + bytes([index, n]), "image/png")
        body.append(f'<img src="{url}">')
    html = (f"<!DOCTYPE html><html><head><title>Poi {index}</title>{''.join(head)}</head>"
            f"<body><p>Point {index}</p>{''.join(body)}</body></html>")
    return html, resolver


@pytest.mark.parametrize("index", range(20))
def test_atomicity_suite(index):
    html, resolver = atomicity_document(index)
    bundle = inline_bundle(html, resolver)

    assert validate_atomic(bundle) == []
    assert inline_bundle(bundle.html, {}).html == bundle.html

    images = [data for url, (data, _) in resolver.items() if url.endswith(".png")]
    soup = BeautifulSoup(bundle.html, "html.parser")
    assert [data_uri_payload(img["src"]) for img in soup.find_all("img")] == images
    assert bundle.size_bytes >= sum(len(data) * 4 / 3 for data in images)


def test_directory_resolver(tmp_path):
    (tmp_path / "css").mkdir()
    (tmp_path / "css" / "site.css").write_bytes(SITE_CSS)
    (tmp_path / "secret.txt").write_text("nope")
    site = tmp_path / "site"
    site.mkdir()
    (site / "dot.png").write_bytes(DOT_PNG)

    resolver = DirectoryResolver(tmp_path)
    assert resolver["css/site.css"] == (SITE_CSS, "text/css")
    assert DirectoryResolver(site)["dot.png"] == (DOT_PNG, "image/png")

    for missing in ["css/missing.css", "../secret.txt", "https://example.com/a.css"]:
        with pytest.raises(KeyError):
            DirectoryResolver(site)[missing]


class FakeResponse:
    def __init__(self, content, content_type):
        self.content = content
        self.headers = {"Content-Type": content_type}

    def raise_for_status(self):
        pass


class FakeSession:
    def __init__(self):
        self.requested = []

    def get(self, url, timeout=None):
        self.requested.append(url)
        return FakeResponse(DOT_PNG, "image/png; charset=binary")


def test_directory_resolver_fetches_remote_when_allowed(tmp_path):
    session = FakeSession()
    resolver = DirectoryResolver(tmp_path, fetch_remote=True, session=session)
    assert resolver["https://cdn.example.com/dot.png"] == (DOT_PNG, "image/png")
    assert session.requested == ["https://cdn.example.com/dot.png"]


def test_directory_resolver_treats_protocol_relative_urls_as_remote(tmp_path):
    (tmp_path / "app.js").write_bytes(APP_JS)
    (tmp_path / "cdn.example.com").mkdir()
    (tmp_path / "cdn.example.com" / "app.js").write_bytes(APP_JS)

    with pytest.raises(KeyError):
        DirectoryResolver(tmp_path)["//cdn.example.com/app.js"]
    assert DirectoryResolver(tmp_path)["app.js"][0] == APP_JS

    session = FakeSession()
    resolver = DirectoryResolver(tmp_path, fetch_remote=True, session=session)
    assert resolver["//cdn.example.com/dot.png"] == (DOT_PNG, "image/png")
    assert session.requested == ["https://cdn.example.com/dot.png"]


def test_generate_corpus_sizes():
    sizes = [10, 20, 40, 100, 200]
    bundles = generate_corpus(sizes)
    assert len(bundles) == 5
    for size_kb, bundle in zip(sizes, bundles):
        assert abs(bundle.size_bytes - size_kb * 1024) <= size_kb * 1024 * 0.01
        assert validate_atomic(bundle) == []
        assert bundle.title == f"Trail POI {size_kb} kb"


def test_generate_corpus_is_deterministic():
    [a], [b] = generate_corpus([10]), generate_corpus([10])
    assert a.content_hash == b.content_hash
    assert 10138 <= a.size_bytes <= 10342
    assert generate_corpus([10], seed=1)[0].content_hash != a.content_hash


def test_generate_corpus_edges():
    assert generate_corpus([]) == []
    with pytest.raises(ValueError):
        generate_corpus([0])
