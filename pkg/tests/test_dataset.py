import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sitevec.dataset import (
    CLASS_ORDER,
    LabelMapping,
    LabelRecord,
    ProcessedRecord,
    VisualStore,
    class_vector_from_labels,
    duplicate_urls,
    homepage_class_vectors,
    is_homepage,
    load_processed,
    multilabel_share,
    parse_label_records,
    parse_label_records_jsonl,
    read_classes,
    resolve_english_label,
    write_classes,
    write_content,
    write_label_records,
    write_visual_store,
)
from sitevec.errors import DataError, ValidationError

HEADER = "# labels v1\nurl\tuid\tlabel\tlang\n"


def test_parse_single_record():
    recs, skipped = parse_label_records(io.StringIO("https://example.org/\t17\tTop/Arts/Music\ten\n"))
    assert recs == [LabelRecord("https://example.org/", 17, "Top/Arts/Music", "en")]
    assert skipped == 0


def test_parse_empty_stream():
    assert parse_label_records(io.StringIO("")) == ([], 0)


def test_parse_counts_malformed_lines():
    lines = [
        "https://a.org/\t1\tTop/Arts\ten",
        "https://b.org/\t2\tTop/Business\tde",
        "https://c.org/\t3\tTop/Games/Chess\tfr",
        "https://d.org/\t4\tTop/Health\tja",
        "https://e.org/\t5\tTop/News\ten",
        "https://f.org/\tnot-an-int\tTop/Arts\ten",  # bad uid
        "relative/path\t7\tTop/Arts\ten",  # not absolute
    ]
    recs, skipped = parse_label_records(io.StringIO(HEADER + "\n".join(lines) + "\n"))
    assert len(recs) == 5
    assert skipped == 2


def test_duplicate_uid_is_an_error():
    text = HEADER + "https://a.org/\t1\tTop/Arts\ten\nhttps://b.org/\t1\tTop/News\ten\n"
    with pytest.raises(ValidationError, match=r"\[1\]"):
        parse_label_records(io.StringIO(text))


def test_wrong_schema_version():
    with pytest.raises(DataError):
        parse_label_records(io.StringIO("# labels v9\n"))


def test_jsonl_records():
    text = "# labels v1\n" + json.dumps({"url": "https://a.org/", "uid": 3, "label": "Top/Arts", "lang": "en"}) + "\n{bad\n"
    recs, skipped = parse_label_records_jsonl(io.StringIO(text))
    assert recs[0].uid == 3 and skipped == 1


_segment = st.text(alphabet="abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_0123456789", min_size=1, max_size=8)


@given(
    st.lists(
        st.tuples(
            st.from_regex(r"https://[a-z]{1,10}\.(com|org|de)/", fullmatch=True),
            st.lists(_segment, min_size=1, max_size=3),
            st.sampled_from(["en", "de", "fr", "ja"]),
        ),
        max_size=20,
    )
)
def test_serialize_round_trip_is_byte_identical(rows):
    records = [LabelRecord(url, uid, "Top/" + "/".join(segs), lang) for uid, (url, segs, lang) in enumerate(rows)]
    buf = io.StringIO()
    write_label_records(records, buf)
    first = buf.getvalue()
    parsed, skipped = parse_label_records(io.StringIO(first))
    assert skipped == 0 and parsed == records
    again = io.StringIO()
    write_label_records(parsed, again)
    assert again.getvalue() == first


@pytest.mark.parametrize(
    "url, expected",
    [
        ("https://example.com/", True),
        ("https://example.com", True),
        ("https://example.com/about", False),
        ("https://example.com/?q=1", False),
        ("https://example.com/#top", False),
        ("https://example.com/?", False),
    ],
)
def test_is_homepage(url, expected):
    assert is_homepage(url) is expected


def test_is_homepage_rejects_relative():
    with pytest.raises(ValidationError):
        is_homepage("example.com/about")


def test_resolve_english_label():
    mapping = LabelMapping({("fr", "Top/Arts/Musique"): "Top/Arts/Music"})
    assert resolve_english_label("Top/Arts/Musique", "fr", mapping) == "Top/Arts/Music"
    assert resolve_english_label("Top/Arts/Music", "en", mapping) == "Top/Arts/Music"
    assert resolve_english_label("Top/Kunst", "de", mapping) is None


def test_mapping_file_round_trip():
    mapping = LabelMapping({("fr", "Top/Arts/Musique"): "Top/Arts/Music", ("de", "Top/Kunst"): "Top/Arts"})
    buf = io.StringIO()
    mapping.write(buf)
    assert LabelMapping.read(io.StringIO(buf.getvalue())).entries == mapping.entries


def test_class_vector_two_classes():
    v = class_vector_from_labels(["Top/Arts/Music", "Top/Business/Retail"])
    assert [CLASS_ORDER[i] for i in np.flatnonzero(v)] == ["Arts", "Business"]


def test_regional_only_is_absent():
    assert class_vector_from_labels(["Top/Regional/Europe"]) is None


@pytest.mark.parametrize("segment", ["Kids_and_Teens", "Kids and Teens", "KidsAndTeens", "kids-and-teens"])
def test_kids_and_teens_normalization(segment):
    v = class_vector_from_labels([f"Top/{segment}/Games"])
    assert v.sum() == 1 and v[CLASS_ORDER.index("KidsAndTeens")]


@pytest.mark.parametrize("segment, name", [("Art", "Arts"), ("Reference", "References"), ("References", "References")])
def test_alias_table(segment, name):
    assert class_vector_from_labels([f"Top/{segment}"])[CLASS_ORDER.index(name)]


def test_class_vector_needs_second_segment():
    with pytest.raises(ValidationError):
        class_vector_from_labels(["Top"])


_paths = st.lists(st.sampled_from(["Top/Arts/X", "Top/News", "Top/Regional/Asia", "Top/Sports/Golf", "Top/Kids_and_Teens"]), min_size=1)


@given(_paths, st.randoms())
def test_class_vector_order_insensitive_and_idempotent(paths, rnd):
    a = class_vector_from_labels(paths)
    shuffled = list(paths) + list(paths)
    rnd.shuffle(shuffled)
    b = class_vector_from_labels(shuffled)
    assert (a is None and b is None) or np.array_equal(a, b)


def test_multilabel_share():
    vecs = [class_vector_from_labels(p) for p in (["Top/Arts"], ["Top/Arts", "Top/News"], ["Top/Games"], ["Top/Home"])]
    assert multilabel_share(vecs) == 0.25
    assert multilabel_share([]) == 0.0


def test_homepage_pipeline_and_duplicates():
    recs = [
        LabelRecord("https://a.org/", 1, "Top/Arts/Musique", "fr"),
        LabelRecord("https://a.org/", 2, "Top/Regional/Europe", "en"),
        LabelRecord("https://a.org/page", 3, "Top/News", "en"),
        LabelRecord("https://b.org/", 4, "Top/Regional/Asia", "en"),
        LabelRecord("https://c.org/", 5, "Top/Unmapped", "xx"),
    ]
    mapping = LabelMapping({("fr", "Top/Arts/Musique"): "Top/Arts/Music"})
    out = homepage_class_vectors(recs, mapping)
    assert list(out) == ["https://a.org/"]
    assert duplicate_urls(recs) == {"https://a.org/": [1, 2]}


def test_classes_file_round_trip():
    flags = np.zeros((3, 14), bool)
    flags[0, 0] = flags[1, 13] = flags[2, [1, 2]] = True
    buf = io.StringIO()
    write_classes([10, 11, 12], flags, buf, langs=["en", "de", None])
    table = read_classes(io.StringIO(buf.getvalue()))
    assert table.uids.tolist() == [10, 11, 12]
    assert np.array_equal(table.flags, flags)
    assert table.langs == ["en", "de", None]


def test_classes_rejects_bad_flag():
    text = "# classes v1\nuid\t" + "\t".join(CLASS_ORDER) + "\n1\t" + "\t".join(["2"] + ["0"] * 13) + "\n"
    with pytest.raises(DataError):
        read_classes(io.StringIO(text))


def test_processed_record_checks_visual_length():
    with pytest.raises(ValidationError):
        ProcessedRecord(1, "", np.ones(14, bool), visual=np.zeros(10))


def test_visual_store_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    vecs = {7: rng.standard_normal(512).astype(np.float32), 3: rng.standard_normal(512).astype(np.float32)}
    write_visual_store(vecs, tmp_path / "v.bin", tmp_path / "v.idx")
    store = VisualStore(tmp_path / "v.bin", tmp_path / "v.idx")
    assert len(store) == 2
    assert store.get(7).tobytes() == vecs[7].tobytes()
    assert store.get(99) is None


def test_visual_store_truncated(tmp_path):
    write_visual_store({1: np.ones(512), 2: np.ones(512)}, tmp_path / "v.bin", tmp_path / "v.idx")
    data = (tmp_path / "v.bin").read_bytes()
    (tmp_path / "v.bin").write_bytes(data[:-100])
    store = VisualStore(tmp_path / "v.bin", tmp_path / "v.idx")
    assert store.get(1) is not None
    with pytest.raises(DataError, match="uid 2"):
        store.get(2)


def test_load_processed_joins_on_uid(tmp_path):
    content = io.StringIO()
    write_content([(1, "<p>a</p>"), (2, "<p>b</p>"), (3, "<p>c</p>")], content)
    flags = np.zeros((2, 14), bool)
    flags[:, 0] = True
    classes = io.StringIO()
    write_classes([1, 3], flags, classes)
    write_visual_store({3: np.full(512, 0.5)}, tmp_path / "v.bin", tmp_path / "v.idx")
    store = VisualStore(tmp_path / "v.bin", tmp_path / "v.idx")
    recs = load_processed(io.StringIO(content.getvalue()), io.StringIO(classes.getvalue()), store)
    assert [r.uid for r in recs] == [1, 3]
    assert recs[0].visual is None and recs[1].visual[0] == 0.5
