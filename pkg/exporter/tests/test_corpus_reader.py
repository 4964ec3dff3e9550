"""Corpus row parsing and representation composition."""

import pytest

from embed_exporter import CaseRow, ExportError, read_cases
from samplecorpus import write_corpus


class TestReadCases:
    def test_reads_rows_in_order(self, tmp_path):
        path = write_corpus(tmp_path / "c.jsonl", [
            {"id": "a", "text": "one", "label": "ad_hominem"},
            {"id": "b", "text": "two", "label": None},
        ])
        rows = read_cases(path)
        assert [r.id for r in rows] == ["a", "b"]
        assert rows[0].label == "ad_hominem"
        assert rows[1].label is None

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text('{"id": "a", "text": "one"}\n\n'
                        '{"id": "b", "text": "two"}\n')
        assert len(read_cases(path)) == 2

    def test_missing_id_falls_back_to_row_number(self, tmp_path):
        path = write_corpus(tmp_path / "c.jsonl", [{"text": "one"}])
        assert read_cases(path)[0].id == "train-0"

    def test_enrichments_are_kept(self, tmp_path):
        path = write_corpus(tmp_path / "c.jsonl", [
            {"id": "a", "text": "one",
             "enrichments": {"goals": "persuade"}}])
        assert read_cases(path)[0].enrichments == {"goals": "persuade"}

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ExportError, match="no such corpus"):
            read_cases(tmp_path / "nope.jsonl")

    def test_non_jsonl_suffix_rejected(self, tmp_path):
        path = tmp_path / "cases.csv"
        path.write_text("text,label\n")
        with pytest.raises(ExportError, match="ingest"):
            read_cases(path)

    def test_bad_json_rejected(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text("{not json}\n")
        with pytest.raises(ExportError, match="row 0"):
            read_cases(path)

    def test_empty_text_rejected(self, tmp_path):
        path = write_corpus(tmp_path / "c.jsonl", [{"id": "a", "text": "  "}])
        with pytest.raises(ExportError, match="empty text"):
            read_cases(path)

    def test_unknown_enrichment_kind_rejected(self, tmp_path):
        path = write_corpus(tmp_path / "c.jsonl", [
            {"id": "a", "text": "one", "enrichments": {"summary": "x"}}])
        with pytest.raises(ExportError, match="unknown enrichment"):
            read_cases(path)

    def test_duplicate_ids_rejected(self, tmp_path):
        path = write_corpus(tmp_path / "c.jsonl", [
            {"id": "a", "text": "one"}, {"id": "a", "text": "two"}])
        with pytest.raises(ExportError, match="duplicate case id"):
            read_cases(path)


class TestRepresentation:
    def test_text_kind_is_the_raw_text(self):
        row = CaseRow(id="a", text="the claim")
        assert row.representation("text") == "the claim"

    def test_enriched_kind_appends_after_a_space(self):
        row = CaseRow(id="a", text="the claim",
                      enrichments={"goals": "persuade"})
        assert row.representation("goals") == "the claim persuade"

    def test_missing_kind_returns_none(self):
        row = CaseRow(id="a", text="the claim")
        assert row.representation("goals") is None
