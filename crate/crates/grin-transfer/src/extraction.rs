//! Derives catalog metadata and text artifacts from an unpacked package:
//! MARC bibliographic fields out of the bundled METS document, and a
//! one-page-per-line JSON text file collated from the page OCR files.

use std::io::Write;
use std::path::{Path, PathBuf};

use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use tracing::warn;

/// Bibliographic fields lifted from the MARC record. List fields hold every
/// repeat of the tag, in document order, and never contain empty strings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarcMetadata {
    pub control_number: Option<String>,
    /// Position 6 of the 008 control field.
    pub date_type: Option<String>,
    /// Positions 7-10 of the 008 control field.
    pub date_1: Option<String>,
    /// Positions 11-14 of the 008 control field.
    pub date_2: Option<String>,
    /// Positions 35-37 of the 008 control field.
    pub language: Option<String>,
    pub lccn: Option<String>,
    pub lc_call_number: Option<String>,
    pub isbns: Vec<String>,
    pub oclc_numbers: Vec<String>,
    pub title: Option<String>,
    pub subtitles: Vec<String>,
    pub personal_authors: Vec<String>,
    pub corporate_authors: Vec<String>,
    pub meeting_authors: Vec<String>,
    pub subjects: Vec<String>,
    pub genres: Vec<String>,
    pub general_notes: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum MarcError {
    #[error("malformed XML: {0}")]
    Xml(#[from] quick_xml::Error),
    #[error("document contains no MARC record")]
    NoRecord,
}

/// Extracts MARC fields from a METS (or bare MARCXML) document. Matching is
/// by local element name, so any namespace prefix works.
pub fn extract_marc(xml: &str) -> Result<MarcMetadata, MarcError> {
    let mut reader = Reader::from_str(xml);
    reader.config_mut().trim_text(false);

    let mut meta = MarcMetadata::default();
    let mut saw_record = false;

    // (tag) for the controlfield being read, (tag, code) for a subfield.
    let mut control_tag: Option<String> = None;
    let mut datafield_tag: Option<String> = None;
    let mut subfield_code: Option<String> = None;
    let mut text = String::new();
    // $a/$b of the call-number field currently open, joined on close.
    let mut call_number_parts: Vec<String> = Vec::new();

    loop {
        match reader.read_event()? {
            Event::Start(e) => {
                let name = local_name(e.name().as_ref());
                match name.as_str() {
                    "record" => saw_record = true,
                    "controlfield" => {
                        control_tag = attr(&e, b"tag");
                        text.clear();
                    }
                    "datafield" => {
                        datafield_tag = attr(&e, b"tag");
                        call_number_parts.clear();
                    }
                    "subfield" => {
                        subfield_code = attr(&e, b"code");
                        text.clear();
                    }
                    _ => {}
                }
            }
            Event::Text(t) => {
                if control_tag.is_some() || subfield_code.is_some() {
                    text.push_str(&t.decode().map_err(quick_xml::Error::Encoding)?);
                }
            }
            Event::CData(c) => {
                if control_tag.is_some() || subfield_code.is_some() {
                    text.push_str(&c.decode().map_err(quick_xml::Error::Encoding)?);
                }
            }
            Event::GeneralRef(r) => {
                if control_tag.is_some() || subfield_code.is_some() {
                    if let Some(ch) = r.resolve_char_ref()? {
                        text.push(ch);
                    } else {
                        let name = r.decode().map_err(quick_xml::Error::Encoding)?;
                        match name.as_ref() {
                            "amp" => text.push('&'),
                            "lt" => text.push('<'),
                            "gt" => text.push('>'),
                            "apos" => text.push('\''),
                            "quot" => text.push('"'),
                            // Unknown entity: keep it visible rather than lose text.
                            other => {
                                text.push('&');
                                text.push_str(other);
                                text.push(';');
                            }
                        }
                    }
                }
            }
            Event::End(e) => {
                let name = local_name(e.name().as_ref());
                match name.as_str() {
                    "controlfield" => {
                        if let Some(tag) = control_tag.take() {
                            apply_controlfield(&mut meta, &tag, &text);
                        }
                        text.clear();
                    }
                    "subfield" => {
                        if let (Some(tag), Some(code)) =
                            (datafield_tag.as_deref(), subfield_code.take())
                        {
                            apply_subfield(&mut meta, tag, &code, &text, &mut call_number_parts);
                        }
                        text.clear();
                    }
                    "datafield" => {
                        if let Some(tag) = datafield_tag.take() {
                            if (tag == "050" || tag == "090")
                                && meta.lc_call_number.is_none()
                                && !call_number_parts.is_empty()
                            {
                                meta.lc_call_number = Some(call_number_parts.join(" "));
                            }
                        }
                        call_number_parts.clear();
                    }
                    _ => {}
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }

    if !saw_record {
        return Err(MarcError::NoRecord);
    }
    Ok(meta)
}

fn apply_controlfield(meta: &mut MarcMetadata, tag: &str, raw: &str) {
    match tag {
        "001" => meta.control_number = clean(raw),
        "008" => {
            let chars: Vec<char> = raw.chars().collect();
            let slice = |from: usize, to: usize| -> Option<String> {
                if chars.len() < to {
                    return None;
                }
                clean(&chars[from..to].iter().collect::<String>())
            };
            meta.date_type = slice(6, 7);
            meta.date_1 = slice(7, 11);
            meta.date_2 = slice(11, 15);
            meta.language = slice(35, 38);
        }
        _ => {}
    }
}

fn apply_subfield(
    meta: &mut MarcMetadata,
    tag: &str,
    code: &str,
    raw: &str,
    call_number_parts: &mut Vec<String>,
) {
    let Some(value) = clean(raw) else { return };
    match (tag, code) {
        ("010", "a") => meta.lccn = meta.lccn.take().or(Some(value)),
        ("050", "a" | "b") | ("090", "a" | "b") => call_number_parts.push(value),
        ("020", "a") => meta.isbns.push(value),
        ("035", "a") => meta.oclc_numbers.push(value),
        ("245", "a") => meta.title = meta.title.take().or(Some(value)),
        ("245", "b") => meta.subtitles.push(value),
        ("100", "a") => meta.personal_authors.push(value),
        ("110", "a") => meta.corporate_authors.push(value),
        ("111", "a") => meta.meeting_authors.push(value),
        ("600" | "610" | "611" | "630" | "650" | "651", "a") => meta.subjects.push(value),
        ("655", "a") => meta.genres.push(value),
        ("500", "a") => meta.general_notes.push(value),
        _ => {}
    }
}

fn clean(raw: &str) -> Option<String> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_owned())
    }
}

fn local_name(qname: &[u8]) -> String {
    let name = match qname.iter().rposition(|&b| b == b':') {
        Some(i) => &qname[i + 1..],
        None => qname,
    };
    String::from_utf8_lossy(name).into_owned()
}

fn attr(e: &quick_xml::events::BytesStart<'_>, key: &[u8]) -> Option<String> {
    e.attributes()
        .flatten()
        .find(|a| a.key.as_ref() == key)
        .and_then(|a| {
            a.normalized_value(quick_xml::XmlVersion::Implicit1_0)
                .ok()
                .map(|v| v.into_owned())
        })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcrArtifact {
    pub path: PathBuf,
    pub pages: usize,
    pub bytes: u64,
    /// Pages that contained invalid UTF-8 and were kept with replacement
    /// characters instead of dropped.
    pub lossy_pages: usize,
    /// True when page numbering had gaps or did not start at the first
    /// index, and output order was rebuilt from the sort.
    pub reindexed: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum OcrError {
    #[error("no page text files under {0}")]
    NoPages(PathBuf),
    #[error("unreadable page file {path}: {source}")]
    PageRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("writing {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Collates per-page OCR text files into one artifact with a single JSON
/// string per line, one line per page, in numeric page order. Page files
/// are `<something><digits>.txt`; ordering uses the numeric value, so
/// `p2.txt` sorts before `p10.txt`.
pub fn collate_ocr(volume_dir: &Path, output: &Path) -> Result<OcrArtifact, OcrError> {
    let page_dir = {
        let ocr = volume_dir.join("ocr");
        if ocr.is_dir() {
            ocr
        } else {
            volume_dir.to_path_buf()
        }
    };

    let mut pages: Vec<(u64, String, PathBuf)> = Vec::new();
    let entries = std::fs::read_dir(&page_dir).map_err(|source| OcrError::PageRead {
        path: page_dir.clone(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| OcrError::PageRead {
            path: page_dir.clone(),
            source,
        })?;
        let path = entry.path();
        if !path.is_file() || path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let Some(number) = trailing_number(stem) else {
            continue;
        };
        pages.push((number, stem.to_owned(), path));
    }

    if pages.is_empty() {
        return Err(OcrError::NoPages(page_dir));
    }
    pages.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));

    let first = pages[0].0;
    let contiguous = (first == 0 || first == 1)
        && pages
            .iter()
            .enumerate()
            .all(|(i, (n, _, _))| *n == first + i as u64);
    if !contiguous {
        warn!(
            dir = %page_dir.display(),
            "page numbering has gaps or an unusual start; reindexing by sort order"
        );
    }

    let tmp = PathBuf::from(format!("{}.tmp", output.display()));
    let result = write_pages(&pages, &tmp);
    match result {
        Ok((bytes, lossy_pages)) => {
            std::fs::rename(&tmp, output).map_err(|source| OcrError::Output {
                path: output.to_path_buf(),
                source,
            })?;
            Ok(OcrArtifact {
                path: output.to_path_buf(),
                pages: pages.len(),
                bytes,
                lossy_pages,
                reindexed: !contiguous,
            })
        }
        Err(err) => {
            let _ = std::fs::remove_file(&tmp);
            Err(err)
        }
    }
}

fn write_pages(pages: &[(u64, String, PathBuf)], tmp: &Path) -> Result<(u64, usize), OcrError> {
    let file = std::fs::File::create(tmp).map_err(|source| OcrError::Output {
        path: tmp.to_path_buf(),
        source,
    })?;
    let mut writer = std::io::BufWriter::new(file);
    let mut bytes: u64 = 0;
    let mut lossy_pages = 0usize;
    for (_, _, path) in pages {
        let raw = std::fs::read(path).map_err(|source| OcrError::PageRead {
            path: path.clone(),
            source,
        })?;
        let text = match String::from_utf8(raw) {
            Ok(s) => s,
            Err(e) => {
                lossy_pages += 1;
                String::from_utf8_lossy(e.as_bytes()).into_owned()
            }
        };
        let line = serde_json::to_string(&text).expect("strings always serialize");
        bytes += line.len() as u64 + 1;
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.write_all(b"\n"))
            .map_err(|source| OcrError::Output {
                path: tmp.to_path_buf(),
                source,
            })?;
    }
    writer.flush().map_err(|source| OcrError::Output {
        path: tmp.to_path_buf(),
        source,
    })?;
    Ok((bytes, lossy_pages))
}

/// Numeric value of the last run of ASCII digits in a file stem, if any.
fn trailing_number(stem: &str) -> Option<u64> {
    let bytes = stem.as_bytes();
    let end = bytes.iter().rposition(|b| b.is_ascii_digit())? + 1;
    let mut start = end;
    while start > 0 && bytes[start - 1].is_ascii_digit() {
        start -= 1;
    }
    // Keep at most 18 digits so the parse cannot overflow.
    let digits = &stem[start.max(end.saturating_sub(18))..end];
    digits.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    const METS_SAMPLE: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<mets:mets xmlns:mets="http://www.loc.gov/METS/" xmlns:marc="http://www.loc.gov/MARC21/slim">
  <mets:dmdSec ID="DMD1">
    <mets:mdWrap MDTYPE="MARC">
      <mets:xmlData>
        <marc:record>
          <marc:controlfield tag="001">ocm12345678</marc:controlfield>
          <marc:controlfield tag="008">850101s1985    mau      b    001 0 eng  </marc:controlfield>
          <marc:datafield tag="010" ind1=" " ind2=" ">
            <marc:subfield code="a">   85001234 </marc:subfield>
          </marc:datafield>
          <marc:datafield tag="020" ind1=" " ind2=" ">
            <marc:subfield code="a">0123456789</marc:subfield>
          </marc:datafield>
          <marc:datafield tag="020" ind1=" " ind2=" ">
            <marc:subfield code="a">9780123456786</marc:subfield>
          </marc:datafield>
          <marc:datafield tag="035" ind1=" " ind2=" ">
            <marc:subfield code="a">(OCoLC)12345678</marc:subfield>
          </marc:datafield>
          <marc:datafield tag="050" ind1="0" ind2="0">
            <marc:subfield code="a">QA76.73</marc:subfield>
            <marc:subfield code="b">.R87 1985</marc:subfield>
          </marc:datafield>
          <marc:datafield tag="100" ind1="1" ind2=" ">
            <marc:subfield code="a">Author, Primary,</marc:subfield>
          </marc:datafield>
          <marc:datafield tag="245" ind1="1" ind2="0">
            <marc:subfield code="a">The principal title :</marc:subfield>
            <marc:subfield code="b">with a subtitle &amp; an ampersand /</marc:subfield>
          </marc:datafield>
          <marc:datafield tag="500" ind1=" " ind2=" ">
            <marc:subfield code="a">Includes index.</marc:subfield>
          </marc:datafield>
          <marc:datafield tag="650" ind1=" " ind2="0">
            <marc:subfield code="a">Computer programming.</marc:subfield>
          </marc:datafield>
          <marc:datafield tag="651" ind1=" " ind2="0">
            <marc:subfield code="a">Massachusetts.</marc:subfield>
          </marc:datafield>
          <marc:datafield tag="655" ind1=" " ind2="7">
            <marc:subfield code="a">Manuals.</marc:subfield>
          </marc:datafield>
        </marc:record>
      </mets:xmlData>
    </mets:mdWrap>
  </mets:dmdSec>
</mets:mets>"#;

    #[test]
    fn extracts_fields_from_a_mets_document() {
        let meta = extract_marc(METS_SAMPLE).unwrap();
        assert_eq!(meta.control_number.as_deref(), Some("ocm12345678"));
        assert_eq!(meta.date_type.as_deref(), Some("s"));
        assert_eq!(meta.date_1.as_deref(), Some("1985"));
        assert_eq!(meta.date_2, None);
        assert_eq!(meta.language.as_deref(), Some("eng"));
        assert_eq!(meta.lccn.as_deref(), Some("85001234"));
        assert_eq!(meta.lc_call_number.as_deref(), Some("QA76.73 .R87 1985"));
        assert_eq!(meta.isbns, vec!["0123456789", "9780123456786"]);
        assert_eq!(meta.oclc_numbers, vec!["(OCoLC)12345678"]);
        assert_eq!(meta.title.as_deref(), Some("The principal title :"));
        assert_eq!(meta.subtitles, vec!["with a subtitle & an ampersand /"]);
        assert_eq!(meta.personal_authors, vec!["Author, Primary,"]);
        assert!(meta.corporate_authors.is_empty());
        assert_eq!(meta.subjects, vec!["Computer programming.", "Massachusetts."]);
        assert_eq!(meta.genres, vec!["Manuals."]);
        assert_eq!(meta.general_notes, vec!["Includes index."]);
    }

    #[test]
    fn short_008_yields_partial_dates() {
        let xml = r#"<record><controlfield tag="008">850101s1985</controlfield></record>"#;
        let meta = extract_marc(xml).unwrap();
        assert_eq!(meta.date_type.as_deref(), Some("s"));
        assert_eq!(meta.date_1.as_deref(), Some("1985"));
        assert_eq!(meta.date_2, None);
        assert_eq!(meta.language, None);
    }

    #[test]
    fn missing_record_and_bad_xml_are_errors() {
        assert!(matches!(
            extract_marc("<mets><dmdSec/></mets>"),
            Err(MarcError::NoRecord)
        ));
        assert!(matches!(
            extract_marc("<record><unclosed"),
            Err(MarcError::Xml(_))
        ));
    }

    #[test]
    fn absent_fields_stay_empty() {
        let meta = extract_marc("<record></record>").unwrap();
        assert_eq!(meta, MarcMetadata::default());
    }

    fn write_page(dir: &Path, name: &str, content: &[u8]) {
        std::fs::write(dir.join(name), content).unwrap();
    }

    #[test]
    fn collates_pages_in_numeric_order() {
        let tmp = tempfile::tempdir().unwrap();
        let ocr = tmp.path().join("ocr");
        std::fs::create_dir(&ocr).unwrap();
        write_page(&ocr, "p10.txt", b"tenth page");
        write_page(&ocr, "p2.txt", b"second page");
        write_page(&ocr, "p1.txt", b"first \"quoted\" page\nwith newline");
        write_page(&ocr, "notes.md", b"not a page");

        let out = tmp.path().join("text.jsonl");
        let artifact = collate_ocr(tmp.path(), &out).unwrap();
        assert_eq!(artifact.pages, 3);
        assert_eq!(artifact.lossy_pages, 0);
        assert!(artifact.reindexed, "1,2,10 has a gap");

        let body = std::fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            serde_json::from_str::<String>(lines[0]).unwrap(),
            "first \"quoted\" page\nwith newline"
        );
        assert_eq!(serde_json::from_str::<String>(lines[1]).unwrap(), "second page");
        assert_eq!(serde_json::from_str::<String>(lines[2]).unwrap(), "tenth page");
    }

    #[test]
    fn empty_page_becomes_empty_json_string() {
        let tmp = tempfile::tempdir().unwrap();
        write_page(tmp.path(), "00000.txt", b"");
        write_page(tmp.path(), "00001.txt", b"words");
        let out = tmp.path().join("text.jsonl");
        let artifact = collate_ocr(tmp.path(), &out).unwrap();
        assert_eq!(artifact.pages, 2);
        assert!(!artifact.reindexed);
        let body = std::fs::read_to_string(&out).unwrap();
        assert_eq!(body, "\"\"\n\"words\"\n");
    }

    #[test]
    fn invalid_utf8_is_replaced_and_counted() {
        let tmp = tempfile::tempdir().unwrap();
        write_page(tmp.path(), "00000.txt", b"bad \xFF byte");
        let out = tmp.path().join("text.jsonl");
        let artifact = collate_ocr(tmp.path(), &out).unwrap();
        assert_eq!(artifact.lossy_pages, 1);
        let body = std::fs::read_to_string(&out).unwrap();
        let page: String = serde_json::from_str(body.trim()).unwrap();
        assert_eq!(page, "bad \u{FFFD} byte");
    }

    #[test]
    fn no_pages_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("text.jsonl");
        assert!(matches!(
            collate_ocr(tmp.path(), &out),
            Err(OcrError::NoPages(_))
        ));
        assert!(!out.exists());
    }

    #[test]
    fn trailing_number_picks_last_digit_run() {
        assert_eq!(trailing_number("00000042"), Some(42));
        assert_eq!(trailing_number("p2"), Some(2));
        assert_eq!(trailing_number("v2_page_0010"), Some(10));
        assert_eq!(trailing_number("cover"), None);
        assert_eq!(trailing_number(&"9".repeat(40)), Some(999_999_999_999_999_999));
    }
}
