//! Flat `key = value` text with `[section]` headers.
//!
//! Run configurations, run records and manifests all use this one format: no
//! nesting, no quoting, one entry per line, `#` comments.  Repeated keys are
//! allowed and keep their order (loss curves are many `curve = ...` lines).
//! Rendering is deterministic — parse → render → parse is the identity on
//! content — which is what makes records diffable and reports reproducible.

use std::error::Error;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TextError {
    /// Line that is neither a header, an entry, a comment, nor blank.
    BadLine { line: usize, content: String },
    /// `[section` without the closing bracket, or an empty name.
    BadHeader { line: usize, content: String },
    /// An entry before any section header.
    EntryOutsideSection { line: usize },
    /// Required section absent.
    MissingSection(String),
    /// Required key absent from a section.
    MissingKey { section: String, key: String },
    /// Value present but not parseable as the requested type.
    BadValue {
        section: String,
        key: String,
        value: String,
        expected: &'static str,
    },
}

impl fmt::Display for TextError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TextError::BadLine { line, content } => {
                write!(f, "line {line}: cannot parse `{content}`")
            }
            TextError::BadHeader { line, content } => {
                write!(f, "line {line}: malformed section header `{content}`")
            }
            TextError::EntryOutsideSection { line } => {
                write!(f, "line {line}: entry before any [section] header")
            }
            TextError::MissingSection(name) => write!(f, "missing section [{name}]"),
            TextError::MissingKey { section, key } => {
                write!(f, "missing key `{key}` in section [{section}]")
            }
            TextError::BadValue { section, key, value, expected } => write!(
                f,
                "[{section}] {key} = `{value}` is not a valid {expected}"
            ),
        }
    }
}

impl Error for TextError {}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KvSection {
    pub name: String,
    entries: Vec<(String, String)>,
}

impl KvSection {
    pub fn new(name: &str) -> Self {
        KvSection {
            name: name.to_string(),
            entries: Vec::new(),
        }
    }

    /// Append an entry (repeated keys stack up).
    pub fn push(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// First value under `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// All values under `key`, in order.
    pub fn get_all(&self, key: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn require(&self, key: &str) -> Result<&str, TextError> {
        self.get(key).ok_or_else(|| TextError::MissingKey {
            section: self.name.clone(),
            key: key.to_string(),
        })
    }

    /// Required key parsed as `T`.
    pub fn field<T: FromStr>(&self, key: &str, expected: &'static str) -> Result<T, TextError> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| TextError::BadValue {
            section: self.name.clone(),
            key: key.to_string(),
            value: raw.to_string(),
            expected,
        })
    }

    /// Optional key parsed as `T`; absent key yields `default`.
    pub fn field_or<T: FromStr>(
        &self,
        key: &str,
        default: T,
        expected: &'static str,
    ) -> Result<T, TextError> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| TextError::BadValue {
                section: self.name.clone(),
                key: key.to_string(),
                value: raw.to_string(),
                expected,
            }),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KvDoc {
    pub sections: Vec<KvSection>,
}

impl KvDoc {
    pub fn new() -> Self {
        KvDoc::default()
    }

    pub fn parse(text: &str) -> Result<Self, TextError> {
        let mut doc = KvDoc::new();
        for (ix, raw) in text.lines().enumerate() {
            let line = ix + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('[') {
                let Some(name) = rest.strip_suffix(']') else {
                    return Err(TextError::BadHeader {
                        line,
                        content: trimmed.to_string(),
                    });
                };
                let name = name.trim();
                if name.is_empty() {
                    return Err(TextError::BadHeader {
                        line,
                        content: trimmed.to_string(),
                    });
                }
                doc.sections.push(KvSection::new(name));
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(TextError::BadLine {
                    line,
                    content: trimmed.to_string(),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(TextError::BadLine {
                    line,
                    content: trimmed.to_string(),
                });
            }
            let Some(section) = doc.sections.last_mut() else {
                return Err(TextError::EntryOutsideSection { line });
            };
            section.push(key, value.trim());
        }
        Ok(doc)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, section) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push('[');
            out.push_str(&section.name);
            out.push_str("]\n");
            for (k, v) in section.entries() {
                out.push_str(k);
                out.push_str(" = ");
                out.push_str(v);
                out.push('\n');
            }
        }
        out
    }

    /// First section with this name.
    pub fn section(&self, name: &str) -> Option<&KvSection> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// All sections with this name (manifests hold many `[run]` blocks).
    pub fn sections_named(&self, name: &str) -> Vec<&KvSection> {
        self.sections.iter().filter(|s| s.name == name).collect()
    }

    pub fn require_section(&self, name: &str) -> Result<&KvSection, TextError> {
        self.section(name)
            .ok_or_else(|| TextError::MissingSection(name.to_string()))
    }

    pub fn add_section(&mut self, name: &str) -> &mut KvSection {
        self.sections.push(KvSection::new(name));
        self.sections.last_mut().expect("just pushed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_roundtrip_preserves_content() {
        let text = "[run]\ntask = copy\nseed = 3\ncurve = 1,0.5\ncurve = 2,0.25\n\n[meta]\nnote = hello world\n";
        let doc = KvDoc::parse(text).unwrap();
        assert_eq!(doc.render(), text);
        let again = KvDoc::parse(&doc.render()).unwrap();
        assert_eq!(doc, again);
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let doc = KvDoc::parse("# header\n\n[a]\n# note\nx = 1\n").unwrap();
        assert_eq!(doc.section("a").unwrap().get("x"), Some("1"));
    }

    #[test]
    fn repeated_keys_keep_order() {
        let doc = KvDoc::parse("[s]\nv = 1\nv = 2\nv = 3\n").unwrap();
        assert_eq!(doc.section("s").unwrap().get_all("v"), vec!["1", "2", "3"]);
    }

    #[test]
    fn entry_before_header_is_rejected() {
        assert!(matches!(
            KvDoc::parse("x = 1\n").unwrap_err(),
            TextError::EntryOutsideSection { line: 1 }
        ));
    }

    #[test]
    fn unclosed_header_is_rejected() {
        assert!(matches!(
            KvDoc::parse("[oops\n").unwrap_err(),
            TextError::BadHeader { line: 1, .. }
        ));
    }

    #[test]
    fn typed_field_errors_name_the_offender() {
        let doc = KvDoc::parse("[s]\nn = abc\n").unwrap();
        let err = doc
            .section("s")
            .unwrap()
            .field::<usize>("n", "integer")
            .unwrap_err();
        assert_eq!(
            err.to_string(),
            "[s] n = `abc` is not a valid integer"
        );
    }

    #[test]
    fn values_may_contain_equals_signs() {
        let doc = KvDoc::parse("[s]\nexpr = a=b\n").unwrap();
        assert_eq!(doc.section("s").unwrap().get("expr"), Some("a=b"));
    }
}
