//! Tab-separated report tables with a comment header.

use crate::error::{Error, Result};

pub const REPORT_HEADER: &str = "# maskpred report v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub config_hash: String,
    pub comments: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn check_cell(s: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::Format(format!("report cell {s:?} contains a tab or newline")));
    }
    Ok(())
}

impl Report {
    pub fn new(config_hash: &str, columns: &[&str]) -> Self {
        Self { config_hash: config_hash.to_string(), columns: columns.iter().map(|c| c.to_string()).collect(), ..Default::default() }
    }

    pub fn push_row(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Format(format!("row has {} cells, table has {} columns", row.len(), self.columns.len())));
        }
        row.iter().try_for_each(|c| check_cell(c))?;
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_tsv(&self) -> Result<String> {
        let mut s = format!("{REPORT_HEADER}\n# config_hash={}\n", self.config_hash);
        for c in &self.comments {
            if c.contains(['\n', '\r']) {
                return Err(Error::Format("report comment contains a newline".into()));
            }
            s.push_str(&format!("# {c}\n"));
        }
        self.columns.iter().try_for_each(|c| check_cell(c))?;
        s.push_str(&self.columns.join("\t"));
        s.push('\n');
        for r in &self.rows {
            r.iter().try_for_each(|c| check_cell(c))?;
            s.push_str(&r.join("\t"));
            s.push('\n');
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.split_terminator('\n');
        let bad = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        if lines.next() != Some(REPORT_HEADER) {
            return Err(bad(1, "missing or unsupported report header"));
        }
        let config_hash = lines
            .next()
            .and_then(|l| l.strip_prefix("# config_hash="))
            .ok_or_else(|| bad(2, "missing config_hash line"))?
            .to_string();
        let mut comments = Vec::new();
        let mut columns = None;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let n = i + 3;
            match (&columns, line.strip_prefix("# ")) {
                (None, Some(c)) => comments.push(c.to_string()),
                (None, None) => columns = Some(line.split('\t').map(str::to_string).collect::<Vec<_>>()),
                (Some(cols), _) => {
                    let row: Vec<String> = line.split('\t').map(str::to_string).collect();
                    if row.len() != cols.len() {
                        return Err(bad(n, "row width differs from header"));
                    }
                    rows.push(row);
                }
            }
        }
        let columns = columns.ok_or_else(|| bad(3, "missing column header"))?;
        if !text.ends_with('\n') {
            return Err(bad(0, "report must end with a newline"));
        }
        Ok(Self { config_hash, comments, columns, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_exact() {
        let mut r = Report::new("abc123", &["layer", "phone", "speaker"]);
        r.comments.push("weights per task".into());
        r.push_row(vec!["0".into(), 0.1f64.to_string(), (1.0f64 / 3.0).to_string()]).unwrap();
        r.push_row(vec!["1".into(), "".into(), "x".into()]).unwrap();
        let text = r.to_tsv().unwrap();
        let back = Report::parse(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_tsv().unwrap(), text);
        let v: f64 = back.rows[0][2].parse().unwrap();
        assert_eq!(v.to_bits(), (1.0f64 / 3.0).to_bits());
    }

    #[test]
    fn rejects_bad_input() {
        let mut r = Report::new("h", &["a", "b"]);
        assert!(r.push_row(vec!["1".into()]).is_err());
        assert!(r.push_row(vec!["1\t2".into(), "3".into()]).is_err());
        assert!(Report::parse("# maskpred report v2\n# config_hash=h\na\n").is_err());
        assert!(Report::parse("# maskpred report v1\n# config_hash=h\na\tb\n1\n").is_err());
        assert!(Report::parse("# maskpred report v1\n# config_hash=h\n").is_err());
    }
}
