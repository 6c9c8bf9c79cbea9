//! Trial lists: one `<label 0|1> <enrol_id> <test_id>` per line.

use std::fmt::Write as _;
use std::path::Path;

use crate::container::write_atomic;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enrol: String,
    pub test: String,
    pub target: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Self {
        Self { trials }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_target(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    /// Parses trial text; blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [label, enrol, test] = fields[..] else {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            };
            let target = match label {
                "1" => true,
                "0" => false,
                other => return Err(err(format!("label must be 0 or 1, found {other:?}"))),
            };
            trials.push(Trial {
                enrol: enrol.to_string(),
                test: test.to_string(),
                target,
            });
        }
        Ok(Self { trials })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            let _ = writeln!(s, "{} {} {}", u8::from(t.target), t.enrol, t.test);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let p = Path::new("t.txt");
        let l = TrialList::parse("1 a b\n# note\n\n0 a c\n", p).unwrap();
        assert_eq!(l.len(), 2);
        assert!(l.trials[0].target && !l.trials[1].target);
        assert_eq!(TrialList::parse(&l.to_text(), p).unwrap(), l);
    }

    #[test]
    fn reports_line_numbers() {
        let p = Path::new("t.txt");
        match TrialList::parse("1 a b\n2 a c\n", p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(TrialList::parse("1 a\n", p), Err(Error::Parse { line: 1, .. })));
    }
}
