use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One user's chronological interactions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserHistory {
    pub user: String,
    pub items: Vec<String>,
}

/// Users in file order, each with a non-empty chronological item sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub users: Vec<UserHistory>,
}

impl InteractionLog {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn interaction_count(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    pub fn distinct_items(&self) -> usize {
        self.users.iter().flat_map(|u| &u.items).collect::<HashSet<_>>().len()
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut users = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line.map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: UserHistory = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("expected {{\"user\": .., \"items\": [..]}}: {e}"),
            })?;
            if record.items.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("user {} has no items", record.user),
                });
            }
            if !seen.insert(record.user.clone()) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate user id {}", record.user),
                });
            }
            users.push(record);
        }
        if users.is_empty() {
            return Err(Error::Data("no users".into()));
        }
        Ok(InteractionLog { users })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for u in &self.users {
            let line = serde_json::to_string(u).expect("string fields serialize");
            writeln!(w, "{line}").map_err(|e| Error::io("<writer>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a JSON-lines interaction file.
pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    InteractionLog::parse(BufReader::new(file))
}

/// Drops items seen fewer than `k_item` times and users with fewer than
/// `k_user` interactions, repeating until neither removes anything.
pub fn filter_min_interactions(log: &InteractionLog, k_user: usize, k_item: usize) -> Result<InteractionLog> {
    if k_user == 0 || k_item == 0 {
        return Err(Error::Config("interaction thresholds must be >= 1".into()));
    }
    let mut users = log.users.clone();
    loop {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for u in &users {
            for item in &u.items {
                *counts.entry(item.as_str()).or_default() += 1;
            }
        }
        let rare: HashSet<String> = counts
            .into_iter()
            .filter(|&(_, c)| c < k_item)
            .map(|(i, _)| i.to_string())
            .collect();
        let before = users.len();
        for u in &mut users {
            u.items.retain(|i| !rare.contains(i));
        }
        users.retain(|u| u.items.len() >= k_user);
        if rare.is_empty() && users.len() == before {
            break;
        }
    }
    if users.is_empty() {
        return Err(Error::Data(format!(
            "no users left after filtering (k_user = {k_user}, k_item = {k_item})"
        )));
    }
    Ok(InteractionLog { users })
}

/// The most recent `max_len` items.
pub fn truncate_recent<T: Clone>(seq: &[T], max_len: usize) -> Vec<T> {
    seq[seq.len().saturating_sub(max_len)..].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(rows: &[(&str, &[&str])]) -> InteractionLog {
        InteractionLog {
            users: rows
                .iter()
                .map(|(u, items)| UserHistory {
                    user: u.to_string(),
                    items: items.iter().map(|s| s.to_string()).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn parses_two_users_in_order() {
        let text = "{\"user\": \"a\", \"items\": [\"x\", \"y\"]}\n\n{\"user\": \"b\", \"items\": [\"z\"]}\n";
        let l = InteractionLog::parse(text.as_bytes()).unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(l.users[0].items, vec!["x", "y"]);
        let mut out = Vec::new();
        l.write(&mut out).unwrap();
        assert_eq!(InteractionLog::parse(out.as_slice()).unwrap(), l);
    }

    #[test]
    fn parse_errors_cite_the_problem() {
        let err = InteractionLog::parse("".as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "no users");
        let text = "{\"user\": \"a\", \"items\": [\"x\"]}\nuser,b,items\n";
        match InteractionLog::parse(text.as_bytes()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        let dup = "{\"user\": \"a\", \"items\": [\"x\"]}\n{\"user\": \"a\", \"items\": [\"y\"]}\n";
        assert!(InteractionLog::parse(dup.as_bytes())
            .unwrap_err()
            .to_string()
            .contains("duplicate user"));
        let extra = "{\"user\": \"a\", \"items\": [\"x\"], \"rating\": 5}\n";
        assert!(InteractionLog::parse(extra.as_bytes()).is_err());
    }

    #[test]
    fn filter_keeps_dense_logs() {
        let l = log(&[("a", &["x", "y", "x", "y"]), ("b", &["y", "x", "x", "y"])]);
        assert_eq!(filter_min_interactions(&l, 2, 2).unwrap(), l);
    }

    #[test]
    fn filter_cascades() {
        // dropping user c leaves item z with one occurrence, which then
        // drops below the item threshold
        let l = log(&[
            ("a", &["x", "y", "x", "y", "z"]),
            ("b", &["y", "x", "x", "y", "x"]),
            ("c", &["z", "x"]),
        ]);
        let f = filter_min_interactions(&l, 5, 2).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.users[0].user, "b");
        assert!(filter_min_interactions(&l, 50, 1).is_err());
    }

    #[test]
    fn truncation_keeps_the_tail() {
        let s: Vec<u32> = (0..60).collect();
        assert_eq!(truncate_recent(&s[..10], 50), s[..10].to_vec());
        assert_eq!(truncate_recent(&s, 50), s[10..].to_vec());
        assert_eq!(truncate_recent(&s[..50], 50).len(), 50);
    }
}
